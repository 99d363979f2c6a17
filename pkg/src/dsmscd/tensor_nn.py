"""Tensor primitives, loss, optimizer and initialization used by the networks.

Tensors are ``torch.Tensor`` objects laid out (batch, channel, row, col);
reverse-mode gradients come from torch autograd.  Everything that is a
modelling choice (loss, Adam with decoupled decay, init, dropout masks,
finite-difference checking, checkpoint format) lives here explicitly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PROB_EPS = 1e-7


class NumericalError(RuntimeError):
    """Non-finite values appeared in a gradient or loss."""


# ------------------------------------------------------------------ primitives


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-1 convolution with zero 'same' padding; kernel sizes 1, 3 or 5."""
    k = weight.shape[-1]
    if k not in (1, 3, 5) or weight.shape[-2] != k:
        raise ValueError(f"kernel must be 1x1, 3x3 or 5x5, got {tuple(weight.shape[-2:])}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    return F.conv2d(x, weight, bias, padding=k // 2)


def conv_transpose2d(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 2
) -> torch.Tensor:
    """Transposed convolution; weight is (in, out, stride, stride) so the output is exactly stride x larger."""
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[0]}")
    return F.conv_transpose2d(x, weight, bias, stride=stride)


def max_pool(x: torch.Tensor, window: str = "2x2") -> torch.Tensor:
    """``'2x2'``: stride-2 subsampling (even dims required); ``'3x3'``: stride 1, same size."""
    if window == "2x2":
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"2x2 pooling needs even spatial dims, got {tuple(x.shape[-2:])}")
        return F.max_pool2d(x, 2, 2)
    if window == "3x3":
        # the channels-last CPU kernel is several times faster at stride 1
        x = x.contiguous(memory_format=torch.channels_last)
        return F.max_pool2d(x, 3, 1, padding=1)
    raise ValueError(f"unknown pooling window {window!r}")


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ValueError("global_avg_pool expects a 4-D tensor")
    return x.mean(dim=(2, 3), keepdim=True)


def abs_diff(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.abs(a - b)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def dropout(
    x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Inverted dropout: kept values are scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


# ------------------------------------------------------------------------ loss


@dataclass(frozen=True)
class LossConfig:
    w_p: float = 1.0

    def __post_init__(self):
        if not self.w_p > 0:
            raise ValueError(f"w_p must be positive, got {self.w_p}")


def positive_weight(labels: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Reciprocal of the changed:unchanged proportion among valid pixels."""
    labels = np.asarray(labels)
    if valid is not None:
        labels = labels[np.asarray(valid, dtype=bool)]
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        return 1.0
    return neg / pos


def wbce_loss(
    y: torch.Tensor, target: torch.Tensor, cfg: LossConfig, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean of -[w_p * t * log y + (1 - t) * log(1 - y)] over valid entries."""
    if y.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(target.shape)}")
    y = y.clamp(PROB_EPS, 1.0 - PROB_EPS)
    target = target.to(y.dtype)
    per = -(cfg.w_p * target * torch.log(y) + (1.0 - target) * torch.log1p(-y))
    if mask is None:
        return per.mean()
    mask = mask.to(torch.bool)
    if mask.shape != y.shape:
        raise ValueError("mask shape must match predictions")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("wbce_loss: no valid pixels")
    return per[mask].sum() / n


# ------------------------------------------------------------------- parameters


@dataclass
class Parameter:
    name: str
    tensor: nn.Parameter
    weight_decay_enabled: bool = True


def parameters_of(net: nn.Module) -> list[Parameter]:
    """Named parameters of ``net`` with decay enabled on weights, not biases."""
    return [
        Parameter(name, p, weight_decay_enabled=not name.endswith("bias"))
        for name, p in net.named_parameters()
    ]


def he_normal_init(shape: Sequence[int], fan_in: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    std = math.sqrt(2.0 / fan_in)
    return torch.randn(tuple(shape), generator=generator, dtype=dtype) * std


def init_network(net: nn.Module, seed: int) -> None:
    """He-normal weights and zero biases, drawn in parameter-name order."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            owner = net.get_submodule(name.rpartition(".")[0])
            fan_in = getattr(owner, "fan_in", None) or int(np.prod(p.shape[1:]))
            p.copy_(he_normal_init(p.shape, fan_in, g, dtype=p.dtype))


# ------------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


@torch.no_grad()
def adam_step(params: Sequence[Parameter], grads: Sequence[torch.Tensor | None], state: AdamState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    for p, g in zip(params, grads):
        if g is not None and not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {p.name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g in zip(params, grads):
        w = p.tensor
        if g is None:
            g = torch.zeros_like(w)
        if p.name not in state.m:
            state.m[p.name] = torch.zeros_like(w)
            state.v[p.name] = torch.zeros_like(w)
        m, v = state.m[p.name], state.v[p.name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if p.weight_decay_enabled and state.weight_decay:
            w.mul_(1.0 - state.lr * state.weight_decay)
        w.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class Adam:
    """Convenience wrapper binding a parameter list to an AdamState."""

    def __init__(self, params: Iterable[Parameter], **kw):
        self.params = list(params)
        self.state = AdamState(**kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.tensor.grad for p in self.params], self.state)


# ------------------------------------------------------------------ grad check


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: dict[str, float]
    tolerance: float
    probes: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance

    def failures(self) -> list[str]:
        return [k for k, e in self.per_input.items() if not e < self.tolerance]


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor] | dict[str, torch.Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` against central finite differences.

    ``fn`` may return any tensor; it is reduced with a fixed random weighting
    so the whole Jacobian participates.  Inputs must be float64 leaf tensors
    with ``requires_grad``.  For each input the error is
    ``max|analytic - numeric| / max(max|numeric|, 1e-12)``.  With
    ``max_probes`` only that many randomly chosen entries per input are
    probed numerically.
    """
    if isinstance(inputs, dict):
        names, tensors = list(inputs.keys()), list(inputs.values())
    else:
        names, tensors = [f"input{i}" for i in range(len(inputs))], list(inputs)
    for t in tensors:
        if t.dtype != torch.float64:
            raise TypeError("grad_check requires float64 inputs")
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        probe_out = fn(*tensors)
    weights = torch.from_numpy(rng.standard_normal(tuple(probe_out.shape)))

    def scalar() -> torch.Tensor:
        return (fn(*tensors) * weights).sum()

    for t in tensors:
        t.grad = None
    scalar().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]

    per_input = {}
    probes = 0
    with torch.no_grad():
        for name, t, a in zip(names, tensors, analytic):
            flat = t.view(-1)
            idx = np.arange(flat.numel())
            if max_probes is not None and idx.size > max_probes:
                idx = rng.choice(idx, size=max_probes, replace=False)
            num = np.empty(idx.size)
            for n, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = scalar().item()
                flat[i] = orig - h
                fm = scalar().item()
                flat[i] = orig
                num[n] = (fp - fm) / (2 * h)
            probes += idx.size
            an = a.view(-1).numpy()[idx]
            scale = max(float(np.abs(num).max(initial=0.0)), 1e-12)
            per_input[name] = float(np.abs(an - num).max(initial=0.0) / scale)
    return GradCheckReport(max(per_input.values(), default=0.0), per_input, tolerance, probes)


# ------------------------------------------------------------------ checkpoint

CKPT_MAGIC = "DSMSCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, net: nn.Module) -> None:
    """Header, manifest of (name, shape, byte offset), then float32 LE payloads."""
    entries = []
    blobs = []
    offset = 0
    for name, p in net.named_parameters():
        blob = np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4").tobytes()
        shape = "x".join(str(s) for s in p.shape) or "scalar"
        entries.append(f"{name} {shape} {offset}")
        blobs.append(blob)
        offset += len(blob)
    head = [f"{CKPT_MAGIC} {CKPT_VERSION}", f"params {len(entries)}", *entries, f"payload {offset}", ""]
    Path(path).write_bytes("\n".join(head).encode("ascii") + b"".join(blobs))


def load_checkpoint(path: str | os.PathLike, net: nn.Module) -> None:
    """Load parameters into ``net``, validating names and shapes against it."""
    data = Path(path).read_bytes()
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        lines.append(line)
        if line.startswith("payload "):
            break
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != CKPT_MAGIC or int(magic[1]) != CKPT_VERSION:
        raise CheckpointError(f"{path}: not a DSMSCKPT v{CKPT_VERSION} file")
    n = int(lines[1].split()[1])
    manifest = {}
    for line in lines[2 : 2 + n]:
        name, shape, off = line.split()
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        manifest[name] = (dims, int(off))
    size = int(lines[2 + n].split()[1])
    payload = data[pos:]
    if len(payload) != size:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {size}")
    own = dict(net.named_parameters())
    if set(own) != set(manifest):
        missing = sorted(set(own) - set(manifest))
        extra = sorted(set(manifest) - set(own))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    with torch.no_grad():
        for name, p in own.items():
            dims, off = manifest[name]
            if tuple(p.shape) != dims:
                raise CheckpointError(f"{path}: {name} has shape {dims}, network expects {tuple(p.shape)}")
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(dims)
            p.copy_(torch.from_numpy(arr.astype(np.float32)).to(p.dtype))


def checkpoint_header(path: str | os.PathLike) -> str:
    with open(path, "rb") as fh:
        return fh.readline().decode("ascii").strip()
