"""MFCU block and the two siamese change-detection networks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import kvdoc
from .tensor_nn import (
    abs_diff,
    conv2d,
    conv_transpose2d,
    dropout,
    global_avg_pool,
    init_network,
    max_pool,
    relu,
    sigmoid,
)


class Conv(nn.Module):
    """Same-padded k x k convolution with optional ReLU."""

    def __init__(self, cin: int, cout: int, k: int = 3, act: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.fan_in = cin * k * k
        self.act = act

    def forward(self, x):
        y = conv2d(x, self.weight, self.bias)
        return relu(y) if self.act else y


class UpConv(nn.Module):
    """2x2 stride-2 transposed convolution followed by ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cin, cout, 2, 2))
        self.bias = nn.Parameter(torch.zeros(cout))
        # each output pixel sees exactly one tap per input channel
        self.fan_in = cin

    def forward(self, x):
        return relu(conv_transpose2d(x, self.weight, self.bias, stride=2))


# -------------------------------------------------------------------------- MFCU


@dataclass(frozen=True)
class MfcuConfig:
    in_channels: int
    branch_channels: tuple[int, int, int, int]  # (1x1, 3x3, 5x5, pool)
    bottleneck_channels: tuple[int, int]  # reductions before 3x3 and 5x5

    def __post_init__(self):
        counts = (self.in_channels, *self.branch_channels, *self.bottleneck_channels)
        if len(self.branch_channels) != 4 or len(self.bottleneck_channels) != 2:
            raise ValueError("MFCU needs 4 branch widths and 2 bottleneck widths")
        if min(counts) < 1:
            raise ValueError(f"MFCU channel counts must be >= 1, got {counts}")

    @property
    def out_channels(self) -> int:
        return sum(self.branch_channels)

    @classmethod
    def default(cls, in_channels: int, width: int) -> MfcuConfig:
        """Split ``width`` as 1/4, 1/2, 1/8, 1/8 with bottlenecks at half the branch width."""
        c1, c5 = max(1, width // 4), max(1, width // 8)
        cp = max(1, width // 8)
        c3 = max(1, width - c1 - c5 - cp)
        return cls(in_channels, (c1, c3, c5, cp), (max(1, c3 // 2), max(1, c5 // 2)))


class MFCU(nn.Module):
    """Four parallel paths (1x1; 1x1->3x3; 1x1->5x5; 3x3 max-pool->1x1) concatenated on channels."""

    def __init__(self, cfg: MfcuConfig):
        super().__init__()
        self.cfg = cfg
        c1, c3, c5, cp = cfg.branch_channels
        b3, b5 = cfg.bottleneck_channels
        cin = cfg.in_channels
        self.b1 = Conv(cin, c1, 1)
        self.b3_reduce = Conv(cin, b3, 1)
        self.b3 = Conv(b3, c3, 3)
        self.b5_reduce = Conv(cin, b5, 1)
        self.b5 = Conv(b5, c5, 5)
        self.bp = Conv(cin, cp, 1)

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"MFCU expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        return torch.cat(
            [
                self.b1(x),
                self.b3(self.b3_reduce(x)),
                self.b5(self.b5_reduce(x)),
                self.bp(max_pool(x, "3x3")),
            ],
            dim=1,
        )


# ----------------------------------------------------------------------- DSMS-CN


@dataclass(frozen=True)
class DsmscnConfig:
    bands: int = 4
    patch_size: int = 13
    conv_channels: tuple[int, int] = (16, 32)
    mfcu_channels: tuple[int, int] = (64, 128)
    fusion_channels: int = 128
    judge_channels: int = 128
    diff_levels: str = "all"  # "all" four depths, or "mfcu" for the two MFCU depths only
    dropout: float = 0.5

    def __post_init__(self):
        if self.patch_size < 5 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 5, got {self.patch_size}")
        if self.bands < 1:
            raise ValueError("bands must be >= 1")
        if self.diff_levels not in ("all", "mfcu"):
            raise ValueError("diff_levels must be 'all' or 'mfcu'")


class _Branch(nn.Module):
    def __init__(self, cfg: DsmscnConfig):
        super().__init__()
        c1, c2 = cfg.conv_channels
        m1, m2 = cfg.mfcu_channels
        self.conv1 = Conv(cfg.bands, c1)
        self.conv2 = Conv(c1, c2)
        self.mfcu1 = MFCU(MfcuConfig.default(c2, m1))
        self.mfcu2 = MFCU(MfcuConfig.default(m1, m2))
        self.widths = (c1, c2, self.mfcu1.out_channels, self.mfcu2.out_channels)

    def forward(self, x):
        f1 = self.conv1(x)
        f2 = self.conv2(f1)
        f3 = self.mfcu1(f2)
        f4 = self.mfcu2(f3)
        return [f1, f2, f3, f4]


class DSMSCN(nn.Module):
    """Patch classifier: shared branches, multi-level |difference| fusion, MFCU judge, GAP, sigmoid unit."""

    def __init__(self, cfg: DsmscnConfig = DsmscnConfig()):
        super().__init__()
        self.cfg = cfg
        self.branch = _Branch(cfg)
        self.levels = (0, 1, 2, 3) if cfg.diff_levels == "all" else (2, 3)
        fused_in = sum(self.branch.widths[i] for i in self.levels)
        self.fuse = Conv(fused_in, cfg.fusion_channels, 1)
        self.judge = MFCU(MfcuConfig.default(cfg.fusion_channels, cfg.judge_channels))
        self.head_weight = nn.Parameter(torch.empty(1, self.judge.out_channels))
        self.head_bias = nn.Parameter(torch.zeros(1))
        self.generator: torch.Generator | None = None

    def differences(self, p1, p2) -> list[torch.Tensor]:
        f1, f2 = self.branch(p1), self.branch(p2)
        return [abs_diff(f1[i], f2[i]) for i in self.levels]

    def forward(self, p1, p2):
        """Change probability of the centre pixel, shape (N,)."""
        if p1.shape != p2.shape:
            raise ValueError(f"patch shape mismatch: {tuple(p1.shape)} vs {tuple(p2.shape)}")
        if p1.shape[1] != self.cfg.bands:
            raise ValueError(f"expected {self.cfg.bands} bands, got {p1.shape[1]}")
        p1, p2 = _channels_last(p1), _channels_last(p2)
        x = self.fuse(torch.cat(self.differences(p1, p2), dim=1))
        x = global_avg_pool(self.judge(x)).flatten(1)
        x = dropout(x, self.cfg.dropout, self.training, self.generator)
        return sigmoid(F.linear(x, self.head_weight, self.head_bias)).squeeze(1)


# ---------------------------------------------------------------------- DSMS-FCN


@dataclass(frozen=True)
class DsmsfcnConfig:
    bands: int = 3
    encoder_channels: tuple[int, int, int, int] = (16, 32, 64, 128)  # conv, conv, MFCU, MFCU
    decoder_channels: tuple[int, int, int, int] = (64, 32, 16, 16)  # transpose-conv widths, deep to shallow
    dropout: float = 0.5

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ValueError("DSMS-FCN needs 4 encoder and 4 decoder stages")
        if self.bands < 1 or min(self.encoder_channels + self.decoder_channels) < 1:
            raise ValueError("channel counts must be >= 1")


class DSMSFCN(nn.Module):
    """Fully convolutional siamese encoder/decoder producing a change-probability map."""

    multiple = 16

    def __init__(self, cfg: DsmsfcnConfig = DsmsfcnConfig()):
        super().__init__()
        self.cfg = cfg
        e1, e2, e3, e4 = cfg.encoder_channels
        self.enc1 = Conv(cfg.bands, e1)
        self.enc2 = Conv(e1, e2)
        self.enc3 = MFCU(MfcuConfig.default(e2, e3))
        self.enc4 = MFCU(MfcuConfig.default(self.enc3.out_channels, e4))
        skips = [e1, e2, self.enc3.out_channels, self.enc4.out_channels]
        ups, refines = [], []
        cin = skips[3]
        for level in (3, 2, 1, 0):
            width = cfg.decoder_channels[3 - level]
            ups.append(UpConv(cin, width))
            refines.append(Conv(width + 2 * skips[level], width))
            cin = width
        self.up = nn.ModuleList(ups)
        self.dec = nn.ModuleList(refines)
        self.head = Conv(cin, 1, 1, act=False)
        self.generator: torch.Generator | None = None

    def encode(self, x) -> tuple[list[torch.Tensor], torch.Tensor]:
        feats = []
        for stage in (self.enc1, self.enc2, self.enc3, self.enc4):
            x = stage(x)
            feats.append(x)
            x = max_pool(x, "2x2")
        return feats, x

    def forward_padded(self, x1, x2):
        s1, bottom = self.encode(x1)
        s2, _ = self.encode(x2)
        x = dropout(bottom, self.cfg.dropout, self.training, self.generator)
        for i, level in enumerate((3, 2, 1, 0)):
            x = self.up[i](x)
            x = self.dec[i](torch.cat([x, s1[level], abs_diff(s1[level], s2[level])], dim=1))
        return sigmoid(self.head(x))

    def forward(self, x1, x2):
        """Probability map (N, 1, H, W) for any H, W; pads bottom/right to a multiple of 16."""
        if x1.shape != x2.shape:
            raise ValueError(f"image shape mismatch: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        if x1.shape[1] != self.cfg.bands:
            raise ValueError(f"expected {self.cfg.bands} bands, got {x1.shape[1]}")
        h, w = x1.shape[-2:]
        ph, pw = (-h) % self.multiple, (-w) % self.multiple
        if ph or pw:
            x1, x2 = pad_bottom_right(x1, ph, pw), pad_bottom_right(x2, ph, pw)
        return self.forward_padded(_channels_last(x1), _channels_last(x2))[..., :h, :w].contiguous()


def _channels_last(x: torch.Tensor) -> torch.Tensor:
    # NHWC runs the CPU convolution and pooling kernels roughly twice as fast
    return x.contiguous(memory_format=torch.channels_last)


def pad_bottom_right(x: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
    """Reflect-pad; falls back to edge replication when the pad exceeds the image."""
    while ph or pw:
        sh, sw = min(ph, x.shape[-2] - 1), min(pw, x.shape[-1] - 1)
        if sh <= 0 and sw <= 0:
            return F.pad(x, (0, pw, 0, ph), mode="replicate")
        x = F.pad(x, (0, max(sw, 0), 0, max(sh, 0)), mode="reflect")
        ph, pw = ph - max(sh, 0), pw - max(sw, 0)
    return x


# ------------------------------------------------------------------ bookkeeping


@dataclass
class ParameterTable:
    rows: list[tuple[str, tuple[int, ...], int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(n for _, _, n in self.rows)

    def format(self) -> str:
        lines = [f"{name:<40} {'x'.join(map(str, shape)):>16} {n:>10}" for name, shape, n in self.rows]
        lines.append(f"{'total':<40} {'':>16} {self.total:>10}")
        return "\n".join(lines)


def count_parameters(net: nn.Module) -> ParameterTable:
    return ParameterTable([(name, tuple(p.shape), p.numel()) for name, p in net.named_parameters() if p.requires_grad])


def conv_param_count(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def build_network(kind: str, cfg, seed: int = 0) -> nn.Module:
    net = {"dsmscn": DSMSCN, "dsmsfcn": DSMSFCN}[kind](cfg)
    init_network(net, seed)
    return net.to(memory_format=torch.channels_last)


_CONFIG_TYPES = {"dsmscn": DsmscnConfig, "dsmsfcn": DsmsfcnConfig}


def config_to_doc(kind: str, cfg) -> dict:
    return {"network": kind, **dataclasses.asdict(cfg)}


def config_from_doc(doc: dict):
    doc = dict(doc)
    kind = doc.pop("network")
    cls = _CONFIG_TYPES[kind]
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in doc:
            v = doc[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return kind, cls(**kwargs)


def save_network_config(path, kind: str, cfg) -> None:
    kvdoc.dump(path, config_to_doc(kind, cfg))


def load_network_config(path):
    return config_from_doc(kvdoc.load(path))
