"""Finite-difference cases covering every differentiable op and both networks at toy widths."""

from __future__ import annotations

import torch

from dsmscd.networks import DSMSCN, DSMSFCN, MFCU, DsmscnConfig, DsmsfcnConfig, MfcuConfig
from dsmscd.tensor_nn import (
    LossConfig,
    abs_diff,
    conv2d,
    conv_transpose2d,
    dropout,
    global_avg_pool,
    init_network,
    max_pool,
    relu,
    sigmoid,
    wbce_loss,
)


def _t(g, *shape, scale=1.0, offset=0.0):
    x = torch.randn(*shape, generator=g, dtype=torch.float64) * scale + offset
    return x.requires_grad_(True)


def _away_from_zero(g, *shape):
    # keeps relu / abs kinks further than any finite-difference step
    x = torch.rand(*shape, generator=g, dtype=torch.float64) * 0.9 + 0.1
    sign = torch.where(torch.rand(*shape, generator=g) < 0.5, -1.0, 1.0).double()
    return (x * sign).requires_grad_(True)


def _net_case(net, inputs, g):
    net = net.double().eval()
    params = dict(net.named_parameters())
    with torch.no_grad():
        # zero biases put whole channels exactly on a ReLU kink; nudge them off it
        for name, p in params.items():
            if name.endswith("bias"):
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.1)

    def fn(*tensors):
        n_in = len(inputs)
        state = dict(zip(params, tensors[n_in:]))
        return torch.func.functional_call(net, state, tuple(tensors[:n_in]))

    return fn, [*inputs, *[p.detach().clone().requires_grad_(True) for p in params.values()]]


def cases(seed: int = 0):
    """Yield (name, fn, inputs, max_probes)."""
    g = torch.Generator().manual_seed(seed)
    for k in (1, 3, 5):
        yield f"conv2d_k{k}", conv2d, [_t(g, 2, 2, 5, 5), _t(g, 3, 2, k, k), _t(g, 3)], None
    yield "conv_transpose2d", conv_transpose2d, [_t(g, 2, 3, 4, 4), _t(g, 3, 2, 2, 2), _t(g, 2)], None
    yield "max_pool_2x2", lambda x: max_pool(x, "2x2"), [_t(g, 2, 2, 6, 6)], None
    yield "max_pool_3x3", lambda x: max_pool(x, "3x3"), [_t(g, 2, 2, 5, 5)], None
    yield "global_avg_pool", global_avg_pool, [_t(g, 2, 3, 4, 4)], None
    a = _t(g, 2, 3, 4, 4)
    b = (a.detach() + _away_from_zero(g, 2, 3, 4, 4).detach()).requires_grad_(True)
    yield "abs_diff", abs_diff, [a, b], None
    yield "relu", relu, [_away_from_zero(g, 2, 3, 4, 4)], None
    yield "sigmoid", sigmoid, [_t(g, 2, 3, 4, 4, scale=2.0)], None

    def drop(x):
        return dropout(x, 0.5, True, torch.Generator().manual_seed(7))

    yield "dropout", drop, [_t(g, 2, 8)], None
    target = (torch.rand(2, 1, 4, 4, generator=g) < 0.3).double()
    mask = torch.rand(2, 1, 4, 4, generator=g) < 0.8
    prob = (torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    yield "wbce_loss", lambda y: wbce_loss(y, target, LossConfig(3.0), mask), [prob], None

    torch.manual_seed(seed)
    mfcu = MFCU(MfcuConfig.default(4, 8))
    init_network(mfcu, seed)
    fn, inp = _net_case(mfcu, [_t(g, 1, 4, 8, 8)], g)
    yield "mfcu_block", fn, inp, 40

    cn = DSMSCN(DsmscnConfig(bands=2, patch_size=5, conv_channels=(3, 4), mfcu_channels=(8, 8),
                             fusion_channels=4, judge_channels=8, dropout=0.0))
    init_network(cn, seed)
    fn, inp = _net_case(cn, [_t(g, 2, 2, 8, 8), _t(g, 2, 2, 8, 8)], g)
    yield "dsmscn_toy", fn, inp, 30

    fcn = DSMSFCN(DsmsfcnConfig(bands=2, encoder_channels=(3, 4, 8, 8), decoder_channels=(4, 4, 3, 3), dropout=0.0))
    init_network(fcn, seed)
    fn, inp = _net_case(fcn, [_t(g, 1, 2, 16, 16), _t(g, 1, 2, 16, 16)], g)
    yield "dsmsfcn_toy", fn, inp, 30
