import math

import numpy as np
import pytest
import torch

from dsmscd.networks import DSMSCN, Conv, DsmscnConfig, DsmsfcnConfig, build_network
from dsmscd.tensor_nn import (
    Adam,
    AdamState,
    CheckpointError,
    LossConfig,
    NumericalError,
    Parameter,
    adam_step,
    checkpoint_header,
    conv2d,
    conv_transpose2d,
    dropout,
    global_avg_pool,
    grad_check,
    he_normal_init,
    load_checkpoint,
    max_pool,
    parameters_of,
    positive_weight,
    save_checkpoint,
    wbce_loss,
)

import gradsuite
import oracles


def _rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


# ------------------------------------------------------------------ primitives


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_loop_oracle(k):
    x, w, b = _rand(2, 3, 7, 6, seed=1), _rand(4, 3, k, k, seed=2), _rand(4, seed=3)
    got = conv2d(x, w, b).numpy()
    want = oracles.conv2d_loops(x.numpy(), w.numpy(), b.numpy())
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_rejects_bad_kernel_and_channels():
    with pytest.raises(ValueError, match="kernel"):
        conv2d(_rand(1, 2, 5, 5), _rand(1, 2, 2, 2))
    with pytest.raises(ValueError, match="channel"):
        conv2d(_rand(1, 2, 5, 5), _rand(1, 3, 3, 3))


def test_conv_transpose_matches_scatter_oracle():
    x, w, b = _rand(2, 3, 4, 5, seed=4), _rand(3, 2, 2, 2, seed=5), _rand(2, seed=6)
    got = conv_transpose2d(x, w, b).numpy()
    assert got.shape == (2, 2, 8, 10)
    np.testing.assert_allclose(got, oracles.conv_transpose2x2_loops(x.numpy(), w.numpy(), b.numpy()), atol=1e-12)


def test_max_pool_windows():
    x = _rand(2, 3, 6, 8, seed=7)
    two = max_pool(x, "2x2").numpy()
    assert two.shape == (2, 3, 3, 4)
    np.testing.assert_array_equal(two, x.numpy().reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5)))
    np.testing.assert_array_equal(max_pool(x, "3x3").numpy(), oracles.maxpool3_loops(x.numpy()))
    with pytest.raises(ValueError):
        max_pool(_rand(1, 1, 5, 4), "2x2")
    with pytest.raises(ValueError):
        max_pool(x, "4x4")


def test_global_avg_pool():
    x = _rand(2, 3, 4, 5)
    np.testing.assert_allclose(global_avg_pool(x).numpy()[..., 0, 0], x.numpy().mean(axis=(2, 3)))


def test_dropout_eval_is_identity_and_train_scales_survivors():
    x = torch.ones(1000, dtype=torch.float64)
    assert torch.equal(dropout(x, 0.5, training=False), x)
    y = dropout(x, 0.25, True, torch.Generator().manual_seed(0))
    kept = y[y != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1 / 0.75))


def test_dropout_is_unbiased_statistically():
    # mean of inverted dropout over n iid draws has std sqrt(r/(1-r)/n) around 1
    n, r = 200_000, 0.5
    y = dropout(torch.ones(n, dtype=torch.float64), r, True, torch.Generator().manual_seed(3))
    assert abs(y.mean().item() - 1.0) < 5 * math.sqrt(r / (1 - r) / n)


def test_dropout_same_generator_seed_same_mask():
    x = _rand(64)
    a = dropout(x, 0.5, True, torch.Generator().manual_seed(11))
    b = dropout(x, 0.5, True, torch.Generator().manual_seed(11))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        dropout(x, 1.0, True)


# ------------------------------------------------------------------------ loss


def test_wbce_closed_form():
    y = torch.tensor([0.9, 0.2, 0.6, 0.3], dtype=torch.float64)
    t = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    wp = 3.0
    want = -np.mean([wp * math.log(0.9), math.log(0.8), wp * math.log(0.6), math.log(0.7)])
    assert wbce_loss(y, t, LossConfig(wp)).item() == pytest.approx(want, rel=1e-12)


def test_wbce_mask_excludes_entries():
    y = torch.tensor([0.9, 0.2, 0.6], dtype=torch.float64)
    t = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    mask = torch.tensor([True, False, True])
    want = -(2 * math.log(0.9) + 2 * math.log(0.6)) / 2
    assert wbce_loss(y, t, LossConfig(2.0), mask).item() == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        wbce_loss(y, t, LossConfig(2.0), torch.zeros(3, dtype=torch.bool))


def test_wbce_is_finite_at_saturated_predictions():
    y = torch.tensor([0.0, 1.0], dtype=torch.float64)
    t = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert torch.isfinite(wbce_loss(y, t, LossConfig(1.0)))


def test_positive_weight_is_class_ratio():
    labels = np.array([0] * 30 + [1] * 10 + [255] * 5)
    assert positive_weight(labels, labels != 255) == pytest.approx(3.0)
    assert positive_weight(np.zeros(5)) == 1.0
    with pytest.raises(ValueError):
        LossConfig(0.0)


# ----------------------------------------------------------------------- adam


def test_adam_first_step_by_hand():
    p = Parameter("p", torch.nn.Parameter(torch.ones(1, dtype=torch.float64)), weight_decay_enabled=False)
    state = AdamState(lr=0.1, weight_decay=0.0)
    adam_step([p], [torch.ones(1, dtype=torch.float64)], state)
    assert p.tensor.item() == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adam_matches_reference_with_decoupled_decay():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(7)]
    p = Parameter("w", torch.nn.Parameter(torch.from_numpy(p0.copy())))
    state = AdamState(lr=0.01, weight_decay=0.1)
    for g in grads:
        adam_step([p], [torch.from_numpy(g)], state)
    want = oracles.adamw_reference(p0, grads, 0.01, 0.9, 0.999, 1e-8, 0.1)
    np.testing.assert_allclose(p.tensor.detach().numpy(), want, rtol=1e-12)


def test_adam_skips_decay_on_biases():
    net = Conv(2, 3)
    names = {p.name: p.weight_decay_enabled for p in parameters_of(net)}
    assert names == {"weight": True, "bias": False}


def test_adam_rejects_nonfinite_gradient_without_updating():
    w = torch.nn.Parameter(torch.ones(3))
    p = Parameter("w", w)
    state = AdamState()
    with pytest.raises(NumericalError):
        adam_step([p], [torch.tensor([1.0, float("nan"), 0.0])], state)
    assert torch.equal(w.detach(), torch.ones(3)) and state.step == 0


def test_adam_wrapper_reduces_quadratic():
    w = torch.nn.Parameter(torch.tensor([3.0, -2.0]))
    opt = Adam([Parameter("w", w)], lr=0.1, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        (w**2).sum().backward()
        opt.step()
    assert w.detach().abs().max() < 0.1


# ----------------------------------------------------------------------- init


def test_he_normal_std_statistically():
    fan_in = 50
    x = he_normal_init((400, fan_in), fan_in, torch.Generator().manual_seed(0), dtype=torch.float64)
    # sample std of n normals has relative sd ~ 1/sqrt(2n)
    n = x.numel()
    assert abs(x.std().item() / math.sqrt(2 / fan_in) - 1) < 5 / math.sqrt(2 * n)


def test_init_network_zero_bias_and_seeded():
    a = build_network("dsmscn", DsmscnConfig(), seed=3)
    b = build_network("dsmscn", DsmscnConfig(), seed=3)
    c = build_network("dsmscn", DsmscnConfig(), seed=4)
    for (n, pa), pb, pc in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb)
        if n.endswith("bias"):
            assert not pa.detach().any()
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


# ----------------------------------------------------------------- grad check


@pytest.mark.parametrize("case", list(gradsuite.cases()), ids=lambda c: c[0])
def test_gradients_match_finite_differences(case):
    name, fn, inputs, probes = case
    report = grad_check(fn, inputs, max_probes=probes)
    assert report.ok, f"{name}: {report.failures()} max rel err {report.max_rel_err:.2e}"


def test_grad_check_catches_a_wrong_backward():
    class Twice(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2 x g

    x = _rand(5).requires_grad_(True)
    report = grad_check(Twice.apply, [x])
    assert not report.ok and report.failures() == ["input0"]


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(lambda x: x * 2, [torch.ones(3, requires_grad=True)])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_and_header(tmp_path):
    net = build_network("dsmscn", DsmscnConfig(bands=3), seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net)
    assert checkpoint_header(path) == "DSMSCKPT 1"
    other = build_network("dsmscn", DsmscnConfig(bands=3), seed=2)
    load_checkpoint(path, other)
    for pa, pb in zip(net.parameters(), other.parameters()):
        assert torch.equal(pa, pb)


def test_checkpoint_rejects_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_network("dsmscn", DsmscnConfig(bands=3), seed=1))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path, build_network("dsmscn", DsmscnConfig(bands=4), seed=1))
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(path, build_network("dsmsfcn", DsmsfcnConfig(bands=3)))
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(path, build_network("dsmscn", DsmscnConfig(bands=3), seed=1))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT 1\nparams 0\npayload 0\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad, DSMSCN(DsmscnConfig()))
