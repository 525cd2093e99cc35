from __future__ import annotations

import numpy as np
import pytest
import torch

from onfattn.config import ConfigError, ModelConfig
from onfattn.model import (
    LocalAttention,
    build_model,
    parameter_report,
    predict,
    window_mask,
)

SMALL = dict(conv_channels=(2, 2, 4), model_size=8, n_feat=6, attn_size=4, n_bins=16)


def small(**kw) -> ModelConfig:
    return ModelConfig(**{**SMALL, **kw})


@pytest.mark.parametrize("variant", ["full", "no_onset_stack", "no_bilstm", "linear_probe", "conv_probe"])
@pytest.mark.parametrize("target", ["none", "spec", "onset", "feat"])
def test_shapes_preserve_time(variant, target):
    cfg = small(variant=variant, attention_target=target, window_D=2)
    try:
        cfg.validate()
    except ConfigError:
        pytest.skip("combination not defined")
    model = build_model(cfg)
    out = model(torch.rand(3, 11, 16))
    assert out.y_frame_hat.shape == (3, 11, 88)
    assert (out.y_onset_hat is not None) == cfg.has_onset_stack
    if cfg.uses_attention:
        assert out.attention.weights.shape == (3, 11, 5)
    else:
        assert out.attention is None


def test_invalid_combinations():
    for bad in (
        small(variant="linear_probe", attention_target="onset"),
        small(variant="no_onset_stack", attention_target="onset"),
        small(variant="mystery"),
        small(attention_target="spec", window_D=-1),
    ):
        with pytest.raises(ConfigError):
            bad.validate()


def attention_oracle(att: LocalAttention, query, values):
    """Per-timestep loop over explicitly gathered windows."""
    B, T, _ = values.shape
    D = att.window_D
    ctx = torch.zeros_like(values)
    w = torch.zeros(B, T, 2 * D + 1, dtype=values.dtype)
    for b in range(B):
        for t in range(T):
            idx = [t - D + j for j in range(2 * D + 1)]
            valid = torch.tensor([0 <= i < T for i in idx])
            window = torch.stack([values[b, i] if 0 <= i < T else torch.zeros_like(values[b, 0]) for i in idx])
            a, c = att.step(query[b, t], window, valid)
            w[b, t], ctx[b, t] = a, c
    return ctx, w


@pytest.mark.parametrize("D", [0, 1, 3])
def test_attention_matches_per_step_oracle(D):
    torch.manual_seed(0)
    att = LocalAttention(5, 7, 4, D).double()
    q, v = torch.randn(2, 6, 5, dtype=torch.float64), torch.randn(2, 6, 7, dtype=torch.float64)
    ctx, w = att(q, v)
    ctx_o, w_o = attention_oracle(att, q, v)
    torch.testing.assert_close(w, w_o, rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(ctx, ctx_o, rtol=1e-12, atol=1e-12)


def test_out_of_range_positions_get_zero_weight():
    att = LocalAttention(3, 3, 4, 4)
    _, w = att(torch.randn(1, 5, 3), torch.randn(1, 5, 3))
    assert torch.all(w[0][~window_mask(5, 4)] == 0)


def test_linear_probe_d0_equals_baseline():
    x = torch.rand(2, 9, 16)
    base = build_model(small(variant="linear_probe"))
    d0 = build_model(small(variant="linear_probe", attention_target="spec", window_D=0))
    assert torch.equal(base(x).y_frame_hat, d0(x).y_frame_hat)


def test_linear_probe_window_is_local():
    D = 2
    model = build_model(small(variant="linear_probe", attention_target="spec", window_D=D))
    x = torch.rand(1, 12, 16)
    y = model(x).y_frame_hat
    x2 = x.clone()
    x2[0, 6] += 1.0
    changed = (model(x2).y_frame_hat - y).abs().amax(dim=-1)[0] > 0
    assert changed.nonzero().flatten().tolist() == list(range(6 - D, 6 + D + 1))


def test_conv_probe_is_time_local():
    model = build_model(small(variant="conv_probe"))
    x = torch.rand(1, 10, 16)
    y = model(x).y_frame_hat
    x2 = x.clone()
    x2[0, 4] += 1.0
    changed = (model(x2).y_frame_hat - y).abs().amax(dim=-1)[0] > 0
    assert changed.nonzero().flatten().tolist() == [4]


def test_forward_window_agrees_with_sequence_forward():
    model = build_model(small(variant="linear_probe", attention_target="spec", window_D=2, dtype="float64"))
    x = torch.rand(1, 9, 16, dtype=torch.float64)
    y = model(x).y_frame_hat[0]
    for t in range(2, 7):
        torch.testing.assert_close(model.forward_window(x[0, t - 2 : t + 3]), y[t])


def test_no_bilstm_removes_exactly_the_recurrent_parameters():
    full = parameter_report(build_model(small()))
    flat = parameter_report(build_model(small(variant="no_bilstm")))
    assert full["total"] - flat["total"] == full["recurrent"]
    assert flat["recurrent"] == 0


def test_stop_gradient_shields_onset_stack():
    model = build_model(small())
    out = model(torch.rand(2, 8, 16))
    out.y_frame_hat.sum().backward()
    assert all(p.grad is None or p.grad.abs().sum() == 0 for p in model.onset_fc.parameters())
    model.zero_grad()
    model.cfg.stop_gradient = False
    model(torch.rand(2, 8, 16)).y_frame_hat.sum().backward()
    assert model.onset_fc.weight.grad.abs().sum() > 0


def test_init_is_seeded():
    a = build_model(small(seed=3))
    b = build_model(small(seed=3))
    c = build_model(small(seed=4))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("variant", ["full", "no_onset_stack", "linear_probe", "conv_probe"])
def test_output_priors_set_only_the_output_biases(variant):
    plain = build_model(small(variant=variant))
    primed = build_model(small(variant=variant, onset_prior=0.01, frame_prior=0.2))
    spec = torch.rand(1, 7, 16)
    out = primed(spec)
    np.testing.assert_allclose(primed.classifier.bias.detach(), np.log(0.2 / 0.8), rtol=1e-6)
    if hasattr(primed, "onset_fc"):
        np.testing.assert_allclose(primed.onset_fc.bias.detach(), np.log(0.01 / 0.99), rtol=1e-6)
    biases = {"classifier.bias", "onset_fc.bias"}
    for (name, p), q in zip(plain.named_parameters(), primed.parameters()):
        assert torch.equal(p, q) == (name not in biases), name
    # with zero output weights the posteriors sit exactly at the priors
    with torch.no_grad():
        primed.classifier.weight.zero_()
    np.testing.assert_allclose(primed(spec).y_frame_hat.detach(), 0.2, rtol=1e-5)
    assert out.y_frame_hat.shape == (1, 7, 88)


def test_output_priors_validated():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ConfigError):
            small(frame_prior=bad).validate()


def test_predict_restores_mode():
    model = build_model(small())
    model.train()
    out = predict(model, np.random.rand(7, 16))
    assert model.training and out.y_frame_hat.shape == (1, 7, 88)


def central_difference_error(model, x, loss_fn, h=1e-6):
    """``||g_fd - g_autograd|| / ||g_autograd||`` over every parameter coordinate."""
    model.zero_grad()
    loss_fn(model(x)).backward()
    params = [p for p in model.parameters() if p.requires_grad]
    auto = torch.cat([p.grad.reshape(-1) for p in params])
    fd = []
    with torch.no_grad():
        for p in params:
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn(model(x)).item()
                flat[i] = old - h
                down = loss_fn(model(x)).item()
                flat[i] = old
                fd.append((up - down) / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    return ((fd - auto).norm() / auto.norm()).item()


def test_gradients_match_finite_differences_float64():
    torch.manual_seed(0)
    model = build_model(small(variant="linear_probe", attention_target="spec", window_D=2, dtype="float64"))
    x = torch.rand(1, 5, 16, dtype=torch.float64)
    target = (torch.rand(1, 5, 88, dtype=torch.float64) < 0.3).double()
    loss = lambda out: torch.nn.functional.binary_cross_entropy(out.y_frame_hat, target, reduction="sum")  # noqa: E731
    assert central_difference_error(model, x, loss) < 1e-4
