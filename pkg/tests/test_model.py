import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from igf.corpus import Context, sample_contexts
from igf.errors import (
    IncompatibleSnapshotError,
    InvalidConfigError,
    InvalidTokenError,
    NonFiniteGradientError,
    NonFiniteParametersError,
)
from igf.model import (
    AdamState,
    ModelConfig,
    OptimizerConfig,
    ParameterSnapshot,
    TinyCausalLM,
    adam_step,
    load_checkpoint,
    n_params,
    pretrain,
    restore,
    save_checkpoint,
    snapshot,
    unpack,
)


def _scalar_adam(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam used as an independent oracle."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def test_adam_matches_scalar_oracle_on_quadratic():
    cfg = OptimizerConfig(learning_rate=0.05)
    grad_fn = lambda x: 2.0 * (x - 3.0)  # noqa: E731
    expected = _scalar_adam(-1.0, grad_fn, 100, 0.05)
    x = torch.tensor([-1.0], dtype=torch.float64)
    state = AdamState.zeros(1)
    for t in range(100):
        x, state = adam_step(x, state, torch.tensor([grad_fn(float(x[0]))], dtype=torch.float64), cfg)
        assert abs(float(x[0]) - expected[t]) < 1e-12
    assert state.step == 100


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-1e3, max_value=1e3, allow_nan=False).filter(lambda g: abs(g) > 1e-3),
                min_size=1, max_size=8))
def test_first_adam_step_has_magnitude_lr(grads):
    g = torch.tensor(grads, dtype=torch.float64)
    new, _ = adam_step(torch.zeros_like(g), AdamState.zeros(g.numel()), g, OptimizerConfig(learning_rate=1e-3))
    assert torch.allclose(new, -1e-3 * torch.sign(g), rtol=1e-4, atol=0)


def test_adam_does_not_mutate_inputs():
    p = torch.ones(3, dtype=torch.float64)
    s = AdamState.zeros(3)
    adam_step(p, s, torch.ones(3, dtype=torch.float64), OptimizerConfig())
    assert torch.equal(p, torch.ones(3, dtype=torch.float64))
    assert s.step == 0 and torch.equal(s.m, torch.zeros(3, dtype=torch.float64))


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteGradientError):
        adam_step(torch.zeros(2, dtype=torch.float64), AdamState.zeros(2),
                  torch.tensor([1.0, float("nan")], dtype=torch.float64), OptimizerConfig())


def test_forward_is_distribution_and_causal(tiny_base, rng):
    m = tiny_base.model()
    x = rng.integers(0, m.config.vocab_size, (2, 8))
    p = m.forward(x)
    assert p.shape == (2, 8, m.config.vocab_size)
    assert torch.allclose(p.sum(-1), torch.ones(2, 8, dtype=torch.float64), atol=1e-12)
    # changing a later token leaves earlier predictions untouched
    y = x.copy()
    y[:, 5] = (y[:, 5] + 1) % m.config.vocab_size
    q = m.forward(y)
    assert torch.equal(p[:, :5], q[:, :5])
    assert not torch.equal(p[:, 5:], q[:, 5:])


def test_loss_matches_manual_cross_entropy(tiny_base, rng):
    m = tiny_base.model()
    x = rng.integers(0, m.config.vocab_size, (3, 8))
    p = m.forward(x).numpy()
    manual = -np.mean(np.log2(p[np.arange(3)[:, None], np.arange(7)[None, :], x[:, 1:]]))
    assert abs(m.loss_bits(x) - manual) < 1e-12


def test_per_context_loss_averages_to_batch_loss(tiny_base, rng):
    m = tiny_base.model()
    x = rng.integers(0, m.config.vocab_size, (5, 8))
    assert abs(m.per_context_loss_bits(x).mean() - m.loss_bits(x)) < 1e-12


def test_backward_loss_matches_loss_bits(tiny_base, rng):
    m = tiny_base.model()
    x = rng.integers(0, m.config.vocab_size, (2, 8))
    loss, grad = m.backward(x)
    assert abs(loss - m.loss_bits(x)) < 1e-12
    assert grad.shape == (m.n_params,)


def test_invalid_tokens_rejected(tiny_base):
    m = tiny_base.model()
    with pytest.raises(InvalidTokenError):
        m.loss_bits([[0, m.config.vocab_size]])
    with pytest.raises(InvalidTokenError):
        m.forward(np.zeros((1, m.config.context_length + 1), dtype=int))


def test_non_finite_parameters_rejected(tiny_base):
    params = tiny_base.params.copy()
    params[0] = np.inf
    m = TinyCausalLM(tiny_base.config, params)
    with pytest.raises(NonFiniteParametersError):
        m.loss_bits([[0, 1, 2]])


def test_model_config_validation():
    with pytest.raises(InvalidConfigError):
        ModelConfig(vocab_size=10, d_model=5, n_heads=2)
    with pytest.raises(InvalidConfigError):
        OptimizerConfig(beta2=1.0)


def test_snapshot_is_isolated_from_live_model(tiny_base):
    m = tiny_base.model()
    snap = snapshot(m)
    m.params[0] += 1.0
    assert snap.params[0] == tiny_base.params[0]
    with pytest.raises(ValueError):
        snap.params[0] = 2.0


def test_checkpoint_roundtrip_with_adam_state(tmp_path, tiny_base, tiny_corpora):
    m, state = restore(tiny_base)
    batch = sample_contexts(tiny_corpora["a"], 4, 8)
    _, grad = m.backward(batch)
    m.params, state = adam_step(m.params, state, grad, OptimizerConfig())
    snap = snapshot(m, state)
    path = tmp_path / "m.ckpt"
    save_checkpoint(snap, path)
    back = load_checkpoint(path)
    assert back.fingerprint == snap.fingerprint
    assert np.array_equal(back.params, snap.params)
    assert np.array_equal(back.adam_m, snap.adam_m) and back.adam_step == 1
    assert back.model().loss_bits(batch) == m.loss_bits(batch)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(IncompatibleSnapshotError):
        load_checkpoint(path)


def test_wrong_parameter_count_rejected(tiny_config):
    with pytest.raises(IncompatibleSnapshotError):
        TinyCausalLM(tiny_config, np.zeros(n_params(tiny_config) - 1))


def test_pretraining_reduces_loss_and_is_deterministic(tiny_config, tiny_corpora):
    held = sample_contexts(tiny_corpora["general"], 16, 8, rng_seed=9)
    p1 = pretrain(tiny_config, tiny_corpora["general"], 60, OptimizerConfig(learning_rate=3e-3), rng_seed=0,
                  batch_size=8, log_every=0)
    p2 = pretrain(tiny_config, tiny_corpora["general"], 60, OptimizerConfig(learning_rate=3e-3), rng_seed=0,
                  batch_size=8, log_every=0)
    assert torch.equal(p1, p2)
    start = TinyCausalLM(tiny_config).loss_bits(held)
    assert TinyCausalLM(tiny_config, p1).loss_bits(held) < start - 0.5


def test_unpack_views_cover_all_parameters(tiny_config):
    theta = torch.arange(n_params(tiny_config), dtype=torch.float64)
    parts = unpack(tiny_config, theta)
    assert sum(v.numel() for v in parts.values()) == theta.numel()
    assert float(parts["wte"][0, 0]) == 0.0
