import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safectrl import numerics as nx
from safectrl import suppress
from safectrl.diffusion import Denoiser, encode_prompts
from safectrl.numerics import Tensor

from helpers import directional_check, dpo_setup, toy_pairs


def test_reward_arithmetic():
    # ‖ε − ε_ref‖² = 1.0, ‖ε − ε_θ‖² = 0.25
    eps = np.zeros(4)
    ref = np.array([1.0, 0, 0, 0])
    pol = np.array([0.5, 0, 0, 0])
    r = np.sum((eps - ref) ** 2) - np.sum((eps - pol) ** 2)
    assert r == pytest.approx(0.75)


def test_dpo_from_rewards_examples():
    assert float(suppress.dpo_from_rewards(0.3, 0.3)) == pytest.approx(math.log(2), abs=1e-12)
    assert float(suppress.dpo_from_rewards(0.4, -0.2, beta=0.5)) == pytest.approx(0.5544, abs=1e-4)
    assert float(suppress.dpo_from_rewards(1e6, 0.0)) < 1e-12
    assert math.isfinite(float(suppress.dpo_from_rewards(-1e6, 0.0)))


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 2.0))
def test_dpo_loss_decreases_in_margin(rw, rl, beta):
    a = float(suppress.dpo_from_rewards(rw, rl, beta))
    b = float(suppress.dpo_from_rewards(rw + 1.0, rl, beta))
    assert 0.0 <= b <= a


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_dpo_from_rewards_gradient(seed):
    rng = np.random.default_rng(seed)
    rw = Tensor(rng.normal(size=4) * 3, requires_grad=True, dtype=np.float64)
    rl = Tensor(rng.normal(size=4) * 3, requires_grad=True, dtype=np.float64)
    assert nx.gradcheck(lambda: suppress.dpo_from_rewards(rw, rl, 0.3).sum(), [rw, rl], h=1e-6) < 1e-4


def test_fuse_values_examples():
    assert float(suppress.fuse_values(np.array([2.0]), np.array([10.0]), np.array([0.5]))[0]) == 6.0
    rng = np.random.default_rng(0)
    vo = rng.normal(size=(2, 64, 32)).astype(np.float32)
    vs = rng.normal(size=(2, 64, 32)).astype(np.float32)
    assert suppress.fuse_values(vo, vs, np.zeros((2, 64))).tobytes() == vo.tobytes()
    assert suppress.fuse_values(vo, vs, np.ones((2, 64))).tobytes() == vs.tobytes()
    with pytest.raises(ValueError):
        suppress.fuse_values(vo, vs[:, :10], np.ones((2, 64)))
    with pytest.raises(ValueError):
        suppress.fuse_values(vo, vs, np.ones((2, 10)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_fuse_values_binary_mask_is_bit_exact(seed):
    rng = np.random.default_rng(seed)
    vo = Tensor(rng.normal(size=(1, 64, 32)))
    vs = Tensor(rng.normal(size=(1, 64, 32)) * 1e3)
    m = (rng.random((1, 64)) < 0.4).astype(np.float32)
    out = suppress.fuse_values(vo, vs, m).data
    keep = m[0] == 0
    assert out[0, keep].tobytes() == vo.data[0, keep].tobytes()
    assert out[0, ~keep].tobytes() == vs.data[0, ~keep].tobytes()


def test_fuse_values_gradient():
    rng = np.random.default_rng(1)
    vo = Tensor(rng.normal(size=(1, 6, 3)), requires_grad=True, dtype=np.float64)
    vs = Tensor(rng.normal(size=(1, 6, 3)), requires_grad=True, dtype=np.float64)
    m = np.array([[0, 1, 0.25, 0.5, 1, 0]])
    w = rng.normal(size=(1, 6, 3))
    assert nx.gradcheck(lambda: (suppress.fuse_values(vo, vs, m) * w).sum(), [vo, vs], h=1e-6) < 1e-4


def test_fresh_adapter_reproduces_reference():
    den = Denoiser(seed=0).freeze()
    ad = suppress.SuppressAdapter(den)
    pair = toy_pairs(1)[0]
    eps = np.random.default_rng(2).standard_normal(pair.y_w.shape).astype(np.float32)
    assert suppress.implicit_reward(pair.y_w, pair.tokens, 300, eps, ad, den) == 0.0
    assert suppress.dpo_loss(pair, 300, eps, ad, den) == pytest.approx(math.log(2), abs=1e-6)
    ad.gate = 0.0
    assert suppress.implicit_reward(pair.y_l, pair.tokens, 300, eps, ad, den) == 0.0


def test_adapter_state_round_trip():
    den = Denoiser(seed=0)
    ad = suppress.SuppressAdapter(den)
    ad.safe_ctx.data[:] = 0.5
    back = suppress.SuppressAdapter.from_state_dict(ad.state_dict())
    assert back.checksum() == ad.checksum()


@pytest.mark.parametrize("seed", range(3))
def test_dpo_composite_gradient(seed):
    loss, ad = dpo_setup(seed)
    assert directional_check(loss, ad.parameters(), seed) < 1e-4


def test_train_suppress_rejects_empty():
    with pytest.raises(ValueError):
        suppress.train_suppress(Denoiser(0), [])


def test_train_suppress_moves_only_adapter():
    den = Denoiser(seed=0).freeze()
    before = den.checksum()
    ad, hist = suppress.train_suppress(den, toy_pairs(8), epochs=2, lr=1e-3, batch_size=4)
    assert den.checksum() == before
    assert len(hist) == 2 and all(np.isfinite(h["loss"]) for h in hist)
    assert all(not p.requires_grad for p in ad.parameters())
