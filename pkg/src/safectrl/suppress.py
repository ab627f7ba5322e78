"""Suppress module: a value-path adapter trained with latent DPO, applied by masked fusion."""
from __future__ import annotations

import hashlib
import logging
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import PreferencePair
from .diffusion import D_ATTN, AttentionBundle, Denoiser, encode_prompts, forward_noise
from .numerics import Tensor

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.1
SUPPRESS_WINDOW = (1, 600)


def fuse_values(v_orig, v_safe, mask):
    """V_orig ⊙ (1 − M) + V_safe ⊙ M with the mask broadcast over the channel axis.

    Entries where M is exactly 0 (or 1) are copied from V_orig (or V_safe)
    bit-for-bit; fractional entries are blended.
    """
    is_t = isinstance(v_orig, Tensor) or isinstance(v_safe, Tensor)
    vo = v_orig.data if isinstance(v_orig, Tensor) else np.asarray(v_orig)
    vs = v_safe.data if isinstance(v_safe, Tensor) else np.asarray(v_safe)
    if vo.shape != vs.shape:
        raise ValueError(f"value shapes differ: {vo.shape} vs {vs.shape}")
    m = np.asarray(getattr(mask, "m", mask), dtype=vo.dtype)
    if m.ndim == vo.ndim - 1:
        m = m[..., None]
    try:
        m = np.broadcast_to(m, vo.shape)
    except ValueError:
        raise ValueError(f"mask shape {np.shape(mask)} does not broadcast to {vo.shape}") from None
    if not is_t:
        blend = vo * (1 - m) + vs * m
        return np.where(m == 0, vo, np.where(m == 1, vs, blend))
    a = v_orig if isinstance(v_orig, Tensor) else Tensor(vo)
    b = v_safe if isinstance(v_safe, Tensor) else Tensor(vs)
    blend = a * (1 - m) + b * m
    return nx.where(m == 0, a, nx.where(m == 1, b, blend))


class SuppressAdapter:
    """Parallel value branch: V_safe = g·A_cross·(c W_safe + s) + (1 − g)·V_orig.

    W_safe starts as a copy of the host's value projection and s at zero, so
    the adapter initially reproduces V_orig; g = 0 turns it off exactly.
    """

    def __init__(self, denoiser: Denoiser | None = None, seed: int = 0):
        w_v = denoiser.params["cross.v"].data.copy() if denoiser is not None else np.zeros((32, D_ATTN), np.float32)
        self.w_v = Tensor(w_v, True)
        self.safe_ctx = Tensor(np.zeros(D_ATTN, np.float32), True)
        self.gate = 1.0
        self.seed = seed

    def parameters(self) -> list[Tensor]:
        return [self.safe_ctx, self.w_v]

    def freeze(self) -> "SuppressAdapter":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"suppress.w_v": self.w_v.data, "suppress.safe_ctx": self.safe_ctx.data,
                "suppress.gate": np.array([self.gate], np.float32)}

    @classmethod
    def from_state_dict(cls, state) -> "SuppressAdapter":
        ad = cls()
        ad.w_v = Tensor(np.array(state["suppress.w_v"], dtype=np.float32))
        ad.safe_ctx = Tensor(np.array(state["suppress.safe_ctx"], dtype=np.float32))
        ad.gate = float(state["suppress.gate"][0])
        return ad

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self.state_dict().values():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def v_safe(self, v_orig: Tensor, bundle: AttentionBundle) -> Tensor:
        if self.gate == 0.0:
            return v_orig
        a_cross = bundle.a_cross_t if bundle.a_cross_t is not None else Tensor(bundle.a_cross)
        text = bundle.text_t if bundle.text_t is not None else Tensor(bundle.text)
        branch = a_cross @ (text @ self.w_v + self.safe_ctx)
        if self.gate == 1.0:
            return branch
        return branch * self.gate + v_orig * (1.0 - self.gate)

    def full_hook(self, bundle: AttentionBundle):
        """Hook applying the adapter everywhere (mask ≡ 1), as used during DPO training."""
        return self.v_safe


# -- rewards and loss -------------------------------------------------------------------------
def _sq_err(pred: Tensor, eps: np.ndarray) -> Tensor:
    diff = pred - eps
    return (diff * diff).reshape(pred.shape[0], -1).sum(axis=1)


def _predict(denoiser: Denoiser, z, t, tokens, adapter: SuppressAdapter | None):
    hook = adapter.full_hook if adapter is not None else None
    eps, _ = denoiser.forward(z, t, denoiser.embed(tokens), hook=hook)
    return eps


def implicit_reward(y: np.ndarray, tokens, t, eps: np.ndarray, adapter: SuppressAdapter | None,
                    reference: Denoiser, grad: bool = False):
    """r = ‖ε − ε_ref(z_t)‖² − ‖ε − ε_θ(z_t)‖² per image (batched over the leading axis).

    The policy is ``reference`` with ``adapter`` on the value path.
    """
    single = np.ndim(y) == 3
    if single:
        y, eps = y[None], eps[None]
    tokens = encode_prompts(tokens if not single else [tokens])
    z = forward_noise(y, t, eps, reference.schedule)
    with nx.no_grad():
        ref_err = _sq_err(_predict(reference, z, t, tokens, None), eps).data
    if grad:
        pol_err = _sq_err(_predict(reference, z, t, tokens, adapter), eps)
        r = Tensor(ref_err) - pol_err
    else:
        with nx.no_grad():
            pol_err = _sq_err(_predict(reference, z, t, tokens, adapter), eps).data
        r = ref_err - pol_err
    if single and not grad:
        return float(r[0])
    return r


def dpo_from_rewards(r_w, r_l, beta: float = DEFAULT_BETA):
    """−log σ(β(r_w − r_l)) = softplus(−β Δr); scalar floats or Tensors."""
    if isinstance(r_w, Tensor) or isinstance(r_l, Tensor):
        return nx.softplus((r_w - r_l) * (-beta))
    x = -beta * (np.asarray(r_w, dtype=np.float64) - np.asarray(r_l, dtype=np.float64))
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def dpo_loss(pair: PreferencePair, t, eps, adapter: SuppressAdapter | None, reference: Denoiser,
             beta: float = DEFAULT_BETA) -> float:
    r_w = implicit_reward(pair.y_w, pair.tokens, t, eps, adapter, reference)
    r_l = implicit_reward(pair.y_l, pair.tokens, t, eps, adapter, reference)
    return float(dpo_from_rewards(r_w, r_l, beta))


def _stack(pairs: Sequence[PreferencePair]):
    return (np.stack([p.y_w for p in pairs]), np.stack([p.y_l for p in pairs]),
            encode_prompts([p.tokens for p in pairs]))


def batch_dpo_loss(adapter, reference, y_w, y_l, tokens, t, eps, beta, grad=True):
    """Mean DPO loss over a batch of pairs sharing (t, ε) within each pair."""
    y = np.concatenate([y_w, y_l])
    tt = np.concatenate([t, t])
    ee = np.concatenate([eps, eps])
    tok = np.concatenate([tokens, tokens])
    r = implicit_reward(y, tok, tt, ee, adapter, reference, grad=grad)
    n = len(y_w)
    if grad:
        return dpo_from_rewards(r[:n], r[n:], beta).mean(), r.data
    return float(np.mean(dpo_from_rewards(r[:n], r[n:], beta))), r


def mean_rewards(adapter, reference, pairs: Sequence[PreferencePair], seed: int = 0,
                 window=SUPPRESS_WINDOW, draws: int = 4) -> tuple[float, float, float]:
    """(mean r(y_w), mean r(y_l), mean DPO loss) with seeded (t, ε) draws."""
    y_w, y_l, tokens = _stack(pairs)
    rng = np.random.default_rng([seed, 505])
    rw, rl, losses = [], [], []
    for _ in range(draws):
        t = rng.integers(window[0], window[1] + 1, size=len(pairs))
        eps = rng.standard_normal(y_w.shape).astype(np.float32)
        loss, r = batch_dpo_loss(adapter, reference, y_w, y_l, tokens, t, eps, DEFAULT_BETA, grad=False)
        rw.append(r[:len(pairs)])
        rl.append(r[len(pairs):])
        losses.append(loss)
    return float(np.mean(rw)), float(np.mean(rl)), float(np.mean(losses))


def train_suppress(denoiser: Denoiser, pairs: Sequence[PreferencePair], beta: float = DEFAULT_BETA,
                   epochs: int = 20, seed: int = 0, lr: float = 1e-4, batch_size: int = 8,
                   window=SUPPRESS_WINDOW) -> tuple[SuppressAdapter, list[dict]]:
    """DPO on preference pairs; only adapter parameters receive gradients."""
    if not pairs:
        raise ValueError("empty preference pair set")
    adapter = SuppressAdapter(denoiser, seed)
    opt = nx.Adam(adapter.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 506])
    y_w_all, y_l_all, tok_all = _stack(pairs)
    n = len(pairs)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses, margins = [], []
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            t = rng.integers(window[0], window[1] + 1, size=len(idx))
            eps = rng.standard_normal(y_w_all[idx].shape).astype(np.float32)
            opt.zero_grad()
            loss, r = batch_dpo_loss(adapter, denoiser, y_w_all[idx], y_l_all[idx], tok_all[idx],
                                     t, eps, beta)
            nx.backward(loss)
            opt.step()
            losses.append(float(loss.data) * len(idx))
            margins.append(float(np.sum(r[:len(idx)] - r[len(idx):])))
        rec = {"epoch": epoch, "loss": sum(losses) / n, "reward_margin": sum(margins) / n}
        history.append(rec)
        log.info("suppress epoch %d %s", epoch, rec)
    return adapter.freeze(), history
