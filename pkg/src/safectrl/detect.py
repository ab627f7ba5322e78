"""Attention-guided risk localisation: map fusion, detection loss, few-shot training."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .diffusion import (
    D_ATTN, D_TEXT, GRID, AttentionBundle, Denoiser, encode_prompts, forward_noise,
)
from .numerics import Tensor

log = logging.getLogger(__name__)

THETA_BIN = 0.5
DICE_SMOOTH = 1.0
# salience floor: a fused risk map whose raw range (attention mass) stays at or below
# this is treated as constant, i.e. no salient region; calibrated on held-out scenes
MIN_SPAN = 0.5


@dataclass
class RiskMask:
    m: np.ndarray  # H×W in [0, 1]
    timestep: int | None = None

    def binarized(self, theta: float = THETA_BIN) -> np.ndarray:
        return binarize(self.m, theta)


def norm_map(x: np.ndarray, min_span: float = 0.0) -> np.ndarray:
    """Min-max normalise each map over its last two axes.

    Maps whose range is ``<= min_span`` count as constant and become 0.
    """
    x = np.asarray(x, dtype=np.float32)
    lo = x.min(axis=(-2, -1), keepdims=True)
    hi = x.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    ok = span > min_span
    safe = np.where(ok, span, 1.0)
    return np.where(ok, (x - lo) / safe, 0.0).astype(np.float32)


def binarize(m: np.ndarray, theta: float = THETA_BIN) -> np.ndarray:
    return np.asarray(m) >= theta


def refine(a_col: np.ndarray, a_self: np.ndarray) -> np.ndarray:
    """Self-attention refinement A_self·a (equivalently aᵀ·A_selfᵀ).

    Each position averages the risk column over the positions it attends to,
    so a one-hot at i returns column i of A_self. Works for one map
    (HW,), (HW,HW) or batched (B,HW), (B,HW,HW).
    """
    return np.einsum("...ji,...i->...j", a_self, a_col)


def fuse_attention_maps(bundle: AttentionBundle, risk_token_index: int | None = None,
                        head: "DetectHead | None" = None, sample: int = 0,
                        min_span: float = 0.0) -> RiskMask:
    """Risk mask for one sample: the risk column of the cross map, refined by self-attention.

    ``risk_token_index`` picks a prompt column of ``bundle.a_cross``; with a
    ``head`` (and index None or L) the learned risk pseudo-token column is used.
    """
    a_cross = bundle.a_cross[sample]
    L = a_cross.shape[1]
    if head is not None and (risk_token_index is None or risk_token_index == L):
        col = head.risk_column(bundle.queries[sample:sample + 1], bundle.text[sample:sample + 1],
                               head.w_k)[0]
        min_span = max(min_span, head.min_span)
    else:
        if risk_token_index is None or not 0 <= risk_token_index < L:
            raise IndexError(f"risk token index {risk_token_index} out of range for L={L}")
        col = a_cross[:, risk_token_index]
    h, w = bundle.layer_resolution
    refined = refine(col, bundle.a_self[sample]).reshape(h, w)
    return RiskMask(norm_map(refined, min_span), int(np.asarray(bundle.timestep).reshape(-1)[sample]))


def fuse_batch(a_col: np.ndarray, a_self: np.ndarray, res: tuple[int, int] = (GRID, GRID),
               min_span: float = 0.0) -> np.ndarray:
    """Vectorised mask fusion: (B,HW), (B,HW,HW) → normalised (B,H,W)."""
    return norm_map(refine(a_col, a_self).reshape((-1,) + tuple(res)), min_span)


def accumulate_masks(masks: Sequence[RiskMask | np.ndarray]) -> RiskMask:
    """Mean over the window, re-normalised."""
    if not masks:
        raise ValueError("accumulate_masks needs at least one mask")
    arrs = [m.m if isinstance(m, RiskMask) else np.asarray(m) for m in masks]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError("masks must share a resolution")
    return RiskMask(norm_map(np.mean(np.stack(arrs), axis=0)))


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of two boolean masks; 1 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("miou shape mismatch")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


# -- differentiable pieces ---------------------------------------------------------------
def _norm_tensor(x: Tensor, min_span: float = 0.0) -> Tensor:
    """Tensor version of :func:`norm_map` for a batch of flat maps (B, HW)."""
    lo = nx.tmin(x, axis=1, keepdims=True)
    hi = nx.tmax(x, axis=1, keepdims=True)
    span = hi.data - lo.data
    const = (span <= min_span).reshape(-1)
    span_t = nx.where(span > min_span, hi - lo, 1.0)
    out = (x - lo) / span_t
    if const.any():
        out = nx.where(np.broadcast_to(const[:, None], out.shape), 0.0, out)
    return out


def detection_loss(a_cross_risk, m_t, m_gt, lambda_dice: float = 1.0, lambda_l1: float = 1.0,
                   batched: bool = False) -> Tensor:
    """λ_dice·Dice(raw risk cross-attention, gt) + λ_l1·mean|M_t − gt|.

    Inputs are H×W maps (or B×H×W with ``batched``); arrays are accepted.
    """
    p = a_cross_risk if isinstance(a_cross_risk, Tensor) else Tensor(np.asarray(getattr(a_cross_risk, "m", a_cross_risk)))
    m = m_t if isinstance(m_t, Tensor) else Tensor(np.asarray(getattr(m_t, "m", m_t), dtype=p.dtype))
    g = np.asarray(getattr(m_gt, "m", m_gt), dtype=p.dtype)
    if p.shape != g.shape or m.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape}, {m.shape}, {g.shape}")
    if not batched:
        p = p.reshape((1,) + p.shape)
        m = m.reshape((1,) + m.shape)
        g = g.reshape((1,) + g.shape)
    b = p.shape[0]
    p2 = p.reshape(b, -1)
    g2 = g.reshape(b, -1)
    inter = (p2 * g2).sum(axis=1)
    denom = p2.sum(axis=1) + g2.sum(axis=1)
    l_dice = (1.0 - (inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()
    diff = m.reshape(b, -1) - g2
    l_l1 = nx.where(diff.data >= 0, diff, -diff).mean()
    return l_dice * lambda_dice + l_l1 * lambda_l1


# -- the detect head -------------------------------------------------------------------------
class DetectHead:
    """A trainable risk pseudo-token (text space) plus a log-temperature."""

    min_span = MIN_SPAN

    def __init__(self, seed: int = 0, w_k: np.ndarray | None = None):
        rng = np.random.default_rng([seed, 404])
        self.q_risk = Tensor((rng.standard_normal(D_TEXT) * 0.1).astype(np.float32), True)
        self.log_temp = Tensor(np.zeros(1, np.float32), True)
        self.w_k = w_k  # frozen key projection of the host denoiser

    def parameters(self) -> list[Tensor]:
        return [self.q_risk, self.log_temp]

    def attach(self, denoiser: Denoiser) -> "DetectHead":
        self.w_k = denoiser.params["cross.k"].data
        return self

    def freeze(self) -> "DetectHead":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"detect.q_risk": self.q_risk.data, "detect.log_temp": self.log_temp.data}

    @classmethod
    def from_state_dict(cls, state, denoiser: Denoiser | None = None) -> "DetectHead":
        head = cls()
        head.q_risk = Tensor(np.array(state["detect.q_risk"], dtype=np.float32))
        head.log_temp = Tensor(np.array(state["detect.log_temp"], dtype=np.float32))
        if denoiser is not None:
            head.attach(denoiser)
        return head

    def _extended_logits(self, queries: np.ndarray, text: np.ndarray, w_k: np.ndarray) -> Tensor:
        keys = Tensor(text @ w_k)  # B×L×d, constant
        k_risk = (self.q_risk.reshape(1, D_TEXT) @ Tensor(w_k)).reshape(1, 1, D_ATTN)
        k_all = nx.concat([keys, k_risk + np.zeros((keys.shape[0], 1, D_ATTN), np.float32)], axis=1)
        logits = Tensor(queries) @ k_all.transpose(0, 2, 1)
        return logits * (nx.exp(self.log_temp) * (1.0 / np.sqrt(D_ATTN)))

    def risk_column_t(self, queries: np.ndarray, text: np.ndarray, w_k: np.ndarray | None = None) -> Tensor:
        """Differentiable risk column (B, HW) of softmax over prompt tokens + risk token."""
        w_k = self.w_k if w_k is None else w_k
        a_ext = nx.softmax(self._extended_logits(queries, text, w_k), axis=-1)
        L1 = a_ext.shape[-1]
        return a_ext[:, :, L1 - 1]

    def risk_column(self, queries, text, w_k=None) -> np.ndarray:
        with nx.no_grad():
            return self.risk_column_t(queries, text, w_k).data

    def masks(self, bundle: AttentionBundle) -> np.ndarray:
        """Normalised risk masks (B, H, W) for a captured bundle."""
        col = self.risk_column(bundle.queries, bundle.text)
        return fuse_batch(col, bundle.a_self, bundle.layer_resolution, self.min_span)


def _capture(denoiser: Denoiser, images, tokens, t, eps) -> AttentionBundle:
    z = forward_noise(images, t, eps, denoiser.schedule)
    with nx.no_grad():
        _, bundle = denoiser.forward(z, t, denoiser.embed(tokens), capture=True)
    return bundle


def head_loss(head: DetectHead, bundle: AttentionBundle, m_gt: np.ndarray,
              lambda_dice: float = 1.0, lambda_l1: float = 1.0) -> Tensor:
    b = m_gt.shape[0]
    col = head.risk_column_t(bundle.queries, bundle.text)
    refined = Tensor(bundle.a_self) @ col.reshape(b, -1, 1)
    m_t = _norm_tensor(refined.reshape(b, -1), head.min_span)
    return detection_loss(col.reshape(m_gt.shape), m_t.reshape(m_gt.shape), m_gt,
                          lambda_dice, lambda_l1, batched=True)


def evaluate_miou(head: DetectHead, denoiser: Denoiser, images: np.ndarray, tokens,
                  masks_lo: np.ndarray, t: int | Sequence[int], seed: int = 0,
                  theta: float = THETA_BIN, batch: int = 100) -> float:
    """Mean IoU of binarised masks on held-out images noised to ``t``.

    With a sequence of timesteps the per-step masks are accumulated (one
    shared noise draw per image, as along a deterministic trajectory).
    """
    tokens = encode_prompts(tokens)
    ts = [t] if np.isscalar(t) else list(t)
    rng = np.random.default_rng([seed, 405])
    eps_all = rng.standard_normal(images.shape).astype(np.float32)
    scores = []
    for lo in range(0, len(images), batch):
        sl = slice(lo, lo + batch)
        per_t = [head.masks(_capture(denoiser, images[sl], tokens[sl], tt, eps_all[sl])) for tt in ts]
        acc = norm_map(np.mean(per_t, axis=0)) if len(per_t) > 1 else per_t[0]
        scores.extend(miou(binarize(m, theta), g) for m, g in zip(acc, masks_lo[sl]))
    return float(np.mean(scores))


def train_detect(denoiser: Denoiser, images: np.ndarray, tokens, masks_lo: np.ndarray,
                 window: tuple[int, int] = (600, 800), epochs: int = 30, seed: int = 0,
                 lr: float = 1e-3, steps_per_epoch: int = 8, lambda_dice: float = 1.0,
                 lambda_l1: float = 1.0, heldout=None) -> tuple[DetectHead, list[dict]]:
    """Few-shot training of the risk token; only the head's parameters move.

    ``masks_lo`` are ground-truth masks at attention resolution (N×8×8).
    ``heldout`` is an optional (images, tokens, masks_lo) triple scored each epoch.
    """
    if len(images) == 0:
        raise ValueError("empty annotation set")
    tokens = encode_prompts(tokens)
    head = DetectHead(seed).attach(denoiser)
    opt = nx.Adam(head.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 406])
    lo_t, hi_t = min(window), max(window)
    gt = masks_lo.astype(np.float32)
    history = []
    for epoch in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            t = rng.integers(lo_t, hi_t + 1, size=len(images))
            eps = rng.standard_normal(images.shape).astype(np.float32)
            bundle = _capture(denoiser, images, tokens, t, eps)
            opt.zero_grad()
            loss = head_loss(head, bundle, gt, lambda_dice, lambda_l1)
            nx.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if heldout is not None:
            rec["heldout_miou"] = evaluate_miou(head, denoiser, heldout[0], heldout[1], heldout[2],
                                                t=(lo_t + hi_t) // 2, seed=seed)
        history.append(rec)
        log.info("detect epoch %d %s", epoch, rec)
    return head.freeze(), history
