"""Toy text-conditioned pixel-space diffusion model with an observable attention block."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from . import vocab
from .numerics import Tensor

log = logging.getLogger(__name__)

T_DEFAULT = 1000
IMAGE_SIZE = 16
CHANNELS = 3
GRID = 8  # attention resolution
D_TEXT = 32
D_ATTN = 32
WIDTH_HI = 16  # channels at 16×16
WIDTH = 64  # channels at 8×8
SELF_LOCALITY = 1.0  # σ (in grid cells) of the fixed distance penalty on self-attention logits

SCHEDULES = {"linear": (1e-4, 2e-2), "scaled_linear": (0.00085, 0.012), "cosine": (0.0, 0.999)}
COSINE_OFFSET = 0.008


# -- noise schedule ---------------------------------------------------------------------
@dataclass
class NoiseSchedule:
    """β_t for t = 1..T.

    ``kind``: "linear", "scaled_linear" (linear in √β) or "cosine"
    (ᾱ_t ∝ cos²; ``beta_end`` then caps β).
    """
    T: int = T_DEFAULT
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kind: str = "linear"
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "linear":
            betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        elif self.kind == "scaled_linear":
            betas = np.linspace(np.sqrt(self.beta_start), np.sqrt(self.beta_end), self.T, dtype=np.float64) ** 2
        elif self.kind == "cosine":
            s = COSINE_OFFSET
            f = np.cos((np.arange(self.T + 1) / self.T + s) / (1 + s) * np.pi / 2) ** 2
            betas = np.clip(1.0 - f[1:] / f[:-1], self.beta_start, self.beta_end)
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        # index 0 is the clean image
        self.betas = np.concatenate([[0.0], betas])
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Strided decreasing subsequence T, T - T/steps, ..., T/steps."""
        if steps < 1 or self.T % steps:
            raise ValueError(f"steps={steps} must divide T={self.T}")
        stride = self.T // steps
        return list(range(self.T, 0, -stride))


    @classmethod
    def named(cls, kind: str, T: int = T_DEFAULT) -> "NoiseSchedule":
        if kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {kind!r}; choose from {sorted(SCHEDULES)}")
        lo, hi = SCHEDULES[kind]
        return cls(T=T, beta_start=lo, beta_end=hi, kind=kind)


DEFAULT_SCHEDULE = NoiseSchedule()


def _locality_bias(grid: int = GRID, sigma: float = SELF_LOCALITY) -> np.ndarray:
    yy, xx = np.divmod(np.arange(grid * grid), grid)
    d2 = (yy[:, None] - yy[None, :]) ** 2 + (xx[:, None] - xx[None, :]) ** 2
    return (-d2 / (2.0 * sigma ** 2)).astype(np.float32)


LOCALITY_BIAS = _locality_bias()


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T}]: {t}")
    return t


def forward_noise(x0: np.ndarray, t, eps: np.ndarray,
                  schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` may be a scalar or per-sample array."""
    t = _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    dtype = np.result_type(x0, np.float32)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(dtype, copy=False)


def recover_x0(z_t: np.ndarray, t, eps: np.ndarray,
               schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    t = _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(z_t) - 1))
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


# -- prompts and attention capture ----------------------------------------------------------
@dataclass
class PromptEmbedding:
    tokens: np.ndarray  # B×L int
    c: Tensor  # B×L×D_TEXT


@dataclass
class AttentionBundle:
    """Maps captured at the attention block for one denoising step (batched)."""
    a_cross: np.ndarray  # B×HW×L
    a_self: np.ndarray  # B×HW×HW
    queries: np.ndarray  # B×HW×D_ATTN cross-attention queries
    text: np.ndarray  # B×L×D_TEXT prompt embedding
    timestep: np.ndarray  # B
    layer_resolution: tuple[int, int] = (GRID, GRID)
    a_cross_t: Tensor | None = None
    text_t: Tensor | None = None


ValueFn = Callable[[Tensor, AttentionBundle], Tensor]
# a hook sees the bundle and may return a function replacing the cross-attention value output
Hook = Callable[[AttentionBundle], Optional[ValueFn]]


def timestep_embedding(t: np.ndarray, dim: int = 32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def _patchify(h: Tensor, b: int, c: int) -> Tensor:
    return h.reshape(b, GRID, 2, GRID, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, GRID, GRID, 4 * c)


def _unpatchify(h: Tensor, b: int, c: int) -> Tensor:
    return h.reshape(b, GRID, GRID, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, IMAGE_SIZE, IMAGE_SIZE, c)


class Denoiser:
    """ε-predictor: conv stem → 2×2 patch downsample → attention block at 8×8
    (self-attention, then cross-attention to the prompt) → patch upsample with an additive skip."""

    def __init__(self, seed: int = 0, schedule: NoiseSchedule = DEFAULT_SCHEDULE):
        self.schedule = schedule
        self.trained = False
        rng = np.random.default_rng([seed, 101])

        def w(*shape, fan_in=None, scale=1.0):
            fan_in = fan_in or shape[0]
            return Tensor((rng.standard_normal(shape) * scale / np.sqrt(fan_in)).astype(np.float32), True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, np.float32), True)

        def ones(*shape):
            return Tensor(np.ones(shape, np.float32), True)

        c1, c, d = WIDTH_HI, WIDTH, D_ATTN
        self.params: dict[str, Tensor] = {
            "tok_emb": Tensor(rng.standard_normal((len(vocab.VOCAB), D_TEXT)).astype(np.float32), True),
            "pos_emb": Tensor((0.1 * rng.standard_normal((GRID * GRID, c))).astype(np.float32), True),
            "t1.w": w(32, 64), "t1.b": zeros(64),
            "t2.w": w(64, c), "t2.b": zeros(c),
            "in.w": w(3, 3, CHANNELS, c1, fan_in=9 * CHANNELS), "in.b": zeros(c1),
            "down.w": w(4 * c1, c), "down.b": zeros(c),
            "mid1.w": w(3, 3, c, c, fan_in=9 * c, scale=0.5), "mid1.b": zeros(c),
            "ln1.g": ones(c), "ln1.b": zeros(c),
            "self.q": w(c, d), "self.k": w(c, d), "self.v": w(c, d), "self.o": w(d, c, scale=0.5),
            "ln2.g": ones(c), "ln2.b": zeros(c),
            "cross.q": w(c, d), "cross.k": w(D_TEXT, d), "cross.v": w(D_TEXT, d), "cross.o": w(d, c, scale=0.5),
            "ln3.g": ones(c), "ln3.b": zeros(c),
            "ff1.w": w(c, 2 * c), "ff1.b": zeros(2 * c),
            "ff2.w": w(2 * c, c, scale=0.5), "ff2.b": zeros(c),
            "mid2.w": w(3, 3, c, c, fan_in=9 * c, scale=0.5), "mid2.b": zeros(c),
            "up.w": w(c, 4 * c1), "up.b": zeros(4 * c1),
            "out1.w": w(3, 3, c1, c1, fan_in=9 * c1), "out1.b": zeros(c1),
            "out2.w": w(c1, CHANNELS, scale=0.1), "out2.b": zeros(CHANNELS),
        }

    # -- parameter management --------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def freeze(self) -> "Denoiser":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.trained = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"denoiser.{k}": v.data for k, v in self.params.items()}
        kinds = sorted(SCHEDULES)
        out["denoiser.schedule"] = np.array([kinds.index(self.schedule.kind), self.schedule.T], np.float32)
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "Denoiser":
        schedule = DEFAULT_SCHEDULE
        if "denoiser.schedule" in state:
            code, T = (int(v) for v in state["denoiser.schedule"])
            schedule = NoiseSchedule.named(sorted(SCHEDULES)[code], T)
        model = cls(schedule=schedule)
        for k in model.params:
            model.params[k] = Tensor(np.array(state[f"denoiser.{k}"], dtype=np.float32))
        model.trained = True
        return model

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------------------------
    def embed(self, tokens) -> PromptEmbedding:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] < 1 or ids.min() < 0 or ids.max() >= len(vocab.VOCAB):
            raise ValueError("token index out of vocabulary range")
        return PromptEmbedding(ids, self.params["tok_emb"][ids])

    def __call__(self, z, t, prompt: PromptEmbedding, hook: Hook | None = None,
                 capture: bool = False) -> tuple[Tensor, AttentionBundle | None]:
        return self.forward(z, t, prompt, hook, capture)

    def forward(self, z, t, prompt: PromptEmbedding, hook: Hook | None = None,
                capture: bool = False) -> tuple[Tensor, AttentionBundle | None]:
        P = self.params
        z = z if isinstance(z, Tensor) else Tensor(z)
        b = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        c1, c, d = WIDTH_HI, WIDTH, D_ATTN

        temb = nx.silu(Tensor(timestep_embedding(t)) @ P["t1.w"] + P["t1.b"]) @ P["t2.w"] + P["t2.b"]
        h0 = nx.silu(nx.conv2d(z, P["in.w"], P["in.b"]))
        h = _patchify(h0, b, c1) @ P["down.w"] + P["down.b"]
        h = nx.silu(h + temb.reshape(b, 1, 1, c))
        h = h + nx.silu(nx.conv2d(h, P["mid1.w"], P["mid1.b"]))

        s = h.reshape(b, GRID * GRID, c) + P["pos_emb"]
        n1 = nx.layer_norm(s, P["ln1.g"], P["ln1.b"])
        qs, ks, vs = n1 @ P["self.q"], n1 @ P["self.k"], n1 @ P["self.v"]
        a_self = nx.softmax((qs @ ks.transpose(0, 2, 1)) * (1.0 / np.sqrt(d)) + LOCALITY_BIAS, axis=-1)
        s = s + (a_self @ vs) @ P["self.o"]

        n2 = nx.layer_norm(s, P["ln2.g"], P["ln2.b"])
        q = n2 @ P["cross.q"]
        text = prompt.c
        k = text @ P["cross.k"]
        v = text @ P["cross.v"]
        a_cross = nx.softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d)), axis=-1)
        v_out = a_cross @ v

        bundle = None
        if hook is not None or capture:
            bundle = AttentionBundle(
                a_cross=a_cross.data, a_self=a_self.data, queries=q.data, text=text.data,
                timestep=np.array(t), a_cross_t=a_cross, text_t=text,
            )
        if hook is not None:
            value_fn = hook(bundle)
            if value_fn is not None:
                v_out = value_fn(v_out, bundle)

        s = s + v_out @ P["cross.o"]
        n3 = nx.layer_norm(s, P["ln3.g"], P["ln3.b"])
        s = s + nx.silu(n3 @ P["ff1.w"] + P["ff1.b"]) @ P["ff2.w"] + P["ff2.b"]

        h = s.reshape(b, GRID, GRID, c)
        h = h + nx.silu(nx.conv2d(h, P["mid2.w"], P["mid2.b"]))
        u = nx.silu(_unpatchify(h @ P["up.w"] + P["up.b"], b, c1))
        o = nx.silu(nx.conv2d(u + h0, P["out1.w"], P["out1.b"]))
        eps = o @ P["out2.w"] + P["out2.b"]
        return eps, bundle


def denoise_step(model: Denoiser, z_t, t, tokens, hook: Hook | None = None):
    """One ε prediction with attention capture; returns (eps_pred array, bundle)."""
    prompt = model.embed(tokens)
    with nx.no_grad():
        eps, bundle = model.forward(z_t, t, prompt, hook=hook, capture=True)
    return eps.data, bundle


# -- sampling -----------------------------------------------------------------------------------
def initial_noise(seeds: Sequence[int]) -> np.ndarray:
    return np.stack([
        np.random.default_rng([int(s), 2024]).standard_normal((IMAGE_SIZE, IMAGE_SIZE, CHANNELS))
        for s in seeds
    ]).astype(np.float32)


def encode_prompts(prompts) -> np.ndarray:
    return np.array([vocab.encode(p) if not isinstance(p[0], (int, np.integer)) else p
                     for p in prompts], dtype=np.int64)


def ddim_sample(model: Denoiser, prompts, seeds: Sequence[int], steps: int = 50, eta: float = 0.0,
                safety=None, clip: bool = True):
    """Deterministic (η = 0) DDIM sampling of a batch.

    ``prompts`` is a list of word lists (or token id lists), one per seed.
    ``safety`` is an optional controller exposing ``start(batch)``,
    ``hook_for_step(t)`` and ``finish()``; it decides per step whether to
    detect and/or fuse suppressed values. Returns (images B×H×W×C in [-1, 1],
    per-sample trace list or None).
    """
    sched = model.schedule
    tokens = encode_prompts(prompts)
    if len(tokens) != len(seeds):
        raise ValueError("one seed per prompt required")
    prompt = model.embed(tokens)
    z = initial_noise(seeds)
    rng = np.random.default_rng([int(seeds[0]) if len(seeds) else 0, 99]) if eta > 0 else None
    ts = sched.ddim_timesteps(steps)
    if safety is not None:
        safety.start(len(seeds))
    with nx.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            hook = safety.hook_for_step(t) if safety is not None else None
            eps, _ = model.forward(z, t, prompt, hook=hook)
            eps = eps.data
            ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
            x0 = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            if clip:
                # keep ε consistent with the clipped x0 so saturated pixels are not baked in
                x0 = np.clip(x0, -1.0, 1.0)
                eps = (z - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
            if t_prev == 0:
                z = x0
                continue
            sigma = eta * np.sqrt((1 - ab_prev) / (1 - ab)) * np.sqrt(1 - ab / ab_prev)
            z = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev - sigma ** 2) * eps
            if sigma > 0:
                z = z + sigma * rng.standard_normal(z.shape)
            z = z.astype(np.float32)
    trace = safety.finish() if safety is not None else None
    return z.astype(np.float32), trace


def sample_batched(model: Denoiser, prompts, seeds, steps: int = 50, safety_factory=None,
                   batch_size: int = 100):
    """Run :func:`ddim_sample` in fixed-size chunks; a fresh controller per chunk."""
    images, traces = [], []
    for lo in range(0, len(prompts), batch_size):
        ctrl = safety_factory() if safety_factory is not None else None
        imgs, tr = ddim_sample(model, prompts[lo:lo + batch_size], seeds[lo:lo + batch_size],
                               steps=steps, safety=ctrl)
        images.append(imgs)
        if tr is not None:
            traces.extend(tr)
    return np.concatenate(images), (traces if safety_factory is not None else None)


# -- training ------------------------------------------------------------------------------------
def eps_mse(model: Denoiser, images: np.ndarray, tokens: np.ndarray, rng: np.random.Generator) -> float:
    t = rng.integers(1, model.schedule.T + 1, size=len(images))
    eps = rng.standard_normal(images.shape).astype(np.float32)
    z = forward_noise(images, t, eps, model.schedule)
    with nx.no_grad():
        pred, _ = model.forward(z, t, model.embed(tokens))
    return float(np.mean((pred.data - eps) ** 2))


def train_denoiser(images: np.ndarray, prompts, epochs: int = 60, seed: int = 0, batch_size: int = 64,
                   lr: float = 2e-3, val: tuple[np.ndarray, Sequence] | None = None,
                   callback=None, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> tuple[Denoiser, list[dict]]:
    """ε-prediction MSE training; returns the frozen model and per-epoch history."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    tokens = encode_prompts(prompts)
    model = Denoiser(seed=seed, schedule=schedule)
    params = model.parameters()
    opt = nx.Adam(params, lr=lr)
    rng = np.random.default_rng([seed, 5])
    n = len(images)
    steps_per_epoch = max(1, n // batch_size)
    total = epochs * steps_per_epoch
    history = []
    val_tokens = encode_prompts(val[1]) if val is not None else None
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for j in range(steps_per_epoch):
            idx = order[j * batch_size:(j + 1) * batch_size]
            x0 = images[idx]
            t = rng.integers(1, model.schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            z = forward_noise(x0, t, eps, model.schedule)
            opt.zero_grad()
            pred, _ = model.forward(z, t, model.embed(tokens[idx]))
            loss = nx.mse(pred, eps)
            nx.backward(loss)
            # cosine decay
            opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
            opt.step()
            step += 1
            losses.append(float(loss.data))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val is not None:
            rec["val_loss"] = eps_mse(model, val[0], val_tokens, np.random.default_rng([seed, 6]))
        history.append(rec)
        log.info("denoiser epoch %d %s", epoch, rec)
        if callback is not None:
            callback(rec)
    model.freeze()
    return model, history
