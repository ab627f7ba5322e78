"""Timestep-windowed safety control: detect in [t_switch, t_start], suppress below t_switch."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .detect import THETA_BIN, DetectHead, binarize, norm_map
from .diffusion import AttentionBundle
from .numerics import ContractError
from .suppress import DEFAULT_BETA, SuppressAdapter, fuse_values

TOP_FRACTION = 0.05


@dataclass
class SafetyConfig:
    t_start: int = 800
    t_switch: int = 600
    trigger_threshold: float = 0.5
    theta_bin: float = THETA_BIN
    beta: float = DEFAULT_BETA
    lambda_dice: float = 1.0
    lambda_l1: float = 1.0
    T: int = 1000

    def __post_init__(self):
        if not self.T >= self.t_start > self.t_switch >= 0:
            raise ValueError(f"need T >= t_start > t_switch >= 0, got {self.T}, {self.t_start}, {self.t_switch}")
        for name in ("trigger_threshold", "theta_bin"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_trigger(mask, tau: float = 0.5) -> bool:
    """Fires when the mean of the top 5% of mask values exceeds ``tau``."""
    m = np.asarray(getattr(mask, "m", mask), dtype=np.float64).reshape(-1)
    k = max(1, int(round(TOP_FRACTION * m.size)))
    top = np.partition(m, m.size - k)[m.size - k:]
    return bool(top.mean() > tau)


def resample_nearest(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of (..., h, w) maps to ``shape``."""
    h, w = mask.shape[-2:]
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return mask[..., rows[:, None], cols[None, :]]


@dataclass
class SuppressionAudit:
    """Values seen at one suppressed step (kept only when auditing)."""
    t: int
    v_orig: np.ndarray
    v_new: np.ndarray
    mask: np.ndarray  # B×HW binary


class SafetyController:
    """Per-run state machine driven by the sampler, one instance per batch run."""

    def __init__(self, head: DetectHead, adapter: SuppressAdapter, config: SafetyConfig | None = None,
                 audit: bool = False):
        self.head = head
        self.adapter = adapter
        self.config = config or SafetyConfig()
        self.audit = audit
        self.start(0)

    # -- run lifecycle ---------------------------------------------------------------
    def start(self, batch: int) -> None:
        self.batch = batch
        self._acc: np.ndarray | None = None
        self._n_detect = 0
        self.mask: np.ndarray | None = None  # accumulated, normalised, frozen at t_switch
        self.fusion_mask: np.ndarray | None = None  # binarised on the fusion grid
        self.triggered = np.zeros(batch, dtype=bool)
        self.trigger_evaluated = False
        self._last_t: int | None = None
        self.rows: list[list[dict]] = [[] for _ in range(batch)]
        self.audits: list[SuppressionAudit] = []

    def hook_for_step(self, t: int):
        """Called by the sampler before each denoiser call; returns a hook or None."""
        t = int(t)
        if self._last_t is not None and t >= self._last_t:
            raise ContractError(f"timesteps must decrease: {t} after {self._last_t}")
        self._last_t = t
        cfg = self.config
        if t > cfg.t_start:
            self._log(t, detected=False, suppressed=np.zeros(self.batch, bool))
            return None
        if t < cfg.t_switch:
            if not self.trigger_evaluated:
                # the strided schedule skipped t_switch itself
                self._finalize()
            if not self.triggered.any():
                self._log(t, detected=False, suppressed=np.zeros(self.batch, bool))
                return None
        return lambda bundle: self.on_step(t, bundle)

    def on_step(self, t: int, bundle: AttentionBundle):
        """Detect / evaluate / suppress for one step; returns a value function or None."""
        cfg = self.config
        detected = False
        if cfg.t_switch <= t <= cfg.t_start and not self.trigger_evaluated:
            m = self.head.masks(bundle)
            self._acc = m.astype(np.float64) if self._acc is None else self._acc + m
            self._n_detect += 1
            detected = True
        if t <= cfg.t_switch and not self.trigger_evaluated:
            self._finalize()
        if t <= cfg.t_switch and self.triggered.any():
            grid = bundle.layer_resolution
            fmask = self.fusion_mask
            if fmask.shape[-2:] != grid:
                fmask = resample_nearest(fmask, grid)
            flat = fmask.reshape(self.batch, -1).astype(np.float32)
            self._log(t, detected, self.triggered.copy())

            def value_fn(v_orig, bdl):
                v_safe = self.adapter.v_safe(v_orig, bdl)
                v_new = fuse_values(v_orig, v_safe, flat)
                if self.audit:
                    self.audits.append(SuppressionAudit(t, v_orig.data.copy(), v_new.data.copy(), flat.copy()))
                return v_new

            return value_fn
        self._log(t, detected, np.zeros(self.batch, bool))
        return None

    def _finalize(self) -> None:
        """Freeze the accumulated mask and evaluate the trigger once."""
        cfg = self.config
        self.trigger_evaluated = True
        if self._acc is None:
            self.mask = None
            return
        self.mask = norm_map(self._acc / self._n_detect)
        self.triggered = np.array([evaluate_trigger(m, cfg.trigger_threshold) for m in self.mask])
        fm = binarize(self.mask, cfg.theta_bin)
        fm[~self.triggered] = False
        self.fusion_mask = fm

    def _log(self, t: int, detected: bool, suppressed: np.ndarray) -> None:
        for i in range(self.batch):
            self.rows[i].append({
                "t": t,
                "detect": bool(detected),
                "trigger": bool(self.triggered[i]),
                "suppressed": bool(suppressed[i]),
            })

    def finish(self) -> list[dict]:
        if not self.trigger_evaluated:
            self._finalize()
        out = []
        for i in range(self.batch):
            out.append({
                "triggered": bool(self.triggered[i]),
                "mask": None if self.mask is None else self.mask[i],
                "steps": self.rows[i],
            })
        return out
