"""End-to-end experiments: safety/utility, adversarial robustness, localisation."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data, detect
from .detect import DetectHead
from .diffusion import Denoiser, ddim_sample
from .evaluation import (
    DegenerateRangeError, MethodRow, RiskClassifier, condition_consistency, fid_proxy,
    tradeoff_report, unsafe_ratio,
)
from .fileio import load_checkpoint, read_ppm, write_jsonl, write_pgm, write_ppm
from .scheduler import SafetyConfig, SafetyController
from .suppress import SuppressAdapter

log = logging.getLogger(__name__)

CHECKPOINTS = {
    "base": "base.sctl",
    "classifier": "classifier.sctl",
    "detect": "detect.sctl",
    "suppress": "suppress.sctl",
}
LOCALIZATION_STEPS = (900, 700, 500, 300)
MIN_RATIO_SAMPLES = 30


class MissingCheckpointError(FileNotFoundError):
    """A component the experiment depends on has not been trained yet."""

    def __init__(self, name: str, path: Path):
        super().__init__(f"missing {name} checkpoint: {path}")
        self.name = name
        self.path = path


@dataclass
class ExperimentConfig:
    corpus: Path
    checkpoints: Path
    out: Path
    seed: int = 0
    n_per_condition: int = 100
    n_reference: int = 200
    n_localization: int = 100
    steps: int = 50
    batch_size: int = 100
    jobs: int = 1
    safety: SafetyConfig = field(default_factory=SafetyConfig)

    def __post_init__(self):
        self.corpus, self.checkpoints, self.out = Path(self.corpus), Path(self.checkpoints), Path(self.out)
        if self.n_per_condition < MIN_RATIO_SAMPLES:
            raise ValueError(f"n_per_condition must be >= {MIN_RATIO_SAMPLES} for ratio metrics")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class Components:
    denoiser: Denoiser
    classifier: RiskClassifier
    head: DetectHead
    adapter: SuppressAdapter
    checksums: dict


def checkpoint_path(root, name: str) -> Path:
    return Path(root) / CHECKPOINTS[name]


def require(root, name: str) -> dict:
    path = checkpoint_path(root, name)
    if not path.exists():
        raise MissingCheckpointError(name, path)
    return load_checkpoint(path)


def load_components(root) -> Components:
    den = Denoiser.from_state_dict(require(root, "base"))
    clf = RiskClassifier.from_state_dict(require(root, "classifier"))
    head = DetectHead.from_state_dict(require(root, "detect"), den)
    adapter = SuppressAdapter.from_state_dict(require(root, "suppress"))
    sums = {"base": den.checksum(), "classifier": clf.checksum(), "suppress": adapter.checksum(),
            "detect": _digest(head.state_dict())}
    return Components(den, clf, head, adapter, sums)


def _digest(state: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k]).tobytes())
    return h.hexdigest()


# -- sampling --------------------------------------------------------------------------------
def _sample_chunk(args):
    ckpt_root, prompts, seeds, steps, safety_cfg = args
    comps = load_components(ckpt_root)
    ctrl = None
    if safety_cfg is not None:
        ctrl = SafetyController(comps.head, comps.adapter, safety_cfg)
    return ddim_sample(comps.denoiser, prompts, seeds, steps=steps, safety=ctrl)


def generate(cfg: ExperimentConfig, comps: Components, prompts, seeds, safety: bool):
    """Sample a prompt set in fixed chunks; chunks fan out over ``cfg.jobs`` processes."""
    chunks = [(prompts[i:i + cfg.batch_size], seeds[i:i + cfg.batch_size])
              for i in range(0, len(prompts), cfg.batch_size)]
    scfg = cfg.safety if safety else None
    if cfg.jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_sample_chunk, [(cfg.checkpoints, p, s, cfg.steps, scfg) for p, s in chunks]))
    else:
        results = []
        for p, s in chunks:
            ctrl = SafetyController(comps.head, comps.adapter, scfg) if scfg is not None else None
            results.append(ddim_sample(comps.denoiser, p, s, steps=cfg.steps, safety=ctrl))
    images = np.concatenate([r[0] for r in results])
    traces = [t for r in results for t in (r[1] or [])] if safety else None
    return images, traces


def _write_run(cfg: ExperimentConfig, name: str, prompts, seeds, images, traces) -> list[str]:
    """Persist images (and masks/traces for safety runs); returns image paths relative to out."""
    img_dir = cfg.out / "images" / name
    img_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = img_dir / f"{i:04d}.ppm"
        write_ppm(p, data.quantize(img))
        paths.append(str(p.relative_to(cfg.out)))
    if traces is not None:
        rows = []
        mask_dir = cfg.out / "masks" / name
        for i, tr in enumerate(traces):
            mask_path = None
            if tr["mask"] is not None and tr["triggered"]:
                mask_dir.mkdir(parents=True, exist_ok=True)
                mp = mask_dir / f"{i:04d}.pgm"
                write_pgm(mp, tr["mask"])
                mask_path = str(mp.relative_to(cfg.out))
            for step in tr["steps"]:
                row = {"run": i, "prompt": " ".join(prompts[i]), "seed": int(seeds[i]), **step}
                if step["detect"] and mask_path is not None:
                    row["detected_mask_path"] = mask_path
                rows.append(row)
        (cfg.out / "traces").mkdir(parents=True, exist_ok=True)
        write_jsonl(cfg.out / "traces" / f"{name}.jsonl", rows)
    return paths


def _prompt_set(cfg: ExperimentConfig, kind: str):
    prompts = data.sample_prompts(kind, cfg.n_per_condition, cfg.seed)
    offset = {"hazard": 0, "adversarial": 1, "safe": 2}[kind] * 100_000
    seeds = [cfg.seed * 1_000_000 + offset + i for i in range(len(prompts))]
    return prompts, seeds


def _paired_runs(cfg: ExperimentConfig, comps: Components, kind: str, cache: dict):
    if kind not in cache:
        prompts, seeds = _prompt_set(cfg, kind)
        off, _ = generate(cfg, comps, prompts, seeds, safety=False)
        on, traces = generate(cfg, comps, prompts, seeds, safety=True)
        paths_off = _write_run(cfg, f"{kind}_off", prompts, seeds, off, None)
        paths_on = _write_run(cfg, f"{kind}_on", prompts, seeds, on, traces)
        cache[kind] = {"prompts": prompts, "seeds": seeds, "off": off, "on": on, "traces": traces,
                       "paths": paths_off + paths_on}
    return cache[kind]


def _reference_images(cfg: ExperimentConfig) -> np.ndarray:
    recs = data.load_records(cfg.corpus)
    ev = data.load_split(cfg.corpus, "eval", recs)
    idx = np.where(~ev.hazard)[0][:cfg.n_reference]
    return ev.images[idx]


def _f(x) -> float:
    # fixed precision keeps the report byte-stable
    return round(float(x), 6)


# -- experiments --------------------------------------------------------------------------
def run_safety_experiment(cfg: ExperimentConfig, comps: Components, cache: dict | None = None) -> dict:
    """Safety off vs on: R on hazard prompts, utility proxies on safe prompts, trace audit."""
    cache = {} if cache is None else cache
    haz = _paired_runs(cfg, comps, "hazard", cache)
    safe = _paired_runs(cfg, comps, "safe", cache)
    clf = comps.classifier
    ref = _reference_images(cfg)

    flags_off = clf.flag(haz["off"])
    r_off = unsafe_ratio(haz["off"], flags=flags_off)
    r_on = unsafe_ratio(haz["on"], clf)
    fid_off = fid_proxy(safe["off"], ref, clf)
    fid_on = fid_proxy(safe["on"], ref, clf)
    cc_off = condition_consistency(safe["off"], safe["prompts"], clf)
    cc_on = condition_consistency(safe["on"], safe["prompts"], clf)

    # trigger audit against classifier flags on the safety-off twins
    trig = np.array([t["triggered"] for t in haz["traces"] + safe["traces"]])
    twin_flags = np.concatenate([flags_off, clf.flag(safe["off"])])
    untriggered = [i for i, t in enumerate(safe["traces"]) if not t["triggered"]]
    identical = all(safe["off"][i].tobytes() == safe["on"][i].tobytes() for i in untriggered)

    rows = [MethodRow("safety_off", r_off, fid_off, cc_off), MethodRow("safety_on", r_on, fid_on, cc_on)]
    try:
        h = {r.name: _f(r.H) for r in tradeoff_report(rows)}
    except DegenerateRangeError:
        h = None
    return {
        "unsafe_ratio": {"off": _f(r_off), "on": _f(r_on)},
        "fid_proxy_safe": {"off": _f(fid_off), "on": _f(fid_on)},
        "condition_consistency_safe": {"off": _f(cc_off), "on": _f(cc_on)},
        "h_score": h,
        "trigger_rate": {"hazard": _f(np.mean(trig[:len(haz["traces"])])),
                         "safe": _f(np.mean(trig[len(haz["traces"]):]))},
        "trigger_flag_agreement": _f(np.mean(trig == twin_flags)),
        "untriggered_safe_identical": bool(identical),
        "n": len(haz["prompts"]),
    }


def run_robustness_experiment(cfg: ExperimentConfig, comps: Components, cache: dict | None = None) -> dict:
    """Decoy-only prompts: R with safety off and on, and how often the trigger fired."""
    cache = {} if cache is None else cache
    adv = _paired_runs(cfg, comps, "adversarial", cache)
    if any("hazard" in p for p in adv["prompts"]):
        raise ValueError("adversarial prompts must not carry the hazard token")
    clf = comps.classifier
    trig = np.array([t["triggered"] for t in adv["traces"]])
    flags_off = clf.flag(adv["off"])
    return {
        "unsafe_ratio": {"off": _f(unsafe_ratio(adv["off"], flags=flags_off)),
                         "on": _f(unsafe_ratio(adv["on"], clf))},
        "trigger_rate": _f(trig.mean()),
        "trigger_rate_on_flagged": _f(trig[flags_off].mean()) if flags_off.any() else None,
        "n": len(adv["prompts"]),
    }


def run_localization_experiment(cfg: ExperimentConfig, comps: Components) -> dict:
    """Held-out mIoU at fixed timesteps plus the window-accumulated mask."""
    recs = data.load_records(cfg.corpus)
    ev = data.load_split(cfg.corpus, "eval", recs)
    idx = np.where(ev.hazard)[0][:cfg.n_localization]
    if len(idx) == 0:
        raise ValueError("no held-out hazard scenes for localisation")
    held = ev.subset(idx)
    masks = data.downsample_mask(held.masks)
    table = {}
    for t in LOCALIZATION_STEPS:
        table[str(t)] = _f(detect.evaluate_miou(comps.head, comps.denoiser, held.images, held.tokens,
                                                masks, t, seed=cfg.seed, theta=cfg.safety.theta_bin))
    window = window_steps(cfg)
    acc = detect.evaluate_miou(comps.head, comps.denoiser, held.images, held.tokens, masks, window,
                               seed=cfg.seed, theta=cfg.safety.theta_bin)
    return {"miou": table, "miou_window": _f(acc), "window_steps": window, "n": int(len(idx))}


def window_steps(cfg: ExperimentConfig) -> list[int]:
    """The strided DDIM timesteps that fall inside the detection window."""
    stride = cfg.safety.T // cfg.steps
    return [t for t in range(cfg.safety.T, 0, -stride) if cfg.safety.t_switch <= t <= cfg.safety.t_start]


def run_all(cfg: ExperimentConfig) -> dict:
    """Run all three experiments and write ``report.json`` under ``cfg.out``."""
    comps = load_components(cfg.checkpoints)
    cfg.out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    report = {
        "config": {
            "seed": cfg.seed, "n_per_condition": cfg.n_per_condition, "n_reference": cfg.n_reference,
            "steps": cfg.steps, "safety": asdict(cfg.safety),
        },
        "checkpoints": comps.checksums,
        "safety": run_safety_experiment(cfg, comps, cache),
        "robustness": run_robustness_experiment(cfg, comps, cache),
        "localization": run_localization_experiment(cfg, comps),
    }
    report["images"] = sorted(p for kind in sorted(cache) for p in cache[kind]["paths"])
    report["traces"] = sorted(str(p.relative_to(cfg.out)) for p in (cfg.out / "traces").glob("*.jsonl"))
    path = cfg.out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("report written to %s", path)
    return report


def verify_images(out, report: dict) -> bool:
    """Every image the report references exists and reads back as a PPM."""
    out = Path(out)
    for rel in report["images"]:
        img = read_ppm(out / rel)
        if img.shape != (data.IMAGE_SIZE, data.IMAGE_SIZE, 3):
            return False
    return True
