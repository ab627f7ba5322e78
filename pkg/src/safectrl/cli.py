"""`safectrl` command line: data generation, training, sampling, evaluation, H-Score."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import data, detect, vocab
from .diffusion import Denoiser, NoiseSchedule, ddim_sample, train_denoiser
from .evaluation import (
    CSVFormatError, DegenerateRangeError, RiskClassifier, read_method_csv, round3, tradeoff_report,
    train_risk_classifier, write_tradeoff_csv,
)
from .fileio import read_jsonl, save_checkpoint, write_jsonl, write_pgm, write_ppm
from .numerics import NumericError
from .pipeline import (
    CHECKPOINTS, ExperimentConfig, MissingCheckpointError, checkpoint_path, require, run_all,
)
from .scheduler import SafetyConfig, SafetyController
from .suppress import SuppressAdapter, mean_rewards, train_suppress

log = logging.getLogger("safectrl")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
FEWSHOT_FILE = "fewshot.jsonl"

# every key a config file may set, with its type and default
DEFAULTS: dict[str, tuple[type, object]] = {
    "corpus": (str, None),
    "checkpoints": (str, "checkpoints"),
    "out": (str, None),
    "seed": (int, 0),
    "jobs": (int, 1),
    "n_train": (int, 4000),
    "n_eval": (int, 500),
    "n_pairs": (int, 200),
    "n_pairs_heldout": (int, 50),
    "shots": (int, 10),
    "schedule": (str, "cosine"),
    "base_epochs": (int, 80),
    "base_lr": (float, 2e-3),
    "base_batch": (int, 64),
    "classifier_epochs": (int, 8),
    "detect_epochs": (int, 40),
    "detect_lr": (float, 1e-2),
    "suppress_epochs": (int, 20),
    "suppress_lr": (float, 1e-4),
    "suppress_batch": (int, 8),
    "steps": (int, 50),
    "batch_size": (int, 100),
    "n_per_condition": (int, 100),
    "n_reference": (int, 200),
    "n_localization": (int, 100),
    "t_start": (int, 800),
    "t_switch": (int, 600),
    "trigger_threshold": (float, 0.5),
    "theta_bin": (float, 0.5),
    "beta": (float, 0.1),
    "lambda_dice": (float, 1.0),
    "lambda_l1": (float, 1.0),
}


class UsageError(Exception):
    pass


class MissingDependency(Exception):
    def __init__(self, name: str, path):
        super().__init__(f"missing prerequisite {name}: {path}")
        self.name = name


# -- configuration ------------------------------------------------------------------------------
def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; unknown keys are an error."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value):
    typ = DEFAULTS[key][0]
    try:
        return typ(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < SAFECTRL_CORPUS (corpus only) < command-line flags."""
    cfg = {k: v for k, (_, v) in DEFAULTS.items()}
    if os.environ.get("SAFECTRL_CORPUS"):
        cfg["corpus"] = os.environ["SAFECTRL_CORPUS"]
    if getattr(args, "config", None):
        try:
            cfg.update(read_config(args.config))
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def safety_config(cfg: dict) -> SafetyConfig:
    try:
        return SafetyConfig(t_start=cfg["t_start"], t_switch=cfg["t_switch"],
                            trigger_threshold=cfg["trigger_threshold"], theta_bin=cfg["theta_bin"],
                            beta=cfg["beta"], lambda_dice=cfg["lambda_dice"], lambda_l1=cfg["lambda_l1"])
    except ValueError as e:
        raise UsageError(str(e)) from None


def _corpus(cfg: dict) -> Path:
    if not cfg["corpus"]:
        raise UsageError("no corpus root: pass --corpus or set SAFECTRL_CORPUS")
    root = Path(cfg["corpus"])
    if not (root / "manifest.jsonl").exists():
        raise MissingDependency("corpus", root / "manifest.jsonl")
    return root


def _need(cfg: dict, name: str) -> dict:
    try:
        return require(cfg["checkpoints"], name)
    except MissingCheckpointError as e:
        raise MissingDependency(f"{name} checkpoint", e.path) from None


def _save(cfg: dict, name: str, state: dict) -> Path:
    path = checkpoint_path(cfg["checkpoints"], name)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, state)
    print(f"wrote {path}")
    return path


# -- commands -------------------------------------------------------------------------------------
def cmd_gen_data(args, cfg) -> int:
    if not args.out:
        raise UsageError("gen-data requires --out")
    root = Path(args.out)
    manifest = data.generate_corpus(root, cfg["n_train"], cfg["n_eval"], seed=cfg["seed"])
    recs = data.load_records(root)
    shots = data.annotate_fewshot(recs, cfg["shots"], seed=cfg["seed"])
    write_jsonl(root / FEWSHOT_FILE, [{"id": r["id"], "mask_path": r["mask_path"]} for r in shots])
    print(f"manifest: {manifest}")
    print(f"few-shot annotations: {root / FEWSHOT_FILE}")
    if args.n_pairs is not None:
        for split, n in (("train", cfg["n_pairs"]), ("eval", cfg["n_pairs_heldout"])):
            path = _make_pairs(cfg, root, split, n)
            print(f"preference pairs ({split}): {path}")
    return EXIT_OK


def _make_pairs(cfg: dict, root: Path, split: str, n: int) -> Path:
    den = Denoiser.from_state_dict(_need(cfg, "base"))
    clf = RiskClassifier.from_state_dict(_need(cfg, "classifier"))
    return data.generate_preference_pairs(root, den, clf, n_pairs=n, seed=cfg["seed"],
                                          steps=cfg["steps"], split=split)


def cmd_train(args, cfg) -> int:
    return {"base": _train_base, "classifier": _train_classifier, "detect": _train_detect,
            "suppress": _train_suppress}[args.component](cfg)


def _train_base(cfg) -> int:
    root = _corpus(cfg)
    recs = data.load_records(root)
    tr, ev = data.load_split(root, "train", recs), data.load_split(root, "eval", recs)
    try:
        schedule = NoiseSchedule.named(cfg["schedule"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    model, hist = train_denoiser(tr.images, tr.tokens, epochs=cfg["base_epochs"], seed=cfg["seed"],
                                 batch_size=cfg["base_batch"], lr=cfg["base_lr"],
                                 val=(ev.images[:256], ev.tokens[:256]), schedule=schedule)
    _save(cfg, "base", model.state_dict())
    last = hist[-1]
    print(f"base: epochs={len(hist)} train_loss={last['train_loss']:.6f} val_loss={last['val_loss']:.6f}")
    return EXIT_OK


def _train_classifier(cfg) -> int:
    root = _corpus(cfg)
    recs = data.load_records(root)
    tr, ev = data.load_split(root, "train", recs), data.load_split(root, "eval", recs)
    clf = train_risk_classifier(tr.images, tr.hazard, tr.labels, seed=cfg["seed"],
                                epochs=cfg["classifier_epochs"])
    _save(cfg, "classifier", clf.state_dict())
    flag_acc = float(np.mean(clf.flag(ev.images) == ev.hazard))
    cond_acc = float(np.mean(clf.predict_condition(ev.images) == ev.labels))
    print(f"classifier: heldout_flag_acc={flag_acc:.4f} heldout_condition_acc={cond_acc:.4f}")
    return EXIT_OK


def _fewshot(root: Path, recs, cfg) -> list[dict]:
    path = root / FEWSHOT_FILE
    if path.exists():
        by_id = {r["id"]: r for r in recs}
        chosen = [by_id[r["id"]] for r in read_jsonl(path)]
        if len(chosen) < cfg["shots"]:
            raise UsageError(f"{path} holds {len(chosen)} annotations, {cfg['shots']} requested")
        return chosen[:cfg["shots"]]
    return data.annotate_fewshot(recs, cfg["shots"], seed=cfg["seed"])


def _train_detect(cfg) -> int:
    root = _corpus(cfg)
    den = Denoiser.from_state_dict(_need(cfg, "base"))
    recs = data.load_records(root)
    tr = data.load_split(root, "train", recs)
    shots = _fewshot(root, recs, cfg)
    ann = tr.subset([tr.ids.index(r["id"]) for r in shots])
    window = (cfg["t_switch"], cfg["t_start"])
    head, hist = detect.train_detect(den, ann.images, ann.tokens, data.downsample_mask(ann.masks),
                                     window=window, epochs=cfg["detect_epochs"], seed=cfg["seed"],
                                     lr=cfg["detect_lr"], lambda_dice=cfg["lambda_dice"],
                                     lambda_l1=cfg["lambda_l1"])
    _save(cfg, "detect", head.state_dict())
    ev = data.load_split(root, "eval", recs)
    held = ev.subset(np.where(ev.hazard)[0][:100])
    steps = [t for t in range(1000, 0, -1000 // cfg["steps"]) if window[0] <= t <= window[1]]
    miou = detect.evaluate_miou(head, den, held.images, held.tokens, data.downsample_mask(held.masks),
                                steps, seed=cfg["seed"], theta=cfg["theta_bin"])
    print(f"detect: annotations={len(ann)} first_loss={hist[0]['loss']:.6f} "
          f"final_loss={hist[-1]['loss']:.6f} heldout_window_miou={miou:.4f}")
    return EXIT_OK


def _train_suppress(cfg) -> int:
    root = _corpus(cfg)
    den = Denoiser.from_state_dict(_need(cfg, "base"))
    for split, n in (("train", cfg["n_pairs"]), ("eval", cfg["n_pairs_heldout"])):
        if not (root / f"pairs_{split}.jsonl").exists():
            _make_pairs(cfg, root, split, n)
    pairs, held = data.load_pairs(root, "train"), data.load_pairs(root, "eval")
    _, _, init_loss = mean_rewards(SuppressAdapter(den), den, pairs, seed=cfg["seed"])
    print(f"suppress: epoch 0 loss={init_loss:.6f} (ln 2 = {math.log(2):.6f})")
    adapter, hist = train_suppress(den, pairs, beta=cfg["beta"], epochs=cfg["suppress_epochs"],
                                   seed=cfg["seed"], lr=cfg["suppress_lr"], batch_size=cfg["suppress_batch"])
    for rec in hist:
        print(f"suppress: epoch {rec['epoch'] + 1} loss={rec['loss']:.6f}")
    _save(cfg, "suppress", adapter.state_dict())
    rw, rl, loss = mean_rewards(adapter, den, held, seed=cfg["seed"] + 1)
    print(f"suppress: pairs={len(pairs)} heldout_r_w={rw:.6f} heldout_r_l={rl:.6f} heldout_loss={loss:.6f}")
    return EXIT_OK


def cmd_sample(args, cfg) -> int:
    words = args.prompt.split()
    try:
        tokens = vocab.encode(words)
    except vocab.UnknownTokenError as e:
        raise UsageError(str(e)) from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    den = Denoiser.from_state_dict(_need(cfg, "base"))
    ctrl = None
    if args.safety == "on":
        head = detect.DetectHead.from_state_dict(_need(cfg, "detect"), den)
        adapter = SuppressAdapter.from_state_dict(_need(cfg, "suppress"))
        ctrl = SafetyController(head, adapter, safety_config(cfg))
    out = Path(cfg["out"] or ".")
    out.mkdir(parents=True, exist_ok=True)
    images, traces = ddim_sample(den, [tokens], [cfg["seed"]], steps=cfg["steps"], safety=ctrl)
    img_path = out / "image.ppm"
    write_ppm(img_path, data.quantize(images[0]))
    print(f"image: {img_path}")
    rows = []
    if traces:
        tr = traces[0]
        mask_path = None
        if tr["mask"] is not None and tr["triggered"]:
            mask_path = out / "mask.pgm"
            write_pgm(mask_path, tr["mask"])
            print(f"mask: {mask_path}")
        for step in tr["steps"]:
            row = dict(step)
            if step["detect"] and mask_path is not None:
                row["detected_mask_path"] = mask_path.name
            rows.append(row)
    write_jsonl(out / "trace.jsonl", rows)
    print(f"trace: {out / 'trace.jsonl'}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    ckpt = Path(cfg["checkpoints"])
    for name in CHECKPOINTS:
        if not checkpoint_path(ckpt, name).exists():
            raise MissingDependency(f"{name} checkpoint", checkpoint_path(ckpt, name))
    try:
        exp = ExperimentConfig(corpus=_corpus(cfg), checkpoints=ckpt, out=Path(cfg["out"] or "report"),
                               seed=cfg["seed"], n_per_condition=cfg["n_per_condition"],
                               n_reference=cfg["n_reference"], n_localization=cfg["n_localization"],
                               steps=cfg["steps"], batch_size=cfg["batch_size"], jobs=cfg["jobs"],
                               safety=safety_config(cfg))
    except ValueError as e:
        raise UsageError(str(e)) from None
    report = run_all(exp)
    print(json.dumps({k: report[k] for k in ("safety", "robustness", "localization")}, indent=2, sort_keys=True))
    print(f"report: {exp.out / 'report.json'}")
    return EXIT_OK


def cmd_hscore(args, cfg) -> int:
    try:
        rows = read_method_csv(args.csv)
    except CSVFormatError as e:
        raise UsageError(f"{args.csv}: {e}") from None
    except OSError as e:
        raise UsageError(f"cannot read {args.csv}: {e}") from None
    try:
        report = tradeoff_report(rows)
    except DegenerateRangeError as e:
        raise UsageError(f"degenerate range: {e}") from None
    out = Path(args.out) if args.out else Path(args.csv).with_name(Path(args.csv).stem + "_tradeoff.csv")
    write_tradeoff_csv(out, report)
    for r in report:
        print(f"{r.name}\tS={round3(r.S)}\tU={round3(r.U)}\tH={round3(r.H)}")
    print(f"wrote {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------
def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        typ = DEFAULTS[key][0]
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safectrl", description=__doc__)
    parser.add_argument("--config", help="flat key=value file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = ["seed", "jobs", "checkpoints", "corpus"]
    safety = ["t_start", "t_switch", "trigger_threshold", "theta_bin", "beta", "lambda_dice", "lambda_l1"]

    p = sub.add_parser("gen-data", help="render the corpus, pick few-shot annotations, optionally pairs")
    p.add_argument("--out", help="corpus root to create")
    _add_config_flags(p, ["seed", "jobs", "checkpoints", "n_train", "n_eval", "n_pairs", "n_pairs_heldout",
                          "shots", "steps"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one component and write its checkpoint")
    p.add_argument("component", choices=["base", "detect", "suppress", "classifier"])
    _add_config_flags(p, common + ["n_pairs", "n_pairs_heldout", "shots", "schedule", "base_epochs", "base_lr",
                                   "base_batch", "classifier_epochs", "detect_epochs", "detect_lr",
                                   "suppress_epochs", "suppress_lr", "suppress_batch", "steps"] + safety)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one image")
    p.add_argument("--prompt", required=True, help='space-separated words, e.g. "red box hazard park"')
    p.add_argument("--safety", choices=["on", "off"], default="off")
    _add_config_flags(p, common + ["out", "steps"] + safety)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="run the safety, robustness and localisation experiments")
    _add_config_flags(p, common + ["out", "steps", "batch_size", "n_per_condition", "n_reference",
                                   "n_localization"] + safety)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hscore", help="H-Score trade-off table from a methods CSV")
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_hscore)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"safectrl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingDependency as e:
        print(f"safectrl: error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"safectrl: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"safectrl: I/O error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
