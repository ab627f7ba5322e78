import json
from pathlib import Path

import numpy as np
import pytest

from safectrl import cli
from safectrl.detect import DetectHead
from safectrl.diffusion import Denoiser
from safectrl.evaluation import RiskClassifier
from safectrl.fileio import read_ppm, save_checkpoint
from safectrl.pipeline import checkpoint_path
from safectrl.suppress import SuppressAdapter

FIXTURE = Path(__file__).parent / "fixtures" / "table1.csv"


def test_hscore_fixture(tmp_path, capsys):
    out = tmp_path / "h.csv"
    assert cli.main(["hscore", str(FIXTURE), "--out", str(out)]) == 0
    h = {line.split(",")[0]: line.split(",")[-1] for line in out.read_text().splitlines()[1:]}
    assert h == {"Original": "0.750", "SLD": "0.640", "ESD": "0.402", "SPM": "0.751", "AlignGuard": "0.501",
                 "RDM": "0.869", "CR": "0.828", "SafeCtrl": "0.906"}


def test_hscore_errors(tmp_path, capsys):
    one = tmp_path / "one.csv"
    one.write_text("name,overall,fid,clip\nA,0.1,12.0,0.25\n")
    assert cli.main(["hscore", str(one)]) == 2
    assert "degenerate" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("name,overall,fid,clip\nA,0.1,12.0,0.25\nB,0.2,oops,0.3\n")
    assert cli.main(["hscore", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert cli.main(["hscore", str(tmp_path / "missing.csv")]) == 2


def test_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["gen-data"]) == 2
    assert "--out" in capsys.readouterr().err
    assert cli.main(["train", "nothing"]) == 2


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 1\nsede = 2\n")
    assert cli.main(["--config", str(cfg), "hscore", str(FIXTURE), "--out", str(tmp_path / "h.csv")]) == 2
    assert "sede" in capsys.readouterr().err


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nseed = 3\nsteps = 25\ncorpus = from_file\n")
    monkeypatch.setenv("SAFECTRL_CORPUS", "from_env")
    args = cli.build_parser().parse_args(["--config", str(cfg), "eval", "--steps", "10"])
    resolved = cli.resolve(args)
    assert resolved["seed"] == 3 and resolved["steps"] == 10 and resolved["corpus"] == "from_file"
    args = cli.build_parser().parse_args(["eval"])
    assert cli.resolve(args)["corpus"] == "from_env"
    assert cli.resolve(args)["steps"] == 50


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for root in (a, b):
        assert cli.main(["gen-data", "--out", str(root), "--n-train", "60", "--n-eval", "20"]) == 0
    assert _tree(a) == _tree(b)
    assert len((a / "fewshot.jsonl").read_text().splitlines()) == 10


def test_missing_dependencies_exit_3(tmp_path, capsys):
    corpus = tmp_path / "c"
    assert cli.main(["gen-data", "--out", str(corpus), "--n-train", "60", "--n-eval", "20"]) == 0
    ck = str(tmp_path / "ck")
    assert cli.main(["train", "detect", "--corpus", str(corpus), "--checkpoints", ck]) == 3
    assert "base" in capsys.readouterr().err
    assert cli.main(["eval", "--corpus", str(corpus), "--checkpoints", ck]) == 3
    assert cli.main(["sample", "--prompt", "red box park", "--checkpoints", ck]) == 3
    assert cli.main(["gen-data", "--out", str(corpus), "--n-train", "60", "--n-eval", "20",
                     "--n-pairs", "4", "--checkpoints", ck]) == 3
    assert cli.main(["train", "base", "--corpus", str(tmp_path / "nowhere"), "--checkpoints", ck]) == 3


def _quiet_checkpoints(root: Path):
    den = Denoiser(seed=0)
    head = DetectHead(0)
    head.q_risk.data[:] = 0.0
    head.log_temp.data[:] = -30.0  # flat risk column: the fused mask is constant, hence empty
    save_checkpoint(checkpoint_path(root, "base"), den.state_dict())
    save_checkpoint(checkpoint_path(root, "detect"), head.state_dict())
    save_checkpoint(checkpoint_path(root, "suppress"), SuppressAdapter(den).state_dict())
    save_checkpoint(checkpoint_path(root, "classifier"), RiskClassifier(0).state_dict())


def test_sample_untriggered_safety_is_identical(tmp_path, capsys):
    ck = tmp_path / "ck"
    ck.mkdir()
    _quiet_checkpoints(ck)
    base = ["sample", "--prompt", "red box disc park", "--checkpoints", str(ck), "--seed", "4"]
    assert cli.main(base + ["--out", str(tmp_path / "off")]) == 0
    assert cli.main(base + ["--safety", "on", "--out", str(tmp_path / "on")]) == 0
    off, on = read_ppm(tmp_path / "off" / "image.ppm"), read_ppm(tmp_path / "on" / "image.ppm")
    assert off.tobytes() == on.tobytes()
    rows = [json.loads(x) for x in (tmp_path / "on" / "trace.jsonl").read_text().splitlines()]
    assert len(rows) == 50 and not any(r["trigger"] for r in rows)
    assert [r["t"] for r in rows] == list(range(1000, 0, -20))


def test_sample_unknown_token(tmp_path, capsys):
    assert cli.main(["sample", "--prompt", "red cat park", "--checkpoints", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "cat" in err and "hazard" in err
