import json

import numpy as np
import pytest

from safectrl import data, pipeline
from safectrl.detect import DetectHead
from safectrl.diffusion import Denoiser
from safectrl.evaluation import RiskClassifier
from safectrl.fileio import save_checkpoint
from safectrl.pipeline import ExperimentConfig
from safectrl.scheduler import SafetyConfig
from safectrl.suppress import SuppressAdapter


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    corpus = root / "corpus"
    data.generate_corpus(corpus, 60, 60, seed=0)
    ck = root / "ck"
    ck.mkdir()
    den = Denoiser(seed=0)
    head = DetectHead(0)
    # a strongly peaked risk token so that some runs trigger
    head.q_risk.data[:] = den.params["tok_emb"].data[2] * 4
    save_checkpoint(pipeline.checkpoint_path(ck, "base"), den.state_dict())
    save_checkpoint(pipeline.checkpoint_path(ck, "detect"), head.state_dict())
    adapter = SuppressAdapter(den)
    adapter.safe_ctx.data[:] = 2.0
    save_checkpoint(pipeline.checkpoint_path(ck, "suppress"), adapter.state_dict())
    save_checkpoint(pipeline.checkpoint_path(ck, "classifier"), RiskClassifier(0).state_dict())
    return root, corpus, ck


def _cfg(root, corpus, ck, out, **kw):
    return ExperimentConfig(corpus=corpus, checkpoints=ck, out=root / out, n_per_condition=30,
                            n_reference=30, n_localization=10, steps=10, batch_size=16, **kw)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig(corpus=tmp_path, checkpoints=tmp_path, out=tmp_path, n_per_condition=10)
    with pytest.raises(ValueError):
        ExperimentConfig(corpus=tmp_path, checkpoints=tmp_path, out=tmp_path, jobs=0)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(pipeline.MissingCheckpointError) as err:
        pipeline.load_components(tmp_path)
    assert err.value.name == "base"


def test_window_steps():
    cfg = ExperimentConfig(corpus=".", checkpoints=".", out=".")
    assert pipeline.window_steps(cfg) == list(range(800, 599, -20))
    cfg = ExperimentConfig(corpus=".", checkpoints=".", out=".", safety=SafetyConfig(t_start=810, t_switch=590))
    assert pipeline.window_steps(cfg) == list(range(800, 599, -20))


def test_report_is_reproducible_and_complete(setup):
    root, corpus, ck = setup
    a = pipeline.run_all(_cfg(root, corpus, ck, "a"))
    b = pipeline.run_all(_cfg(root, corpus, ck, "b", jobs=2))
    text_a = (root / "a" / "report.json").read_bytes()
    assert text_a == (root / "b" / "report.json").read_bytes()
    assert json.loads(text_a) == a == b
    assert pipeline.verify_images(root / "a", a)
    assert len(a["images"]) == 6 * 30
    loc = a["localization"]
    assert all(0.0 <= v <= 1.0 for v in loc["miou"].values())
    assert set(loc["miou"]) == {"900", "700", "500", "300"}
    assert a["safety"]["untriggered_safe_identical"]
    for name in a["traces"]:
        rows = [json.loads(x) for x in (root / "a" / name).read_text().splitlines()]
        assert len(rows) == 30 * 10
        for r in rows:
            assert set(r) >= {"run", "prompt", "seed", "t", "detect", "trigger", "suppressed"}
            if "detected_mask_path" in r:
                assert (root / "a" / r["detected_mask_path"]).exists()


def test_untriggered_runs_are_identical(setup):
    root, corpus, ck = setup
    cfg = _cfg(root, corpus, ck, "c")
    comps = pipeline.load_components(ck)
    prompts, seeds = pipeline._prompt_set(cfg, "safe")
    off, _ = pipeline.generate(cfg, comps, prompts, seeds, safety=False)
    on, traces = pipeline.generate(cfg, comps, prompts, seeds, safety=True)
    trig = np.array([t["triggered"] for t in traces])
    for i in np.where(~trig)[0]:
        assert on[i].tobytes() == off[i].tobytes()
