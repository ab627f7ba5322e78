import filecmp

import numpy as np
import pytest

from safectrl import data, vocab


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    data.generate_corpus(root, 400, 100, seed=0)
    return root


def test_corpus_is_byte_deterministic(corpus, tmp_path):
    data.generate_corpus(tmp_path, 400, 100, seed=0)
    assert _tree_equal(corpus, tmp_path)


def test_masks_match_hazard_flags(corpus):
    split = data.load_split(corpus)
    for scene_id, m, h in zip(split.ids, split.masks, split.hazard):
        assert m.any() == h, scene_id
        if h:
            img, gt = data.render(data.sample_scene(0, scene_id))
            np.testing.assert_array_equal(m, gt)


def test_corpus_rates(corpus):
    recs = data.load_records(corpus)
    hazard = [r for r in recs if r["hazard"]]
    assert 0.33 < len(hazard) / len(recs) < 0.47
    adv = [r for r in hazard if r["adversarial"]]
    assert 0.2 < len(adv) / len(hazard) < 0.4
    for r in adv:
        assert vocab.HAZARD_TOKEN not in r["tokens"]
        assert vocab.DECOY_TOKEN in r["tokens"]
    decoy = [r for r in recs if vocab.DECOY_TOKEN in r["tokens"]]
    assert sum(r["hazard"] for r in decoy) / len(decoy) > 0.75


def test_generate_corpus_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        data.generate_corpus(tmp_path, 0, 10)


def test_annotate_fewshot(corpus):
    recs = data.load_records(corpus)
    picked = data.annotate_fewshot(recs, 10, seed=0)
    assert len(picked) == 10
    assert picked == data.annotate_fewshot(recs, 10, seed=0)
    split = data.load_split(corpus, records=picked)
    assert all(m.any() for m in split.masks)
    with pytest.raises(ValueError):
        data.annotate_fewshot(recs, 10_000)


def test_prompt_sets():
    assert all(vocab.HAZARD_TOKEN in p for p in data.sample_prompts("hazard", 50, 0))
    adv = data.sample_prompts("adversarial", 50, 0)
    assert all(vocab.HAZARD_TOKEN not in p and vocab.DECOY_TOKEN in p for p in adv)
    safe = data.sample_prompts("safe", 50, 0)
    assert all(vocab.HAZARD_TOKEN not in p and vocab.DECOY_TOKEN not in p for p in safe)
    assert data.sample_prompts("safe", 50, 0) == safe
    with pytest.raises(ValueError):
        data.sample_prompts("other", 1, 0)


def test_safe_counterpart():
    assert data.safe_counterpart(["red", "box", "hazard", "park"]) == ["red", "box", "disc", "park"]
    assert data.safe_counterpart(["red", "box", "spark", "park"]) == ["red", "box", "park"]


def test_quantize_round_trip():
    rng = np.random.default_rng(0)
    u8 = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert data.quantize(data.to_model_space(u8)).tobytes() == u8.tobytes()


def test_downsample_mask():
    m = np.zeros((16, 16), bool)
    m[3, 5] = True
    lo = data.downsample_mask(m)
    assert lo.shape == (8, 8) and lo.sum() == 1 and lo[1, 2]


def test_pairs_need_trained_model(tmp_path):
    from safectrl.diffusion import Denoiser

    with pytest.raises(ValueError):
        data.generate_preference_pairs(tmp_path, Denoiser(0), None, n_pairs=1)
