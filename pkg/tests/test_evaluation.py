from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safectrl import evaluation as ev

FIXTURE = Path(__file__).parent / "fixtures" / "table1.csv"


def _rows():
    return ev.read_method_csv(FIXTURE)


def test_normalized_utility_examples():
    rows = _rows()
    norm = dict(zip([r.name for r in rows], ev.normalize_utility(rows)))
    assert norm["Original"][0] == 1.0  # FID minimum
    assert norm["ESD"][1] == 0.0  # CLIP minimum
    assert norm["SafeCtrl"][0] == pytest.approx(0.8877, abs=1e-4)
    assert norm["SafeCtrl"][1] == pytest.approx(0.9592, abs=1e-4)


def test_h_score_examples():
    assert ev.h_score(0.4, 0.4) == pytest.approx(0.4)
    assert ev.h_score(0.89, 0.92345) == pytest.approx(0.906, abs=5e-4)
    assert ev.h_score(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        ev.h_score(-0.1, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_h_score_bounded_by_inputs(s, u):
    h = ev.h_score(s, u)
    assert min(s, u) - 1e-12 <= h <= max(s, u) + 1e-12


def test_tradeoff_report_matches_table():
    expected = {"Original": 0.750, "SLD": 0.640, "ESD": 0.402, "SPM": 0.751, "AlignGuard": 0.501,
                "RDM": 0.869, "CR": 0.828, "SafeCtrl": 0.906}
    for r in ev.tradeoff_report(_rows()):
        assert ev.round3(r.H) == f"{expected[r.name]:.3f}"


def test_degenerate_range():
    with pytest.raises(ev.DegenerateRangeError):
        ev.normalize_utility(_rows()[:1])
    same = [ev.MethodRow("a", 0.1, 10.0, 0.2), ev.MethodRow("b", 0.2, 10.0, 0.3)]
    with pytest.raises(ev.DegenerateRangeError):
        ev.normalize_utility(same)


def test_round3_half_even():
    assert ev.round3(0.0005) == "0.000"
    assert ev.round3(0.0015) == "0.002"
    assert ev.round3(0.9064) == "0.906"


@pytest.mark.parametrize("body,line", [
    ("name,overall,fid\nA,0.1,2\n", 1),
    ("name,overall,fid,clip\nA,0.1,2,0.3\nB,0.2,x,0.3\n", 3),
    ("name,overall,fid,clip\nA,0.1,2\n", 2),
    ("name,overall,fid,clip\nA,1.5,2,0.3\n", 2),
])
def test_csv_errors_carry_line(tmp_path, body, line):
    p = tmp_path / "t.csv"
    p.write_text(body)
    with pytest.raises(ev.CSVFormatError) as err:
        ev.read_method_csv(p)
    assert err.value.line == line


def test_write_tradeoff_csv(tmp_path):
    out = tmp_path / "h.csv"
    ev.write_tradeoff_csv(out, ev.tradeoff_report(_rows()))
    lines = out.read_text().splitlines()
    assert lines[0] == "name,S,Fprime,Cprime,U,H"
    assert lines[-1].startswith("SafeCtrl,0.890,0.888,0.959,")
    assert lines[-1].endswith(",0.906")


def test_unsafe_ratio():
    flags = np.zeros(100, bool)
    flags[:12] = True
    assert ev.unsafe_ratio(None, flags=flags) == 0.12
    assert ev.unsafe_ratio(None, flags=np.zeros(0, bool)) == 0.0


def test_frechet_identical_and_shifted():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 8))
    assert ev.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)
    d = rng.normal(size=8)
    assert ev.frechet_distance(a, a + d) == pytest.approx(float(d @ d), abs=1e-4)


def test_condition_consistency():
    prompts = [["red", "box", "park"], ["blue", "box", "night"]]
    assert ev.condition_consistency(None, prompts, predicted=np.array([0, 2])) == 1.0
    rng = np.random.default_rng(1)
    exp = rng.integers(4, size=200)
    cc = ev.condition_consistency(None, None, predicted=rng.integers(4, size=200), expected=exp)
    assert abs(cc - 0.25) <= 0.1


def test_classifier_deterministic_and_round_trip():
    rng = np.random.default_rng(2)
    imgs = rng.uniform(-1, 1, (64, 16, 16, 3)).astype(np.float32)
    hazard = rng.random(64) < 0.5
    labels = rng.integers(4, size=64)
    a = ev.train_risk_classifier(imgs, hazard, labels, epochs=1, batch_size=32)
    b = ev.train_risk_classifier(imgs, hazard, labels, epochs=1, batch_size=32)
    assert a.checksum() == b.checksum()
    c = ev.RiskClassifier.from_state_dict(a.state_dict())
    assert c.flag_logits(imgs).tobytes() == a.flag_logits(imgs).tobytes()
    with pytest.raises(ValueError):
        ev.train_risk_classifier(imgs[:0], hazard[:0], labels[:0])
