import itertools

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from titanet.errors import ConfigError
from titanet.verify import (DcfConfig, ScoredTrials, Trial, build_trials, compute_eer, compute_min_dcf,
                            cosine_score, det_points, score_trials, write_det_csv)

from oracles import brute_force_metrics as brute_force


@st.composite
def score_sets(draw, max_n=20, grid=None):
    n = draw(st.integers(2, max_n))
    targets = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    targets[0], targets[1] = True, False
    if grid:
        scores = draw(st.lists(st.integers(-grid, grid), min_size=n, max_size=n))
        scores = [s / grid for s in scores]
    else:
        scores = draw(st.lists(st.floats(-1, 1), min_size=n, max_size=n))
    return np.array(scores), np.array(targets)


# ----------------------------------------------------------------- cosine

def test_cosine_examples():
    e = np.zeros(192)
    e[0] = 1
    a = np.zeros(192)
    a[:2] = (0.6, 0.8)
    assert cosine_score(e, e) == 1.0
    assert cosine_score(e, np.roll(e, 1)) == 0.0
    assert abs(cosine_score(a, e) - 0.6) <= 1e-15
    with pytest.raises(ConfigError):
        cosine_score(np.zeros(192), e)


def test_score_trials_unknown_id():
    with pytest.raises(ConfigError, match="unknown"):
        score_trials([Trial("a", "zz", True)], {"a": np.ones(3) / np.sqrt(3)})


# --------------------------------------------------------------------- EER

def test_perfect_separation():
    st_ = ScoredTrials([0.9, 0.9, 0.1, 0.1], [True, True, False, False])
    assert compute_eer(st_)[0] == 0.0
    assert compute_min_dcf(st_)[0] == 0.0


def test_inverted_scores_give_eer_one():
    assert compute_eer(ScoredTrials([0.1, 0.1, 0.9, 0.9], [True, True, False, False]))[0] == 1.0


def test_four_trial_hand_case():
    st_ = ScoredTrials([0.8, 0.4, 0.6, 0.2], [True, True, False, False])
    # sweep: FAR 1,.5,.5,0,0  FRR 0,0,.5,.5,1 -> crossing at 0.5; DCF = FRR + 99 FAR -> 0.5 at t=0.7
    eer, _ = compute_eer(st_)
    dcf, t = compute_min_dcf(st_)
    assert abs(eer - 0.5) <= 1e-12
    assert abs(dcf - 0.5) <= 1e-12 and abs(t - 0.7) <= 1e-12
    o_eer, o_dcf, _ = brute_force(st_.scores, st_.targets)
    assert abs(eer - o_eer) <= 1e-12 and abs(dcf - o_dcf) <= 1e-12


def test_reject_all_dcf_is_one():
    _, _, pts = brute_force([0.3, 0.5], [True, False])
    far, frr = pts[-1]
    assert (far, frr) == (0.0, 1.0)
    # the same plug-in through the library's normalization
    from titanet.verify import normalized_dcf
    assert normalized_dcf(0.0, 1.0, DcfConfig()) == 1.0


def test_degenerate_classes_rejected():
    with pytest.raises(ConfigError):
        compute_eer(ScoredTrials([0.1, 0.2], [True, True]))
    with pytest.raises(ConfigError):
        compute_min_dcf(ScoredTrials([0.1, 0.2], [False, False]))
    with pytest.raises(ConfigError):
        ScoredTrials([0.1, 0.2], [True])


def test_invalid_dcf_config():
    with pytest.raises(ConfigError):
        compute_min_dcf(ScoredTrials([0.2, 0.1], [True, False]), DcfConfig(p_target=1.0))


@settings(max_examples=300, deadline=None)
@given(score_sets())
# neighbouring floats have no representable midpoint
@example((np.array([0.0, 5e-324]), np.array([True, False])))
@example((np.array([0.0, 1.0, 1.0, 5e-324]), np.array([True, False, False, True])))
def test_matches_brute_force_oracle(sets):
    scores, targets = sets
    o_eer, o_dcf, o_pts = brute_force(scores, targets)
    st_ = ScoredTrials(scores, targets)
    assert compute_eer(st_)[0] == o_eer
    assert compute_min_dcf(st_)[0] == o_dcf
    assert det_points(st_) == o_pts


@settings(max_examples=200, deadline=None)
@given(score_sets(grid=50), st.sampled_from([np.tanh, lambda x: x ** 3 + x, lambda x: np.exp(2 * x)]))
def test_monotone_transform_invariance(sets, f):
    scores, targets = sets
    a = ScoredTrials(scores, targets)
    b = ScoredTrials(f(scores), targets)
    assert compute_eer(a)[0] == pytest.approx(compute_eer(b)[0], abs=1e-12)
    assert compute_min_dcf(a)[0] == pytest.approx(compute_min_dcf(b)[0], abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(score_sets(max_n=40))
def test_metric_ranges_and_det_staircase(sets):
    st_ = ScoredTrials(*sets)
    assert 0.0 <= compute_eer(st_)[0] <= 1.0
    assert 0.0 <= compute_min_dcf(st_)[0] <= 1.0
    pts = det_points(st_)
    assert pts[0] == (1.0, 0.0) and pts[-1] == (0.0, 1.0)
    for (fa0, m0), (fa1, m1) in zip(pts, pts[1:]):
        assert fa1 <= fa0 and m1 >= m0
    assert len(pts) == len(set(st_.scores)) + 1


def test_det_csv(tmp_path):
    p = tmp_path / "det.csv"
    write_det_csv(det_points(ScoredTrials([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0])), p)
    lines = p.read_text().splitlines()
    assert lines[0] == "p_fa,p_miss"
    assert lines[1] == "1,0" and lines[-1] == "0,1"


# ------------------------------------------------------------------- trials

def test_build_trials():
    utts = {f"s{s}_{u}": f"s{s}" for s, u in itertools.product(range(4), range(5))}
    trials = build_trials(utts, 60, seed=1)
    assert len(trials) == 60
    assert sum(t.target for t in trials) == 30
    pairs = {(t.enroll_id, t.test_id) for t in trials}
    assert len(pairs) == 60
    for t in trials:
        assert (utts[t.enroll_id] == utts[t.test_id]) == t.target
    assert trials == build_trials(utts, 60, seed=1)
    assert trials != build_trials(utts, 60, seed=2)


def test_build_trials_needs_both_kinds():
    with pytest.raises(ConfigError, match="nontarget"):
        build_trials({"a": "x", "b": "x"}, 10)
