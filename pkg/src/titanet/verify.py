"""Cosine scoring, EER, MinDCF and DET operating points for verification trials.

Thresholds sweep over -inf, the midpoints between consecutive distinct
scores, and +inf. A trial is accepted when its score is >= the threshold.
Rates are counted from sorted positions rather than by comparing against the
midpoint, which can round onto a score when two scores are adjacent floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    target: bool


@dataclass
class ScoredTrials:
    scores: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=bool)
        if self.scores.shape != self.targets.shape or self.scores.ndim != 1:
            raise ConfigError("scores and targets must be equal-length 1-D sequences")

    def check(self):
        n_tar = int(self.targets.sum())
        if n_tar == 0 or n_tar == len(self.targets):
            raise ConfigError("need at least one target and one nontarget trial")
        return self


@dataclass(frozen=True)
class DcfConfig:
    p_target: float = 0.01
    c_fa: float = 1.0
    c_miss: float = 1.0

    def validate(self):
        if not 0 < self.p_target < 1 or self.c_fa <= 0 or self.c_miss <= 0:
            raise ConfigError(f"invalid DCF config {self}")
        return self


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not np.any(a) or not np.any(b):
        raise ConfigError("cannot score a zero embedding")
    return float(np.clip(a @ b, -1.0, 1.0))


def score_trials(trials: Sequence[Trial], store: Mapping[str, np.ndarray]) -> ScoredTrials:
    missing = [t for t in trials if t.enroll_id not in store or t.test_id not in store]
    if missing:
        t = missing[0]
        raise ConfigError(f"{len(missing)} trials reference unknown utterances, e.g. {t.enroll_id} / {t.test_id}")
    scores = [cosine_score(store[t.enroll_id], store[t.test_id]) for t in trials]
    return ScoredTrials(np.array(scores), np.array([t.target for t in trials]))


@dataclass
class Sweep:
    thresholds: np.ndarray
    p_fa: np.ndarray
    p_miss: np.ndarray


def threshold_sweep(st: ScoredTrials) -> Sweep:
    """False-accept and miss rates at every sweep threshold, in ascending order."""
    st.check()
    uniq = np.unique(st.scores)
    thr = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, [np.inf]])
    n_tar = int(st.targets.sum())
    n_non = len(st.targets) - n_tar
    # for threshold index i (i >= 1) the accepted scores are uniq[i:], so
    # counts below come from cumulative sums over the sorted unique scores
    pos = np.searchsorted(uniq, st.scores)
    tar_at = np.bincount(pos[st.targets], minlength=len(uniq))
    non_at = np.bincount(pos[~st.targets], minlength=len(uniq))
    tar_below = np.concatenate([[0], np.cumsum(tar_at)])
    non_below = np.concatenate([[0], np.cumsum(non_at)])
    p_miss = tar_below / n_tar
    p_fa = (n_non - non_below) / n_non
    return Sweep(thr, p_fa, p_miss)


def eer_from_rates(thr: np.ndarray, p_fa: np.ndarray, p_miss: np.ndarray) -> tuple[float, float]:
    """Linear crossing of FAR and FRR between the bracketing sweep points."""
    d = p_fa - p_miss
    i = int(np.argmax(d <= 0)) - 1  # d[0] = 1 > 0 and d[-1] = -1 <= 0
    frac = d[i] / (d[i] - d[i + 1])
    eer = p_fa[i] + frac * (p_fa[i + 1] - p_fa[i])
    lo, hi = thr[i], thr[i + 1]
    if np.isinf(lo):
        t = hi
    elif np.isinf(hi):
        t = lo
    else:
        t = lo + frac * (hi - lo)
    return float(eer), float(t)


def compute_eer(st: ScoredTrials) -> tuple[float, float]:
    """(EER as a fraction, threshold where FAR and FRR cross)."""
    sw = threshold_sweep(st)
    return eer_from_rates(sw.thresholds, sw.p_fa, sw.p_miss)


def normalized_dcf(p_fa, p_miss, cfg: DcfConfig):
    c_def = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target))
    return (cfg.c_miss * cfg.p_target * p_miss + cfg.c_fa * (1 - cfg.p_target) * p_fa) / c_def


def compute_min_dcf(st: ScoredTrials, cfg: DcfConfig = DcfConfig()) -> tuple[float, float]:
    cfg.validate()
    sw = threshold_sweep(st)
    dcf = normalized_dcf(sw.p_fa, sw.p_miss, cfg)
    i = int(np.argmin(dcf))
    return float(dcf[i]), float(sw.thresholds[i])


def det_points(st: ScoredTrials) -> list[tuple[float, float]]:
    """(P_fa, P_miss) per sweep threshold, from accept-all (1, 0) to reject-all (0, 1)."""
    sw = threshold_sweep(st)
    return [(float(a), float(b)) for a, b in zip(sw.p_fa, sw.p_miss)]


def write_det_csv(points, path):
    with open(path, "w") as f:
        f.write("p_fa,p_miss\n")
        for a, b in points:
            f.write(f"{a:.10g},{b:.10g}\n")


def build_trials(utt_speaker: Mapping[str, str], n_trials: int, seed: int = 0,
                 target_fraction: float = 0.5) -> list[Trial]:
    """Sample distinct utterance pairs, about half same-speaker, without replacement."""
    ids = sorted(utt_speaker)
    tar, non = [], []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            (tar if utt_speaker[a] == utt_speaker[b] else non).append((a, b))
    n_tar = min(len(tar), int(round(n_trials * target_fraction)))
    n_non = min(len(non), n_trials - n_tar)
    if n_tar == 0 or n_non == 0:
        raise ConfigError(f"cannot build trials from {len(ids)} utterances: "
                          f"{len(tar)} target and {len(non)} nontarget pairs available")
    rng = np.random.default_rng([seed, 13])
    picks = [Trial(*tar[i], True) for i in rng.choice(len(tar), n_tar, replace=False)]
    picks += [Trial(*non[i], False) for i in rng.choice(len(non), n_non, replace=False)]
    order = rng.permutation(len(picks))
    return [picks[i] for i in order]
