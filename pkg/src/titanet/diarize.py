"""Oracle-SAD diarization: windowed embeddings, NME-SC clustering, DER scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .errors import ConfigError, TitaNetError
from .features import AudioSignal, FrameConfig, extract_features, plan_windows

log = logging.getLogger(__name__)

# (window, shift) in seconds
DOMAIN_PRESETS = {"telephonic": (1.5, 0.75), "nontelephonic": (3.0, 1.75)}
MAX_P = 30


@dataclass(frozen=True)
class Segment:
    """A speaker turn stored as RTTM does: onset and duration in seconds."""

    start: float
    duration: float
    speaker: str

    @property
    def end(self) -> float:
        return self.start + self.duration

    @classmethod
    def span(cls, start: float, end: float, speaker: str) -> "Segment":
        return cls(start, end - start, speaker)


@dataclass
class DiarizationHypothesis:
    segments: list[Segment] = field(default_factory=list)


@dataclass(frozen=True)
class DerConfig:
    collar: float = 0.25
    ignore_overlap: bool = True


@dataclass
class DerResult:
    der: float
    missed: float
    falarm: float
    confusion: float
    scored: float
    mapping: dict = field(default_factory=dict)


@dataclass
class ClusterResult:
    labels: np.ndarray
    estimated_k: int
    chosen_p: int
    nme_trace: list[dict] = field(default_factory=list)


# -------------------------------------------------------------- embeddings

def embed_windows(model, audio: AudioSignal, speech_regions, domain: str = "telephonic",
                  frame_cfg: FrameConfig = FrameConfig()):
    """One unit-norm embedding per planned window -> (embeddings [n, 192], spans)."""
    try:
        window, shift = DOMAIN_PRESETS[domain]
    except KeyError:
        raise ConfigError(f"unknown domain {domain!r}; use telephonic or nontelephonic") from None
    regions = [(s, e) for s, e in speech_regions if e > s]
    if not regions:
        raise TitaNetError("no speech regions to embed")
    plan = plan_windows(regions, window, shift)
    feats = [extract_features(audio.crop(s, e), frame_cfg).values for s, e in plan.spans]
    emb = np.empty((len(feats), model.decoder.embed_dim))
    # windows of equal length share one batch
    by_len: dict[int, list[int]] = {}
    for i, f in enumerate(feats):
        by_len.setdefault(f.shape[0], []).append(i)
    for idx in by_len.values():
        for j in range(0, len(idx), 64):
            part = idx[j:j + 64]
            emb[part] = model.embed_batch(np.stack([feats[i] for i in part]))
    return emb, plan.spans


def cosine_affinity(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    A = np.clip(e @ e.T, -1.0, 1.0)
    A = (A + A.T) / 2
    np.fill_diagonal(A, 1.0)
    return A


# -------------------------------------------------------------- clustering

def binarize_top_p(A: np.ndarray, p: int) -> np.ndarray:
    """Keep each row's p largest off-diagonal affinities as 1, then symmetrize by averaging."""
    n = A.shape[0]
    M = A.copy()
    np.fill_diagonal(M, -np.inf)
    # stable sort so ties resolve by column index
    idx = np.argsort(-M, axis=1, kind="stable")[:, :p]
    B = np.zeros_like(A)
    B[np.arange(n)[:, None], idx] = 1.0
    return (B + B.T) / 2


def laplacian(adj: np.ndarray) -> np.ndarray:
    return np.diag(adj.sum(axis=1)) - adj


def _eigengaps(lam: np.ndarray, max_speakers: int) -> np.ndarray:
    return np.diff(lam[:max_speakers + 1])


def nme_sc_cluster(A: np.ndarray, max_speakers: int = 8, known_k: int | None = None,
                   seed: int = 0) -> ClusterResult:
    """Spectral clustering with the binarization p and speaker count picked from eigengaps.

    For each p the top-p graph's Laplacian eigenvalues give a normalized
    maximum eigengap g_p = max_i(lambda_{i+1} - lambda_i) / lambda_max. The p
    minimizing p / (n g_p) wins; its largest eigengap sets the speaker count.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if n == 0:
        return ClusterResult(np.zeros(0, dtype=int), 0, 0)
    if n == 1:
        return ClusterResult(np.zeros(1, dtype=int), 1, 0)
    max_speakers = max(1, min(max_speakers, n - 1))
    if known_k is not None and not 1 <= known_k <= n:
        raise ConfigError(f"known_k={known_k} must lie in [1, {n}]")

    off = A[~np.eye(n, dtype=bool)]
    degenerate = off.max() - off.min() < 1e-8

    trace = []
    best = None
    for p in range(1, min(n - 1, MAX_P) + 1):
        L_ = laplacian(binarize_top_p(A, p))
        try:
            lam = np.linalg.eigvalsh(L_)
        except np.linalg.LinAlgError as exc:
            raise TitaNetError(f"eigendecomposition failed for p={p}: {exc}") from exc
        gaps = _eigengaps(lam, max_speakers)
        lam_max = lam[-1]
        g = gaps.max() / lam_max if lam_max > 1e-12 else 0.0
        ratio = p / (n * g) if g > 0 else np.inf
        k = int(np.argmax(gaps)) + 1
        trace.append({"p": p, "g": float(g), "ratio": float(ratio), "k": k})
        if best is None or ratio < best[0]:
            best = (ratio, p, k)
    _, p_star, k_est = best
    if degenerate:
        # every pair equally similar: no eigengap structure, one speaker
        k_est = 1
    k = known_k if known_k is not None else k_est
    if k == 1:
        return ClusterResult(np.zeros(n, dtype=int), 1, p_star, trace)

    _, vecs = np.linalg.eigh(laplacian(binarize_top_p(A, p_star)))
    spectral = vecs[:, :k]
    km = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit(spectral)
    labels = _relabel_by_first_appearance(km.labels_)
    return ClusterResult(labels, int(labels.max()) + 1, p_star, trace)


def _relabel_by_first_appearance(labels: np.ndarray) -> np.ndarray:
    mapping: dict[int, int] = {}
    out = np.empty(len(labels), dtype=int)
    for i, l in enumerate(labels):
        out[i] = mapping.setdefault(int(l), len(mapping))
    return out


# -------------------------------------------------------------- hypothesis

def assemble_hypothesis(labels: Sequence[int], spans: Sequence[tuple[float, float]],
                        speech_regions: Sequence[tuple[float, float]] = ()) -> DiarizationHypothesis:
    """Turn labeled overlapping windows into speaker turns.

    Overlapping windows with one label merge; where labels differ the
    boundary falls at the middle of the overlap. Turns are clipped to the
    speech regions when given.
    """
    if len(labels) != len(spans):
        raise ConfigError(f"{len(labels)} labels for {len(spans)} spans")
    order = sorted(range(len(spans)), key=lambda i: (spans[i][0], spans[i][1]))
    segs: list[list] = []
    for i in order:
        s, e = spans[i]
        lab = int(labels[i])
        if segs and s < segs[-1][1]:
            last = segs[-1]
            if last[2] == lab:
                last[1] = max(last[1], e)
                continue
            mid = (s + last[1]) / 2
            while segs and mid <= segs[-1][0]:
                # an earlier turn is swallowed entirely by the midpoint rule
                segs.pop()
            if segs:
                if segs[-1][2] == lab:
                    segs[-1][1] = max(segs[-1][1], e)
                    continue
                segs[-1][1] = mid
            else:
                mid = s
            if e > mid:
                segs.append([mid, e, lab])
        else:
            if segs and segs[-1][2] == lab and abs(s - segs[-1][1]) < 1e-9:
                segs[-1][1] = max(segs[-1][1], e)
            else:
                segs.append([s, e, lab])
    out = [Segment.span(s, e, str(l)) for s, e, l in segs]
    if speech_regions:
        out = _clip(out, speech_regions)
    return DiarizationHypothesis(out)


def _clip(segments: Iterable[Segment], regions) -> list[Segment]:
    out = []
    for seg in segments:
        for rs, re in regions:
            s, e = max(seg.start, rs), min(seg.end, re)
            if e > s:
                out.append(Segment.span(s, e, seg.speaker))
    return out


def diarize(model, audio: AudioSignal, speech_regions, domain: str = "telephonic",
            max_speakers: int = 8, known_k: int | None = None, seed: int = 0):
    emb, spans = embed_windows(model, audio, speech_regions, domain)
    result = nme_sc_cluster(cosine_affinity(emb), max_speakers, known_k, seed)
    hyp = assemble_hypothesis(result.labels, spans, speech_regions)
    return hyp, result


# ---------------------------------------------------------------------- DER

def _optimal_mapping(overlap: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-overlap one-to-one pairing of reference rows and hypothesis columns.

    Exact search over subsets (dynamic programming, equivalent to trying every
    assignment) for up to 10 speakers a side; Hungarian assignment beyond.
    """
    n_ref, n_hyp = overlap.shape
    if n_ref == 0 or n_hyp == 0:
        return []
    if max(n_ref, n_hyp) > 10:
        r, c = linear_sum_assignment(-overlap)
        return [(int(a), int(b)) for a, b in zip(r, c) if overlap[a, b] > 0]
    transpose = n_hyp < n_ref
    M = overlap.T if transpose else overlap  # rows <= cols
    rows, cols = M.shape
    # best[mask] after assigning the first popcount(mask) rows to the columns in mask
    best = {0: (0.0, ())}
    for r in range(rows):
        nxt: dict[int, tuple[float, tuple]] = {}
        for mask, (val, pairs) in best.items():
            for c in range(cols):
                if mask >> c & 1:
                    continue
                cand = (val + M[r, c], pairs + ((r, c),))
                key = mask | (1 << c)
                if key not in nxt or cand[0] > nxt[key][0]:
                    nxt[key] = cand
        best = nxt
    pairs = max(best.values(), key=lambda v: v[0])[1]
    if transpose:
        pairs = tuple((c, r) for r, c in pairs)
    return [(a, b) for a, b in pairs if overlap[a, b] > 0]


def compute_der(reference: Sequence[Segment], hypothesis, cfg: DerConfig = DerConfig()) -> DerResult:
    """Missed speech, false alarm and confusion (seconds) over the scored time.

    A +-collar band around every reference segment edge is not scored; with
    ``ignore_overlap`` neither is any time where two or more reference
    speakers talk at once.
    """
    hyp = hypothesis.segments if isinstance(hypothesis, DiarizationHypothesis) else list(hypothesis)
    ref = list(reference)
    if not ref:
        raise ConfigError("reference has no segments")
    if cfg.collar < 0:
        raise ConfigError("collar must be >= 0")
    ref_spk = sorted({s.speaker for s in ref})
    hyp_spk = sorted({s.speaker for s in hyp})
    collars = [(b - cfg.collar, b + cfg.collar) for s in ref for b in (s.start, s.end)] if cfg.collar > 0 else []
    points = {s.start for s in ref} | {s.end for s in ref} | {s.start for s in hyp} | {s.end for s in hyp}
    points |= {c for iv in collars for c in iv}
    t = np.array(sorted(points))
    lo, hi = t[:-1], t[1:]
    mid = (lo + hi) / 2
    dur = hi - lo

    def activity(segs, names):
        act = np.zeros((len(names), len(mid)), dtype=bool)
        pos = {n: i for i, n in enumerate(names)}
        for s in segs:
            act[pos[s.speaker]] |= (mid > s.start) & (mid < s.end)
        return act

    R = activity(ref, ref_spk)
    H = activity(hyp, hyp_spk)
    scored = np.ones(len(mid), dtype=bool)
    for a, b in collars:
        scored &= ~((mid > a) & (mid < b))
    n_ref = R.sum(axis=0)
    n_hyp = H.sum(axis=0)
    if cfg.ignore_overlap:
        scored &= n_ref <= 1
    w = dur * scored

    overlap = (R[:, None, :] & H[None, :, :]) @ w if len(hyp_spk) else np.zeros((len(ref_spk), 0))
    pairs = _optimal_mapping(overlap)
    correct = np.zeros(len(mid))
    for r, h in pairs:
        correct += R[r] & H[h]
    total = float(np.sum(w * n_ref))
    missed = float(np.sum(w * np.maximum(n_ref - n_hyp, 0)))
    falarm = float(np.sum(w * np.maximum(n_hyp - n_ref, 0)))
    confusion = float(np.sum(w * (np.minimum(n_ref, n_hyp) - correct)))
    der = (missed + falarm + confusion) / total if total > 0 else 0.0
    mapping = {ref_spk[r]: hyp_spk[h] for r, h in pairs}
    return DerResult(der, missed, falarm, confusion, total, mapping)
