"""Additive angular margin loss, SGD with cosine annealing, synthetic speakers,
and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .errors import ConfigError, TrainingDiverged
from .features import (AudioSignal, FrameConfig, chunk_training_utterance, extract_features,
                       load_wav, write_wav)
from .layers import Mode, Parameter, Tensor, _accum, _result

log = logging.getLogger(__name__)

ARCCOS_CLAMP = 1e-7


@dataclass(frozen=True)
class AAMConfig:
    margin: float = 0.2
    scale: float = 30.0

    def validate(self):
        if not 0.0 <= self.margin < math.pi / 2:
            raise ConfigError(f"margin must lie in [0, pi/2) radians, got {self.margin}")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    initial_lr: float = 0.08
    min_lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    crop_frames: int | None = None
    val_fraction: float = 0.1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.initial_lr >= self.min_lr >= 0:
            raise ConfigError(f"need initial_lr >= min_lr >= 0, got {self.initial_lr}, {self.min_lr}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for train-mode batchnorm")
        return self


# ------------------------------------------------------------------- loss

def aam_loss(cos_logits: Tensor, labels: Sequence[int], cfg: AAMConfig = AAMConfig()) -> Tensor:
    """Mean cross-entropy of s*cos(theta) with the target angle widened by m.

    The target cosine is clamped to [-1 + 1e-7, 1 - 1e-7] before arccos; inside
    the clamp band its gradient is zero.
    """
    cfg.validate()
    c = cos_logits.data
    if c.ndim != 2:
        raise ConfigError(f"cos_logits must be [batch, classes], got shape {c.shape}")
    N, n = c.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (N,):
        raise ConfigError(f"expected {N} labels, got {y.shape}")
    if np.any(y < 0) or np.any(y >= n):
        bad = y[(y < 0) | (y >= n)][0]
        raise ConfigError(f"label {bad} out of range for {n} classes")
    rows = np.arange(N)
    ct = c[rows, y]
    ct_clamped = np.clip(ct, -1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP)
    theta = np.arccos(ct_clamped)
    target = np.cos(theta + cfg.margin)
    z = cfg.scale * c
    z[rows, y] = cfg.scale * target
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(denom)
    loss = -logp[rows, y].mean()
    p = e / denom

    def backward(g):
        dz = p.copy()
        dz[rows, y] -= 1.0
        dz *= g / N
        dc = cfg.scale * dz
        inside = (ct > -1 + ARCCOS_CLAMP) & (ct < 1 - ARCCOS_CLAMP)
        # d cos(theta + m) / d cos(theta) = sin(theta + m) / sin(theta)
        dtarget = np.where(inside, np.sin(theta + cfg.margin) / np.sin(theta), 0.0)
        dc[rows, y] = cfg.scale * dz[rows, y] * dtarget
        _accum(cos_logits, dc)

    return _result(np.array(loss), (cos_logits,), backward)


def accuracy(cos_logits: np.ndarray, labels: Sequence[int]) -> float:
    return float(np.mean(np.argmax(cos_logits, axis=1) == np.asarray(labels)))


# ------------------------------------------------------------- optimizer

def cosine_annealing_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps <= 0 or step >= total_steps:
        return cfg.min_lr
    step = max(step, 0)
    return cfg.min_lr + 0.5 * (cfg.initial_lr - cfg.min_lr) * (1 + math.cos(math.pi * step / total_steps))


class SGD:
    """Heavy-ball SGD: v <- momentum*v + grad; p <- p - lr*v; grads zeroed after."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        sgd_step(self.params, lr, self.momentum, self.velocity)


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float, velocity: list[np.ndarray]):
    for i, p in enumerate(params):
        if p.grad is not None:
            velocity[i] = momentum * velocity[i] + p.grad
        else:
            velocity[i] = momentum * velocity[i]
        if lr != 0.0:
            p.data = p.data - lr * velocity[i]
        p.grad = None


# ------------------------------------------------------- synthetic speakers

# rough F1/F2/F3 targets (Hz) of a small shared vowel inventory
VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240],
    [530, 1840, 2480], [570, 840, 2410], [660, 1720, 2410],
    [440, 1020, 2240], [390, 1990, 2550],
], dtype=np.float64)


@dataclass(frozen=True)
class SyntheticCorpus:
    n_speakers: int = 20
    utterances_per_speaker: int = 50
    min_duration: float = 1.5
    max_duration: float = 2.5
    sample_rate: int = 16000
    seed: int = 0


@dataclass(frozen=True)
class SpeakerVoice:
    """Generative parameters that make one synthetic speaker recognizable."""

    f0: float
    formant_scale: float
    tilt_db_per_octave: float
    ripple_freqs: tuple[float, ...]
    ripple_phases: tuple[float, ...]
    ripple_depth_db: float
    bandwidth: float
    noise_db: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "SpeakerVoice":
        return cls(
            f0=float(np.exp(rng.uniform(np.log(85), np.log(250)))),
            formant_scale=float(rng.uniform(0.82, 1.22)),
            tilt_db_per_octave=float(rng.uniform(-10, -3)),
            ripple_freqs=tuple(float(v) for v in rng.uniform(0.5, 3.0, size=3)),
            ripple_phases=tuple(float(v) for v in rng.uniform(0, 2 * np.pi, size=3)),
            ripple_depth_db=float(rng.uniform(3, 8)),
            bandwidth=float(rng.uniform(60, 140)),
            noise_db=float(rng.uniform(-40, -30)),
        )

    def envelope_db(self, freqs: np.ndarray, formants: np.ndarray) -> np.ndarray:
        """Spectral envelope in dB at ``freqs`` [F, H] given formants [F, 3]."""
        f = np.maximum(freqs, 1.0)
        res = np.zeros_like(f)
        for k in range(formants.shape[1]):
            bw = self.bandwidth * (1 + 0.5 * k)
            res += 1.0 / (1.0 + ((f - formants[:, k:k + 1]) / bw) ** 2)
        db = 20 * np.log10(res + 1e-3)
        db += self.tilt_db_per_octave * np.log2(f / 100.0)
        octave = np.log2(f / 100.0)
        for rf, rp in zip(self.ripple_freqs, self.ripple_phases):
            db += self.ripple_depth_db / 3 * np.cos(2 * np.pi * rf * octave + rp)
        return db


def synthesize_utterance(voice: SpeakerVoice, duration: float, rng: np.random.Generator,
                         sample_rate: int = 16000) -> np.ndarray:
    n = int(round(duration * sample_rate))
    step = sample_rate // 200  # 5 ms control rate
    nf = n // step + 2
    # phone sequence with coarticulation smoothing
    bounds = np.cumsum(rng.integers(16, 40, size=nf))
    phone_ids = rng.integers(len(VOWELS), size=len(bounds))
    seg = np.searchsorted(bounds, np.arange(nf), side="right")
    formants = VOWELS[phone_ids[seg]] * voice.formant_scale
    kernel = np.hanning(9)
    kernel /= kernel.sum()
    formants = np.stack([np.convolve(np.pad(formants[:, k], 4, mode="edge"), kernel, "valid")
                         for k in range(3)], axis=1)
    drift = np.cumsum(rng.normal(0, 0.01, size=nf))
    drift -= drift.mean()
    f0 = voice.f0 * float(rng.uniform(0.95, 1.05)) * np.exp(np.clip(drift, -0.15, 0.15))

    top = 0.47 * sample_rate
    n_harm = int(top // f0.min())
    harm = np.arange(1, n_harm + 1)
    freqs = f0[:, None] * harm[None, :]
    amp = 10 ** (voice.envelope_db(freqs, formants) / 20) * (freqs < top)

    t_ctrl = np.arange(nf) * step
    t = np.arange(n)
    f0_s = np.interp(t, t_ctrl, f0)
    phase = 2 * np.pi * np.cumsum(f0_s) / sample_rate
    offsets = rng.uniform(0, 2 * np.pi, size=n_harm)
    out = np.zeros(n)
    for i, h in enumerate(harm):
        a = np.interp(t, t_ctrl, amp[:, i])
        out += a * np.sin(h * phase + offsets[i])
    # syllable-rate loudness and a noise floor
    syl = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(3, 6) * t / sample_rate + rng.uniform(0, 2 * np.pi))
    out *= syl
    out /= np.max(np.abs(out)) + 1e-12
    out += 10 ** (voice.noise_db / 20) * rng.normal(size=n)
    return 0.5 * out / (np.max(np.abs(out)) + 1e-12)


def corpus_voices(corpus: SyntheticCorpus) -> list[SpeakerVoice]:
    return [SpeakerVoice.draw(np.random.default_rng([corpus.seed, 7, i])) for i in range(corpus.n_speakers)]


def speaker_name(i: int) -> str:
    return f"spk{i:03d}"


@dataclass
class ManifestRow:
    path: str
    duration: float
    speaker: str


def generate_synthetic_corpus(corpus: SyntheticCorpus, out_dir) -> list[ManifestRow]:
    """Write one WAV per utterance under ``out_dir`` and return manifest rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, voice in enumerate(corpus_voices(corpus)):
        for u in range(corpus.utterances_per_speaker):
            rng = np.random.default_rng([corpus.seed, 11, i, u])
            dur = round(float(rng.uniform(corpus.min_duration, corpus.max_duration)), 2)
            samples = synthesize_utterance(voice, dur, rng, corpus.sample_rate)
            path = out / f"{speaker_name(i)}_{u:03d}.wav"
            write_wav(path, AudioSignal(samples, corpus.sample_rate))
            rows.append(ManifestRow(str(path), dur, speaker_name(i)))
    return rows


def synthesize_conversation(corpus: SyntheticCorpus, speakers: Sequence[int], n_turns: int = 12,
                            seed: int = 0, turn=(1.5, 3.5), gap=(0.2, 0.6)):
    """Alternating turns of corpus speakers separated by silence.

    Turns are fresh utterances of the given voices, not copies of corpus
    files. Returns the signal and the reference turns.
    """
    from .diarize import Segment

    if len(speakers) < 1 or n_turns < 1:
        raise ConfigError("need at least one speaker and one turn")
    voices = corpus_voices(corpus)
    rng = np.random.default_rng([seed, 17])
    sr = corpus.sample_rate
    pieces, segments, t = [], [], 0.0
    for k in range(n_turns):
        idx = speakers[k % len(speakers)]
        pad = round(float(rng.uniform(*gap)), 2)
        dur = round(float(rng.uniform(*turn)), 2)
        pieces.append(np.zeros(int(round(pad * sr))))
        pieces.append(synthesize_utterance(voices[idx], dur, rng, sr))
        t = round(t + pad, 2)
        segments.append(Segment(t, dur, speaker_name(idx)))
        t = round(t + dur, 2)
    pieces.append(np.zeros(int(round(gap[0] * sr))))
    return AudioSignal(np.concatenate(pieces), sr), segments


# ------------------------------------------------------------------ training

@dataclass
class Example:
    feats: np.ndarray
    label: int
    utt: str


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    speakers: list[str] = field(default_factory=list)
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.log[-1]


def split_manifest(rows: Sequence[ManifestRow], fraction: float, seed: int):
    """Hold out ``fraction`` of each speaker's files (at least one) for validation."""
    by_spk: dict[str, list[ManifestRow]] = {}
    for r in rows:
        by_spk.setdefault(r.speaker, []).append(r)
    rng = np.random.default_rng([seed, 3])
    train, val = [], []
    for spk in sorted(by_spk):
        items = by_spk[spk]
        order = rng.permutation(len(items))
        n_val = max(1, int(round(fraction * len(items)))) if len(items) > 1 else 0
        val += [items[j] for j in order[:n_val]]
        train += [items[j] for j in order[n_val:]]
    return train, val


def load_examples(rows: Sequence[ManifestRow], speakers: Sequence[str], seed: int, chunk: bool,
                  frame_cfg: FrameConfig = FrameConfig()) -> list[Example]:
    index = {s: i for i, s in enumerate(speakers)}
    out = []
    for k, r in enumerate(rows):
        mel = extract_features(load_wav(r.path), frame_cfg)
        pieces = chunk_training_utterance(mel, seed * 100003 + k) if chunk else [mel]
        for j, m in enumerate(pieces):
            out.append(Example(m.values, index[r.speaker], r.path if len(pieces) == 1 else f"{r.path}#{j}"))
    return out


def _batch(examples: Sequence[Example], crop: int | None, rng: np.random.Generator):
    n = min(e.feats.shape[0] for e in examples)
    if crop is not None:
        n = min(n, crop)
    feats = np.empty((len(examples), n, examples[0].feats.shape[1]))
    for i, e in enumerate(examples):
        off = int(rng.integers(e.feats.shape[0] - n + 1))
        feats[i] = e.feats[off:off + n]
    return feats, np.array([e.label for e in examples])


def evaluate_accuracy(model, examples: Sequence[Example]) -> float:
    if not examples:
        return float("nan")
    correct = 0
    with L.no_grad():
        for e in examples:
            _, logits = model.forward(e.feats[None], Mode.EVAL)
            correct += int(np.argmax(logits.data[0]) == e.label)
    return correct / len(examples)


def snapshot(model) -> dict:
    return {
        "params": [p.data.copy() for p in model.parameters()],
        "bn": [(b.running_mean.copy(), b.running_var.copy()) for b in model.batchnorms()],
    }


def restore(model, snap: dict):
    for p, v in zip(model.parameters(), snap["params"]):
        p.data = v.copy()
    for b, (m, v) in zip(model.batchnorms(), snap["bn"]):
        b.running_mean, b.running_var = m.copy(), v.copy()


def train(model, rows: Sequence[ManifestRow], cfg: TrainConfig, aam: AAMConfig = AAMConfig(),
          out_dir=None, restore_best: bool = True) -> TrainResult:
    """Train end to end with the AAM loss; keep the epoch with best held-out accuracy.

    If ``out_dir`` is given, ``metrics.csv`` and ``best.ckpt`` are written there.
    """
    from .io import save_checkpoint  # io imports model types; avoid a cycle at import time

    cfg.validate()
    aam.validate()
    speakers = sorted({r.speaker for r in rows})
    if len(speakers) != model.n_classes:
        raise ConfigError(f"model head has {model.n_classes} classes but corpus has {len(speakers)} speakers")
    train_rows, val_rows = split_manifest(rows, cfg.val_fraction, cfg.seed)
    train_ex = load_examples(train_rows, speakers, cfg.seed, chunk=True)
    val_ex = load_examples(val_rows, speakers, cfg.seed, chunk=False)
    result = TrainResult(speakers=speakers, train_ids=[r.path for r in train_rows],
                         val_ids=[r.path for r in val_rows])

    rng = np.random.default_rng([cfg.seed, 5])
    params = model.parameters()
    opt = SGD(params, cfg.momentum)
    steps_per_epoch = math.ceil(len(train_ex) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    best = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ex))
        losses, correct, seen = [], 0, 0
        lr = cosine_annealing_lr(step, total, cfg)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue
            feats, labels = _batch([train_ex[i] for i in idx], cfg.crop_frames, rng)
            lr = cosine_annealing_lr(step, total, cfg)
            _, logits = model.forward(feats, Mode.TRAIN)
            loss = aam_loss(logits, labels, aam)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {step} (lr={lr:.4g})")
            loss.backward()
            opt.step(lr)
            losses.append(value * len(idx))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(idx)
            step += 1
        val_acc = evaluate_accuracy(model, val_ex)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.sum(losses)) / seen,
               "train_acc": correct / seen, "val_acc": val_acc}
        result.log.append(row)
        log.info("epoch %d lr %.5f loss %.4f acc %.4f val %.4f", epoch, lr, row["train_loss"],
                 row["train_acc"], val_acc)
        if val_acc > result.best_val_acc:
            result.best_val_acc, result.best_epoch = val_acc, epoch
            best = snapshot(model)
            if out is not None:
                model.meta.update(speakers=speakers, aam=asdict(aam), train=asdict(cfg),
                                  best_epoch=epoch, best_val_acc=val_acc)
                save_checkpoint(model, out / "best.ckpt")
    if out is not None:
        write_metrics(result.log, out / "metrics.csv")
    model.meta.update(speakers=speakers, aam=asdict(aam), train=asdict(cfg),
                      best_epoch=result.best_epoch, best_val_acc=result.best_val_acc)
    if restore_best and best is not None:
        restore(model, best)
    return result


METRIC_FIELDS = ["epoch", "lr", "train_loss", "train_acc", "val_acc"]


def write_metrics(rows: Sequence[dict], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})
