"""WAV ingestion, log-mel features and time segmentation.

Framing uses no center padding, so a signal of N samples gives
``1 + (N - win) // hop`` frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, UnsupportedFormatError

SAMPLE_RATE = 16000
NORM_EPS = 1e-5
CHUNK_SECONDS = (1.5, 2.0, 3.0)


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def crop(self, start: float, end: float) -> "AudioSignal":
        a = int(round(start * self.sample_rate))
        b = int(round(end * self.sample_rate))
        return AudioSignal(self.samples[a:b], self.sample_rate)


@dataclass(frozen=True)
class FrameConfig:
    win_length: float = 0.025
    hop_length: float = 0.010
    n_fft: int = 512
    n_mels: int = 80
    log_floor: float = 1e-10

    def frame_samples(self, sample_rate: int) -> tuple[int, int]:
        win = int(round(self.win_length * sample_rate))
        hop = int(round(self.hop_length * sample_rate))
        if win > self.n_fft:
            raise ConfigError(f"window of {win} samples exceeds n_fft={self.n_fft}")
        if hop <= 0:
            raise ConfigError("hop_length must be positive")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        return win, hop


@dataclass
class MelSpectrogram:
    """``values`` is T x n_mels; ``frame_times`` holds frame centers in seconds."""

    values: np.ndarray
    frame_times: np.ndarray
    hop_length: float = 0.010

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames * self.hop_length

    def slice(self, start: int, stop: int) -> "MelSpectrogram":
        return MelSpectrogram(self.values[start:stop], self.frame_times[start:stop], self.hop_length)


@dataclass
class WindowPlan:
    window: float
    shift: float
    spans: list[tuple[float, float]] = field(default_factory=list)


# ------------------------------------------------------------------------ wav

def load_wav(path) -> AudioSignal:
    """Read a mono 16-bit PCM RIFF/WAVE file into [-1, 1] floats."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ParseError(f"{path}: RIFF header truncated ({len(raw)} bytes)")
    if raw[0:4] != b"RIFF":
        raise ParseError(f"{path}: RIFF chunk id missing (got {raw[0:4]!r})")
    if raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: RIFF form type is {raw[8:12]!r}, expected b'WAVE'")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise ParseError(f"{path}: chunk {cid!r} declares {size} bytes, only {len(body)} present")
        if cid == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: 'fmt ' chunk too short ({size} bytes)")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise ParseError(f"{path}: no 'fmt ' chunk")
    if data is None:
        raise ParseError(f"{path}: no 'data' chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormatError(f"{path}: audio format {audio_format} is not PCM")
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: {channels} channels, only mono is supported")
    if bits != 16:
        raise UnsupportedFormatError(f"{path}: {bits}-bit samples, only 16-bit is supported")
    if len(data) % 2:
        raise ParseError(f"{path}: 'data' chunk has odd byte count {len(data)}")
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64)
    return AudioSignal(pcm / 32768.0, sample_rate)


def write_wav(path, signal: AudioSignal):
    """Write mono 16-bit PCM; amplitudes are clipped to the representable range."""
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, signal.sample_rate, signal.sample_rate * 2, 2, 16)
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm)


# ---------------------------------------------------------------------- mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = 80, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int = 80, n_fft: int = 512, sample_rate: int = SAMPLE_RATE,
                   oversample: int = 32) -> np.ndarray:
    """Triangular filters on the mel scale, shape [n_mels, n_fft // 2 + 1].

    Each weight is the triangle's average over the FFT bin's own frequency
    cell rather than its value at the bin center. Narrow low-frequency
    filters therefore never come out empty, and every bin touches a filter.
    """
    nyq = sample_rate / 2
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyq), n_mels + 2))
    n_bins = n_fft // 2 + 1
    df = sample_rate / n_fft
    centers = np.arange(n_bins) * df
    offs = (np.arange(oversample) + 0.5) / oversample - 0.5
    f = np.clip(centers[:, None] + offs[None, :] * df, 0.0, nyq)
    lo, mid, hi = edges[:-2, None, None], edges[1:-1, None, None], edges[2:, None, None]
    up = (f[None] - lo) / (mid - lo)
    down = (hi - f[None]) / (hi - mid)
    tri = np.maximum(0.0, np.minimum(up, down))
    return tri.mean(axis=2)


def compute_mel_spectrogram(signal: AudioSignal, cfg: FrameConfig = FrameConfig()) -> MelSpectrogram:
    if signal.sample_rate != SAMPLE_RATE:
        raise ConfigError(f"expected {SAMPLE_RATE} Hz audio, got {signal.sample_rate} Hz (no resampling)")
    win, hop = cfg.frame_samples(signal.sample_rate)
    x = signal.samples
    if len(x) < win:
        raise ConfigError(f"signal has {len(x)} samples; need at least {win} "
                          f"({cfg.win_length * 1000:.0f} ms) for one frame")
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win + 1)[:-1]  # periodic Hann
    spectrum = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    fb = _cached_filterbank(cfg.n_mels, cfg.n_fft, signal.sample_rate)
    values = np.log(power @ fb.T + cfg.log_floor)
    times = (np.arange(n_frames) * hop + win / 2) / signal.sample_rate
    return MelSpectrogram(values, times, hop / signal.sample_rate)


_FB_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _cached_filterbank(n_mels: int, n_fft: int, sr: int) -> np.ndarray:
    key = (n_mels, n_fft, sr)
    if key not in _FB_CACHE:
        fb = mel_filterbank(n_mels, n_fft, sr)
        fb.setflags(write=False)
        _FB_CACHE[key] = fb
    return _FB_CACHE[key]


def normalize_per_frequency(mel: MelSpectrogram, eps: float = NORM_EPS) -> MelSpectrogram:
    """Standardize each mel bin over time (population std, ``std + eps`` denominator)."""
    v = mel.values
    out = (v - v.mean(axis=0)) / (v.std(axis=0) + eps)
    return MelSpectrogram(out, mel.frame_times, mel.hop_length)


def extract_features(signal: AudioSignal, cfg: FrameConfig = FrameConfig()) -> MelSpectrogram:
    """Log-mel followed by per-frequency normalization: the encoder's input."""
    return normalize_per_frequency(compute_mel_spectrogram(signal, cfg))


# -------------------------------------------------------------- segmentation

def chunk_training_utterance(mel: MelSpectrogram, rng_seed: int) -> list[MelSpectrogram]:
    """Split utterances longer than 3 s into random 1.5/2/3 s pieces.

    Each draw picks uniformly among the chunk lengths that still fit in the
    remaining frames; a tail shorter than 1.5 s is dropped.
    """
    lengths = [int(round(s / mel.hop_length)) for s in CHUNK_SECONDS]
    if mel.n_frames <= lengths[-1]:
        return [mel]
    rng = np.random.default_rng(rng_seed)
    chunks = []
    pos = 0
    while mel.n_frames - pos >= lengths[0]:
        fits = [n for n in lengths if n <= mel.n_frames - pos]
        n = fits[int(rng.integers(len(fits)))]
        chunks.append(mel.slice(pos, pos + n))
        pos += n
    return chunks


_TOL = 1e-9


def plan_windows(speech_regions, window: float, shift: float) -> WindowPlan:
    """Tile each speech region with windows starting at the region onset.

    Spans advance by ``shift``. Past the last full window, a tail span is
    appended when it is at least half a window long; otherwise the last full
    window is stretched to the region end. Regions shorter than one window
    become a single span.
    """
    if window <= 0 or shift <= 0:
        raise ConfigError(f"window and shift must be positive (window={window}, shift={shift})")
    if shift > window:
        raise ConfigError(f"shift {shift} exceeds window {window}; speech would go uncovered")
    spans: list[tuple[float, float]] = []
    prev_end = -np.inf
    for start, end in speech_regions:
        if end <= start:
            continue
        if start < prev_end - _TOL:
            raise ConfigError(f"speech regions overlap or are unordered at {start}")
        prev_end = end
        if end - start <= window + _TOL:
            spans.append((start, end))
            continue
        region = []
        s = start
        while s + window <= end + _TOL:
            region.append((s, min(s + window, end)))
            s = start + len(region) * shift
        last_start, last_end = region[-1]
        if end - last_end > _TOL:
            tail_start = last_start + shift
            if end - tail_start >= 0.5 * window - _TOL:
                region.append((tail_start, end))
            else:
                region[-1] = (last_start, end)
        spans.extend(region)
    return WindowPlan(window, shift, spans)
