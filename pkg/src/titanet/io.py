"""On-disk formats: RTTM, manifests, trial lists, score files, embedding
stores, checkpoints and flat key=value config files."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .diarize import Segment
from .encoder import EncoderConfig
from .errors import CheckpointError, ParseError, ShapeError
from .train import ManifestRow
from .verify import Trial

# ----------------------------------------------------------------------- RTTM


def parse_rttm(path) -> dict[str, list[Segment]]:
    """SPEAKER lines grouped by session id; other record types are skipped."""
    out: dict[str, list[Segment]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] != "SPEAKER":
            continue
        if len(parts) < 8:
            raise ParseError(f"{path}:{lineno}: SPEAKER line has {len(parts)} fields, expected 10")
        try:
            onset, dur = float(parts[3]), float(parts[4])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: onset/duration not numeric: {parts[3]!r} {parts[4]!r}") from None
        if onset < 0 or dur <= 0 or not np.isfinite(onset + dur):
            raise ParseError(f"{path}:{lineno}: need onset >= 0 and duration > 0, got {onset} {dur}")
        out.setdefault(parts[1], []).append(Segment(onset, dur, parts[7]))
    return out


def format_rttm(session: str, segments: Iterable[Segment]) -> str:
    lines = []
    for s in segments:
        lines.append(f"SPEAKER {session} 1 {s.start!r} {s.duration!r} <NA> <NA> {s.speaker} <NA> <NA>")
    return "".join(l + "\n" for l in lines)


def write_rttm(path, sessions: Mapping[str, Sequence[Segment]]):
    with open(path, "w") as f:
        for sess, segs in sessions.items():
            f.write(format_rttm(sess, segs))


def speech_regions(segments: Iterable[Segment]) -> list[tuple[float, float]]:
    """Union of all speakers' segments as sorted, non-overlapping regions."""
    spans = sorted((s.start, s.end) for s in segments)
    out: list[list[float]] = []
    for s, e in spans:
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


# ------------------------------------------------------------------- manifest

def write_manifest(path, rows: Iterable[ManifestRow]):
    with open(path, "w") as f:
        for r in rows:
            f.write(f"{r.path}\t{r.duration:.6g}\t{r.speaker}\n")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected path<TAB>duration<TAB>speaker")
        try:
            dur = float(parts[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: duration {parts[1]!r} is not a number") from None
        rows.append(ManifestRow(parts[0], dur, parts[2]))
    return rows


# --------------------------------------------------------------------- trials

def read_trials(path) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ParseError(f"{path}:{lineno}: expected '<0|1> <enroll> <test>', got {line!r}")
        trials.append(Trial(parts[1], parts[2], parts[0] == "1"))
    return trials


def write_trials(path, trials: Iterable[Trial]):
    with open(path, "w") as f:
        for t in trials:
            f.write(f"{int(t.target)} {t.enroll_id} {t.test_id}\n")


def write_scores(path, trials: Sequence[Trial], scores: Sequence[float]):
    with open(path, "w") as f:
        for t, s in zip(trials, scores):
            f.write(f"{t.enroll_id} {t.test_id} {s:.10f}\n")


# ------------------------------------------------------------ embedding store

def write_embeddings(path, store: Mapping[str, np.ndarray]):
    """Records of ``[u32 id length][utf-8 id][192 x f64]``, little-endian."""
    with open(path, "wb") as f:
        for key, vec in store.items():
            v = np.asarray(vec, dtype="<f8")
            if v.shape != (192,):
                raise ShapeError(f"embedding for {key!r} has shape {v.shape}, expected (192,)")
            raw = key.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw + v.tobytes())


def read_embeddings(path, dim: int = 192) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    out = {}
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParseError(f"{path}: truncated id length at byte {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        end = pos + n + 8 * dim
        if end > len(data):
            raise ParseError(f"{path}: truncated record at byte {pos - 4}")
        try:
            key = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"{path}: id at byte {pos} is not valid utf-8") from None
        out[key] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos + n).astype(np.float64)
        pos = end
    return out


# ----------------------------------------------------------------- checkpoint

MAGIC = b"TNETCKPT"
VERSION = 1


def _model_arrays(model) -> list[tuple[str, np.ndarray]]:
    arrays = [(p.name, p.data) for p in model.parameters()]
    for bn, name in zip(model.batchnorms(), _bn_names(model)):
        arrays.append((f"{name}.running_mean", bn.running_mean))
        arrays.append((f"{name}.running_var", bn.running_var))
    return arrays


def _bn_names(model) -> list[str]:
    return [bn.gamma.name.rsplit(".", 1)[0] for bn in model.batchnorms()]


def save_checkpoint(model, path):
    """Container: magic, u32 version, u32 header length, JSON header, f64 LE blobs."""
    arrays = _model_arrays(model)
    header = {
        "encoder": asdict(model.config),
        "n_classes": model.n_classes,
        "embed_dim": model.decoder.embed_dim,
        "attention_dim": model.pooling.w1.shape[0],
        "meta": model.meta,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<II", VERSION, len(head)) + head + blob)
    tmp.replace(path)


def _read_header(data: bytes, path) -> tuple[dict, int]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version} is incompatible with {VERSION}")
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    return header, 16 + hlen


def load_checkpoint(path, model=None):
    """Rebuild a model from ``path``, or load into ``model`` after checking shapes.

    Nothing is modified unless the whole file validates.
    """
    from .pooldec import build_model

    data = Path(path).read_bytes()
    header, pos = _read_header(data, path)
    specs = header["tensors"]
    need = sum(int(np.prod(s["shape"])) for s in specs) * 8
    if len(data) - pos != need:
        raise CheckpointError(f"{path}: expected {need} bytes of tensor data, found {len(data) - pos}")
    values = {}
    for s in specs:
        n = int(np.prod(s["shape"]))
        values[s["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(s["shape"]).copy()
        pos += 8 * n

    enc_fields = {f.name for f in fields(EncoderConfig)}
    cfg_dict = {k: v for k, v in header["encoder"].items() if k in enc_fields}
    cfg_dict["mega_kernels"] = tuple(cfg_dict["mega_kernels"])
    cfg = EncoderConfig(**cfg_dict)
    if model is None:
        model = build_model(cfg, header["n_classes"])
    targets = dict(_model_arrays(model))
    for name, arr in values.items():
        if name not in targets:
            raise ShapeError(f"checkpoint tensor {name!r} has no counterpart in the model")
        if targets[name].shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {targets[name].shape}")
    if set(targets) != set(values):
        missing = sorted(set(targets) - set(values))[:3]
        raise ShapeError(f"model tensors missing from checkpoint: {missing}")

    for p in model.parameters():
        p.data = values[p.name]
    for bn, name in zip(model.batchnorms(), _bn_names(model)):
        bn.running_mean = values[f"{name}.running_mean"]
        bn.running_var = values[f"{name}.running_var"]
    model.meta = dict(header.get("meta", {}))
    return model


# --------------------------------------------------------------- config file

def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment. Keys mirror CLI flags."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out
