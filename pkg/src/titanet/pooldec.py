"""Attentive statistics pooling, the 192-dim embedding decoder and cosine head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .encoder import Encoder, EncoderConfig, build_encoder, encoder_forward
from .errors import ConfigError, ShapeError
from .features import MelSpectrogram
from .layers import BatchNorm1d, Mode, Parameter, Tensor

EMBED_DIM = 192
ATTENTION_DIM = 128
POOL_EPS = 1e-9


class AttentivePooling:
    """Per-channel attention over time, then weighted mean and std.

    score = W2 tanh(W1 H + b1) + b2 gives one distribution over frames for
    every channel. Reductions over time sum in sorted order, so the pooled
    statistic does not depend on frame order at all.
    """

    def __init__(self, channels: int, rng: np.random.Generator, hidden: int = ATTENTION_DIM,
                 name: str = "pool"):
        self.channels = channels
        self.w1 = Parameter(L.init_uniform(rng, (hidden, channels, 1), channels), f"{name}.att1.weight")
        self.b1 = Parameter(L.init_uniform(rng, (hidden,), channels), f"{name}.att1.bias")
        self.w2 = Parameter(L.init_uniform(rng, (channels, hidden, 1), hidden), f"{name}.att2.weight")
        self.b2 = Parameter(L.init_uniform(rng, (channels,), hidden), f"{name}.att2.bias")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def attention(self, H: Tensor) -> Tensor:
        h = L.tanh(L.conv1d_pointwise(H, self.w1, self.b1))
        scores = L.conv1d_pointwise(h, self.w2, self.b2)
        return L.softmax(scores, axis=2, order_invariant=True)

    def __call__(self, H: Tensor) -> Tensor:
        return attentive_stats_pool(H, self)


def attentive_stats_pool(H: Tensor, pool: AttentivePooling, eps: float = POOL_EPS,
                         order_invariant: bool = True) -> Tensor:
    """[B, C, T] -> [B, 2C]: concat of attention-weighted mean and std."""
    if H.ndim != 3 or H.shape[1] != pool.channels:
        raise ShapeError(f"pooling expects [B, {pool.channels}, T], got {list(H.shape)}")
    if H.shape[2] < 1:
        raise ShapeError("pooling needs at least one frame")
    return L.attentive_stats(H, pool.w1, pool.b1, pool.w2, pool.b2, eps, order_invariant)


class Decoder:
    """Linear 2E -> 192 with batchnorm (the t-vector), then a bias-free cosine head."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator,
                 embed_dim: int = EMBED_DIM, name: str = "decoder"):
        if n_classes < 1:
            raise ConfigError("classifier head needs at least one class")
        self.in_dim = in_dim
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.w = Parameter(L.init_uniform(rng, (embed_dim, in_dim), in_dim), f"{name}.emb.weight")
        self.b = Parameter(L.init_uniform(rng, (embed_dim,), in_dim), f"{name}.emb.bias")
        self.bn = BatchNorm1d(embed_dim, f"{name}.emb.bn")
        self.head = Parameter(L.init_uniform(rng, (n_classes, embed_dim), embed_dim), f"{name}.head.weight")

    def parameters(self, include_head: bool = True):
        out = [self.w, self.b, *self.bn.parameters()]
        return out + [self.head] if include_head else out

    def embed(self, S: Tensor, mode: Mode) -> Tensor:
        return self.bn(L.linear(S, self.w, self.b), mode)

    def logits(self, emb: Tensor) -> Tensor:
        """cos(theta_j) between each embedding and each class row, in [-1, 1]."""
        e = L.l2_normalize(emb, axis=1)
        W = L.l2_normalize(self.head, axis=1)
        return L.linear(e, W)

    def __call__(self, S: Tensor, mode: Mode) -> tuple[Tensor, Tensor]:
        return decode(S, self, mode)


def decode(S: Tensor, dec: Decoder, mode: Mode) -> tuple[Tensor, Tensor]:
    emb = dec.embed(S, mode)
    return emb, dec.logits(emb)


@dataclass
class SpeakerModel:
    encoder: Encoder
    pooling: AttentivePooling
    decoder: Decoder
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def n_classes(self) -> int:
        return self.decoder.n_classes

    def parameters(self, include_head: bool = True) -> list[Parameter]:
        return (self.encoder.parameters() + self.pooling.parameters()
                + self.decoder.parameters(include_head))

    def batchnorms(self) -> list[BatchNorm1d]:
        return self.encoder.batchnorms() + [self.decoder.bn]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def forward(self, feats, mode: Mode) -> tuple[Tensor, Tensor]:
        """[B, T, 80] features -> (embeddings [B, 192], cosine logits [B, N]).

        Training and accuracy checks skip the sorted time sums; embed_batch
        keeps them so embeddings are exactly frame-order invariant.
        """
        H = encoder_forward(self.encoder, feats, mode)
        S = attentive_stats_pool(H, self.pooling, order_invariant=False)
        return decode(S, self.decoder, mode)

    def embed_batch(self, feats: np.ndarray) -> np.ndarray:
        """Eval-mode unit-norm embeddings for a [B, T, 80] batch."""
        with L.no_grad():
            H = encoder_forward(self.encoder, feats, Mode.EVAL)
            S = attentive_stats_pool(H, self.pooling)
            emb = self.decoder.embed(S, Mode.EVAL).data
        return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def build_model(cfg: EncoderConfig, n_classes: int, seed: int = 0) -> SpeakerModel:
    enc = build_encoder(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    pooling = AttentivePooling(cfg.epilogue_channels, rng)
    decoder = Decoder(2 * cfg.epilogue_channels, n_classes, rng)
    return SpeakerModel(enc, pooling, decoder)


def extract_embedding(model: SpeakerModel, mel: MelSpectrogram) -> np.ndarray:
    """Unit-norm t-vector for one (already normalized) spectrogram."""
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ShapeError(f"expected a T x 80 spectrogram with T >= 1, got shape {values.shape}")
    return model.embed_batch(values[None])[0]


def count_parameters(model: SpeakerModel) -> dict[str, int]:
    """Scalar trainables: encoder + pooling + decoder, with the class head apart."""
    enc = sum(p.data.size for p in model.encoder.parameters())
    pool = sum(p.data.size for p in model.pooling.parameters())
    dec = sum(p.data.size for p in model.decoder.parameters(include_head=False))
    return {"encoder": enc, "pooling": pool, "decoder": dec, "total": enc + pool + dec,
            "head": model.decoder.head.data.size}


def parameter_breakdown(cfg: EncoderConfig, n_classes: int = 0) -> dict[str, int]:
    """Closed-form per-layer counts for a full model; the class head is listed apart."""
    from .encoder import encoder_parameter_breakdown

    E, d = cfg.epilogue_channels, ATTENTION_DIM
    out = dict(encoder_parameter_breakdown(cfg))
    out["pooling"] = d * E + d + E * d + E
    out["decoder"] = EMBED_DIM * 2 * E + EMBED_DIM + 2 * EMBED_DIM
    out["total"] = sum(out.values())
    out["head"] = n_classes * EMBED_DIM
    return out
