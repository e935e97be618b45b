"""Prologue / mega-block / epilogue convolutional encoder.

Each mega block runs R sub-blocks of depthwise conv, pointwise conv,
batchnorm, relu and dropout. The result is gated by a squeeze-and-excite
block, added back to the block input, and passed through relu.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .layers import BatchNorm1d, Mode, Parameter, Tensor

N_MELS = 80


@dataclass(frozen=True)
class EncoderConfig:
    mega_blocks: int = 3
    repeats: int = 3
    channels: int = 1024
    mega_kernels: tuple[int, ...] = (7, 11, 15)
    prologue_kernel: int = 3
    epilogue_kernel: int = 1
    epilogue_channels: int = 1536
    dropout: float = 0.1
    se_reduction: int = 8
    n_mels: int = N_MELS

    def validate(self):
        if self.mega_blocks < 1 or self.repeats < 1 or self.channels < 1:
            raise ConfigError("mega_blocks, repeats and channels must all be >= 1")
        if len(self.mega_kernels) != self.mega_blocks:
            raise ConfigError(f"{self.mega_blocks} mega blocks but {len(self.mega_kernels)} kernels given")
        for k in (self.prologue_kernel, self.epilogue_kernel, *self.mega_kernels):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if self.prologue_kernel != 3 or self.epilogue_kernel != 1:
            raise ConfigError("prologue kernel is fixed at 3 and epilogue kernel at 1")
        if self.se_reduction < 1 or self.channels % self.se_reduction:
            raise ConfigError(f"SE reduction {self.se_reduction} does not divide {self.channels} channels")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        return self


PRESETS: dict[str, EncoderConfig] = {
    "titanet_s": EncoderConfig(channels=256),
    "titanet_m": EncoderConfig(channels=512),
    "titanet_l": EncoderConfig(channels=1024),
    "toy": EncoderConfig(mega_blocks=1, repeats=1, channels=8, mega_kernels=(7,)),
}

# published sizes of the S, M and L models, in parameters
REPORTED_PARAM_COUNTS = {"titanet_s": 6.4e6, "titanet_m": 13.4e6, "titanet_l": 25.3e6}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    if "mega_blocks" in overrides and "mega_kernels" not in overrides:
        b = overrides["mega_blocks"]
        overrides["mega_kernels"] = tuple((7, 11, 15)[i % 3] for i in range(b))
    return replace(cfg, **overrides).validate()


class SubBlock:
    def __init__(self, name: str, channels: int, kernel: int, rng: np.random.Generator):
        C = channels
        self.dw = Parameter(L.init_uniform(rng, (C, 1, kernel), kernel), f"{name}.dw.weight")
        self.pw = Parameter(L.init_uniform(rng, (C, C, 1), C), f"{name}.pw.weight")
        self.pw_bias = Parameter(L.init_uniform(rng, (C,), C), f"{name}.pw.bias")
        self.bn = BatchNorm1d(C, f"{name}.bn")

    def parameters(self):
        return [self.dw, self.pw, self.pw_bias, *self.bn.parameters()]

    def __call__(self, x, mode, p, rng):
        x = L.conv1d_depthwise(x, self.dw)
        x = L.conv1d_pointwise(x, self.pw, self.pw_bias)
        return L.dropout(L.relu(self.bn(x, mode)), p, mode, rng)


class MegaBlock:
    def __init__(self, name: str, cfg: EncoderConfig, kernel: int, rng: np.random.Generator):
        C = cfg.channels
        self.kernel = kernel
        self.subs = [SubBlock(f"{name}.sub{r + 1}", C, kernel, rng) for r in range(cfg.repeats)]
        h = C // cfg.se_reduction
        self.se_w1 = Parameter(L.init_uniform(rng, (h, C), C), f"{name}.se.fc1.weight")
        self.se_b1 = Parameter(L.init_uniform(rng, (h,), C), f"{name}.se.fc1.bias")
        self.se_w2 = Parameter(L.init_uniform(rng, (C, h), h), f"{name}.se.fc2.weight")
        self.se_b2 = Parameter(L.init_uniform(rng, (C,), h), f"{name}.se.fc2.bias")

    def parameters(self):
        out = []
        for s in self.subs:
            out += s.parameters()
        return out + [self.se_w1, self.se_b1, self.se_w2, self.se_b2]

    def batchnorms(self):
        return [s.bn for s in self.subs]

    def __call__(self, x, mode, p, rng):
        h = x
        for sub in self.subs:
            h = sub(h, mode, p, rng)
        h = L.se_block(h, self.se_w1, self.se_w2, self.se_b1, self.se_b2)
        return L.relu(L.add(x, h))


@dataclass
class Encoder:
    config: EncoderConfig
    prologue_w: Parameter
    prologue_bn: BatchNorm1d
    blocks: list[MegaBlock]
    epilogue_w: Parameter
    epilogue_b: Parameter
    epilogue_bn: BatchNorm1d
    rng: np.random.Generator = field(repr=False, default_factory=lambda: np.random.default_rng(0))

    def parameters(self) -> list[Parameter]:
        out = [self.prologue_w, *self.prologue_bn.parameters()]
        for b in self.blocks:
            out += b.parameters()
        return out + [self.epilogue_w, self.epilogue_b, *self.epilogue_bn.parameters()]

    def batchnorms(self) -> list[BatchNorm1d]:
        out = [self.prologue_bn]
        for b in self.blocks:
            out += b.batchnorms()
        return out + [self.epilogue_bn]

    def __call__(self, x, mode: Mode = Mode.EVAL) -> Tensor:
        return encoder_forward(self, x, mode)


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> Encoder:
    cfg.validate()
    rng = np.random.default_rng(seed)
    C, E, F = cfg.channels, cfg.epilogue_channels, cfg.n_mels
    k0 = cfg.prologue_kernel
    prologue_w = Parameter(L.init_uniform(rng, (C, F, k0), F * k0), "encoder.prologue.conv.weight")
    prologue_bn = BatchNorm1d(C, "encoder.prologue.bn")
    blocks = [MegaBlock(f"encoder.block{i + 1}", cfg, k, rng) for i, k in enumerate(cfg.mega_kernels)]
    epilogue_w = Parameter(L.init_uniform(rng, (E, C, 1), C), "encoder.epilogue.conv.weight")
    epilogue_b = Parameter(L.init_uniform(rng, (E,), C), "encoder.epilogue.conv.bias")
    epilogue_bn = BatchNorm1d(E, "encoder.epilogue.bn")
    # dropout masks draw from their own stream so weights stay seed-stable
    return Encoder(cfg, prologue_w, prologue_bn, blocks, epilogue_w, epilogue_b, epilogue_bn,
                   np.random.default_rng([seed, 1]))


def encoder_forward(enc: Encoder, mel, mode: Mode = Mode.EVAL) -> Tensor:
    """[B, T, n_mels] features -> [B, epilogue_channels, T]."""
    x = mel if isinstance(mel, Tensor) else Tensor(mel)
    if x.ndim == 2:
        x = L.reshape(x, (1, *x.shape))
    if x.ndim != 3 or x.shape[2] != enc.config.n_mels:
        raise ShapeError(f"encoder expects [B, T, {enc.config.n_mels}] features, got {list(x.shape)}")
    if x.shape[1] < 1:
        raise ShapeError("encoder input needs at least one frame")
    p = enc.config.dropout
    h = L.transpose(x, (0, 2, 1))
    h = L.relu(enc.prologue_bn(L.conv1d(h, enc.prologue_w), mode))
    for block in enc.blocks:
        h = block(h, mode, p, enc.rng)
    h = L.conv1d_pointwise(h, enc.epilogue_w, enc.epilogue_b)
    return L.relu(enc.epilogue_bn(h, mode))


def count_encoder_parameters(enc: Encoder) -> int:
    return int(np.sum([p.data.size for p in enc.parameters()]))


def encoder_parameter_breakdown(cfg: EncoderConfig) -> dict[str, int]:
    """Closed-form per-layer counts; must agree with a built encoder."""
    C, E, F, R = cfg.channels, cfg.epilogue_channels, cfg.n_mels, cfg.repeats
    h = C // cfg.se_reduction
    out = {"prologue": C * F * cfg.prologue_kernel + 2 * C}
    for i, k in enumerate(cfg.mega_kernels):
        sub = C * k + C * C + C + 2 * C
        se = h * C + h + C * h + C
        out[f"block{i + 1}"] = R * sub + se
    out["epilogue"] = E * C + E + 2 * E
    return out
