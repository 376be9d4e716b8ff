"""Twin-input quality network: shared conv encoder, 32-d projection, two pooled heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import nn
from .nn import Tensor

MAX_RELATIVE_MOS = 4.0
# uniform init bound = sqrt(scale / fan_in); "he" keeps activation variance
# through ReLU layers, "fan_in" shrinks it ~6x per layer
INIT_SCHEMES = {"he": 6.0, "fan_in": 1.0}


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: tuple[int, ...] = (48, 48, 48, 48)
    kernel_sizes: tuple[int, ...] = (10, 8, 4, 4)
    strides: tuple[int, ...] = (5, 4, 2, 2)
    embed_dim: int = 32
    head_hidden: int = 600
    excerpt_samples: int = 48000
    init: str = "he"
    input_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not (len(self.conv_channels) == len(self.kernel_sizes) == len(self.strides)) or not self.conv_channels:
            raise ValueError("conv_channels, kernel_sizes and strides must be non-empty and of equal length")
        if min(self.strides) < 1 or min(self.kernel_sizes) < 1 or min(self.conv_channels) < 1:
            raise ValueError("conv sizes must be positive")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {sorted(INIT_SCHEMES)}, got {self.init!r}")
        if self.frames < 1:
            raise ValueError(f"excerpt of {self.excerpt_samples} samples leaves no frames after the encoder")

    @property
    def frames(self) -> int:
        t = self.excerpt_samples
        for k, s in zip(self.kernel_sizes, self.strides):
            t = nn.conv_output_length(t, k, s)
        return t

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


@dataclass
class PairOutput:
    p: Tensor          # [B, 2] preference probabilities, p[:, 0] = P(first input is cleaner)
    r: Tensor          # [B] relative MOS in (0, 4)
    attn_pref: Tensor  # [B, T]
    attn_rel: Tensor   # [B, T]


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, scale: float) -> np.ndarray:
    bound = np.sqrt(scale / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Uniform weights (bound per ``config.init``), zero biases, in a fixed order."""
    rng = np.random.default_rng(config.seed)
    scale = INIT_SCHEMES[config.init]
    params: dict[str, Tensor] = {}

    def add(name, shape, fan_in):
        params[name] = nn.parameter(_uniform(rng, shape, fan_in, scale), name=name)

    def add_bias(name, n):
        params[name] = nn.parameter(np.zeros(n, dtype=np.float32), name=name)

    c_in = 1
    for i, (c, k) in enumerate(zip(config.conv_channels, config.kernel_sizes)):
        add(f"conv{i}.weight", (c, c_in, k), c_in * k)
        add_bias(f"conv{i}.bias", c)
        c_in = c
    add("down.weight", (c_in, config.embed_dim), c_in)
    add_bias("down.bias", config.embed_dim)
    pair_dim, h = 2 * config.embed_dim, config.head_hidden
    for head, n_out in (("pref", 2), ("rel", 1)):
        add(f"{head}.hidden.weight", (pair_dim, h), pair_dim)
        add_bias(f"{head}.hidden.bias", h)
        add(f"{head}.attn.weight", (h, 1), h)
        add_bias(f"{head}.attn.bias", 1)
        add(f"{head}.out.weight", (h, n_out), h)
        add_bias(f"{head}.out.bias", n_out)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


def attention_pool(frames: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax-over-time weighted average of ``frames`` [B, T, F].

    Returns the pooled [B, F] vectors and the [B, T] attention weights.
    """
    if frames.shape[1] < 1:
        raise ValueError("attention_pool needs at least one frame")
    scores = nn.linear(frames, weight, bias)                 # [B, T, 1]
    attn = nn.softmax(scores, axis=1)
    pooled = (attn.transpose(0, 2, 1) @ frames)              # [B, 1, F]
    b, _, f = pooled.shape
    return pooled.reshape(b, f), attn.reshape(b, frames.shape[1])


class QualityNet:
    """Parameters plus the forward passes of the twin-input network.

    Waveform batches are ``[B, excerpt_samples]`` arrays (or a single 1-D
    excerpt). Frame tensors are channels-last, ``[B, T, D]``.
    """

    def __init__(self, config: ModelConfig | None = None, params: dict[str, Tensor] | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    @property
    def n_params(self) -> int:
        return count_params(self.params)

    def _as_batch(self, waveforms) -> Tensor:
        x = waveforms.data if isinstance(waveforms, Tensor) else np.asarray(waveforms)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.config.excerpt_samples:
            raise ValueError(f"expected excerpts of {self.config.excerpt_samples} samples, got shape {x.shape}")
        dtype = self.params["conv0.weight"].dtype
        x = np.ascontiguousarray(x, dtype=dtype).reshape(x.shape[0], x.shape[1], 1)
        if self.config.input_gain != 1.0:
            x = x * dtype.type(self.config.input_gain)
        return Tensor(x)

    def encode(self, waveforms) -> Tensor:
        """Strided conv stack with ReLU: [B, samples] -> [B, T, D]."""
        h = self._as_batch(waveforms)
        for i, s in enumerate(self.config.strides):
            h = nn.relu(nn.conv1d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], s,
                                  channels_last=True))
        return h

    def downsample(self, features: Tensor) -> Tensor:
        return nn.linear(features, self.params["down.weight"], self.params["down.bias"])

    def project(self, waveforms) -> Tensor:
        """encode + downsample: [B, samples] -> [B, T, 32]."""
        return self.downsample(self.encode(waveforms))

    def heads(self, z_i: Tensor, z_j: Tensor) -> PairOutput:
        """Concatenate projected frames and run both pooled heads."""
        if z_i.shape != z_j.shape:
            raise ValueError(f"pair inputs differ in shape: {z_i.shape} vs {z_j.shape}")
        z = nn.concat([z_i, z_j], axis=-1)
        pooled = {}
        attn = {}
        for head in ("pref", "rel"):
            hid = nn.relu(nn.linear(z, self.params[f"{head}.hidden.weight"], self.params[f"{head}.hidden.bias"]))
            pooled[head], attn[head] = attention_pool(hid, self.params[f"{head}.attn.weight"],
                                                      self.params[f"{head}.attn.bias"])
        # pooling the hidden layer then applying the output layer equals pooling
        # the per-frame outputs with the same attention weights
        logits = nn.linear(pooled["pref"], self.params["pref.out.weight"], self.params["pref.out.bias"])
        rel = nn.linear(pooled["rel"], self.params["rel.out.weight"], self.params["rel.out.bias"])
        r = nn.sigmoid(rel) * MAX_RELATIVE_MOS
        return PairOutput(p=nn.softmax(logits, axis=-1), r=r.reshape(r.shape[0]),
                          attn_pref=attn["pref"], attn_rel=attn["rel"])

    def pair_forward(self, x_i, x_j) -> PairOutput:
        """Shared-weight projection of both inputs in one encoder pass, then the heads."""
        a = self._as_batch(x_i).data
        b = self._as_batch(x_j).data
        if a.shape != b.shape:
            raise ValueError(f"pair inputs differ in shape: {a.shape} vs {b.shape}")
        n = a.shape[0]
        z = self.project(np.concatenate([a, b])[:, :, 0])
        return self.heads(z[:n], z[n:])

    def embed(self, waveforms) -> np.ndarray:
        """Frame-averaged encoder output, [B, D] (or [D] for a single excerpt)."""
        single = np.asarray(waveforms.data if isinstance(waveforms, Tensor) else waveforms).ndim == 1
        out = self.encode(waveforms).data.mean(axis=1)
        return out[0] if single else out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def astype(self, dtype) -> "QualityNet":
        params = {k: nn.parameter(v.data, name=k, dtype=dtype) for k, v in self.params.items()}
        return QualityNet(self.config, params)
