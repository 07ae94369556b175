"""The pansharpening network: feature extractors, feature soft-attention, fusion, backbone.

Feature maps are ``[channels, height, width]`` tensors for a single patch;
there is no batch axis anywhere in the network.  Scales are keyed by the
upsampling factor relative to the LR cube: ``1`` (LR grid), ``2`` and ``4``
(HR grid).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, Parameter
from .pipeline import bicubic_resample, make_pan_downup, resize_matrix
from .tensor import Tensor

SCALES = (1, 2, 4)


@dataclass
class ModelConfig:
    bands: int
    hr_size: tuple[int, int]
    fe_channels: tuple[int, int, int] = (32, 64, 128)  # at x4, x2, x1
    residual_blocks: tuple[int, int, int] = (2, 2, 2)  # at x1, x2, x4
    heads: int = 16
    beta: float = 0.25
    scale_beta: bool = True
    scales: tuple[int, ...] = SCALES
    attention_bypass: bool = False
    mean_mode: str = "global"
    softmax_dim: int = 2
    upsampler: str = "transposed"
    tail_init_gain: float = 0.0
    scale_ratio: int = 4
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.hr_size = tuple(int(v) for v in self.hr_size)
        self.fe_channels = tuple(int(v) for v in self.fe_channels)
        self.residual_blocks = tuple(int(v) for v in self.residual_blocks)
        self.scales = tuple(sorted(int(s) for s in self.scales))
        if self.scale_ratio != 4:
            raise ContractError("only a x4 resolution ratio is supported")
        if any(s not in SCALES for s in self.scales):
            raise ContractError(f"scales must be a subset of {SCALES}, got {self.scales}")
        if len(self.fe_channels) != 3 or len(self.residual_blocks) != 3:
            raise ContractError("fe_channels and residual_blocks need three entries")
        h, w = self.hr_size
        if h % 4 or w % 4:
            raise DimensionError(f"HR size {self.hr_size} must be divisible by 4")
        if self.heads < 1:
            raise ContractError("heads must be >= 1")
        if not 0 < self.beta <= 1:
            raise ContractError("beta must lie in (0, 1]")
        if self.mean_mode not in ("global", "row"):
            raise ContractError("mean_mode must be 'global' or 'row'")
        if self.softmax_dim not in (1, 2):
            raise ContractError("softmax_dim must be 1 (over queries) or 2 (over keys)")
        if self.upsampler not in ("transposed", "bicubic"):
            raise ContractError("upsampler must be 'transposed' or 'bicubic'")

    @property
    def lr_size(self) -> tuple[int, int]:
        return self.hr_size[0] // 4, self.hr_size[1] // 4

    def channels(self, scale: int) -> int:
        return self.fe_channels[{4: 0, 2: 1, 1: 2}[scale]]

    def spatial(self, scale: int) -> tuple[int, int]:
        h, w = self.lr_size
        return h * scale, w * scale

    def beta_at(self, scale: int) -> float:
        return self.beta / scale**2 if self.scale_beta else self.beta

    def descriptor_length(self, scale: int) -> int:
        h, w = self.spatial(scale)
        return descriptor_length(h, w, self.beta_at(scale))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def descriptor_length(h: int, w: int, beta: float) -> int:
    n = int(round(beta * h * w))
    if n < 1:
        raise ContractError(f"beta={beta} reduces a {h}x{w} map to zero length")
    return n


# -- feature extractors -----------------------------------------------------------
class StridedConv(Module):
    """3x3 stride-2 convolution that halves even sizes (one leading row/col of zero padding)."""

    def __init__(self, c_in, c_out, *, rng, dtype):
        self.conv = Conv2d(c_in, c_out, 3, stride=2, padding=0, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv(T.pad2d(x, 1, 0, 1, 0))


class FeatureExtractor(Module):
    """VGG-like three-stage extractor with taps at the x4, x2 and x1 grids."""

    def __init__(self, in_channels: int, channels, *, rng, dtype=np.float64):
        c4, c2, c1 = channels
        self.in_channels = in_channels
        self.stage4 = [Conv2d(in_channels, c4, rng=rng, dtype=dtype), Conv2d(c4, c4, rng=rng, dtype=dtype)]
        self.stage2 = [StridedConv(c4, c2, rng=rng, dtype=dtype), Conv2d(c2, c2, rng=rng, dtype=dtype)]
        self.stage1 = [StridedConv(c2, c1, rng=rng, dtype=dtype), Conv2d(c1, c1, rng=rng, dtype=dtype)]

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        if x.shape[0] != self.in_channels:
            raise ContractError(f"extractor expects {self.in_channels} channels, got {x.shape[0]}")
        taps = {}
        for scale, stage in ((4, self.stage4), (2, self.stage2), (1, self.stage1)):
            for layer in stage:
                x = T.relu(layer(x))
            taps[scale] = x
        return taps


# -- attention ---------------------------------------------------------------------
@dataclass
class DescriptorSet:
    q: Tensor  # [f, N, L]
    k: Tensor
    v: Tensor

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 3:
            raise DimensionError(
                f"descriptor shapes differ: q {self.q.shape}, k {self.k.shape}, v {self.v.shape}"
            )

    @property
    def features(self) -> int:
        return self.q.shape[0]

    @property
    def heads(self) -> int:
        return self.q.shape[1]

    @property
    def length(self) -> int:
        return self.q.shape[2]


def build_descriptors(Q: Tensor, K: Tensor, V: Tensor, heads: int,
                      q_layer: Linear, k_layer: Linear, v_layer: Linear) -> DescriptorSet:
    """Map every flattened feature map through ``heads`` linear layers.

    Each ``*_layer`` stacks the per-head layers: its weight is
    ``[heads * L, w * h]``, rows ``i*L:(i+1)*L`` belonging to head ``i``.
    """
    if not (Q.shape == K.shape == V.shape):
        raise DimensionError(f"Q {Q.shape}, K {K.shape}, V {V.shape} must match")
    f, h, w = Q.shape
    out_dim = q_layer.weight.shape[0]
    if out_dim % heads:
        raise ContractError(f"projection width {out_dim} is not divisible by {heads} heads")
    length = out_dim // heads

    def project(x, layer):
        return T.linear(T.reshape(x, (f, h * w)), layer.weight, layer.bias).reshape(f, heads, length)

    return DescriptorSet(project(Q, q_layer), project(K, k_layer), project(V, v_layer))


def _centre(x: Tensor, mode: str) -> Tensor:
    if mode == "global":
        return x - T.mean(x)
    return x - T.mean(x, axis=-1, keepdims=True)


def cross_correlation(d: DescriptorSet, mean_mode: str = "global") -> Tensor:
    """Per-head ``[N, f_q, f_k]`` correlation of mean-centred query and key descriptors."""
    qp = T.permute(d.q, (1, 0, 2))
    kp = T.permute(d.k, (1, 0, 2))
    return T.matmul(_centre(qp, mean_mode), T.transpose(_centre(kp, mean_mode)))


def fcce(d: DescriptorSet, mean_mode: str = "global", softmax_dim: int = 2) -> Tensor:
    """Softmax-normalized feature cross-correlation, ``[N, f_q, f_k]``.

    ``softmax_dim=2`` makes each query row sum to one over the keys;
    ``softmax_dim=1`` normalizes each key column over the queries instead.
    """
    return T.softmax(cross_correlation(d, mean_mode), dim=softmax_dim)


def mhfsa(c_tilde: Tensor, v_desc: Tensor, out_layer: Linear, h: int, w: int) -> Tensor:
    """Attend over value descriptors and project back to a ``[f, h, w]`` texture map.

    ``v_desc`` is the permuted value tensor ``[N, f, L]``.
    """
    n, fq, fk = c_tilde.shape
    if v_desc.ndim != 3 or v_desc.shape[0] != n or v_desc.shape[1] != fk:
        raise DimensionError(f"attention {c_tilde.shape} incompatible with values {v_desc.shape}")
    length = v_desc.shape[2]
    if out_layer.weight.shape[1] != n * length:
        raise DimensionError(
            f"output projection expects {out_layer.weight.shape[1]} inputs, heads give {n * length}"
        )
    t = T.matmul(c_tilde, v_desc)  # [N, f, L]
    t = T.reshape(T.permute(t, (1, 0, 2)), (fq, n * length))
    return T.reshape(T.linear(t, out_layer.weight, out_layer.bias), (fq, h, w))


def tsff(texture: Tensor, features: Tensor, conv: Conv2d, bn: BatchNorm2d) -> Tensor:
    """BatchNorm(Conv3x3(concat(texture, features)))."""
    if texture.shape[1:] != features.shape[1:]:
        raise DimensionError(f"texture {texture.shape} and features {features.shape} differ spatially")
    return bn(conv(T.concat([texture, features], axis=0)))


class HyperTransformerBlock(Module):
    """Descriptor projections, output projection and fusion layers for one scale."""

    def __init__(self, scale: int, features: int, backbone_channels: int, h: int, w: int,
                 heads: int, length: int, *, rng, dtype=np.float64, attention: bool = True):
        self.scale = scale
        self.h, self.w = h, w
        self.heads = heads
        if attention:
            self._build_attention(h, w, heads, length, rng, dtype)
        self.fuse_conv = Conv2d(features + backbone_channels, backbone_channels, 3, rng=rng, dtype=dtype)
        self.fuse_bn = BatchNorm2d(backbone_channels, dtype=dtype)

    def _build_attention(self, h, w, heads, length, rng, dtype):
        self.q_proj = Linear(h * w, heads * length, rng=rng, dtype=dtype)
        self.k_proj = Linear(h * w, heads * length, rng=rng, dtype=dtype)
        self.v_proj = Linear(h * w, heads * length, rng=rng, dtype=dtype)
        self.out_proj = Linear(heads * length, h * w, rng=rng, dtype=dtype)

    def attend(self, Q, K, V, mean_mode="global", softmax_dim=2) -> Tensor:
        d = build_descriptors(Q, K, V, self.heads, self.q_proj, self.k_proj, self.v_proj)
        c_tilde = fcce(d, mean_mode, softmax_dim)
        return mhfsa(c_tilde, T.permute(d.v, (1, 0, 2)), self.out_proj, self.h, self.w)

    def fuse(self, texture: Tensor, features: Tensor) -> Tensor:
        return tsff(texture, features, self.fuse_conv, self.fuse_bn)


# -- backbone ------------------------------------------------------------------------
class ResidualBlock(Module):
    def __init__(self, channels, *, rng, dtype=np.float64):
        self.conv1 = Conv2d(channels, channels, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, rng=rng, dtype=dtype)

    def forward(self, x):
        return x + self.conv2(T.leaky_relu(self.conv1(x), 0.2))


class BicubicUp(Module):
    """Fixed bicubic x2 enlargement followed by a learned 3x3 convolution."""

    def __init__(self, c_in, c_out, *, rng, dtype=np.float64):
        self.conv = Conv2d(c_in, c_out, rng=rng, dtype=dtype)

    def forward(self, x):
        c, h, w = x.shape
        mw = Tensor(resize_matrix(w, 2 * w).T.astype(x.dtype))
        mh = Tensor(resize_matrix(h, 2 * h).T.astype(x.dtype))
        a = T.matmul(T.reshape(x, (c * h, w)), mw)  # [c*h, 2w]
        a = T.reshape(T.permute(T.reshape(a, (c, h, 2 * w)), (0, 2, 1)), (c * 2 * w, h))
        a = T.permute(T.reshape(T.matmul(a, mh), (c, 2 * w, 2 * h)), (0, 2, 1))
        return self.conv(a)


class TransposedUp(Module):
    def __init__(self, c_in, c_out, *, rng, dtype=np.float64):
        self.deconv = ConvTranspose2d(c_in, c_out, 2, 2, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.deconv(x)


@dataclass
class ForwardOutput:
    x: Tensor
    textures: dict[int, Tensor] = field(default_factory=dict)
    y_up: np.ndarray | None = None


class HyperTransformerNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        c = config.bands
        self.fe_hsi = FeatureExtractor(c, config.fe_channels, rng=rng, dtype=dtype)
        self.fe_pan = FeatureExtractor(1, config.fe_channels, rng=rng, dtype=dtype)
        self.head = Conv2d(c, config.channels(1), rng=rng, dtype=dtype)
        up_cls = TransposedUp if config.upsampler == "transposed" else BicubicUp
        self.up = {
            2: up_cls(config.channels(1), config.channels(2), rng=rng, dtype=dtype),
            4: up_cls(config.channels(2), config.channels(4), rng=rng, dtype=dtype),
        }
        self.blocks_rb = {
            s: [ResidualBlock(config.channels(s), rng=rng, dtype=dtype) for _ in range(n)]
            for s, n in zip(SCALES, config.residual_blocks)
        }
        self.transformers = {}
        for s in config.scales:
            h, w = config.spatial(s)
            length = 0 if config.attention_bypass else config.descriptor_length(s)
            self.transformers[s] = HyperTransformerBlock(
                s, config.channels(s), config.channels(s), h, w, config.heads, length,
                rng=rng, dtype=dtype, attention=not config.attention_bypass,
            )
        self.tail = Conv2d(config.channels(4), c, rng=rng, dtype=dtype)
        self.tail.weight.data *= config.tail_init_gain

    def _check_inputs(self, y: np.ndarray, p: np.ndarray) -> None:
        cfg = self.config
        if y.ndim != 3 or y.shape[0] != cfg.bands:
            raise ContractError(f"LR cube must be [{cfg.bands},h,w], got {y.shape}")
        if y.shape[1:] != cfg.lr_size:
            raise DimensionError(f"LR cube is {y.shape[1:]}, model was built for {cfg.lr_size}")
        if p.shape != (1,) + cfg.hr_size:
            raise DimensionError(f"PAN must be {(1,) + cfg.hr_size}, got {p.shape}")

    def forward(self, y, p) -> ForwardOutput:
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        y = np.asarray(getattr(y, "data", y), dtype=np.float64)
        p = np.asarray(getattr(p, "data", p), dtype=np.float64)
        if p.ndim == 2:
            p = p[None]
        self._check_inputs(y, p)
        y_up = bicubic_resample(y, 4)

        Q = K = V = None
        if cfg.scales:
            V = self.fe_pan(Tensor(p.astype(dtype)))
            if not cfg.attention_bypass:
                Q = self.fe_hsi(Tensor(y_up.astype(dtype)))
                K = self.fe_pan(Tensor(make_pan_downup(p).astype(dtype)))

        textures: dict[int, Tensor] = {}
        h = self.head(Tensor(y.astype(dtype)))
        for s in SCALES:
            if s > 1:
                h = T.leaky_relu(self.up[s](h), 0.2)
            for rb in self.blocks_rb[s]:
                h = rb(h)
            if s in cfg.scales:
                block = self.transformers[s]
                if cfg.attention_bypass:
                    texture = V[s]
                else:
                    texture = block.attend(Q[s], K[s], V[s], cfg.mean_mode, cfg.softmax_dim)
                textures[s] = texture
                h = h + block.fuse(texture, h)
        x = self.tail(h) + Tensor(y_up.astype(dtype))
        return ForwardOutput(x, textures, y_up)


def bicubic_baseline(y) -> np.ndarray:
    """x4 bicubic enlargement of the LR cube; the floor every model should beat."""
    return bicubic_resample(np.asarray(getattr(y, "data", y)), Fraction(4))
