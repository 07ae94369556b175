"""Training objectives: L1 reconstruction, perceptual distance on synthesized RGB, texture transfer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Conv2d, Module
from .pipeline import default_responses, rgb_weights
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    vgg_per: float = 0.1
    t_per: float = 0.05

    def __post_init__(self):
        for name in ("rec", "vgg_per", "t_per"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {value}")


class PerceptualNet(Module):
    """Frozen 5-conv feature network over RGB input, tapped after conv ``tap``.

    With no weights loaded it is a fixed random network drawn from ``seed``;
    :func:`hypertransformer.checkpoint.load_perceptual` swaps in real weights.
    """

    widths = (16, 16, 32, 32, 64)

    def __init__(self, tap: int = 3, seed: int = 1234, dtype=np.float64):
        if not 1 <= tap <= len(self.widths):
            raise ContractError(f"tap must be in [1, {len(self.widths)}]")
        self.tap = tap
        rng = np.random.default_rng(seed)
        chans = (3,) + self.widths
        self.convs = [Conv2d(chans[i], chans[i + 1], rng=rng, dtype=dtype) for i in range(len(self.widths))]
        for p in self.parameters():
            p.requires_grad = False

    def forward(self, rgb: Tensor) -> Tensor:
        x = rgb
        for conv in self.convs[: self.tap]:
            x = T.relu(conv(x))
        return x


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def _check_same(x: Tensor, ref: np.ndarray) -> None:
    if x.shape != ref.shape:
        raise DimensionError(f"prediction {x.shape} and reference {ref.shape} differ")


def loss_rec(x: Tensor, x_ref) -> Tensor:
    """Mean absolute error over all C*H*W entries."""
    ref = _as_array(x_ref)
    _check_same(x, ref)
    return T.l1_norm(x - ref.astype(x.dtype)) * (1.0 / x.size)


def _rgb(x: Tensor, mix: np.ndarray) -> Tensor:
    c, h, w = x.shape
    return T.reshape(T.matmul(Tensor(mix.astype(x.dtype)), T.reshape(x, (c, h * w))), (3, h, w))


def loss_vgg_per(x: Tensor, x_ref, net: PerceptualNet, responses=None) -> Tensor:
    """Euclidean distance between perceptual features of the two RGB renderings,
    divided by the feature element count."""
    ref = _as_array(x_ref)
    _check_same(x, ref)
    c = x.shape[0]
    responses = default_responses(c) if responses is None else responses
    mix = rgb_weights(responses, c)[::-1].copy()
    with T.no_grad():
        ref_feat = net(_rgb(Tensor(ref.astype(x.dtype)), mix))
    feat = net(_rgb(x, mix))
    return T.l2_norm(feat - ref_feat.data) * (1.0 / feat.size)


def loss_transfer_per(x: Tensor, textures: dict, fe_hsi, scales=None) -> Tensor:
    """Sum over scales of the normalized Euclidean distance between the HSI
    extractor's features of ``x`` and the (constant) transferred textures."""
    scales = tuple(sorted(textures)) if scales is None else tuple(scales)
    if not scales:
        return x.sum() * 0.0
    missing = [s for s in scales if s not in textures]
    if missing:
        raise ContractError(f"no transferred texture for scale(s) {missing}")
    feats = fe_hsi(x)
    total = None
    for s in scales:
        target = _as_array(textures[s])
        if feats[s].shape != target.shape:
            raise DimensionError(f"scale {s}: features {feats[s].shape} vs texture {target.shape}")
        term = T.l2_norm(feats[s] - target.astype(x.dtype)) * (1.0 / target.size)
        total = term if total is None else total + term
    return total


def loss_overall(x: Tensor, x_ref, textures: dict, weights: LossWeights = LossWeights(),
                 fe_hsi=None, net: PerceptualNet | None = None, responses=None):
    """Weighted sum of the three terms; returns ``(total, components)``.

    Components with a zero weight are skipped entirely.
    """
    parts: dict[str, float] = {}
    total = x.sum() * 0.0
    if weights.rec:
        term = loss_rec(x, x_ref)
        parts["rec"] = term.item()
        total = total + term * weights.rec
    if weights.vgg_per:
        if net is None:
            raise ContractError("a PerceptualNet is required when the perceptual weight is non-zero")
        term = loss_vgg_per(x, x_ref, net, responses)
        parts["vgg_per"] = term.item()
        total = total + term * weights.vgg_per
    if weights.t_per and textures:
        if fe_hsi is None:
            raise ContractError("the HSI feature extractor is required for the transfer loss")
        term = loss_transfer_per(x, textures, fe_hsi)
        parts["t_per"] = term.item()
        total = total + term * weights.t_per
    return total, parts
