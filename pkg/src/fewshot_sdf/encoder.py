"""Convolutional feature pyramid over a voxel grid and trilinear feature lookup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

PAPER_CHANNELS = (1, 16, 32, 64, 128, 128)
DESK_CHANNELS = (1, 16, 32, 64)


@dataclass(frozen=True)
class EncoderConfig:
    resolution: int = 32
    channels: tuple[int, ...] = DESK_CHANNELS

    def __post_init__(self):
        n = len(self.channels)
        if n < 2:
            raise ValueError("the encoder needs at least two pyramid levels")
        if self.channels[0] != 1:
            raise ValueError("the first level is the occupancy grid, so C_1 must be 1")
        if self.resolution % (2 ** (n - 1)):
            raise ValueError(f"resolution {self.resolution} is not divisible by 2^{n - 1}")

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    def level_resolutions(self) -> list[int]:
        return [self.resolution >> k for k in range(self.n_levels)]


def feature_dim(channels) -> int:
    channels = channels.channels if isinstance(channels, EncoderConfig) else channels
    return int(sum(channels))


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> ParamSet:
    """Kernels uniform in +-1/sqrt(fan_in), zero biases."""
    items = []
    for k in range(cfg.n_levels - 1):
        c_in, c_out = cfg.channels[k], cfg.channels[k + 1]
        for name, ci in (("conv", c_in), ("down", c_out)):
            bound = 1.0 / np.sqrt(ci * 27)
            items.append((f"stage{k}.{name}.w", rng.uniform(-bound, bound, size=(c_out, ci, 3, 3, 3))))
            items.append((f"stage{k}.{name}.b", np.zeros(c_out)))
    return ParamSet(items, requires_grad=True)


def encode(params: ParamSet, grid, cfg: EncoderConfig | None = None) -> list[Tensor]:
    """Feature pyramid ``[F_1, ..., F_n]``; ``F_1`` is the occupancy grid itself.

    Each stage is a 3x3x3 convolution (padding 1), ReLU, a stride-2 3x3x3
    convolution (padding 1) and a final ReLU.
    """
    g = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    n_stages = sum(1 for name in params.names() if name.endswith(".conv.w"))
    if cfg is not None and n_stages != cfg.n_levels - 1:
        raise ValueError("parameters do not match the encoder configuration")
    if g.shape[1] % (2**n_stages):
        raise ValueError(f"grid resolution {g.shape[1]} is not divisible by 2^{n_stages}")
    feats = [Tensor(g)]
    x = feats[0]
    for k in range(n_stages):
        x = ad.relu(ad.conv3d(x, params[f"stage{k}.conv.w"], params[f"stage{k}.conv.b"], stride=1, padding=1))
        x = ad.relu(ad.conv3d(x, params[f"stage{k}.down.w"], params[f"stage{k}.down.b"], stride=2, padding=1))
        feats.append(x)
    return feats


def trilinear_corners(points: np.ndarray, n: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Flat indices and weights of the 8 interpolation corners on an ``n^3`` grid.

    Grid point ``j`` sits at the cell center ``-1 + (2j + 1)/n``; queries beyond
    the outermost centers are clamped (edge replication).
    """
    u = np.clip((points + 1.0) * (n / 2.0) - 0.5, 0.0, n - 1.0)
    if n == 1:
        zero = np.zeros(len(points), dtype=np.int64)
        return [zero] * 8, [np.full(len(points), 1.0 / 8.0)] * 8
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    t = u - i0
    idx, wts = [], []
    for c in range(8):
        ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        ix, iy, iz = i0[:, 0] + ox, i0[:, 1] + oy, i0[:, 2] + oz
        w = (t[:, 0] if ox else 1.0 - t[:, 0]) * (t[:, 1] if oy else 1.0 - t[:, 1]) * (t[:, 2] if oz else 1.0 - t[:, 2])
        idx.append((ix * n + iy) * n + iz)
        wts.append(w)
    return idx, wts


def sample_features(pyramid: list[Tensor], points) -> Tensor:
    """Per-point features ``(P, sum C_k)``, concatenated from shallow to deep levels."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(np.abs(points) > 1.0):
        bad = points[np.argmax(np.any(np.abs(points) > 1.0, axis=1))]
        raise ValueError(f"query point {bad.tolist()} lies outside [-1, 1]^3")
    levels = []
    for grid in pyramid:
        c, n = grid.shape[0], grid.shape[1]
        flat = ad.reshape(grid, (c, n**3))
        idx, wts = trilinear_corners(points, n)
        acc = None
        for i, w in zip(idx, wts):
            term = ad.mul(ad.take(flat, i), Tensor(w[None, :]))
            acc = term if acc is None else ad.add(acc, term)
        levels.append(ad.transpose(acc))
    return ad.concat(levels, axis=1)
