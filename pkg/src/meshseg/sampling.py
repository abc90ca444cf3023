"""Subvolume corner generation, patch extraction and scatter-add.

Corners are ``(x, y, z)`` minimum-index triples of ``side``-cubes inside a
volume of shape ``volume_dims``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng, standard_normal

GAUSSIAN_MEAN = (127.0, 145.0, 127.0)
GAUSSIAN_STD = (60.0, 60.0, 60.0)


@dataclass(frozen=True)
class SamplerConfig:
    volume_dims: tuple = (256, 256, 256)
    side: int = 38
    mode: str = "gaussian"
    gaussian_mean: tuple = GAUSSIAN_MEAN
    gaussian_std: tuple = GAUSSIAN_STD
    count: int = 1024
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in np.broadcast_to(self.volume_dims, 3))
        object.__setattr__(self, "volume_dims", dims)
        object.__setattr__(self, "gaussian_mean", tuple(float(m) for m in np.broadcast_to(self.gaussian_mean, 3)))
        object.__setattr__(self, "gaussian_std", tuple(float(s) for s in np.broadcast_to(self.gaussian_std, 3)))
        if self.side < 1 or any(self.side > d for d in dims):
            raise ValueError(f"side {self.side} must be positive and fit inside {dims}")
        if min(self.gaussian_std) <= 0:
            raise ValueError("gaussian std must be positive on every axis")
        if self.mode not in ("nonoverlap", "gaussian"):
            raise ValueError(f"mode must be 'nonoverlap' or 'gaussian', got {self.mode!r}")

    def with_(self, **kw):
        return SamplerConfig(**{**self.__dict__, **kw})


@dataclass
class SubvolumeBatch:
    corners: np.ndarray  # (n, 3) int
    patches: np.ndarray  # (n, channels, side, side, side)


def axis_starts(dim, side):
    """Stride-``side`` starts plus one clamped start at ``dim - side`` for a remainder."""
    starts = list(range(0, dim - side + 1, side))
    if starts[-1] != dim - side:
        starts.append(dim - side)
    return starts


def grid_nonoverlap(cfg):
    """Tiling corners covering every voxel, z slowest and x fastest."""
    xs, ys, zs = (axis_starts(d, cfg.side) for d in cfg.volume_dims)
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(np.int64)


def round_half_up(x):
    return np.floor(x + 0.5)


def gaussian_sample(cfg, rng=None, count=None):
    """``count`` corners whose window centers follow a clamped per-axis normal.

    Deviates are drawn axis-interleaved: draw ``3 * i + a`` belongs to corner
    ``i``, axis ``a``. Without ``rng`` the stream is derived from ``cfg.seed``.
    """
    n = cfg.count if count is None else count
    if rng is None:
        rng = make_rng(cfg.seed)
    z = standard_normal(rng, 3 * n).reshape(n, 3)
    centers = round_half_up(np.asarray(cfg.gaussian_mean) + np.asarray(cfg.gaussian_std) * z)
    corners = centers - cfg.side // 2
    hi = np.asarray(cfg.volume_dims) - cfg.side
    return np.clip(corners, 0, hi).astype(np.int64)


def sample(cfg, rng=None):
    return grid_nonoverlap(cfg) if cfg.mode == "nonoverlap" else gaussian_sample(cfg, rng)


def _check_corners(corners, dims, side):
    corners = np.asarray(corners, dtype=np.int64).reshape(-1, 3)
    hi = np.asarray(dims[-3:]) - side
    bad = np.any((corners < 0) | (corners > hi), axis=1)
    if bad.any():
        raise IndexError(f"corner {tuple(corners[bad][0])} out of bounds for dims {tuple(dims[-3:])}, side {side}")
    return corners


def extract(volume, corners, side):
    """Copy ``side``-cubes at ``corners``.

    ``volume`` is (x, y, z) or (channels, x, y, z); patches gain a leading
    subvolume axis and always carry a channel axis.
    """
    vol = np.asarray(volume)
    if vol.ndim == 3:
        vol = vol[None]
    corners = _check_corners(corners, vol.shape, side)
    out = np.empty((len(corners), vol.shape[0], side, side, side), dtype=vol.dtype)
    for i, (x, y, z) in enumerate(corners):
        out[i] = vol[:, x:x + side, y:y + side, z:z + side]
    return SubvolumeBatch(corners, out)


def scatter_add(target, corners, values):
    """Accumulate patch ``values`` into ``target`` in place; returns ``target``.

    ``values`` matches the trailing shape of ``target`` per patch, so
    ``target`` may be (x, y, z) or (channels, x, y, z). A scalar broadcasts.
    """
    corners = np.asarray(corners, dtype=np.int64).reshape(-1, 3)
    if len(corners) == 0:
        return target
    values = np.asarray(values)
    side = values.shape[-1] if values.ndim >= 3 else None
    if side is None:
        raise ValueError("values must carry the patch's spatial axes")
    corners = _check_corners(corners, target.shape, side)
    if values.ndim == target.ndim:
        values = np.broadcast_to(values, (len(corners),) + values.shape)
    for v, (x, y, z) in zip(values, corners):
        target[..., x:x + side, y:y + side, z:z + side] += v
    return target


def coverage_count(dims, corners, side):
    cov = np.zeros(dims, dtype=np.int32)
    return scatter_add(cov, corners, np.ones((side,) * 3, dtype=np.int32))


def label_mass_center(label_volumes, background=0):
    """Mean voxel coordinate of all non-background labels over a training set."""
    total = np.zeros(3)
    n = 0
    for lab in label_volumes:
        idx = np.nonzero(np.asarray(lab) != background)
        if idx[0].size:
            total += np.array([i.sum() for i in idx], dtype=np.float64)
            n += idx[0].size
    if n == 0:
        raise ValueError("no foreground voxels in the training labels")
    return tuple(total / n)
