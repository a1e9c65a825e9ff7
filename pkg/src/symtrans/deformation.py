"""Differentiable warping, field composition, and diffeomorphic integration.

Displacement fields are (3, D, H, W) voxel-unit offsets along the (d, h, w)
axes; the full map is phi(p) = p + u(p). Sampling clamps to the volume border.
Velocity fields are exponentiated by scaling and squaring: halve the field T
times, then self-compose T times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, make_op


@dataclass
class IntegrationConfig:
    steps: int = 7

    def __post_init__(self):
        if not 1 <= self.steps <= 12:
            raise ValueError(f"integration steps must be in [1, 12], got {self.steps}")


@dataclass
class FoldingStats:
    """Non-positive Jacobian determinant tally over interior voxels."""

    count: int
    fraction: float
    interior_voxels: int


def _grid(shape, dtype):
    return np.indices(shape).astype(dtype)


def trilinear_sample(field: Tensor, offsets: Tensor) -> Tensor:
    """Sample ``field`` at p + offsets(p), trilinearly, clamping to the border.

    Differentiable in both arguments; the offset gradient flows through the
    interpolation weights and is zero where the clamp is active.
    """
    if field.ndim != 4 or offsets.ndim != 4 or offsets.shape[0] != 3:
        raise ValueError(
            f"trilinear_sample: field {field.shape}, offsets {offsets.shape}"
        )
    if field.shape[1:] != offsets.shape[1:]:
        raise ValueError(
            f"trilinear_sample: spatial mismatch {field.shape} vs {offsets.shape}"
        )
    if not np.isfinite(offsets.data).all():
        raise ValueError("trilinear_sample: offsets contain non-finite values")
    c = field.shape[0]
    spatial = field.shape[1:]
    dtype = field.data.dtype
    coords = _grid(spatial, dtype) + offsets.data
    inside = np.empty((3,) + spatial, dtype=bool)
    cl = np.empty_like(coords)
    for ax, ext in enumerate(spatial):
        inside[ax] = (coords[ax] >= 0.0) & (coords[ax] <= ext - 1.0)
        cl[ax] = np.clip(coords[ax], 0.0, ext - 1.0)
    i0 = np.floor(cl).astype(np.int64)
    for ax, ext in enumerate(spatial):
        np.minimum(i0[ax], ext - 2 if ext > 1 else 0, out=i0[ax])
        np.maximum(i0[ax], 0, out=i0[ax])
    frac = (cl - i0).astype(dtype)
    i1 = [np.minimum(i0[ax] + 1, spatial[ax] - 1) for ax in range(3)]

    fd, fh, fw = frac
    wgt = {}
    idx = {}
    for bd in (0, 1):
        for bh in (0, 1):
            for bw in (0, 1):
                wd = fd if bd else 1.0 - fd
                wh = fh if bh else 1.0 - fh
                ww = fw if bw else 1.0 - fw
                wgt[(bd, bh, bw)] = wd * wh * ww
                idx[(bd, bh, bw)] = (
                    i1[0] if bd else i0[0],
                    i1[1] if bh else i0[1],
                    i1[2] if bw else i0[2],
                )

    fdat = field.data
    out = np.zeros((c,) + spatial, dtype=dtype)
    for key, w in wgt.items():
        d_i, h_i, w_i = idx[key]
        out += fdat[:, d_i, h_i, w_i] * w[None]

    n_spatial = int(np.prod(spatial))

    def rule(gy):
        dfield = np.zeros_like(fdat)
        for key, w in wgt.items():
            d_i, h_i, w_i = idx[key]
            flat = (d_i * spatial[1] + h_i) * spatial[2] + w_i
            contrib = (gy * w[None]).reshape(c, n_spatial)
            flat1 = flat.ravel()
            for ch in range(c):
                dfield[ch] += np.bincount(
                    flat1, weights=contrib[ch], minlength=n_spatial
                ).reshape(spatial).astype(dtype)

        doff = np.zeros((3,) + spatial, dtype=dtype)
        # derivative w.r.t. each coordinate: difference of the two corner
        # planes along that axis, interpolated over the other two
        for ax in range(3):
            acc = np.zeros((c,) + spatial, dtype=dtype)
            for key, w in wgt.items():
                d_i, h_i, w_i = idx[key]
                # replace this axis' weight factor by +/-1
                others = 1.0
                for oax, bit, f in ((0, key[0], fd), (1, key[1], fh), (2, key[2], fw)):
                    if oax == ax:
                        continue
                    others = others * (f if bit else 1.0 - f)
                sign = 1.0 if key[ax] else -1.0
                acc += fdat[:, d_i, h_i, w_i] * (sign * others)[None]
            doff[ax] = np.sum(gy * acc, axis=0) * inside[ax].astype(dtype)
        return dfield, doff

    return make_op((field, offsets), out, rule)


def warp(image: Tensor, u: Tensor) -> Tensor:
    """Warp an image by a displacement field: out(p) = I(p + u(p))."""
    return trilinear_sample(image, u)


def compose(a: Tensor, b: Tensor) -> Tensor:
    """Displacement of the composed map a after b: b(p) + a(p + b(p))."""
    if a.shape != b.shape:
        raise ValueError(f"compose: shape mismatch {a.shape} vs {b.shape}")
    return T.add(b, trilinear_sample(a, b))


def integrate(v: Tensor, cfg: IntegrationConfig | None = None) -> Tensor:
    """Exponentiate a stationary velocity field by scaling and squaring."""
    if cfg is None:
        cfg = IntegrationConfig()
    if not np.isfinite(v.data).all():
        raise ValueError("integrate: velocity field contains non-finite values")
    u = T.scalar_mul(v, 1.0 / float(2 ** cfg.steps))
    for _ in range(cfg.steps):
        u = compose(u, u)
    return u


def jacobian_determinant(u: np.ndarray):
    """Per-voxel det(I + grad u) and folding statistics.

    Central differences on interior voxels, one-sided at the faces; the
    folding tally covers interior voxels only so analytic affine fixtures are
    exact.
    """
    u = np.asarray(u)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"jacobian_determinant expects (3, D, H, W), got {u.shape}")
    if min(u.shape[1:]) < 3:
        raise ValueError(f"extents {u.shape[1:]} too small for differences")
    J = np.empty((3, 3) + u.shape[1:], dtype=np.float64)
    for i in range(3):
        grads = np.gradient(u[i].astype(np.float64), axis=(0, 1, 2))
        for j in range(3):
            J[i, j] = grads[j]
        J[i, i] += 1.0
    det = (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )
    interior = det[1:-1, 1:-1, 1:-1]
    count = int(np.sum(interior <= 0.0))
    stats = FoldingStats(
        count=count,
        fraction=count / interior.size,
        interior_voxels=interior.size,
    )
    return det, stats
