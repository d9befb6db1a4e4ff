"""Affine algebra and the interpolation kernels used by resampling.

Transforms are plain 4x4 homogeneous matrices over world millimetres.
For optimization they flatten to a 12-vector: 3 translations (mm),
3 rotations (radians, ZYX Euler, i.e. Rz @ Ry @ Rx), 3 log-scales,
and 3 shears (upper-triangular, unit diagonal).  Rotation, scale, and
shear act about an explicit center point so the parameters stay
decoupled for images whose world origin is far from their content.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularTransform

N_PARAMS = 12


@dataclass(frozen=True)
class AffineTransform:
    """A rigid/affine map of world coordinates, stored as a 4x4 matrix."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise SingularTransform("transform matrix must be 4x4")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise SingularTransform("upper-left 3x3 determinant is zero")
        # compose/inverse use the full 4x4, so a junk bottom row would
        # corrupt them silently
        if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise SingularTransform("last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.eye(4))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Return self ∘ other (other applies first)."""
        return AffineTransform(self.matrix @ other.matrix)

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.matrix - np.eye(4)) <= tol))


def apply_affine(t: AffineTransform, points) -> np.ndarray:
    """Apply a transform to one point or an (..., 3) array of points."""
    p = np.asarray(points, dtype=np.float64)
    out = p @ t.matrix[:3, :3].T + t.matrix[:3, 3]
    return out


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    return a.compose(b)


def invert(t: AffineTransform) -> AffineTransform:
    return t.inverse()


# ---------------------------------------------------------------------------
# 12-parameter encoding


def _euler_zyx(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def params_to_matrix(params, center=(0.0, 0.0, 0.0)) -> AffineTransform:
    """Build a transform from (tx,ty,tz, rx,ry,rz, sx,sy,sz, h01,h02,h12).

    Scales are log-space (0 means scale 1).  The linear part is
    R @ S @ H and acts about ``center``; translations are applied on
    top, so the full map is p -> A (p - c) + c + t.
    """
    p = np.asarray(params, dtype=np.float64)
    if p.shape != (N_PARAMS,):
        raise ValueError(f"expected {N_PARAMS} parameters, got {p.shape}")
    t, r, log_s, h = p[0:3], p[3:6], p[6:9], p[9:12]
    rot = _euler_zyx(*r)
    scale = np.diag(np.exp(log_s))
    shear = np.array([[1.0, h[0], h[1]], [0.0, 1.0, h[2]], [0.0, 0.0, 1.0]])
    a = rot @ scale @ shear
    c = np.asarray(center, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] = a
    m[:3, 3] = c + t - a @ c
    return AffineTransform(m)


def matrix_to_params(t: AffineTransform, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Invert :func:`params_to_matrix` for transforms in its range.

    Decomposes the linear part as rotation x positive scales x shear
    (a QR factorization with positive diagonal).  Rotations outside
    (-pi/2, pi/2) on the Y axis are outside the representable range.
    """
    a = t.matrix[:3, :3]
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[np.newaxis, :]
    r = r * signs[:, np.newaxis]
    if np.linalg.det(q) < 0:
        # QR can land on an improper rotation; flipping the last axis of
        # both factors keeps A = Q R while making Q a rotation.
        q[:, 2] *= -1.0
        r[2, :] *= -1.0
    if r[2, 2] < 0:
        raise SingularTransform("negative-determinant linear part is not representable")
    scales = np.diag(r).copy()
    shear_m = r / scales[:, np.newaxis]
    ry = np.arcsin(np.clip(-q[2, 0], -1.0, 1.0))
    rx = np.arctan2(q[2, 1], q[2, 2])
    rz = np.arctan2(q[1, 0], q[0, 0])
    c = np.asarray(center, dtype=np.float64)
    trans = t.matrix[:3, 3] - c + a @ c
    return np.concatenate([
        trans,
        [rx, ry, rz],
        np.log(scales),
        [shear_m[0, 1], shear_m[0, 2], shear_m[1, 2]],
    ])


def rigid_params_to_matrix(params6, center=(0.0, 0.0, 0.0)) -> AffineTransform:
    """6-DOF convenience wrapper: translations + ZYX Euler rotations."""
    p = np.zeros(N_PARAMS)
    p[:6] = np.asarray(params6, dtype=np.float64)
    return params_to_matrix(p, center)


# ---------------------------------------------------------------------------
# samplers (continuous voxel coordinates in, values out)


def trilinear_sample(data: np.ndarray, coords: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates.

    ``coords`` is (..., 3) in voxel units.  Points outside the
    [0, n-1] support on any axis return ``fill``.  Exact for fields
    affine in the coordinates.
    """
    data = np.asarray(data, dtype=np.float64)
    nx, ny, nz = data.shape
    if min(nx, ny, nz) < 2:
        raise ValueError("trilinear sampling needs at least 2 voxels per axis")
    c = np.asarray(coords, dtype=np.float64)
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    inside = ((x >= 0) & (x <= nx - 1)
              & (y >= 0) & (y <= ny - 1)
              & (z >= 0) & (z <= nz - 1))

    x0 = np.clip(np.floor(x).astype(np.intp), 0, nx - 2)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, ny - 2)
    z0 = np.clip(np.floor(z).astype(np.intp), 0, nz - 2)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    fz = np.clip(z - z0, 0.0, 1.0)

    c000 = data[x0, y0, z0]
    c100 = data[x0 + 1, y0, z0]
    c010 = data[x0, y0 + 1, z0]
    c110 = data[x0 + 1, y0 + 1, z0]
    c001 = data[x0, y0, z0 + 1]
    c101 = data[x0 + 1, y0, z0 + 1]
    c011 = data[x0, y0 + 1, z0 + 1]
    c111 = data[x0 + 1, y0 + 1, z0 + 1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return np.where(inside, out, fill)


def nearest_sample(data: np.ndarray, coords: np.ndarray, fill=0) -> np.ndarray:
    """Nearest-neighbour lookup with half-way ties toward the lower index.

    A point is in bounds when its tie-broken rounded index lies in
    [0, n-1] (so the support extends half a voxel past the centers);
    everything else returns ``fill``.  Never invents values: the output
    set is a subset of the input values plus ``fill``.
    """
    data = np.asarray(data)
    nx, ny, nz = data.shape
    c = np.asarray(coords, dtype=np.float64)
    # ceil(x - 0.5) rounds halves down: 1.5 -> 1, 1.51 -> 2
    idx = np.ceil(c - 0.5).astype(np.intp)
    inside = ((idx[..., 0] >= 0) & (idx[..., 0] <= nx - 1)
              & (idx[..., 1] >= 0) & (idx[..., 1] <= ny - 1)
              & (idx[..., 2] >= 0) & (idx[..., 2] <= nz - 1))
    x = np.clip(idx[..., 0], 0, nx - 1)
    y = np.clip(idx[..., 1], 0, ny - 1)
    z = np.clip(idx[..., 2], 0, nz - 1)
    out = data[x, y, z]
    return np.where(inside, out, np.asarray(fill, dtype=data.dtype))


def world_to_voxel(affine: np.ndarray, points) -> np.ndarray:
    """Map world-mm points to continuous voxel coordinates."""
    inv = np.linalg.inv(np.asarray(affine, dtype=np.float64))
    p = np.asarray(points, dtype=np.float64)
    return p @ inv[:3, :3].T + inv[:3, 3]


def voxel_to_world(affine: np.ndarray, points) -> np.ndarray:
    """Map voxel indices to world millimetres."""
    a = np.asarray(affine, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    return p @ a[:3, :3].T + a[:3, 3]
