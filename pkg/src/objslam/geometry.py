"""Rigid transforms, the FOV camera model, triangulation, PnP, parallax and
trajectory alignment.

Conventions used throughout the package:

* ``Pose(R, t)`` maps local coordinates into the parent frame,
  ``x_parent = R @ x_local + t``.  A camera pose ``T_WC`` therefore has the
  camera center at ``t`` and world->camera is ``T_WC.inverse()``.
* Pixel coordinates are (u, v) with u along image columns.
* The camera model is the FOV (arctangent) distortion model with parameters
  (fu, fv, u0, v0, omega); omega = 0 degenerates to the pinhole model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DegenerateGeometry, NonConvergence, PointBehindCamera

_ORTHONORMAL_TOL = 1e-6


def skew(v):
    """3x3 cross-product matrix, supports a trailing batch: (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi):
    """Rodrigues formula: rotation vector (3,) -> rotation matrix (3, 3)."""
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < 1e-12:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(angle) / angle
    b = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_angle_deg(ra, rb=None):
    """Angle in degrees of the rotation ``ra`` (or of ``ra^T rb`` when given).

    Uses atan2 of the skew part against the trace, which stays accurate for
    tiny angles where the plain acos form bottoms out near sqrt(eps).
    """
    r = np.asarray(ra) if rb is None else np.asarray(ra).T @ np.asarray(rb)
    c = (np.trace(r) - 1.0) / 2.0
    vee = 0.5 * np.array(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
    )
    return math.degrees(math.atan2(np.linalg.norm(vee), c))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_parent = rotation @ x_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if (
            np.abs(r.T @ r - np.eye(3)).max() > _ORTHONORMAL_TOL
            or np.linalg.det(r) < 0.0
        ):
            raise ValueError("rotation must be orthonormal with determinant +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """Chain transforms: (a.compose(b))(x) == a(b(x))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points):
        """Apply to one point (3,) or a stack (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def perturbed(self, xi) -> "Pose":
        """Right-increment retraction by a 6-vector (rho, phi):
        R <- R Exp(phi), t <- t + R rho."""
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return Pose(
            self.rotation @ so3_exp(xi[3:]),
            self.translation + self.rotation @ xi[:3],
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """FOV camera: focal lengths, principal point and distortion omega (rad)."""

    fu: float
    fv: float
    u0: float
    v0: float
    omega: float = 0.0

    def __post_init__(self):
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0.0 <= self.omega < math.pi:
            raise ValueError("omega must lie in [0, pi)")


_PINHOLE_OMEGA = 1e-12


def _fov_terms(k: CameraIntrinsics, x, y, z):
    """Radial scaling g and its partials (g, dg/drho, dg/dz) for the FOV model.

    The projection is (u0 + fu * x * g, v0 + fv * y * g) with
    g = r' / (r * z),  r = sqrt(x^2 + y^2) / z,
    r' = atan(2 r tan(omega / 2)) / omega.
    """
    rho = np.sqrt(x * x + y * y)
    if k.omega < _PINHOLE_OMEGA:
        g = 1.0 / z
        g_rho = np.zeros_like(g)
        g_z = -1.0 / (z * z)
        return g, g_rho, g_z
    c = 2.0 * math.tan(k.omega / 2.0)
    b = c * rho / z
    a = np.arctan(b)
    a_rho = c / (z * (1.0 + b * b))
    small = rho < 1e-12
    rho_safe = np.where(small, 1.0, rho)
    g = np.where(small, c / (k.omega * z), a / (k.omega * rho_safe))
    g_rho = np.where(small, 0.0, (a_rho * rho_safe - a) / (k.omega * rho_safe**2))
    g_z = np.where(small, -c / (k.omega * z * z), -a_rho / (k.omega * z))
    return g, g_rho, g_z


def project_points(k: CameraIntrinsics, points):
    """Project (..., 3) camera-frame points. Returns (uv, valid); entries with
    depth <= 0 are invalid and hold garbage coordinates."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    valid = z > 0.0
    z_safe = np.where(valid, z, 1.0)
    g, _, _ = _fov_terms(k, x, y, z_safe)
    uv = np.stack((k.u0 + k.fu * x * g, k.v0 + k.fv * y * g), axis=-1)
    return uv, valid


def cam_project(k: CameraIntrinsics, point):
    """Project a single camera-frame point; raises if it is behind the camera."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= 0.0:
        raise PointBehindCamera(f"depth {p[2]:g} <= 0")
    uv, _ = project_points(k, p)
    return uv


def project_jacobian(k: CameraIntrinsics, points):
    """Projection and its derivative w.r.t. the camera-frame point.

    points: (..., 3) with positive depths. Returns (uv (..., 2), J (..., 2, 3)).
    """
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    g, g_rho, g_z = _fov_terms(k, x, y, z)
    rho = np.sqrt(x * x + y * y)
    rho_safe = np.where(rho < 1e-12, 1.0, rho)
    # d rho / dx = x / rho (0 in the on-axis limit, where g_rho is 0 anyway)
    rx = x / rho_safe
    ry = y / rho_safe
    uv = np.stack((k.u0 + k.fu * x * g, k.v0 + k.fv * y * g), axis=-1)
    j = np.empty(p.shape[:-1] + (2, 3))
    j[..., 0, 0] = k.fu * (g + x * g_rho * rx)
    j[..., 0, 1] = k.fu * x * g_rho * ry
    j[..., 0, 2] = k.fu * x * g_z
    j[..., 1, 0] = k.fv * y * g_rho * rx
    j[..., 1, 1] = k.fv * (g + y * g_rho * ry)
    j[..., 1, 2] = k.fv * y * g_z
    return uv, j


def cam_unproject(k: CameraIntrinsics, uv):
    """Back-project pixels (..., 2) to unit bearing vectors in the camera frame."""
    uv = np.asarray(uv, dtype=np.float64)
    mx = (uv[..., 0] - k.u0) / k.fu
    my = (uv[..., 1] - k.v0) / k.fv
    rp = np.sqrt(mx * mx + my * my)
    if k.omega < _PINHOLE_OMEGA:
        scale = np.ones_like(rp)
    else:
        c = 2.0 * math.tan(k.omega / 2.0)
        small = rp < 1e-12
        rp_safe = np.where(small, 1.0, rp)
        scale = np.where(small, k.omega / c, np.tan(rp * k.omega) / (c * rp_safe))
    d = np.stack((mx * scale, my * scale, np.ones_like(rp)), axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def triangulate_rays(centers, directions, cond_limit=1e10):
    """Point minimizing the sum of squared perpendicular distances to the rays.

    centers, directions: (n, 3); directions need not be normalized.
    """
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if len(c) < 2:
        raise ValueError("at least 2 rays required")
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    # Sum of (I - d d^T) per ray gives the normal equations of the
    # perpendicular-distance least squares.
    a = len(c) * np.eye(3) - np.einsum("ni,nj->ij", d, d)
    b = (c - d * np.einsum("ni,ni->n", d, c)[:, None]).sum(axis=0)
    if np.linalg.cond(a) > cond_limit:
        raise DegenerateGeometry("rays are (nearly) parallel")
    return np.linalg.solve(a, b)


def triangulate_point(rays, cond_limit=1e10):
    """Triangulate from [(camera Pose in world, bearing in world), ...] pairs."""
    centers = np.array([pose.translation for pose, _ in rays])
    dirs = np.array([np.asarray(d, dtype=np.float64) for _, d in rays])
    return triangulate_rays(centers, dirs, cond_limit)


def parallax_deg(cam_a: Pose, cam_b: Pose, point):
    """Angle in degrees subtended at ``point`` by the two camera centers."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    va = p - cam_a.translation
    vb = p - cam_b.translation
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na < 1e-15 or nb < 1e-15:
        raise ValueError("point coincides with a camera center")
    if np.linalg.norm(cam_a.translation - cam_b.translation) < 1e-15:
        return 0.0
    c = np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0)
    return math.degrees(math.acos(c))


# ---------------------------------------------------------------------------
# Perspective-n-point
# ---------------------------------------------------------------------------


def _reproj_cost(r, t, points, pixels, k):
    p = points @ r.T + t
    if np.any(p[:, 2] <= 1e-9):
        return math.inf
    uv, _ = project_points(k, p)
    res = (pixels - uv).reshape(-1)
    return float(res @ res)


def _refine_pnp(r, t, points, pixels, k, iters=20):
    """Gauss-Newton on the reprojection error under the FOV model."""
    n = len(points)
    skews = skew(points)  # constant across iterations
    cost = _reproj_cost(r, t, points, pixels, k)
    if not math.isfinite(cost):
        return r, t, cost
    for _ in range(iters):
        if cost < 1e-20:
            break
        p = points @ r.T + t
        uv, jp = project_jacobian(k, p)
        res = (pixels - uv).reshape(-1)
        # residual = measured - projected; d p / d rho = R, d p / d phi = -R [x]x
        jr = np.empty((n, 2, 6))
        jp_r = jp @ r
        jr[:, :, :3] = -jp_r
        jr[:, :, 3:] = np.einsum("nij,njk->nik", jp_r, skews)
        j = jr.reshape(-1, 6)
        h = j.T @ j
        g = j.T @ res
        try:
            delta = np.linalg.solve(h + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break
        # backtracking keeps GN from overshooting on minimal 4-point sets
        improved = False
        for _bt in range(4):
            r_new = r @ so3_exp(delta[3:])
            t_new = t + r @ delta[:3]
            cost_new = _reproj_cost(r_new, t_new, points, pixels, k)
            if cost_new < cost:
                r, t = r_new, t_new
                improved = True
                if cost - cost_new < 1e-14 * (1.0 + cost):
                    return r, t, cost_new
                cost = cost_new
                break
            delta = delta * 0.5
        if not improved:
            break
    return r, t, cost


def solve_pnp(pixels, points, k: CameraIntrinsics, refine_iters=20,
              allow_p3p=True, skip_refine_above_px=None):
    """Camera-from-model pose from >= 4 pixel / 3D-point correspondences.

    An EPnP linearization seeds a Gauss-Newton refinement of the reprojection
    error under the full FOV model; for minimal 4-point sets a P3P fallback
    covers the cases where the EPnP basin is wrong. ``skip_refine_above_px``
    skips refinement when the linear seed is already hopeless (RMS above the
    gate), which sample-consensus loops use to discard junk subsets cheaply.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < 4 or len(pixels) != n:
        raise ValueError("solve_pnp needs at least 4 paired correspondences")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometry("model points are (nearly) collinear")

    # Undistort to ideal pinhole coordinates so the linear solver sees K = I.
    bearings = cam_unproject(k, pixels)
    normalized = bearings[:, :2] / bearings[:, 2:3]

    def clean(r0, t0):
        # Rodrigues output is orthonormal already; just reject junk
        if not (np.all(np.isfinite(r0)) and np.all(np.isfinite(t0))):
            return None
        if np.linalg.det(r0) < 0.5:
            return None
        return r0, t0

    def refine(r0, t0):
        if skip_refine_above_px is not None:
            init = _reproj_cost(r0, t0, points, pixels, k)
            if init > n * 2 * skip_refine_above_px**2:
                return r0, t0, init
        return _refine_pnp(r0, t0, points, pixels, k, refine_iters)

    ok, rvec, tvec = cv2.solvePnP(
        points, normalized, np.eye(3), None, flags=cv2.SOLVEPNP_EPNP
    )
    best = None
    if ok:
        seed = clean(cv2.Rodrigues(rvec)[0], tvec.reshape(3))
        if seed is not None:
            r1, t1, cost = refine(*seed)
            if math.isfinite(cost):
                best = (r1, t1, cost)

    # fall back to P3P seeds only when the EPnP route came out poor
    if n == 4 and allow_p3p and (best is None or best[2] > n * 1.0):
        try:
            count, rvecs, tvecs = cv2.solveP3P(
                points[:3], normalized[:3], np.eye(3), None, flags=cv2.SOLVEPNP_P3P
            )
        except cv2.error:
            count = 0
        for i in range(count):
            seed = clean(cv2.Rodrigues(rvecs[i])[0], tvecs[i].reshape(3))
            if seed is None:
                continue
            r1, t1, cost = refine(*seed)
            if math.isfinite(cost) and (best is None or cost < best[2]):
                best = (r1, t1, cost)
                if cost < 1e-16:
                    break
    if best is None:
        raise NonConvergence("no usable PnP solution found")
    return Pose(best[0], best[1])


# ---------------------------------------------------------------------------
# Trajectory alignment (Horn / Umeyama)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityTransform:
    """x_est ~ scale * rotation @ x_ref + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation


def horn_align(est, gt, with_scale=False) -> SimilarityTransform:
    """Closed-form least-squares similarity aligning the trajectories.

    The returned transform maps the reference positions ``gt`` onto the
    estimate, so its ``scale`` is the est-over-reference size ratio (an
    estimate twice the size of the reference reports scale 2). Alignment
    residuals are therefore expressed in the estimate's units.
    """
    x = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need >= 3 associated positions of equal length")
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometry("reference positions are (nearly) collinear")
    cov = yc.T @ xc / len(x)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    if with_scale:
        var = (xc * xc).sum() / len(x)
        scale = float(np.trace(np.diag(d) @ s) / var)
    else:
        scale = 1.0
    trans = my - scale * rot @ mx
    return SimilarityTransform(scale, rot, trans)


# ---------------------------------------------------------------------------
# Quaternions and TUM-style trajectory files
# ---------------------------------------------------------------------------


def quaternion_from_rotation(r):
    """Rotation matrix -> (qx, qy, qz, qw), sign-canonicalized (qw >= 0)."""
    r = np.asarray(r, dtype=np.float64)
    m00, m11, m22 = r[0, 0], r[1, 1], r[2, 2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        )
    elif m00 >= m11 and m00 >= m22:
        s = math.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array(
            [0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s, (r[2, 1] - r[1, 2]) / s]
        )
    elif m11 >= m22:
        s = math.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array(
            [(r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s, (r[0, 2] - r[2, 0]) / s]
        )
    else:
        s = math.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array(
            [(r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s, (r[1, 0] - r[0, 1]) / s]
        )
    q = q / np.linalg.norm(q)
    if q[3] < 0 or (q[3] == 0 and (q[0] < 0 or (q[0] == 0 and (q[1] < 0 or (q[1] == 0 and q[2] < 0))))):
        q = -q
    return q


def rotation_from_quaternion(q):
    """(qx, qy, qz, qw) -> rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def format_float(x):
    """Shortest round-trip decimal form, stable across runs."""
    return np.format_float_positional(float(x), unique=True, trim="0")


def write_trajectory(path, stamped_poses):
    """Write [(timestamp, Pose), ...] in TUM format."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in stamped_poses:
        q = quaternion_from_rotation(pose.rotation)
        vals = [ts, *pose.translation, *q]
        lines.append(" ".join(format_float(v) for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_trajectory(path):
    """Read a TUM trajectory file -> [(timestamp, Pose), ...]."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ValueError(f"malformed trajectory line: {line!r}")
            out.append((vals[0], Pose(rotation_from_quaternion(vals[4:8]), vals[1:4])))
    return out
