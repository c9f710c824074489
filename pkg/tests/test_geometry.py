import math

import numpy as np
import pytest

from objslam.errors import DegenerateGeometry, PointBehindCamera
from objslam.geometry import (
    CameraIntrinsics,
    Pose,
    cam_project,
    cam_unproject,
    horn_align,
    parallax_deg,
    project_points,
    quaternion_from_rotation,
    read_trajectory,
    rotation_angle_deg,
    rotation_from_quaternion,
    so3_exp,
    solve_pnp,
    triangulate_point,
    triangulate_rays,
    write_trajectory,
)


def random_pose(rng, t_scale=1.0):
    return Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * t_scale)


# ---------------------------------------------------------------------------
# Pose algebra
# ---------------------------------------------------------------------------


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(0)
    t = random_pose(rng)
    ident = Pose.identity()
    assert np.allclose(ident.compose(t).matrix(), t.matrix(), atol=1e-12)
    assert np.allclose(t.compose(t.inverse()).matrix(), np.eye(4), atol=1e-9)
    assert np.allclose(t.inverse().compose(t).matrix(), np.eye(4), atol=1e-9)


def test_compose_matches_homogeneous_matrix_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        # independent oracle: 4x4 homogeneous matrix product
        expected = a.matrix() @ b.matrix()
        assert np.allclose(a.compose(b).matrix(), expected, atol=1e-12)


def test_compose_associative_and_involutive_inverse():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = a.compose(b).compose(c).matrix()
        rhs = a.compose(b.compose(c)).matrix()
        assert np.abs(lhs - rhs).max() < 1e-9
        assert np.allclose(a.inverse().inverse().matrix(), a.matrix(), atol=1e-12)


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.1, np.zeros(3))


def test_pose_transform_matches_matrix():
    rng = np.random.default_rng(3)
    t = random_pose(rng)
    pts = rng.normal(size=(5, 3))
    hom = np.hstack([pts, np.ones((5, 1))]) @ t.matrix().T
    assert np.allclose(t.transform(pts), hom[:, :3], atol=1e-12)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

K_DIST = CameraIntrinsics(fu=420.0, fv=415.0, u0=319.5, v0=239.5, omega=0.9)
K_PIN = CameraIntrinsics(fu=420.0, fv=415.0, u0=319.5, v0=239.5, omega=0.0)


def test_project_on_axis_hits_principal_point():
    uv = cam_project(K_DIST, [0.0, 0.0, 3.0])
    assert np.allclose(uv, [K_DIST.u0, K_DIST.v0], atol=1e-12)


def test_project_pinhole_limit():
    k = CameraIntrinsics(fu=100.0, fv=100.0, u0=0.0, v0=0.0, omega=1e-8)
    uv = cam_project(k, [1.0, 0.0, 2.0])
    assert np.allclose(uv, [50.0, 0.0], atol=1e-4)


def test_project_matches_scalar_formula_oracle():
    # direct scalar evaluation of the arctangent radial formula
    k = CameraIntrinsics(fu=420.0, fv=415.0, u0=319.5, v0=239.5, omega=0.9)
    x, y, z = 1.0, 0.5, 2.0
    r = math.sqrt(x * x + y * y) / z
    rp = math.atan(2.0 * r * math.tan(k.omega / 2.0)) / k.omega
    expected = (k.u0 + k.fu * rp / (r * z) * x, k.v0 + k.fv * rp / (r * z) * y)
    assert np.allclose(cam_project(k, [x, y, z]), expected, atol=1e-12)


def test_project_agrees_with_pinhole_for_tiny_omega():
    rng = np.random.default_rng(4)
    k_small = CameraIntrinsics(fu=420.0, fv=415.0, u0=319.5, v0=239.5, omega=1e-6)
    pts = rng.normal(size=(50, 3))
    pts[:, 2] = np.abs(pts[:, 2]) + 0.5
    uv_small, _ = project_points(k_small, pts)
    uv_pin, _ = project_points(K_PIN, pts)
    assert np.abs(uv_small - uv_pin).max() < 1e-6


def test_project_behind_camera_raises():
    with pytest.raises(PointBehindCamera):
        cam_project(K_DIST, [0.0, 0.0, -1.0])


def test_unproject_project_round_trip():
    rng = np.random.default_rng(5)
    for k in (K_DIST, K_PIN):
        uv = rng.uniform([0, 0], [640, 480], size=(40, 2))
        d = cam_unproject(k, uv)
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        uv_back, valid = project_points(k, d * rng.uniform(0.5, 4.0, size=(40, 1)))
        assert valid.all()
        assert np.abs(uv_back - uv).max() < 1e-9


def test_projection_is_homogeneous():
    rng = np.random.default_rng(6)
    p = np.array([0.3, -0.2, 1.7])
    for a in rng.uniform(0.1, 5.0, size=5):
        assert np.allclose(cam_project(K_DIST, p), cam_project(K_DIST, a * p), atol=1e-9)


def test_projection_jacobian_matches_central_differences():
    from objslam.geometry import project_jacobian

    rng = np.random.default_rng(60)
    h = 1e-6
    for k in (K_DIST, K_PIN):
        worst = 0.0
        for _ in range(100):
            p = np.array([
                rng.uniform(-0.8, 0.8), rng.uniform(-0.6, 0.6), rng.uniform(0.4, 3.0)
            ])
            _, jac = project_jacobian(k, p)
            fd = np.zeros((2, 3))
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                up, _ = project_points(k, p + e)
                dn, _ = project_points(k, p - e)
                fd[:, i] = (up - dn) / (2 * h)
            worst = max(worst, np.abs(jac - fd).max() / max(np.abs(fd).max(), 1.0))
        assert worst < 1e-7


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def test_triangulate_two_orthogonal_rays():
    target = np.array([1.0, 2.0, 3.0])
    rays = [
        (Pose(np.eye(3), [1.0, 2.0, 0.0]), np.array([0.0, 0.0, 1.0])),
        (Pose(np.eye(3), [0.0, 2.0, 3.0]), np.array([1.0, 0.0, 0.0])),
    ]
    assert np.allclose(triangulate_point(rays), target, atol=1e-9)


def test_triangulate_five_consistent_rays():
    rng = np.random.default_rng(7)
    target = np.array([0.4, -0.3, 2.0])
    rays = []
    for _ in range(5):
        c = rng.normal(size=3)
        rays.append((Pose(np.eye(3), c), target - c))
    assert np.allclose(triangulate_point(rays), target, atol=1e-9)


def test_triangulate_matches_dense_normal_equation_oracle():
    rng = np.random.default_rng(8)
    centers = rng.normal(size=(3, 3))
    dirs = rng.normal(size=(3, 3)) + np.array([0, 0, 2.0])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # oracle: assemble the dense least squares over perpendicular residuals
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centers, dirs):
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ c
    expected = np.linalg.lstsq(a, b, rcond=None)[0]
    got = triangulate_rays(centers, dirs)
    assert np.allclose(got, expected, atol=1e-9)


def test_triangulate_gradient_is_stationary():
    rng = np.random.default_rng(9)
    centers = rng.normal(size=(4, 3))
    dirs = rng.normal(size=(4, 3)) + np.array([0, 0, 3.0])
    x = triangulate_rays(centers, dirs)
    dirs_n = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    grad = np.zeros(3)
    for c, d in zip(centers, dirs_n):
        m = np.eye(3) - np.outer(d, d)
        grad += 2.0 * m @ (x - c)
    assert np.linalg.norm(grad) < 1e-8


def test_triangulate_parallel_rays_degenerate():
    d = np.array([0.0, 0.0, 1.0])
    with pytest.raises(DegenerateGeometry):
        triangulate_rays([[0, 0, 0], [1e-9, 0, 0]], [d, d])


# ---------------------------------------------------------------------------
# Parallax
# ---------------------------------------------------------------------------


def test_parallax_coincident_centers_is_zero():
    p = Pose.identity()
    assert parallax_deg(p, p, [0.0, 0.0, 5.0]) == 0.0


def test_parallax_right_angle():
    a = Pose(np.eye(3), [-1.0, 0.0, 0.0])
    b = Pose(np.eye(3), [1.0, 0.0, 0.0])
    assert abs(parallax_deg(a, b, [0.0, 0.0, 1.0]) - 90.0) < 1e-12


def test_parallax_scalar_oracle():
    a = Pose(np.eye(3), [0.0, 0.0, 0.0])
    b = Pose(np.eye(3), [0.1, 0.0, 0.0])
    point = np.array([0.0, 0.0, 2.0])
    # oracle: explicit dot-product evaluation
    va, vb = point - a.translation, point - b.translation
    expected = math.degrees(
        math.acos(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    )
    got = parallax_deg(a, b, point)
    assert abs(got - expected) < 1e-12
    assert abs(got - 2.8624) < 5e-4


# ---------------------------------------------------------------------------
# PnP
# ---------------------------------------------------------------------------


def _pnp_scene(rng, n, k, noise=0.0):
    points = rng.uniform(-0.3, 0.3, size=(n, 3))
    r = so3_exp(rng.normal(size=3) * 0.4)
    t = np.array([0.05, -0.1, 1.5]) + rng.normal(size=3) * 0.1
    cam = points @ r.T + t
    uv, valid = project_points(k, cam)
    assert valid.all()
    uv = uv + rng.normal(size=uv.shape) * noise
    return points, uv, Pose(r, t)


@pytest.mark.parametrize("n", [4, 8, 20])
@pytest.mark.parametrize("k", [K_PIN, K_DIST])
def test_pnp_recovers_exact_pose(n, k):
    rng = np.random.default_rng(10 + n)
    points, uv, truth = _pnp_scene(rng, n, k)
    est = solve_pnp(uv, points, k)
    assert rotation_angle_deg(est.rotation, truth.rotation) < 1e-6
    assert np.linalg.norm(est.translation - truth.translation) < 1e-6


def test_pnp_three_points_rejected():
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError):
        solve_pnp(rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), K_PIN)


def test_pnp_collinear_rejected():
    points = np.outer(np.linspace(0, 1, 5), [1.0, 0.5, 0.2])
    uv = np.tile([320.0, 240.0], (5, 1))
    with pytest.raises(DegenerateGeometry):
        solve_pnp(uv, points, K_PIN)


def test_pnp_noisy_recovery_within_tolerance():
    # harness-generated scene with known ground truth, 0.5 px noise
    rng = np.random.default_rng(12)
    points, uv, truth = _pnp_scene(rng, 20, K_PIN, noise=0.5)
    est = solve_pnp(uv, points, K_PIN)
    assert rotation_angle_deg(est.rotation, truth.rotation) < 1.0
    t_err = np.linalg.norm(est.translation - truth.translation)
    assert t_err < 0.02 * np.linalg.norm(truth.translation)


# ---------------------------------------------------------------------------
# Horn alignment
# ---------------------------------------------------------------------------


def _helix(n=30):
    t = np.linspace(0, 4 * math.pi, n)
    return np.stack([np.cos(t), np.sin(t), 0.1 * t], axis=1)


def test_horn_identity():
    traj = _helix()
    sim = horn_align(traj, traj, with_scale=True)
    assert abs(sim.scale - 1.0) < 1e-12
    assert np.allclose(sim.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(sim.translation, 0.0, atol=1e-9)


def test_horn_recovers_known_rigid_motion():
    rng = np.random.default_rng(13)
    gt = _helix()
    r = so3_exp(rng.normal(size=3))
    t = rng.normal(size=3)
    est = gt @ r.T + t
    sim = horn_align(est, gt, with_scale=False)
    assert np.abs(sim.rotation - r).max() < 1e-9
    assert np.abs(sim.translation - t).max() < 1e-9


def test_horn_recovers_scale_with_noise():
    rng = np.random.default_rng(14)
    gt = _helix()
    est = 2.5 * gt + rng.normal(size=gt.shape) * 1e-3
    sim = horn_align(est, gt, with_scale=True)
    assert abs(sim.scale - 2.5) < 1e-3


def test_horn_residual_never_exceeds_identity_alignment():
    rng = np.random.default_rng(15)
    for with_scale in (False, True):
        gt = _helix()
        est = gt @ so3_exp(rng.normal(size=3) * 0.1).T + rng.normal(size=gt.shape) * 0.05
        sim = horn_align(est, gt, with_scale=with_scale)
        res_aligned = np.linalg.norm(est - sim.apply(gt), axis=1).sum()
        res_identity = np.linalg.norm(est - gt, axis=1).sum()
        assert res_aligned <= res_identity + 1e-12


def test_horn_collinear_rejected():
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry):
        horn_align(line + 0.1, line, with_scale=True)


# ---------------------------------------------------------------------------
# Quaternions and trajectory files
# ---------------------------------------------------------------------------


def test_quaternion_round_trip():
    rng = np.random.default_rng(16)
    for _ in range(50):
        r = so3_exp(rng.normal(size=3) * 2.0)
        q = quaternion_from_rotation(r)
        assert np.allclose(rotation_from_quaternion(q), r, atol=1e-12)
        assert q[3] >= 0


def test_trajectory_file_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    traj = [(0.1 * i, random_pose(rng)) for i in range(7)]
    path = tmp_path / "traj.txt"
    write_trajectory(path, traj)
    back = read_trajectory(path)
    assert len(back) == len(traj)
    for (ts_a, pa), (ts_b, pb) in zip(traj, back):
        assert ts_a == ts_b
        assert np.abs(pa.matrix() - pb.matrix()).max() < 1e-12
    # comment lines are ignored
    with open(path) as f:
        content = f.read()
    assert content.startswith("#")
    # byte-stable rewrite
    write_trajectory(tmp_path / "traj2.txt", back)
    assert (tmp_path / "traj2.txt").read_text() == content
