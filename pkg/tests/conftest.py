import math

import numpy as np
import pytest

from objslam.database import ObjectDatabase, build_object_model
from objslam.geometry import CameraIntrinsics, Pose, project_points, so3_exp
from objslam.recognition import Frame, quantize_frame
from objslam.vocab import build_vocabulary, flip_bits, random_descriptors

K = CameraIntrinsics(fu=500.0, fv=500.0, u0=320.0, v0=240.0, omega=0.0)
BOUNDS = (640, 480)


def look_at(eye, target):
    """Camera pose with +z toward ``target`` and image y pointing world-down."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    down = np.array([0.0, 0.0, -1.0])
    if abs(z @ down) > 0.999:
        down = np.array([0.0, -1.0, 0.0])
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def arc_cameras(n, radius=2.0, height=0.6, span_deg=120.0, center=(0.0, 0.0, 0.0),
                start_deg=0.0):
    """Metric camera poses on a circular arc looking at ``center``."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n):
        ang = math.radians(start_deg + span_deg * (i / max(n - 1, 1)))
        eye = center + np.array(
            [radius * math.cos(ang), radius * math.sin(ang), height]
        )
        poses.append(look_at(eye, center))
    return poses


def make_ba_scene(rng, n_kfs=6, n_points=30, n_instances=2, points_per_instance=8,
                  s_star=2.0, noise_px=0.0, k=K):
    """Consistent synthetic MapState at map scale ``s_star`` (map = metric * s*).

    Returns (map_state, gt) where gt holds the metric truth. All keyframe
    measurements are generated by exact projection plus optional pixel noise.
    """
    from objslam.backend import (
        AnchorPoint,
        Keyframe,
        MapPoint,
        MapState,
        ObjectInstance,
    )

    cams_metric = arc_cameras(n_kfs, radius=2.0, height=0.6)
    structure = rng.uniform(-0.8, 0.8, size=(n_points, 3))

    m = MapState()
    for i, cam in enumerate(cams_metric):
        m.keyframes[i] = Keyframe(
            keyframe_id=i, timestamp=float(i) * 0.5,
            pose_wc=Pose(cam.rotation, s_star * cam.translation),
            is_semantic=False,
        )

    gt_points = {}
    for j in range(n_points):
        pid = m.new_landmark_id()
        m.points[pid] = MapPoint(pid, s_star * structure[j])
        gt_points[pid] = structure[j]

    gt_instances = {}
    for ii in range(n_instances):
        local = rng.uniform(-0.15, 0.15, size=(points_per_instance, 3))
        angle = 2 * math.pi * ii / max(n_instances, 1)
        t_wo = Pose(
            so3_exp(rng.normal(size=3) * 0.3),
            np.array([0.45 * math.cos(angle), 0.45 * math.sin(angle), 0.0]),
        )
        iid = m.new_instance_id()
        inst = ObjectInstance(
            instance_id=iid, model_id=ii, model_points=local,
            model_centroid=local.mean(axis=0),
            model_radius=float(np.linalg.norm(local - local.mean(0), axis=1).max()),
            pose_wo=t_wo, scale_estimate=1.0 / s_star,
        )
        m.instances[iid] = inst
        gt_instances[iid] = t_wo
        for p in range(points_per_instance):
            aid = m.new_landmark_id()
            xw_metric = t_wo.transform(local[p])
            m.anchors[aid] = AnchorPoint(aid, iid, local[p].copy(), s_star * xw_metric)
            inst.anchored[p] = aid

    # keyframe measurements: project every landmark visible in front
    for i, cam in enumerate(cams_metric):
        inv = cam.inverse()
        kf = m.keyframes[i]
        for lm_id in sorted(set(m.points) | set(m.anchors)):
            metric = (
                gt_points[lm_id]
                if lm_id in m.points
                else m.anchors[lm_id].x_world / s_star
            )
            p_cam = inv.transform(metric)
            if p_cam[2] <= 0.2:
                continue
            uv, _ = project_points(k, p_cam)
            if not (0 <= uv[0] <= BOUNDS[0] - 1 and 0 <= uv[1] <= BOUNDS[1] - 1):
                continue
            uv = uv + rng.normal(size=2) * noise_px
            kf.measurements[lm_id] = (uv, 0)
            if lm_id in m.anchors:
                kf.is_semantic = True

    m.scale = 1.0 / s_star
    gt = {
        "cams_metric": cams_metric,
        "points_metric": gt_points,
        "instances": gt_instances,
        "s_star": s_star,
        "scale": 1.0 / s_star,
    }
    return m, gt


@pytest.fixture(scope="session")
def small_tree():
    rng = np.random.default_rng(999)
    images = [random_descriptors(rng, 200) for _ in range(12)]
    return build_vocabulary(images, k=8, depth=2, seed=999)


def make_model(rng, tree, model_id, n_points=50, extent=0.3, descs_per_point=1):
    points = rng.uniform(-extent / 2, extent / 2, size=(n_points, 3))
    per_point = [list(random_descriptors(rng, descs_per_point)) for _ in range(n_points)]
    model = build_object_model(model_id, points, per_point, tree)
    return model


def make_database(rng, tree, n_models=5, **kw):
    db = ObjectDatabase(tree)
    for i in range(n_models):
        db.add_model(make_model(rng, tree, i, **kw))
    return db


def point_descriptor(model, point_index):
    """First representative descriptor of a model point."""
    row = np.nonzero(model.desc_point == point_index)[0][0]
    return model.descriptors[row]


def make_frame_observing(model, pose_co, tree, rng, frame_id=0, timestamp=0.0,
                         pose_wc=None, k=K, bounds=BOUNDS, noise_px=0.0,
                         flip=0, clutter=0, subset=None):
    """Frame whose features are projections of the model points plus clutter.

    Returns (frame, truth) where truth[i] is the model point index of feature
    i (or -1 for clutter).
    """
    from objslam.geometry import project_points

    pts = np.arange(model.n_points) if subset is None else np.asarray(subset)
    cam = pose_co.transform(model.points[pts])
    uv, valid = project_points(k, cam)
    keep = valid & (uv[:, 0] >= 0) & (uv[:, 0] <= bounds[0] - 1) \
        & (uv[:, 1] >= 0) & (uv[:, 1] <= bounds[1] - 1)
    uv = uv[keep]
    pts = pts[keep]
    pixels = [uv + rng.normal(size=uv.shape) * noise_px]
    descs = [np.array([flip_bits(point_descriptor(model, p), flip, rng) for p in pts])]
    truth = [pts]
    if clutter:
        pixels.append(rng.uniform([0, 0], [bounds[0] - 1, bounds[1] - 1], size=(clutter, 2)))
        descs.append(random_descriptors(rng, clutter))
        truth.append(-np.ones(clutter, dtype=np.int64))
    pixels = np.vstack(pixels)
    descs = np.vstack(descs)
    truth = np.concatenate(truth)
    order = rng.permutation(len(pixels))
    frame = Frame(
        frame_id=frame_id,
        timestamp=timestamp,
        pose_wc=pose_wc if pose_wc is not None else Pose.identity(),
        pixels=pixels[order],
        descriptors=descs[order],
        levels=np.zeros(len(order), dtype=np.int64),
    )
    return quantize_frame(frame, tree), truth[order]
