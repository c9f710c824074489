"""Synthetic scene generation: object models, a vocabulary corpus, a camera
trajectory and per-frame features with configurable noise.

World conventions: the metric ground truth lives in meters with the scene
centered near the origin; the emitted camera trajectory (what the engine sees)
is the metric one with translations multiplied by ``true_scale`` (map units
per meter). The engine's recovered scale should therefore approach
1 / true_scale meters per map unit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .config import Config, read_config, write_config
from .errors import AssociationError, ConfigError
from .geometry import Pose, format_float, project_points, read_trajectory, write_trajectory
from .recognition import Frame, read_frames_file, write_frames_file
from .vocab import flip_bits, random_descriptors


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


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class GroundTruth:
    trajectory_metric: list  # [(timestamp, Pose)], meters
    instances: list  # [(instance_id, model_id, Pose T_WO metric)]
    true_scale: float  # map units per meter
    frame_truth: dict  # frame_id -> (instance_ids (n,), point_ids (n,)), -1 clutter


@dataclass
class Scene:
    config: Config
    models: list  # [(model_id, points (P,3), per-point descriptor lists)]
    vocab_images: list
    frames: list  # Frame objects, pose_wc in map units
    trajectory: list  # [(timestamp, Pose)], map units
    gt: GroundTruth


def generate_scene(config: Config) -> Scene:
    """Deterministic synthetic scene for the given config (seed included)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.intrinsics()
    width, height = config.bounds()

    models = []
    for mid in range(config.n_models):
        pts = rng.uniform(
            -config.model_extent_m / 2, config.model_extent_m / 2,
            size=(config.points_per_model, 3),
        )
        per_point = []
        for _ in range(config.points_per_model):
            base = random_descriptors(rng, 1)[0]
            variants = [base]
            for _ in range(config.descriptors_per_point - 1):
                variants.append(flip_bits(base, 2, rng))
            per_point.append(variants)
        models.append((mid, pts, per_point))

    vocab_rng = np.random.default_rng(config.vocab_seed)
    vocab_images = [
        random_descriptors(vocab_rng, config.vocab_descriptors_per_image)
        for _ in range(config.vocab_images)
    ]

    instance_models = config.instance_model_ids()
    gt_instances = []
    for ii, mid in enumerate(instance_models):
        ang = 2 * math.pi * ii / max(config.n_instances, 1)
        t = np.array(
            [
                config.instance_ring_m * math.cos(ang),
                config.instance_ring_m * math.sin(ang),
                rng.uniform(-0.05, 0.05),
            ]
        )
        gt_instances.append((ii, mid, Pose(_random_rotation(rng), t)))

    traj_metric = []
    traj_map = []
    frames = []
    frame_truth = {}
    for i in range(config.n_frames):
        ts = i / config.frame_rate_hz
        ang = math.radians(
            config.orbit_span_deg * (i / max(config.n_frames - 1, 1))
        )
        eye = np.array(
            [
                config.orbit_radius_m * math.cos(ang),
                config.orbit_radius_m * math.sin(ang),
                config.orbit_height_m,
            ]
        )
        cam = look_at(eye, [0.0, 0.0, 0.0])
        traj_metric.append((ts, cam))
        pose_map = Pose(cam.rotation, config.true_scale * cam.translation)
        traj_map.append((ts, pose_map))

        pixels, descs, levels, inst_ids, point_ids = [], [], [], [], []
        inv = cam.inverse()
        for iid, mid, t_wo in gt_instances:
            _, pts, per_point = models[mid]
            pose_co = inv.compose(t_wo)
            cam_pts = pose_co.transform(pts)
            uv, valid = project_points(k, cam_pts)
            keep = valid & (uv[:, 0] >= 1) & (uv[:, 0] <= width - 2) \
                & (uv[:, 1] >= 1) & (uv[:, 1] <= height - 2)
            for p in np.nonzero(keep)[0]:
                if config.feature_dropout and rng.random() < config.feature_dropout:
                    continue
                noisy = uv[p] + rng.normal(size=2) * config.pixel_noise_px
                if not (0 <= noisy[0] <= width - 1 and 0 <= noisy[1] <= height - 1):
                    continue
                variants = per_point[p]
                d = variants[int(rng.integers(len(variants)))]
                if config.descriptor_noise_bits:
                    d = flip_bits(d, config.descriptor_noise_bits, rng)
                pixels.append(noisy)
                descs.append(d)
                levels.append(int(rng.integers(config.feature_levels)))
                inst_ids.append(iid)
                point_ids.append(int(p))
        for _ in range(config.clutter_per_frame):
            pixels.append(rng.uniform([0, 0], [width - 1, height - 1]))
            descs.append(random_descriptors(rng, 1)[0])
            levels.append(int(rng.integers(config.feature_levels)))
            inst_ids.append(-1)
            point_ids.append(-1)

        n = len(pixels)
        order = rng.permutation(n) if n else np.empty(0, dtype=np.int64)
        frames.append(
            Frame(
                frame_id=i,
                timestamp=ts,
                pose_wc=pose_map,
                pixels=np.array(pixels, dtype=np.float64).reshape(n, 2)[order],
                descriptors=(
                    np.array(descs, dtype=np.uint8)[order]
                    if n else np.empty((0, 32), np.uint8)
                ),
                levels=np.array(levels, dtype=np.int64)[order],
            )
        )
        frame_truth[i] = (
            np.array(inst_ids, dtype=np.int64)[order],
            np.array(point_ids, dtype=np.int64)[order],
        )

    gt = GroundTruth(
        trajectory_metric=traj_metric,
        instances=gt_instances,
        true_scale=config.true_scale,
        frame_truth=frame_truth,
    )
    return Scene(config, models, vocab_images, frames, traj_map, gt)


# ---------------------------------------------------------------------------
# Scene directory layout
# ---------------------------------------------------------------------------


def write_scene(scene: Scene, scene_dir):
    from .database import write_model_file
    from .geometry import quaternion_from_rotation

    os.makedirs(scene_dir, exist_ok=True)
    os.makedirs(os.path.join(scene_dir, "models"), exist_ok=True)
    os.makedirs(os.path.join(scene_dir, "gt"), exist_ok=True)

    write_config(scene.config, os.path.join(scene_dir, "scene_config.txt"))
    for mid, pts, per_point in scene.models:
        write_model_file(
            os.path.join(scene_dir, "models", f"model_{mid:04d}.txt"), mid, pts, per_point
        )
    corpus = [
        Frame(
            frame_id=i, timestamp=float(i), pose_wc=None,
            pixels=np.zeros((len(im), 2)), descriptors=im,
            levels=np.zeros(len(im), dtype=np.int64),
        )
        for i, im in enumerate(scene.vocab_images)
    ]
    write_frames_file(os.path.join(scene_dir, "vocab_corpus.txt"), corpus)
    write_frames_file(os.path.join(scene_dir, "frames.txt"), scene.frames)
    write_trajectory(os.path.join(scene_dir, "trajectory.txt"), scene.trajectory)

    write_trajectory(
        os.path.join(scene_dir, "gt", "trajectory.txt"), scene.gt.trajectory_metric
    )
    lines = ["# instance_id model_id tx ty tz qx qy qz qw"]
    for iid, mid, pose in scene.gt.instances:
        q = quaternion_from_rotation(pose.rotation)
        vals = " ".join(format_float(v) for v in (*pose.translation, *q))
        lines.append(f"{iid} {mid} {vals}")
    with open(os.path.join(scene_dir, "gt", "objects.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(scene_dir, "gt", "scale.txt"), "w") as f:
        f.write(format_float(scene.gt.true_scale) + "\n")
    lines = []
    for fid in sorted(scene.gt.frame_truth):
        inst_ids, point_ids = scene.gt.frame_truth[fid]
        lines.append(f"frame {fid}")
        for a, b in zip(inst_ids, point_ids):
            lines.append(f"{a} {b}")
    with open(os.path.join(scene_dir, "gt", "frame_truth.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_ground_truth(scene_dir) -> GroundTruth:
    from .geometry import rotation_from_quaternion

    traj = read_trajectory(os.path.join(scene_dir, "gt", "trajectory.txt"))
    instances = []
    with open(os.path.join(scene_dir, "gt", "objects.txt")) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            toks = line.split()
            instances.append(
                (
                    int(toks[0]),
                    int(toks[1]),
                    Pose(
                        rotation_from_quaternion([float(v) for v in toks[5:9]]),
                        [float(v) for v in toks[2:5]],
                    ),
                )
            )
    with open(os.path.join(scene_dir, "gt", "scale.txt")) as f:
        true_scale = float(f.read().strip())
    frame_truth = {}
    current = None
    with open(os.path.join(scene_dir, "gt", "frame_truth.txt")) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("frame "):
                current = int(line.split()[1])
                frame_truth[current] = ([], [])
            else:
                a, b = line.split()
                frame_truth[current][0].append(int(a))
                frame_truth[current][1].append(int(b))
    frame_truth = {
        fid: (np.array(a, dtype=np.int64), np.array(b, dtype=np.int64))
        for fid, (a, b) in frame_truth.items()
    }
    return GroundTruth(traj, instances, true_scale, frame_truth)


def read_scene_frames(scene_dir):
    """Frames with their map-unit poses attached by exact timestamp match."""
    frames = read_frames_file(os.path.join(scene_dir, "frames.txt"))
    traj = read_trajectory(os.path.join(scene_dir, "trajectory.txt"))
    by_ts = {round(ts, 9): pose for ts, pose in traj}
    for frame in frames:
        pose = by_ts.get(round(frame.timestamp, 9))
        if pose is None:
            raise AssociationError(
                f"frame {frame.frame_id} at t={frame.timestamp} has no trajectory pose"
            )
        frame.pose_wc = pose
    return frames


def read_scene_config(scene_dir) -> Config:
    path = os.path.join(scene_dir, "scene_config.txt")
    if not os.path.exists(path):
        raise ConfigError(f"missing {path}")
    return read_config(path)


def read_vocab_corpus(path):
    """A corpus file is a frames file whose groups act as training images."""
    return [fr.descriptors for fr in read_frames_file(path)]
