"""Per-frame object recognition.

Pipeline per frame: Quick-Shift groups features into regions of interest,
each region queries the database by bag of words, the direct index proposes
2D-3D correspondences which are merged per model, and candidate poses are
verified by distance-weighted sample consensus plus guided refinement.
Detections guided by pose priors run first and consume their features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .database import ObjectDatabase, ObjectModel
from .errors import DegenerateGeometry, NonConvergence
from .geometry import (
    CameraIntrinsics,
    Pose,
    format_float,
    project_points,
    quaternion_from_rotation,
    solve_pnp,
)
from .vocab import (
    DESCRIPTOR_BYTES,
    VocabularyTree,
    descriptor_from_hex,
    descriptor_to_hex,
    hamming_matrix,
)

DEFAULT_BANDWIDTH_PX = 40.0
DEFAULT_LINK_FACTOR = 3.0
DEFAULT_MU_E = 3.0
DEFAULT_MAX_ITERS = 50
DEFAULT_WINDOW_PX = 3.0  # half-width of the 7x7 refinement search patch
# expected poses are uncertain, so the prior-guided gather searches a wider
# window than the refinement patch; the Hamming gate still rejects clutter
DEFAULT_PRIOR_WINDOW_PX = 24.0
DEFAULT_MIN_INLIERS = 4


@dataclass
class Frame:
    """Feature arrays of one image plus the camera pose estimate."""

    frame_id: int
    timestamp: float
    pose_wc: Pose | None
    pixels: np.ndarray  # (n, 2)
    descriptors: np.ndarray  # (n, 32)
    levels: np.ndarray  # (n,)
    words: np.ndarray | None = None
    paths: np.ndarray | None = None

    def __len__(self):
        return len(self.pixels)


def quantize_frame(frame: Frame, tree: VocabularyTree) -> Frame:
    if len(frame):
        frame.words, frame.paths = tree.quantize_batch(frame.descriptors)
    else:
        frame.words = np.empty(0, dtype=np.int64)
        frame.paths = np.empty((0, tree.depth + 1), dtype=np.int64)
    return frame


@dataclass
class Region:
    region_id: int
    indices: np.ndarray
    centroid: np.ndarray


@dataclass
class Observation:
    """A verified detection tying camera and object frames together."""

    frame_id: int
    timestamp: float
    pose_wc: Pose  # camera pose in the (map-unit) world
    model_id: int
    pose_co: Pose  # object frame -> camera frame, metric
    point_indices: np.ndarray  # (m,) model point ids
    pixels: np.ndarray  # (m, 2) measurements
    levels: np.ndarray  # (m,)
    feature_indices: np.ndarray  # (m,) rows into the source frame
    score: float
    instance_hint: int | None = None

    @property
    def n_correspondences(self):
        return len(self.point_indices)


@dataclass
class PriorPose:
    """Expected camera-to-object pose of a known instance."""

    instance_id: int
    model_id: int
    pose_co: Pose
    provenance: str  # in-map | scaled-recent | unscaled-recent


# ---------------------------------------------------------------------------
# Quick Shift
# ---------------------------------------------------------------------------


def quick_shift_regions(pixels, bandwidth=DEFAULT_BANDWIDTH_PX, max_link=None):
    """Mode seeking on 2D feature coordinates.

    Each feature links to its nearest neighbor of higher density (Gaussian
    kernel of the given bandwidth) within ``max_link`` pixels; connected
    components of the link forest are the regions. Density ties are resolved
    by treating the lower index as denser, which keeps the result
    deterministic for a fixed input order.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pixels)
    if n == 0:
        raise ValueError("quick shift needs at least one feature")
    if max_link is None:
        max_link = DEFAULT_LINK_FACTOR * bandwidth
    diff = pixels[:, None, :] - pixels[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    density = np.exp(-dist2 / (2.0 * bandwidth * bandwidth)).sum(axis=1)

    order = np.arange(n)
    # j is "denser" than i when density[j] > density[i], ties toward lower j
    denser = (density[None, :] > density[:, None]) | (
        (density[None, :] == density[:, None]) & (order[None, :] < order[:, None])
    )
    parent = np.full(n, -1, dtype=np.int64)
    link2 = max_link * max_link
    for i in range(n):
        cand = np.nonzero(denser[i])[0]
        if len(cand) == 0:
            continue
        d2 = dist2[i, cand]
        j = int(np.argmin(d2))
        if d2[j] <= link2:
            parent[i] = cand[j]

    def root(i):
        while parent[i] >= 0:
            i = parent[i]
        return i

    labels = {}
    regions = []
    for i in range(n):
        r = root(i)
        if r not in labels:
            labels[r] = len(regions)
            regions.append([])
        regions[labels[r]].append(i)
    out = []
    for rid, members in enumerate(regions):
        idx = np.array(members, dtype=np.int64)
        out.append(Region(rid, idx, pixels[idx].mean(axis=0)))
    return out


# ---------------------------------------------------------------------------
# Scoring and sampling
# ---------------------------------------------------------------------------


def s_disac(pose_co: Pose, points, pixels, k: CameraIntrinsics, mu_e=DEFAULT_MU_E):
    """Truncated-residual inlier score: sum of max(0, mu_e - reprojection error).

    Larger is better; correspondences behind the camera contribute nothing.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    cam = pose_co.transform(pts)
    proj, valid = project_points(k, cam)
    err = np.linalg.norm(uv - proj, axis=1)
    contrib = np.where(valid, np.maximum(0.0, mu_e - err), 0.0)
    return float(contrib.sum())


def reprojection_inliers(pose_co: Pose, points, pixels, k, mu_e=DEFAULT_MU_E):
    """Indices of correspondences reprojecting within mu_e."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    cam = pose_co.transform(pts)
    proj, valid = project_points(k, cam)
    err = np.linalg.norm(uv - proj, axis=1)
    return np.nonzero(valid & (err < mu_e))[0]


def disac_weights(distances):
    """Sampling weights 1/h with h = max(distance, 1)."""
    h = np.maximum(np.asarray(distances, dtype=np.float64), 1.0)
    return 1.0 / h


def disac_sample(distances, rng, size=4):
    """Draw ``size`` distinct indices, each draw proportional to 1/h with
    renormalization over the remaining items."""
    n = len(distances)
    if n < size:
        raise ValueError("not enough correspondences to sample")
    weights = disac_weights(distances)
    chosen = []
    avail = np.arange(n)
    w = weights.copy()
    for _ in range(size):
        p = w / w.sum()
        pick = int(rng.choice(len(avail), p=p))
        chosen.append(int(avail[pick]))
        avail = np.delete(avail, pick)
        w = np.delete(w, pick)
    return np.array(chosen, dtype=np.int64)


def disac_verify(points, pixels, distances, k, rng, max_iters=DEFAULT_MAX_ITERS,
                 mu_e=DEFAULT_MU_E, min_inliers=DEFAULT_MIN_INLIERS):
    """Sample-and-verify pose search over putative correspondences.

    Up to ``max_iters`` minimal subsets are drawn by distance-weighted
    sampling; each is solved for a pose and ranked by the truncated-residual
    score over all correspondences. Returns (pose, inlier indices) of the
    best hypothesis or None when no pose reaches ``min_inliers``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n < 4:
        return None
    best = None
    for _ in range(max_iters):
        subset = disac_sample(distances, rng, 4)
        try:
            # fast minimal solve: junk subsets are gated out before GN and
            # P3P seeding is left to the guided refinement stage
            pose = solve_pnp(pixels[subset], points[subset], k,
                             refine_iters=6, allow_p3p=False,
                             skip_refine_above_px=20.0)
        except (DegenerateGeometry, NonConvergence, ValueError):
            continue
        score = s_disac(pose, points, pixels, k, mu_e)
        if best is None or score > best[1]:
            best = (pose, score)
            if len(reprojection_inliers(pose, points, pixels, k, mu_e)) == n:
                break  # every correspondence already fits
    if best is None:
        return None
    inliers = reprojection_inliers(best[0], points, pixels, k, mu_e)
    if len(inliers) < min_inliers:
        return None
    return best[0], inliers


# ---------------------------------------------------------------------------
# Guided matching and refinement
# ---------------------------------------------------------------------------


def _guided_matches(pose_co: Pose, model: ObjectModel, frame: Frame, active,
                    k: CameraIntrinsics, bounds, window=DEFAULT_WINDOW_PX,
                    max_distance=50):
    """Match model points to frame features near their projections.

    For every model point projecting inside the image, features within the
    search window are tested against all of the point's descriptors; a pair
    is kept when some descriptor is closer than ``max_distance``. One-to-one
    resolution is greedy by ascending distance. Returns arrays
    (point_indices, feature_indices, distances).
    """
    width, height = bounds
    cam = pose_co.transform(model.points)
    proj, valid = project_points(k, cam)
    in_bounds = valid & (proj[:, 0] >= 0) & (proj[:, 0] <= width - 1) \
        & (proj[:, 1] >= 0) & (proj[:, 1] <= height - 1)
    visible = np.nonzero(in_bounds)[0]
    active = np.asarray(active, dtype=np.int64)
    if len(visible) == 0 or len(active) == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64))

    feat_px = frame.pixels[active]
    candidates = []
    for p in visible:
        du = np.abs(feat_px[:, 0] - proj[p, 0])
        dv = np.abs(feat_px[:, 1] - proj[p, 1])
        near = np.nonzero((du <= window) & (dv <= window))[0]
        if len(near) == 0:
            continue
        rows = np.nonzero(model.desc_point == p)[0]
        dist = hamming_matrix(frame.descriptors[active[near]], model.descriptors[rows])
        dmin = dist.min(axis=1)
        for ni, d in zip(near, dmin):
            if d < max_distance:
                candidates.append((int(d), int(p), int(active[ni])))
    candidates.sort()
    used_points, used_feats = set(), set()
    pts, feats, dists = [], [], []
    for d, p, f in candidates:
        if p in used_points or f in used_feats:
            continue
        used_points.add(p)
        used_feats.add(f)
        pts.append(p)
        feats.append(f)
        dists.append(d)
    return (
        np.array(pts, dtype=np.int64),
        np.array(feats, dtype=np.int64),
        np.array(dists, dtype=np.int64),
    )


def refine_pose(pose_co: Pose, model: ObjectModel, frame: Frame, k: CameraIntrinsics,
                bounds, active=None, mu_e=DEFAULT_MU_E, window=DEFAULT_WINDOW_PX,
                max_distance=50):
    """Guided enlargement of the correspondence set followed by a re-solve.

    Projects all model points under ``pose_co``, gathers window matches and
    re-solves the pose on the inliers. A refinement that lowers the score is
    discarded, so the returned score never drops below the input pose's score
    on the same match set. Returns (pose, point_idx, feat_idx, score) with
    the correspondences filtered to inliers of the returned pose.
    """
    if active is None:
        active = np.arange(len(frame))
    pts, feats, dists = _guided_matches(
        pose_co, model, frame, active, k, bounds, window, max_distance
    )
    if len(pts) == 0:
        return pose_co, pts, feats, 0.0
    xyz = model.points[pts]
    uv = frame.pixels[feats]
    score_in = s_disac(pose_co, xyz, uv, k, mu_e)
    best_pose, best_score = pose_co, score_in
    inl = reprojection_inliers(pose_co, xyz, uv, k, mu_e)
    if len(inl) >= 4:
        try:
            refined = solve_pnp(uv[inl], xyz[inl], k)
            score_ref = s_disac(refined, xyz, uv, k, mu_e)
            if score_ref > best_score:
                best_pose, best_score = refined, score_ref
        except (DegenerateGeometry, NonConvergence, ValueError):
            pass
    keep = reprojection_inliers(best_pose, xyz, uv, k, mu_e)
    return best_pose, pts[keep], feats[keep], best_score


# ---------------------------------------------------------------------------
# Pose priors
# ---------------------------------------------------------------------------


def metric_camera_pose(pose_wc: Pose, scale: float) -> Pose:
    """Camera pose with the translation brought to metric units."""
    return Pose(pose_wc.rotation, scale * pose_wc.translation)


def compute_prior_pose(instance, frame: Frame, scale, staleness=2.0):
    """Expected camera-to-object pose of an instance, or None.

    Three cases: the instance is in the map (compose through the world), the
    scale is known (compose through the last observing camera), or neither,
    in which case the last relative pose is reused only if it is at most
    ``staleness`` seconds old.
    """
    last = instance.last_observation
    iid, mid = instance.instance_id, instance.model_id
    if getattr(instance, "pose_wo", None) is not None and scale is not None:
        t_wc = metric_camera_pose(frame.pose_wc, scale)
        return PriorPose(iid, mid, t_wc.inverse().compose(instance.pose_wo), "in-map")
    if last is None:
        return None
    if scale is not None:
        t_wci = metric_camera_pose(frame.pose_wc, scale)
        t_wcj = metric_camera_pose(last.pose_wc, scale)
        pose = t_wci.inverse().compose(t_wcj).compose(last.pose_co)
        return PriorPose(iid, mid, pose, "scaled-recent")
    if frame.timestamp - last.timestamp <= staleness:
        return PriorPose(iid, mid, last.pose_co, "unscaled-recent")
    return None


def prior_is_visible(prior: PriorPose, model: ObjectModel, k: CameraIntrinsics, bounds):
    """Object centroid projects in front of the camera and inside the image."""
    c = prior.pose_co.transform(model.centroid)
    if c[2] <= 0:
        return False
    uv, _ = project_points(k, c)
    width, height = bounds
    return bool(0 <= uv[0] <= width - 1 and 0 <= uv[1] <= height - 1)


# ---------------------------------------------------------------------------
# Detection drivers
# ---------------------------------------------------------------------------


def _make_observation(frame, model, pose_co, point_idx, feat_idx, score, hint=None):
    return Observation(
        frame_id=frame.frame_id,
        timestamp=frame.timestamp,
        pose_wc=frame.pose_wc,
        model_id=model.model_id,
        pose_co=pose_co,
        point_indices=np.asarray(point_idx, dtype=np.int64),
        pixels=frame.pixels[np.asarray(feat_idx, dtype=np.int64)].copy(),
        levels=frame.levels[np.asarray(feat_idx, dtype=np.int64)].copy(),
        feature_indices=np.asarray(feat_idx, dtype=np.int64),
        score=float(score),
        instance_hint=hint,
    )


def detect_with_priors(frame: Frame, priors, db: ObjectDatabase, k: CameraIntrinsics,
                       bounds, rng, mu_e=DEFAULT_MU_E, max_distance=50,
                       min_inliers=DEFAULT_MIN_INLIERS, accept_score=None,
                       max_iters=DEFAULT_MAX_ITERS,
                       prior_window=DEFAULT_PRIOR_WINDOW_PX, timer=None):
    """Detection guided by expected poses; consumed features leave the frame.

    Returns (observations, active feature indices remaining).
    """
    if accept_score is None:
        accept_score = min_inliers * mu_e / 3.0
    active = np.arange(len(frame))
    observations = []
    for prior in sorted(priors, key=lambda p: p.instance_id):
        model = db.models.get(prior.model_id)
        if model is None:
            continue
        if not prior_is_visible(prior, model, k, bounds):
            continue
        with _section(timer, "correspondence"):
            pts, feats, dists = _guided_matches(
                prior.pose_co, model, frame, active, k, bounds,
                window=prior_window, max_distance=max_distance,
            )
        if len(pts) < 4:
            continue
        with _section(timer, "disac"):
            verdict = disac_verify(
                model.points[pts], frame.pixels[feats], dists, k, rng,
                max_iters=max_iters, mu_e=mu_e, min_inliers=min_inliers,
            )
        if verdict is None:
            continue
        with _section(timer, "refinement"):
            pose, r_pts, r_feats, score = refine_pose(
                verdict[0], model, frame, k, bounds, active, mu_e, max_distance=max_distance
            )
        if len(r_pts) < min_inliers or score < accept_score:
            continue
        obs = _make_observation(frame, model, pose, r_pts, r_feats, score,
                                hint=prior.instance_id)
        observations.append(obs)
        active = np.setdiff1d(active, r_feats, assume_unique=False)
        if len(active) == 0:
            break
    return observations, active


def general_retrieval(frame: Frame, db: ObjectDatabase, active, top_n=10,
                      bandwidth=DEFAULT_BANDWIDTH_PX, max_link=None,
                      max_distance=50, timer=None):
    """Region-wise database retrieval with per-model correspondence merging.

    Returns [(model_id, point_idx, feat_idx, distances), ...] ordered by
    model id; duplicate (feature, point) pairs keep the lower distance.
    """
    from .vocab import to_bow

    active = np.asarray(active, dtype=np.int64)
    if len(active) == 0:
        return []
    if frame.words is None or frame.paths is None:
        raise ValueError("frame must be quantized against the vocabulary first")
    with _section(timer, "regioning"):
        regions = quick_shift_regions(frame.pixels[active], bandwidth, max_link)
    merged: dict[int, dict] = {}
    for region in regions:
        rows = active[region.indices]
        with _section(timer, "query"):
            bow = to_bow(db.tree, frame.descriptors[rows])
            if not bow or not db.models:
                continue
            candidates = db.query(bow, top_n=top_n)
        with _section(timer, "correspondence"):
            for cand in candidates:
                corrs = db.correspondences(
                    frame.pixels[rows], frame.descriptors[rows], frame.paths[rows],
                    cand.model_id, max_distance=max_distance, feature_indices=rows,
                )
                if not corrs:
                    continue
                bucket = merged.setdefault(cand.model_id, {})
                for c in corrs:
                    key = (c.feature_index, c.point_index)
                    if key not in bucket or c.distance < bucket[key]:
                        bucket[key] = c.distance
    out = []
    for model_id in sorted(merged):
        items = sorted(merged[model_id].items())  # by (feature, point)
        feat_idx = np.array([k_[0] for k_, _ in items], dtype=np.int64)
        point_idx = np.array([k_[1] for k_, _ in items], dtype=np.int64)
        dists = np.array([d for _, d in items], dtype=np.int64)
        out.append((model_id, point_idx, feat_idx, dists))
    return out


def verify_candidates(frame: Frame, db: ObjectDatabase, merged, active, k, bounds,
                      rng, mu_e=DEFAULT_MU_E, max_distance=50,
                      min_inliers=DEFAULT_MIN_INLIERS, accept_score=None,
                      max_iters=DEFAULT_MAX_ITERS, timer=None):
    """DISAC + refinement over merged per-model correspondences."""
    if accept_score is None:
        accept_score = min_inliers * mu_e / 3.0
    observations = []
    active = np.asarray(active, dtype=np.int64)
    for model_id, point_idx, feat_idx, dists in merged:
        keep = np.isin(feat_idx, active)
        if keep.sum() < 4:
            continue
        point_idx, feat_idx, dists = point_idx[keep], feat_idx[keep], dists[keep]
        model = db.models[model_id]
        with _section(timer, "disac"):
            verdict = disac_verify(
                model.points[point_idx], frame.pixels[feat_idx], dists, k, rng,
                max_iters=max_iters, mu_e=mu_e, min_inliers=min_inliers,
            )
        if verdict is None:
            continue
        with _section(timer, "refinement"):
            pose, r_pts, r_feats, score = refine_pose(
                verdict[0], model, frame, k, bounds, active, mu_e, max_distance=max_distance
            )
        if len(r_pts) < min_inliers or score < accept_score:
            continue
        observations.append(_make_observation(frame, model, pose, r_pts, r_feats, score))
        active = np.setdiff1d(active, r_feats)
        if len(active) < 4:
            break
    return observations, active


class _NullSection:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL_SECTION = _NullSection()


def _section(timer, name):
    if timer is None:
        return _NULL_SECTION
    return timer.section(name)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_frames_file(path, frames):
    lines = []
    for fr in frames:
        lines.append(f"frame {fr.frame_id} {format_float(fr.timestamp)}")
        for uv, level, desc in zip(fr.pixels, fr.levels, fr.descriptors):
            lines.append(
                f"{format_float(uv[0])} {format_float(uv[1])} {int(level)} "
                + descriptor_to_hex(desc)
            )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_frames_file(path):
    """Frames without poses; poses are attached from a trajectory file."""
    frames = []
    current = None

    def finish(cur):
        if cur is None:
            return
        n = len(cur["uv"])
        frames.append(
            Frame(
                frame_id=cur["id"],
                timestamp=cur["ts"],
                pose_wc=None,
                pixels=np.array(cur["uv"], dtype=np.float64).reshape(n, 2),
                descriptors=(
                    np.array(cur["desc"], dtype=np.uint8).reshape(n, DESCRIPTOR_BYTES)
                    if n else np.empty((0, DESCRIPTOR_BYTES), np.uint8)
                ),
                levels=np.array(cur["lvl"], dtype=np.int64),
            )
        )

    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("frame "):
                finish(current)
                _, fid, ts = line.split()
                current = {"id": int(fid), "ts": float(ts), "uv": [], "lvl": [], "desc": []}
            else:
                u, v, level, hexdesc = line.split()
                current["uv"].append((float(u), float(v)))
                current["lvl"].append(int(level))
                current["desc"].append(descriptor_from_hex(hexdesc))
    finish(current)
    return frames


def write_detections(path, observations, instance_ids):
    """One line per observation:
    frame_id model_id instance_id score tx ty tz qx qy qz qw n_corrs."""
    lines = ["# frame_id model_id instance_id score tx ty tz qx qy qz qw n_corrs"]
    for obs, inst in zip(observations, instance_ids):
        q = quaternion_from_rotation(obs.pose_co.rotation)
        vals = [obs.score, *obs.pose_co.translation, *q]
        lines.append(
            f"{obs.frame_id} {obs.model_id} {inst} "
            + " ".join(format_float(v) for v in vals)
            + f" {obs.n_correspondences}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
