"""Object-aware SLAM back-end.

Unit conventions: keyframe translations and triangulated landmark positions
live in map units; object model points and object poses are metric (meters).
The single global scale ``s`` converts map units to meters through the
anchor-point alignment constraints, which is what makes it observable from a
monocular map. Bundle adjustment optimizes camera poses (first keyframe held
fixed as gauge), object poses, landmark positions and log(s) jointly under a
Huber-robustified objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateGeometry, PointBehindCamera, ScaleUnobservable
from .geometry import (
    Pose,
    cam_unproject,
    format_float,
    parallax_deg,
    project_jacobian,
    project_points,
    quaternion_from_rotation,
    rotation_from_quaternion,
    skew,
    triangulate_rays,
)
from .recognition import Observation, metric_camera_pose

HUBER_REPROJECTION = 5.991  # chi2(0.05, 2 dof)
HUBER_ALIGNMENT = 7.815  # chi2(0.05, 3 dof)
SIGMA_ALIGNMENT = 0.01  # meters
MIN_TRIANGULATION_POINTS = 5
PARALLAX_THRESHOLD_DEG = 3.0
DIRECTION_COND_MIN = 1e-3
COLLINEARITY_FRACTION = 0.01


def level_sigma2(level) -> float:
    """Measurement variance of a feature from pyramid level l: 2^(2l)."""
    return float(4.0 ** level)


def huber(x, delta_sq) -> float:
    """Robust influence on a squared weighted error x >= 0."""
    if x < delta_sq:
        return float(x)
    return float(2.0 * math.sqrt(delta_sq) * math.sqrt(x) - delta_sq)


def huber_weight(x, delta_sq):
    """d huber / dx, used as the IRLS weight. Works on arrays."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        w = np.where(x < delta_sq, 1.0, np.sqrt(delta_sq / np.maximum(x, 1e-300)))
    return w


# ---------------------------------------------------------------------------
# Map structures
# ---------------------------------------------------------------------------


@dataclass
class Keyframe:
    keyframe_id: int
    timestamp: float
    pose_wc: Pose
    is_semantic: bool = False
    # landmark id -> (pixel (2,), level)
    measurements: dict = field(default_factory=dict)


@dataclass
class MapPoint:
    point_id: int
    position: np.ndarray


@dataclass
class AnchorPoint:
    anchor_id: int
    instance_id: int
    x_object: np.ndarray  # object frame, meters
    x_world: np.ndarray  # world frame, map units


@dataclass
class TrackEntry:
    frame_id: int
    timestamp: float
    pose_wc: Pose
    pose_co: Pose
    pixel: np.ndarray
    level: int


@dataclass
class ObjectInstance:
    instance_id: int
    model_id: int
    model_points: np.ndarray
    model_centroid: np.ndarray
    model_radius: float
    tracks: dict = field(default_factory=dict)  # model point idx -> [TrackEntry]
    anchored: dict = field(default_factory=dict)  # model point idx -> anchor id
    pose_wo: Pose | None = None
    scale_estimate: float | None = None
    last_observation: Observation | None = None
    n_observations: int = 0

    @property
    def is_triangulated(self):
        return self.pose_wo is not None


@dataclass
class MapState:
    keyframes: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)  # generic map points
    anchors: dict = field(default_factory=dict)
    instances: dict = field(default_factory=dict)
    scale: float | None = None
    _next_landmark: int = 0
    _next_instance: int = 0

    def new_landmark_id(self):
        lid = self._next_landmark
        self._next_landmark = lid + 1
        return lid

    def new_instance_id(self):
        iid = self._next_instance
        self._next_instance = iid + 1
        return iid

    def landmark_position(self, landmark_id):
        if landmark_id in self.points:
            return self.points[landmark_id].position
        return self.anchors[landmark_id].x_world

    def audit(self):
        """Referential integrity: no dangling ids anywhere."""
        landmark_ids = set(self.points) | set(self.anchors)
        assert len(self.points.keys() & self.anchors.keys()) == 0
        for kf in self.keyframes.values():
            assert set(kf.measurements) <= landmark_ids
        for anchor in self.anchors.values():
            assert anchor.instance_id in self.instances
        for inst in self.instances.values():
            assert set(inst.anchored.values()) <= set(self.anchors)
        if self.scale is not None:
            assert self.scale > 0


# ---------------------------------------------------------------------------
# Residuals and analytic Jacobians
# ---------------------------------------------------------------------------


def reprojection_residual(pose_wc: Pose, x_world, pixel, k):
    """e = u - CamProj(T_WC^-1 x_W); raises if the point is behind the camera."""
    p = pose_wc.inverse().transform(np.asarray(x_world, dtype=np.float64))
    if p[2] <= 0:
        raise PointBehindCamera("landmark behind keyframe")
    uv, _ = project_points(k, p)
    return np.asarray(pixel, dtype=np.float64) - uv


def reprojection_jacobians(pose_wc: Pose, x_world, k):
    """(J_camera (2,6), J_point (2,3)) of the reprojection residual.

    The camera increment is the right retraction of Pose.perturbed:
    R <- R Exp(phi), t <- t + R rho, with the 6-vector ordered (rho, phi).
    """
    r = pose_wc.rotation
    p = r.T @ (np.asarray(x_world, dtype=np.float64) - pose_wc.translation)
    if p[2] <= 0:
        raise PointBehindCamera("landmark behind keyframe")
    _, jp = project_jacobian(k, p)
    j_cam = np.empty((2, 6))
    j_cam[:, :3] = jp
    j_cam[:, 3:] = -jp @ skew(p)
    j_point = -jp @ r.T
    return j_cam, j_point


def alignment_residual(pose_wo: Pose, scale, x_object, x_world):
    """a = x_O - s R_WO^T x_W + R_WO^T t_WO (meters)."""
    rt = pose_wo.rotation.T
    return (
        np.asarray(x_object, dtype=np.float64)
        - scale * rt @ np.asarray(x_world, dtype=np.float64)
        + rt @ pose_wo.translation
    )


def alignment_jacobians(pose_wo: Pose, scale, x_object, x_world):
    """(J_object (3,6), J_anchor (3,3), J_log_scale (3,)) of the alignment
    residual; the object increment uses the same retraction as the camera and
    the scale is optimized as log(s)."""
    rt = pose_wo.rotation.T
    x_w = np.asarray(x_world, dtype=np.float64)
    q = rt @ (scale * x_w - pose_wo.translation)
    j_obj = np.empty((3, 6))
    j_obj[:, :3] = np.eye(3)
    j_obj[:, 3:] = -skew(q)
    j_anchor = -scale * rt
    j_log_s = -scale * rt @ x_w
    return j_obj, j_anchor, j_log_s


def object_pose_prior(pose_wc: Pose, pose_co: Pose, scale_hat) -> Pose:
    """World pose of an object from its last observation and a scale estimate:
    [R_WC R_CO | R_WC t_CO + s t_WC]."""
    if scale_hat <= 0:
        raise ValueError("scale estimate must be positive")
    return Pose(
        pose_wc.rotation @ pose_co.rotation,
        pose_wc.rotation @ pose_co.translation + scale_hat * pose_wc.translation,
    )


def estimate_scale(terms) -> float:
    """Closed-form 1-D least squares over observation/anchor pairs.

    Each term is (pose_wc, pose_co, x_object, x_world); the residual is
    R_WC^T x_W - R_CO x_O - t_CO - s R_WC^T t_WC and the minimizer is
    s = sum(a.b) / sum(a.a) with a = R_WC^T t_WC.
    """
    num = 0.0
    den = 0.0
    for pose_wc, pose_co, x_o, x_w in terms:
        rt = pose_wc.rotation.T
        a = rt @ pose_wc.translation
        b = rt @ np.asarray(x_w, float) - pose_co.transform(np.asarray(x_o, float))
        num += float(a @ b)
        den += float(a @ a)
    if den <= 1e-30:
        raise ScaleUnobservable("all camera centers at the origin")
    return num / den


def estimate_instance_scale(instance: ObjectInstance, anchors: dict) -> float:
    """Scale estimate from every (observation, anchor pair) of the instance."""
    terms = []
    for point_idx, anchor_id in sorted(instance.anchored.items()):
        anchor = anchors[anchor_id]
        for entry in instance.tracks.get(point_idx, ()):
            terms.append((entry.pose_wc, entry.pose_co, anchor.x_object, anchor.x_world))
    if not terms:
        raise ValueError("instance has no anchored observations")
    return estimate_scale(terms)


# ---------------------------------------------------------------------------
# Association and accumulation
# ---------------------------------------------------------------------------


def _instance_world_centroid(instance: ObjectInstance, scale) -> np.ndarray | None:
    """Metric world position of the instance centroid, best available source."""
    if instance.pose_wo is not None:
        return instance.pose_wo.transform(instance.model_centroid)
    last = instance.last_observation
    if last is None or scale is None:
        return None
    hyp = metric_camera_pose(last.pose_wc, scale).compose(last.pose_co)
    return hyp.transform(instance.model_centroid)


def associate_observation(map_state: MapState, obs: Observation, model) -> int:
    """Resolve which physical instance an observation belongs to.

    With a known scale the hypothesized world centroid is tested for overlap
    (half the model bounding radius) against existing same-model instances;
    without scale the most recently observed same-model instance is assumed.
    A new instance is created when no candidate matches.
    """
    same_model = [
        inst for inst in map_state.instances.values() if inst.model_id == model.model_id
    ]
    chosen = None
    if map_state.scale is not None:
        hyp = metric_camera_pose(obs.pose_wc, map_state.scale).compose(obs.pose_co)
        centroid_hyp = hyp.transform(model.centroid)
        radius = model.radius / 2.0
        best_d = None
        for inst in sorted(same_model, key=lambda i: i.instance_id):
            c = _instance_world_centroid(inst, map_state.scale)
            if c is None:
                continue
            d = float(np.linalg.norm(c - centroid_hyp))
            if d < radius and (best_d is None or d < best_d):
                chosen, best_d = inst, d
    else:
        observed = [i for i in same_model if i.last_observation is not None]
        if observed:
            chosen = max(observed, key=lambda i: (i.last_observation.timestamp, i.instance_id))
    if chosen is not None:
        return chosen.instance_id
    iid = map_state.new_instance_id()
    map_state.instances[iid] = ObjectInstance(
        instance_id=iid,
        model_id=model.model_id,
        model_points=np.asarray(model.points, dtype=np.float64),
        model_centroid=np.asarray(model.centroid, dtype=np.float64),
        model_radius=float(model.radius),
    )
    return iid


def _observation_ray(entry_pose_wc: Pose, pixel, k):
    return entry_pose_wc.rotation @ cam_unproject(k, pixel)


def _pair_parallax(entry_a, entry_b, k, known_point=None):
    """Parallax of two sightings, measured at the triangulated midpoint (or at
    the known world point when available)."""
    if known_point is not None:
        point = known_point
    else:
        centers = np.array([entry_a.pose_wc.translation, entry_b.pose_wc.translation])
        if np.linalg.norm(centers[0] - centers[1]) < 1e-12:
            return 0.0
        dirs = np.array(
            [
                _observation_ray(entry_a.pose_wc, entry_a.pixel, k),
                _observation_ray(entry_b.pose_wc, entry_b.pixel, k),
            ]
        )
        try:
            point = triangulate_rays(centers, dirs)
        except DegenerateGeometry:
            return 0.0
    try:
        return parallax_deg(entry_a.pose_wc, entry_b.pose_wc, point)
    except ValueError:
        return 0.0


def accumulate(map_state: MapState, instance: ObjectInstance, obs: Observation, k,
               parallax_threshold=PARALLAX_THRESHOLD_DEG) -> bool:
    """Fold an observation into the instance's point tracks.

    A correspondence is kept when its point is new or when it offers at least
    ``parallax_threshold`` degrees of parallax against some previous sighting
    of the same point. Returns False when nothing was kept (the observation
    is disregarded for geometry but still refreshes the detection recency).
    """
    kept = []
    for j, point_idx in enumerate(obs.point_indices):
        entry = TrackEntry(
            frame_id=obs.frame_id,
            timestamp=obs.timestamp,
            pose_wc=obs.pose_wc,
            pose_co=obs.pose_co,
            pixel=obs.pixels[j].copy(),
            level=int(obs.levels[j]),
        )
        track = instance.tracks.get(int(point_idx))
        if track is None:
            kept.append((int(point_idx), entry))
            continue
        anchor_id = instance.anchored.get(int(point_idx))
        known = map_state.anchors[anchor_id].x_world if anchor_id is not None else None
        par = max(_pair_parallax(prev, entry, k, known) for prev in track)
        if par >= parallax_threshold:
            kept.append((int(point_idx), entry))
    instance.last_observation = obs
    instance.n_observations += 1
    if not kept:
        return False
    for point_idx, entry in kept:
        instance.tracks.setdefault(point_idx, []).append(entry)
    return True


# ---------------------------------------------------------------------------
# Triangulation into anchor points
# ---------------------------------------------------------------------------


@dataclass
class TriangulationResult:
    instance_id: int
    anchor_ids: list
    keyframe_ids: list
    scale_estimate: float


def _track_rays(track, k):
    centers = np.array([e.pose_wc.translation for e in track])
    dirs = np.array([_observation_ray(e.pose_wc, e.pixel, k) for e in track])
    return centers, dirs


def _sync_anchor_measurements(map_state: MapState):
    """Every track sighting of an anchored point made from a semantic keyframe
    becomes a reprojection measurement of that keyframe."""
    for inst in map_state.instances.values():
        for point_idx, anchor_id in inst.anchored.items():
            for entry in inst.tracks.get(point_idx, ()):
                kf = map_state.keyframes.get(entry.frame_id)
                if kf is not None and anchor_id not in kf.measurements:
                    kf.measurements[anchor_id] = (entry.pixel.copy(), entry.level)


def try_triangulate(map_state: MapState, instance: ObjectInstance, k,
                    min_points=MIN_TRIANGULATION_POINTS,
                    parallax_threshold=PARALLAX_THRESHOLD_DEG,
                    direction_cond_min=DIRECTION_COND_MIN,
                    collinearity_fraction=COLLINEARITY_FRACTION):
    """Anchor an instance's well-observed points into the map.

    A point qualifies when it was seen from two distinct positions with at
    least ``parallax_threshold`` degrees of parallax and triangulates cleanly.
    The first insertion additionally demands ``min_points`` qualifying points
    whose observation directions are well conditioned and whose triangulated
    positions are not collinear; afterwards new qualifying points are anchored
    incrementally. Contributing frames are promoted to semantic keyframes.
    """
    candidates = {}
    for point_idx in sorted(instance.tracks):
        if point_idx in instance.anchored:
            continue
        track = instance.tracks[point_idx]
        if len(track) < 2:
            continue
        centers, dirs = _track_rays(track, k)
        if np.linalg.norm(centers - centers[0], axis=1).max() < 1e-12:
            continue  # single position
        try:
            x_w = triangulate_rays(centers, dirs)
        except DegenerateGeometry:
            continue
        par = 0.0
        for i in range(len(track)):
            for j in range(i + 1, len(track)):
                par = max(par, _pair_parallax(track[i], track[j], k, x_w))
        if par < parallax_threshold:
            continue
        candidates[point_idx] = (x_w, track)

    if not candidates:
        return None
    if not instance.is_triangulated:
        if len(candidates) < min_points:
            return None
        all_dirs = np.vstack([_track_rays(t, k)[1] for _, t in candidates.values()])
        centered = all_dirs - all_dirs.mean(axis=0)
        if np.linalg.svd(centered, compute_uv=False)[-1] <= direction_cond_min:
            return None
        pts = np.array([xw for xw, _ in candidates.values()])
        centered_pts = pts - pts.mean(axis=0)
        u, s, vt = np.linalg.svd(centered_pts, compute_uv=True)
        line_res = math.sqrt(max((s[1] ** 2 + s[2] ** 2) / len(pts), 0.0))
        extent = float(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1).max())
        if extent <= 0 or line_res <= collinearity_fraction * extent:
            return None

    anchor_ids = []
    new_keyframes = []
    for point_idx, (x_w, track) in sorted(candidates.items()):
        aid = map_state.new_landmark_id()
        map_state.anchors[aid] = AnchorPoint(
            anchor_id=aid,
            instance_id=instance.instance_id,
            x_object=instance.model_points[point_idx].copy(),
            x_world=np.asarray(x_w, dtype=np.float64),
        )
        instance.anchored[point_idx] = aid
        anchor_ids.append(aid)
        for entry in track:
            if entry.frame_id not in map_state.keyframes:
                map_state.keyframes[entry.frame_id] = Keyframe(
                    keyframe_id=entry.frame_id,
                    timestamp=entry.timestamp,
                    pose_wc=entry.pose_wc,
                    is_semantic=True,
                )
                new_keyframes.append(entry.frame_id)
            else:
                map_state.keyframes[entry.frame_id].is_semantic = True
    _sync_anchor_measurements(map_state)

    s_ok = estimate_instance_scale(instance, map_state.anchors)
    if s_ok <= 0:
        # geometry voted for a non-physical scale; keep anchors but defer the
        # pose prior to the global scale when one exists
        s_ok = map_state.scale if map_state.scale else abs(s_ok) or 1.0
    first = not instance.is_triangulated
    if first:
        instance.scale_estimate = s_ok
        s_hat = map_state.scale if map_state.scale is not None else s_ok
        last = instance.last_observation
        instance.pose_wo = object_pose_prior(last.pose_wc, last.pose_co, s_hat)
        if map_state.scale is None:
            map_state.scale = s_ok
    return TriangulationResult(
        instance_id=instance.instance_id,
        anchor_ids=anchor_ids,
        keyframe_ids=new_keyframes,
        scale_estimate=instance.scale_estimate if first else (instance.scale_estimate or s_ok),
    )


# ---------------------------------------------------------------------------
# Bundle adjustment
# ---------------------------------------------------------------------------


@dataclass
class BAConfig:
    max_iterations: int = 100
    local_max_iterations: int = 20
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e10
    relative_tol: float = 1e-9
    absolute_tol: float = 1e-18  # cost this small counts as converged


# an edge whose landmark falls behind its camera contributes a flat penalty
# and zero derivative, so such configurations are abandoned, not crashed on
_BEHIND_CAMERA_PENALTY = 1e9


@dataclass
class BASummary:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    accepted_costs: list


class _Problem:
    """Flattened view of the optimizable map used by one BA run."""

    def __init__(self, map_state: MapState, k, free_kfs, free_lms, free_objs,
                 with_scale, with_alignment):
        self.map = map_state
        self.k = k
        self.kf_ids = sorted(map_state.keyframes)
        self.lm_ids = sorted(set(map_state.points) | set(map_state.anchors))
        self.obj_ids = sorted(
            i for i, inst in map_state.instances.items() if inst.pose_wo is not None
        )
        self.kf_slot = {i: n for n, i in enumerate(self.kf_ids)}
        self.lm_slot = {i: n for n, i in enumerate(self.lm_ids)}
        self.obj_slot = {i: n for n, i in enumerate(self.obj_ids)}

        self.kf_poses = [map_state.keyframes[i].pose_wc for i in self.kf_ids]
        self.lm_pos = np.array(
            [map_state.landmark_position(i) for i in self.lm_ids]
        ).reshape(-1, 3)
        self.obj_poses = [map_state.instances[i].pose_wo for i in self.obj_ids]
        if with_alignment and map_state.scale is None:
            raise ValueError("alignment residuals need a map scale")
        self.with_scale = with_scale
        self.log_s = (
            math.log(map_state.scale) if (with_scale or with_alignment) else None
        )

        self.kf_free = np.array([i in free_kfs for i in self.kf_ids], dtype=bool)
        self.lm_free = np.array([i in free_lms for i in self.lm_ids], dtype=bool)
        self.obj_free = np.array([i in free_objs for i in self.obj_ids], dtype=bool)

        # reprojection edges over keyframe measurements
        re_kf, re_lm, re_uv, re_lvl = [], [], [], []
        for kf_id in self.kf_ids:
            kf = map_state.keyframes[kf_id]
            for lm_id in sorted(kf.measurements):
                uv, level = kf.measurements[lm_id]
                re_kf.append(self.kf_slot[kf_id])
                re_lm.append(self.lm_slot[lm_id])
                re_uv.append(uv)
                re_lvl.append(level)
        self.re_kf = np.array(re_kf, dtype=np.int64)
        self.re_lm = np.array(re_lm, dtype=np.int64)
        self.re_uv = np.array(re_uv, dtype=np.float64).reshape(-1, 2)
        self.re_inv_sigma = 0.5 ** np.array(re_lvl, dtype=np.float64)

        # alignment edges over anchors of triangulated instances
        al_obj, al_lm, al_xo = [], [], []
        if with_alignment:
            for aid in sorted(map_state.anchors):
                anchor = map_state.anchors[aid]
                if anchor.instance_id in self.obj_slot:
                    al_obj.append(self.obj_slot[anchor.instance_id])
                    al_lm.append(self.lm_slot[aid])
                    al_xo.append(anchor.x_object)
        self.al_obj = np.array(al_obj, dtype=np.int64)
        self.al_lm = np.array(al_lm, dtype=np.int64)
        self.al_xo = np.array(al_xo, dtype=np.float64).reshape(-1, 3)

        # parameter layout: [free kfs x6][free objs x6][free lms x3][log s]
        self.cam_col = {}
        col = 0
        for n, kf_id in enumerate(self.kf_ids):
            if self.kf_free[n]:
                self.cam_col[n] = col
                col += 6
        self.obj_col = {}
        for n in range(len(self.obj_ids)):
            if self.obj_free[n]:
                self.obj_col[n] = col
                col += 6
        self.lm_col = {}
        for n in range(len(self.lm_ids)):
            if self.lm_free[n]:
                self.lm_col[n] = col
                col += 3
        self.s_col = None
        if self.with_scale and self.log_s is not None:
            self.s_col = col
            col += 1
        self.n_params = col

    # -- state handling -----------------------------------------------------

    def state(self):
        return (list(self.kf_poses), list(self.obj_poses), self.lm_pos.copy(), self.log_s)

    def apply_delta(self, state, delta):
        kf_poses, obj_poses, lm_pos, log_s = state
        kf_poses = list(kf_poses)
        obj_poses = list(obj_poses)
        lm_pos = lm_pos.copy()
        for n, c in self.cam_col.items():
            kf_poses[n] = kf_poses[n].perturbed(delta[c:c + 6])
        for n, c in self.obj_col.items():
            obj_poses[n] = obj_poses[n].perturbed(delta[c:c + 6])
        for n, c in self.lm_col.items():
            lm_pos[n] = lm_pos[n] + delta[c:c + 3]
        if self.s_col is not None:
            log_s = log_s + delta[self.s_col]
        return (kf_poses, obj_poses, lm_pos, log_s)

    def _repro_terms(self, state):
        kf_poses, _, lm_pos, _ = state
        if len(self.re_kf) == 0:
            z = np.zeros((0,))
            return np.zeros((0, 3)), np.zeros((0, 2)), z, np.zeros(0, dtype=bool)
        rot = np.array([kf_poses[n].rotation for n in self.re_kf])
        trn = np.array([kf_poses[n].translation for n in self.re_kf])
        p = np.einsum("eji,ej->ei", rot, lm_pos[self.re_lm] - trn)
        valid = p[:, 2] > 1e-9
        p_safe = np.where(valid[:, None], p, np.array([0.0, 0.0, 1.0]))
        uv, _ = project_points(self.k, p_safe)
        err = self.re_uv - uv
        chi = (err * err).sum(axis=1) * self.re_inv_sigma**2
        return p_safe, err, chi, valid

    def _align_terms(self, state):
        _, obj_poses, lm_pos, log_s = state
        if len(self.al_obj) == 0:
            z = np.zeros((0,))
            return np.zeros((0, 3)), np.zeros((0, 3)), z
        s = math.exp(log_s)
        rot = np.array([obj_poses[n].rotation for n in self.al_obj])
        trn = np.array([obj_poses[n].translation for n in self.al_obj])
        q = np.einsum("eji,ej->ei", rot, s * lm_pos[self.al_lm] - trn)
        a = self.al_xo - q
        chi = (a * a).sum(axis=1) / SIGMA_ALIGNMENT**2
        return q, a, chi

    def cost(self, state):
        _, _, chi_r, valid = self._repro_terms(state)
        total = sum(huber(c, HUBER_REPROJECTION) for c in chi_r[valid])
        total += _BEHIND_CAMERA_PENALTY * float((~valid).sum())
        _, _, chi_a = self._align_terms(state)
        total += sum(huber(c, HUBER_ALIGNMENT) for c in chi_a)
        return float(total)

    def normal_equations(self, state):
        """Robust-weighted sparse J and residual vector r."""
        kf_poses, obj_poses, lm_pos, log_s = state
        rows, cols, data = [], [], []
        res = []
        row0 = 0

        p, err, chi, valid = self._repro_terms(state)
        if len(p):
            w = huber_weight(chi, HUBER_REPROJECTION) * valid
            scale = self.re_inv_sigma * np.sqrt(w)
            _, jp = project_jacobian(self.k, p)
            rot = np.array([kf_poses[n].rotation for n in self.re_kf])
            j_cam = np.concatenate(
                [jp, -np.einsum("eij,ejk->eik", jp, skew(p))], axis=2
            )  # (E,2,6)
            j_lm = -np.einsum("eij,ekj->eik", jp, rot)  # (E,2,3): -J R^T
            sc = scale[:, None, None]
            j_cam = j_cam * sc
            j_lm = j_lm * sc
            res.append((err * scale[:, None]).reshape(-1))
            erange = np.arange(len(p))
            r_idx = (row0 + 2 * erange)[:, None, None] + np.array([0, 1])[None, :, None]
            for block, width, colmap, slots in (
                (j_cam, 6, self.cam_col, self.re_kf),
                (j_lm, 3, self.lm_col, self.re_lm),
            ):
                free = np.array([s_ in colmap for s_ in slots])
                if not free.any():
                    continue
                idx = np.nonzero(free)[0]
                c0 = np.array([colmap[s_] for s_ in slots[idx]])
                cc = c0[:, None, None] + np.arange(width)[None, None, :]
                rr = np.broadcast_to(r_idx[idx], (len(idx), 2, width))
                rows.append(rr.reshape(-1))
                cols.append(np.broadcast_to(cc, (len(idx), 2, width)).reshape(-1))
                data.append(block[idx].reshape(-1))
            row0 += 2 * len(p)

        q, a, chi_a = self._align_terms(state)
        if len(q):
            s = math.exp(log_s)
            w = huber_weight(chi_a, HUBER_ALIGNMENT)
            scale = np.sqrt(w) / SIGMA_ALIGNMENT
            rot = np.array([obj_poses[n].rotation for n in self.al_obj])
            eye = np.broadcast_to(np.eye(3), (len(q), 3, 3))
            j_obj = np.concatenate([eye, -skew(q)], axis=2)  # (A,3,6)
            j_lm = -s * np.swapaxes(rot, 1, 2)  # -s R^T
            j_s = -s * np.einsum("eji,ej->ei", rot, lm_pos[self.al_lm])  # (A,3)
            sc = scale[:, None, None]
            j_obj = j_obj * sc
            j_lm = j_lm * sc
            j_s = j_s * scale[:, None]
            res.append((a * scale[:, None]).reshape(-1))
            arange = np.arange(len(q))
            r_idx = (row0 + 3 * arange)[:, None, None] + np.arange(3)[None, :, None]
            for block, width, colmap, slots in (
                (j_obj, 6, self.obj_col, self.al_obj),
                (j_lm, 3, self.lm_col, self.al_lm),
            ):
                free = np.array([s_ in colmap for s_ in slots])
                if not free.any():
                    continue
                idx = np.nonzero(free)[0]
                c0 = np.array([colmap[s_] for s_ in slots[idx]])
                cc = c0[:, None, None] + np.arange(width)[None, None, :]
                rr = np.broadcast_to(r_idx[idx], (len(idx), 3, width))
                rows.append(rr.reshape(-1))
                cols.append(np.broadcast_to(cc, (len(idx), 3, width)).reshape(-1))
                data.append(block[idx].reshape(-1))
            if self.s_col is not None:
                rr = r_idx.reshape(-1)
                rows.append(rr)
                cols.append(np.full(len(rr), self.s_col))
                data.append(j_s.reshape(-1))
            row0 += 3 * len(q)

        if not rows:
            return None, None
        jmat = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row0, self.n_params),
        ).tocsr()
        return jmat, np.concatenate(res)

    def write_back(self, state):
        kf_poses, obj_poses, lm_pos, log_s = state
        for n, kf_id in enumerate(self.kf_ids):
            if self.kf_free[n]:
                self.map.keyframes[kf_id].pose_wc = kf_poses[n]
        for n, obj_id in enumerate(self.obj_ids):
            if self.obj_free[n]:
                self.map.instances[obj_id].pose_wo = obj_poses[n]
        for n, lm_id in enumerate(self.lm_ids):
            if not self.lm_free[n]:
                continue
            if lm_id in self.map.points:
                self.map.points[lm_id].position = lm_pos[n].copy()
            else:
                self.map.anchors[lm_id].x_world = lm_pos[n].copy()
        if self.s_col is not None and log_s is not None:
            self.map.scale = math.exp(log_s)


def _levenberg_marquardt(problem: _Problem, cfg: BAConfig, max_iters) -> BASummary:
    state = problem.state()
    cost = problem.cost(state)
    accepted = [cost]
    lam = cfg.lambda_init
    converged = cost <= cfg.absolute_tol
    iters = 0
    while not converged and iters < max_iters and problem.n_params > 0:
        iters += 1
        jmat, r = problem.normal_equations(state)
        if jmat is None:
            converged = True
            break
        h = (jmat.T @ jmat).tocsc()
        g = jmat.T @ r
        diag = h.diagonal()
        step_ok = False
        while lam <= cfg.lambda_max:
            damped = h + sp.diags(lam * np.maximum(diag, 1e-12))
            try:
                delta = spla.spsolve(damped, -g)
            except RuntimeError:
                lam *= cfg.lambda_factor
                continue
            if not np.all(np.isfinite(delta)):
                lam *= cfg.lambda_factor
                continue
            candidate = problem.apply_delta(state, delta)
            new_cost = problem.cost(candidate)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                state = candidate
                cost = new_cost
                accepted.append(cost)
                lam = max(lam / cfg.lambda_factor, 1e-12)
                step_ok = True
                if rel < cfg.relative_tol or cost <= cfg.absolute_tol:
                    converged = True
                break
            lam *= cfg.lambda_factor
        if not step_ok:
            # no descent direction within the damping range: numerically
            # stationary, which counts as converged
            converged = True
            break
    problem.write_back(state)
    return BASummary(
        converged=converged,
        iterations=iters,
        initial_cost=accepted[0],
        final_cost=cost,
        accepted_costs=accepted,
    )


def joint_bundle_adjust(map_state: MapState, k, cfg: BAConfig | None = None) -> BASummary:
    """Global BA over keyframes, triangulated objects, landmarks and the map
    scale. The robust objective never increases across accepted steps; on
    non-convergence the last accepted state is kept.

    Gauge: the first two keyframes are held fixed. One fixed pose removes the
    rigid freedom but a monocular map can still scale about that camera's
    center (objects and the scale variable compensate exactly), so the second
    fixed keyframe is what pins the reported scale to the front end's map
    units.
    """
    cfg = cfg or BAConfig()
    kf_ids = sorted(map_state.keyframes)
    if not kf_ids:
        return BASummary(True, 0, 0.0, 0.0, [0.0])
    free_kfs = set(kf_ids[2:])
    free_lms = set(map_state.points) | set(map_state.anchors)
    free_objs = {i for i, inst in map_state.instances.items() if inst.pose_wo is not None}
    with_scale = map_state.scale is not None and bool(free_objs)
    problem = _Problem(
        map_state, k, free_kfs, free_lms, free_objs,
        with_scale=with_scale, with_alignment=with_scale,
    )
    return _levenberg_marquardt(problem, cfg, cfg.max_iterations)


def covisibility_neighbors(map_state: MapState, kf_id, count=4):
    """Keyframes sharing the most landmarks with ``kf_id``; ties prefer the
    more recent (higher id)."""
    base = set(map_state.keyframes[kf_id].measurements)
    scored = []
    for other_id, other in map_state.keyframes.items():
        if other_id == kf_id:
            continue
        shared = len(base & set(other.measurements))
        scored.append((-shared, -other_id, other_id))
    scored.sort()
    return [oid for _, _, oid in scored[:count]]


def local_bundle_adjust(map_state: MapState, new_kf_id, k, cfg: BAConfig | None = None) -> BASummary:
    """Sliding-window BA: the new keyframe, its four covisibility neighbors
    and their landmarks, over reprojection residuals only. Measurements from
    keyframes outside the window constrain the landmarks with fixed poses."""
    cfg = cfg or BAConfig()
    window = {new_kf_id} | set(covisibility_neighbors(map_state, new_kf_id, 4))
    first_kf = min(map_state.keyframes)
    free_kfs = window - {first_kf}
    free_lms = set()
    for kf_id in window:
        free_lms |= set(map_state.keyframes[kf_id].measurements)
    problem = _Problem(
        map_state, k, free_kfs, free_lms, set(),
        with_scale=False, with_alignment=False,
    )
    return _levenberg_marquardt(problem, cfg, cfg.local_max_iterations)


# ---------------------------------------------------------------------------
# Map dump
# ---------------------------------------------------------------------------


def write_map_dump(map_state: MapState, path):
    """Deterministic text dump: [keyframes], [points], [anchors], [objects],
    [scale] sections ordered by id."""
    lines = ["[keyframes]", "# id timestamp tx ty tz qx qy qz qw semantic"]
    for kf_id in sorted(map_state.keyframes):
        kf = map_state.keyframes[kf_id]
        q = quaternion_from_rotation(kf.pose_wc.rotation)
        vals = [kf.timestamp, *kf.pose_wc.translation, *q]
        lines.append(
            f"{kf_id} " + " ".join(format_float(v) for v in vals)
            + f" {int(kf.is_semantic)}"
        )
    lines.append("[points]")
    lines.append("# id x y z")
    for pid in sorted(map_state.points):
        p = map_state.points[pid]
        lines.append(f"{pid} " + " ".join(format_float(v) for v in p.position))
    lines.append("[anchors]")
    lines.append("# id instance_id xo_x xo_y xo_z xw_x xw_y xw_z")
    for aid in sorted(map_state.anchors):
        a = map_state.anchors[aid]
        lines.append(
            f"{aid} {a.instance_id} "
            + " ".join(format_float(v) for v in a.x_object)
            + " "
            + " ".join(format_float(v) for v in a.x_world)
        )
    lines.append("[objects]")
    lines.append("# instance_id model_id tx ty tz qx qy qz qw s_ok n_anchors")
    for iid in sorted(map_state.instances):
        inst = map_state.instances[iid]
        if inst.pose_wo is not None:
            q = quaternion_from_rotation(inst.pose_wo.rotation)
            pose_vals = " ".join(format_float(v) for v in (*inst.pose_wo.translation, *q))
        else:
            pose_vals = " ".join(["nan"] * 7)
        s_ok = format_float(inst.scale_estimate) if inst.scale_estimate else "nan"
        lines.append(f"{iid} {inst.model_id} {pose_vals} {s_ok} {len(inst.anchored)}")
    lines.append("[scale]")
    lines.append(format_float(map_state.scale) if map_state.scale is not None else "unset")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_map_dump(path):
    """Parse a map dump into plain records (enough for evaluation)."""
    from types import SimpleNamespace

    section = None
    keyframes, points, anchors, objects = [], [], [], []
    scale = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                section = line.strip("[]")
                continue
            toks = line.split()
            if section == "keyframes":
                pose = Pose(
                    rotation_from_quaternion([float(v) for v in toks[5:9]]),
                    [float(v) for v in toks[2:5]],
                )
                keyframes.append(
                    SimpleNamespace(
                        keyframe_id=int(toks[0]), timestamp=float(toks[1]),
                        pose_wc=pose, is_semantic=bool(int(toks[9])),
                    )
                )
            elif section == "points":
                points.append((int(toks[0]), np.array([float(v) for v in toks[1:4]])))
            elif section == "anchors":
                anchors.append(
                    SimpleNamespace(
                        anchor_id=int(toks[0]), instance_id=int(toks[1]),
                        x_object=np.array([float(v) for v in toks[2:5]]),
                        x_world=np.array([float(v) for v in toks[5:8]]),
                    )
                )
            elif section == "objects":
                pose = None
                if toks[2] != "nan":
                    pose = Pose(
                        rotation_from_quaternion([float(v) for v in toks[5:9]]),
                        [float(v) for v in toks[2:5]],
                    )
                objects.append(
                    SimpleNamespace(
                        instance_id=int(toks[0]), model_id=int(toks[1]), pose_wo=pose,
                        scale_estimate=None if toks[9] == "nan" else float(toks[9]),
                        n_anchors=int(toks[10]),
                    )
                )
            elif section == "scale":
                scale = None if toks[0] == "unset" else float(toks[0])
    return SimpleNamespace(
        keyframes=keyframes, points=points, anchors=anchors, objects=objects, scale=scale
    )
