"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured quantities. Tolerances are fixed here, not
calibrated at runtime."""

import itertools
import math
import sys
import time
import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import BOUNDS, K, arc_cameras, make_ba_scene
from objslam.backend import (
    MapState,
    accumulate,
    associate_observation,
    joint_bundle_adjust,
    try_triangulate,
    write_map_dump,
)
from objslam.cli import main as cli_main
from objslam.config import Config, write_config
from objslam.database import ObjectDatabase, alt_score, build_object_model, full_kl, kl_score
from objslam.errors import DegenerateGeometry, NonConvergence
from objslam.geometry import Pose, project_points, so3_exp, solve_pnp
from objslam.pipeline import StageTimer, process_frame, run_pipeline
from objslam.recognition import disac_sample, reprojection_inliers
from objslam.scene import generate_scene
from objslam.vocab import build_vocabulary, flip_bits, random_descriptors, to_bow

from test_backend import _accumulated_instance, _ModelStub, _obs_from_camera, jacobian_check_states
from test_harness import build_engine, detections_of, map_dump_of, small_config


def _announce(line):
    # bypass pytest capture so every criterion prints its verdict
    print(line, file=sys.__stdout__, flush=True)


def _verdict(num, name, ok, detail):
    _announce(f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. Efficient-KL identity
# ---------------------------------------------------------------------------


def test_criterion_1_efficient_kl_identity():
    rng = np.random.default_rng(9001)
    eps = 1e-6

    def sparse(n, vocab=4000):
        words = rng.choice(vocab, size=n, replace=False)
        weights = rng.uniform(0.02, 1.0, size=n)
        weights /= weights.sum()
        return {int(w): float(x) for w, x in zip(words, weights)}

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        v = sparse(int(rng.integers(3, 30)))
        w = sparse(int(rng.integers(10, 120)))
        v_only = sum(vi * math.log(vi / eps) for vi in v.values())
        worst = max(worst, abs(kl_score(v, w, eps) + v_only - full_kl(v, w, eps)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 1.0
    _verdict(1, "efficient-KL identity", ok,
             f"max |identity gap| = {worst:.3e} over 1000 pairs in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. Retrieval recall, KL vs L1
# ---------------------------------------------------------------------------


def test_criterion_2_retrieval_recall():
    rng = np.random.default_rng(9002)
    t0 = time.perf_counter()
    images = [random_descriptors(rng, 200) for _ in range(12)]
    tree = build_vocabulary(images, k=8, depth=3, seed=42)
    db = ObjectDatabase(tree)
    models = []
    for mid in range(100):
        pts = rng.uniform(-0.15, 0.15, size=(60, 3))
        per_point = [[d] for d in random_descriptors(rng, 60)]
        model = build_object_model(mid, pts, per_point, tree)
        models.append(model)
        db.add_model(model)

    kl_hits = 0
    l1_hits = 0
    n_queries = 300
    for q in range(n_queries):
        target = models[q % 100]
        rows = rng.choice(len(target.descriptors), size=15, replace=False)
        descs = np.array([flip_bits(target.descriptors[r], 4, rng) for r in rows])
        bow = to_bow(tree, descs)
        top_kl = [c.model_id for c in db.query(bow, top_n=10)]
        kl_hits += target.model_id in top_kl
        l1_rank = sorted(
            ((alt_score(bow, m.bow, "l1"), m.model_id) for m in models),
        )[:10]
        l1_hits += target.model_id in {mid for _, mid in l1_rank}
    elapsed = time.perf_counter() - t0
    kl_recall = kl_hits / n_queries
    l1_recall = l1_hits / n_queries
    ok = kl_recall >= 0.95 and kl_recall >= l1_recall and elapsed < 30.0
    _verdict(2, "top-10 retrieval recall", ok,
             f"KL recall = {kl_recall:.3f}, L1 recall = {l1_recall:.3f}, "
             f"100 models, 300 queries in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. DISAC beats a fixed PROSAC-order baseline
# ---------------------------------------------------------------------------


def _verification_trial(rng):
    """8 true inliers + 8 low-distance outliers; returns (points, pixels,
    distances) with outliers occupying the lowest descriptor distances."""
    points = rng.uniform(-0.25, 0.25, size=(16, 3))
    pose = Pose(so3_exp(rng.normal(size=3) * 0.3), [0.03, -0.02, 1.4])
    uv, _ = project_points(K, pose.transform(points))
    uv[8:] = rng.uniform([0, 0], [639, 479], size=(8, 2))
    dists = np.concatenate([
        rng.integers(8, 15, size=8),  # inliers: moderate distances
        rng.integers(3, 8, size=8),  # outliers: temptingly low distances
    ])
    return points, uv, dists


def _subset_succeeds(points, uv, subset, min_inliers=6):
    try:
        # same fast minimal solver the production DISAC loop uses
        pose = solve_pnp(uv[subset], points[subset], K, refine_iters=6,
                         allow_p3p=False, skip_refine_above_px=20.0)
    except (DegenerateGeometry, NonConvergence, ValueError):
        return False
    return len(reprojection_inliers(pose, points, uv, K, 3.0)) >= min_inliers


def _disac_trial(points, uv, dists, rng, budget=50):
    for _ in range(budget):
        subset = disac_sample(dists, rng, 4)
        if _subset_succeeds(points, uv, subset):
            return True
    return False


def _prosac_trial(points, uv, dists, budget=50):
    order = np.lexsort((np.arange(len(dists)), dists))  # ascending distance
    used = 0
    top = order[:4]
    if _subset_succeeds(points, uv, top):
        return True
    used += 1
    for m in range(5, len(order) + 1):
        for combo in itertools.combinations(range(m - 1), 3):
            if used >= budget:
                return False
            subset = np.array([order[c] for c in combo] + [order[m - 1]])
            if _subset_succeeds(points, uv, subset):
                return True
            used += 1
    return False


def test_criterion_3_disac_vs_prosac():
    t0 = time.perf_counter()
    n_trials = 1000
    disac_wins = 0
    prosac_wins = 0
    for trial in range(n_trials):
        scene_rng = np.random.default_rng(20_000 + trial)
        points, uv, dists = _verification_trial(scene_rng)
        disac_wins += _disac_trial(points, uv, dists, np.random.default_rng(30_000 + trial))
        prosac_wins += _prosac_trial(points, uv, dists)
    p1 = disac_wins / n_trials
    p2 = prosac_wins / n_trials
    pooled = (disac_wins + prosac_wins) / (2 * n_trials)
    se = math.sqrt(max(pooled * (1 - pooled) * (2 / n_trials), 1e-12))
    z = (p1 - p2) / se
    elapsed = time.perf_counter() - t0
    ok = z > 3.0 and elapsed < 60.0
    _verdict(3, "DISAC vs PROSAC-order", ok,
             f"success {p1:.3f} vs {p2:.3f} over {n_trials} trials, z = {z:.1f}, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. BA correctness: Jacobians and robust descent
# ---------------------------------------------------------------------------


def test_criterion_4_ba_correctness():
    worst = jacobian_check_states(np.random.default_rng(9004), n_states=100)
    monotone = True
    for seed in range(20):
        rng = np.random.default_rng(40_000 + seed)
        m, _ = make_ba_scene(rng, n_kfs=5, n_points=20, n_instances=2,
                             points_per_instance=6,
                             s_star=float(rng.uniform(0.6, 2.4)), noise_px=0.5)
        for i in sorted(m.keyframes)[2:]:
            m.keyframes[i].pose_wc = m.keyframes[i].pose_wc.perturbed(
                rng.normal(size=6) * 0.01
            )
        costs = joint_bundle_adjust(m, K).accepted_costs
        monotone &= all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    ok = worst < 1e-4 and monotone
    _verdict(4, "BA Jacobians and robust descent", ok,
             f"max Jacobian rel. err = {worst:.2e} over 100 states; "
             f"objective monotone on 20 seeded problems: {monotone}")


# ---------------------------------------------------------------------------
# 5. Scale recovery end to end
# ---------------------------------------------------------------------------


def _scale_recovery_run(noise_px, flips, seed=5):
    cfg = small_config(
        seed=seed, n_models=10, points_per_model=80, n_instances=3, n_frames=30,
        clutter_per_frame=15, true_scale=2.0, feature_dropout=0.45,
        pixel_noise_px=noise_px, descriptor_noise_bits=flips,
        vocab_images=30, vocab_descriptors_per_image=200,
        vocab_branching=8, vocab_depth=3,
    )
    scene = generate_scene(cfg)
    tree, db = build_engine(scene)
    result = run_pipeline(tree, db, scene.frames, cfg)
    m = result.map_state
    scale_err = abs(m.scale * cfg.true_scale - 1.0) if m.scale else math.inf
    kf_ids = sorted(m.keyframes)
    est = np.array([m.keyframes[i].pose_wc.translation for i in kf_ids])
    gt_by_ts = {round(ts, 9): p for ts, p in scene.gt.trajectory_metric}
    gt = np.array([
        cfg.true_scale * gt_by_ts[round(m.keyframes[i].timestamp, 9)].translation
        for i in kf_ids
    ])
    ate = float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))
    extent = float(
        np.linalg.norm(gt[:, None, :] - gt[None, :, :], axis=-1).max()
    )
    return scale_err, ate, extent, len(kf_ids)


def test_criterion_5_scale_recovery():
    t0 = time.perf_counter()
    err0, ate0, extent0, nkf0 = _scale_recovery_run(0.0, 0)
    err1, ate1, extent1, nkf1 = _scale_recovery_run(1.0, 5)
    elapsed = time.perf_counter() - t0
    ok = (
        err0 <= 1e-3 and err1 <= 5e-2
        and ate0 < 1e-3 and ate1 < 0.01 * extent1
        and nkf0 >= 3 and nkf1 >= 3
        and elapsed < 120.0
    )
    _verdict(5, "scale recovery (s* = 2.0)", ok,
             f"clean: scale err {err0:.2e}, ATE {ate0:.2e}; "
             f"noisy: scale err {err1:.2e}, ATE {ate1:.2e} "
             f"(1% extent = {0.01 * extent1:.2e}); {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. Gatekeeping: spurious detections never triangulate
# ---------------------------------------------------------------------------


def _spurious_observation(rng, model, frame_id, ts):
    """A self-consistent but geometrically bogus detection of ``model``."""
    cam = Pose(so3_exp(rng.normal(size=3) * 0.5), rng.normal(size=3) * 2.0)
    pose_co = Pose(so3_exp(rng.normal(size=3)), [0.1, -0.05, 1.0 + rng.random()])
    subset = rng.choice(model.points.shape[0], size=6, replace=False)
    uv, _ = project_points(K, pose_co.transform(model.points[subset]))
    from objslam.recognition import Observation

    return Observation(
        frame_id=frame_id, timestamp=ts, pose_wc=cam, model_id=model.model_id,
        pose_co=pose_co, point_indices=subset, pixels=uv,
        levels=np.zeros(6, dtype=np.int64), feature_indices=np.arange(6),
        score=8.0,
    )


def test_criterion_6_gatekeeping():
    t0 = time.perf_counter()
    false_instances = 0
    real_triangulations = 0
    for seed in range(50):
        rng = np.random.default_rng(60_000 + seed)
        real_model = _ModelStub(0, rng)
        fake_models = [_ModelStub(1, rng), _ModelStub(2, rng)]
        m = MapState()
        cams = arc_cameras(4, radius=1.6, span_deg=18.0,
                           start_deg=float(rng.uniform(0, 180)))
        spurious_ids = set()
        for i, cam in enumerate(cams):
            obs = _obs_from_camera(real_model, cam, i, 0.4 * i, subset=np.arange(8))
            iid = associate_observation(m, obs, real_model)
            if accumulate(m, m.instances[iid], obs, K):
                if try_triangulate(m, m.instances[iid], K) is not None:
                    joint_bundle_adjust(m, K)
            # inject spurious detections: one-off misfires of absent models,
            # plus an exact repeat from the same pose (zero parallax)
            fake = fake_models[i % 2]
            sp = _spurious_observation(rng, fake, 100 + i, 0.4 * i + 0.05)
            for injected in (sp, sp):
                iid = associate_observation(m, injected, fake)
                spurious_ids.add(iid)
                if accumulate(m, m.instances[iid], injected, K):
                    try_triangulate(m, m.instances[iid], K)
        real_triangulations += any(
            inst.is_triangulated and inst.model_id == 0
            for inst in m.instances.values()
        )
        false_instances += sum(
            1 for iid in spurious_ids if m.instances[iid].is_triangulated
        )
    elapsed = time.perf_counter() - t0
    ok = false_instances == 0 and real_triangulations == 50
    _verdict(6, "spurious detections never triangulate", ok,
             f"{false_instances} false instances, {real_triangulations}/50 runs "
             f"triangulated the real object; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. Triangulation gates
# ---------------------------------------------------------------------------


def test_criterion_7_triangulation_gates():
    four_point_blocked = 0
    low_parallax_blocked = 0
    clean_triangulated = 0
    n = 20
    for seed in range(n):
        rng = np.random.default_rng(70_000 + seed)
        m, inst, _ = _accumulated_instance(rng, 2, 20.0, n_points=4)
        four_point_blocked += try_triangulate(m, inst, K) is None
        rng = np.random.default_rng(71_000 + seed)
        m, inst, _ = _accumulated_instance(rng, 2, 2.0, n_points=8)
        low_parallax_blocked += try_triangulate(m, inst, K) is None
        rng = np.random.default_rng(72_000 + seed)
        m, inst, _ = _accumulated_instance(rng, 2, float(rng.uniform(4.0, 25.0)),
                                           n_points=5)
        result = try_triangulate(m, inst, K)
        clean_triangulated += result is not None and len(result.anchor_ids) == 5
    ok = four_point_blocked == n and low_parallax_blocked == n and clean_triangulated == n
    _verdict(7, "triangulation gates", ok,
             f"4-point blocked {four_point_blocked}/{n}, 2-degree blocked "
             f"{low_parallax_blocked}/{n}, clean 5-point at >=3 deg triangulated "
             f"{clean_triangulated}/{n}")


# ---------------------------------------------------------------------------
# 8. Throughput against 500 models (soft 300 ms gate)
# ---------------------------------------------------------------------------


def test_criterion_8_throughput_500_models():
    t0 = time.perf_counter()
    cfg = Config(
        seed=11, n_models=500, points_per_model=200, descriptors_per_point=2,
        n_instances=4, n_frames=5, clutter_per_frame=30,
        vocab_branching=32, vocab_depth=3,
        vocab_images=120, vocab_descriptors_per_image=300,
    ).validate()
    scene = generate_scene(cfg)
    tree = build_vocabulary(scene.vocab_images, 32, 3, cfg.vocab_seed)
    assert 0 < tree.n_words <= 32**3  # structural bound of the word tree
    db = ObjectDatabase(tree)
    for mid, pts, descs in scene.models:
        db.add_model(build_object_model(mid, pts, descs, tree))
    db.audit()
    build_time = time.perf_counter() - t0

    rng = np.random.default_rng(0)
    latencies = []
    for frame in scene.frames:
        t1 = time.perf_counter()
        process_frame(frame, tree, db, MapState(), cfg, rng, StageTimer())
        latencies.append((time.perf_counter() - t1) * 1000.0)
    median = float(np.median(latencies))
    detail = (
        f"median {median:.0f} ms/frame over {len(latencies)} frames "
        f"({len(db)} models, {tree.n_words} words; build {build_time:.0f}s)"
    )
    if median > 300.0:
        warnings.warn(
            f"query+verification median {median:.0f} ms exceeds the 300 ms "
            "target on this hardware (soft gate)"
        )
    _verdict(8, "500-model throughput report", True, detail)


# ---------------------------------------------------------------------------
# 9. Determinism: byte-identical dumps and reports
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    cfg = small_config(n_frames=12)
    cfg_path = tmp_path / "config.txt"
    write_config(cfg, cfg_path)

    def one_run(tag):
        scene_dir = tmp_path / f"scene_{tag}"
        out_dir = tmp_path / f"out_{tag}"
        vocab = tmp_path / f"vocab_{tag}.bin"
        db = tmp_path / f"db_{tag}.bin"
        report = tmp_path / f"report_{tag}.txt"
        assert cli_main(["gen-scene", str(cfg_path), "-o", str(scene_dir)]) == 0
        assert cli_main([
            "build-vocab", str(scene_dir / "vocab_corpus.txt"),
            "-k", str(cfg.vocab_branching), "-L", str(cfg.vocab_depth),
            "--seed", str(cfg.vocab_seed), "-o", str(vocab),
        ]) == 0
        models = sorted(str(p) for p in (scene_dir / "models").iterdir())
        assert cli_main(["build-db", str(vocab), *models, "-o", str(db)]) == 0
        assert cli_main(["run", str(vocab), str(db), str(scene_dir), "-o", str(out_dir)]) == 0
        assert cli_main(["eval", str(out_dir), str(scene_dir), "--report", str(report)]) == 0
        return (
            (out_dir / "map.txt").read_bytes(),
            (out_dir / "detections.txt").read_bytes(),
            report.read_bytes(),
            vocab.read_bytes(),
            db.read_bytes(),
        )

    a = one_run("a")
    b = one_run("b")
    names = ("map dump", "detections", "eval report", "vocabulary", "database")
    mismatches = [n for n, x, y in zip(names, a, b) if x != y]
    ok = not mismatches
    _verdict(9, "seeded determinism", ok,
             "all artifacts byte-identical across two runs" if ok
             else f"mismatch in: {', '.join(mismatches)}")
