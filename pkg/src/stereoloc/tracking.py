"""Per-frame camera pose estimation.

The tracker estimates a world-to-camera pose for every frame by matching
frame features to map points and minimizing robust reprojection error:
motion-model tracking against the previous frame's points, bag-of-words
guided matching against a reference keyframe as fallback, local-map
refinement on every success, and place-recognition relocalization when
lost. Pose-only optimization is Levenberg-Marquardt with a Huber kernel
and per-octave measurement scales.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import features as ft
from . import vocabulary as vb
from .geometry import (
    CameraIntrinsics,
    Pose,
    StereoRig,
    compose,
    inverse,
    rotvec_to_matrix,
    skew,
)
from .worldmap import WorldMap


class TooFewCorrespondences(ValueError):
    pass


class DivergedOptimization(RuntimeError):
    pass


class InsufficientStereoPoints(ValueError):
    pass


@dataclass
class TrackerSettings:
    n_features: int = 400
    levels: int = 4
    scale_factor: float = 1.2
    fast_threshold: int = 20
    fast_fallback: int = 7
    chi2: float = 5.991
    min_inliers_track: int = 10
    min_inliers_local: int = 30
    min_inliers_reloc: int = 50
    min_init_stereo: int = 100
    search_radius: float = 15.0
    max_hamming: int = 50
    reloc_min_matches: int = 15
    reloc_candidates: int = 5
    ransac_iters: int = 300
    ransac_seed: int = 7
    reloc_strict_window: float = 1.0  # seconds of stricter local-map gate
    depth_factor: float = 40.0  # close-point threshold = depth_factor * baseline
    min_common_words: float = 0.8
    update_stats: bool = True  # maintain per-point visibility counters (SLAM)


@dataclass
class Frame:
    """One stereo frame after feature extraction and stereo matching."""

    timestamp: float
    keypoints: list[ft.Keypoint]
    descriptors: np.ndarray  # (N, 32) uint8
    depths: np.ndarray  # (N,) stereo depth in meters, <= 0 when unknown
    pose: Pose | None = None  # world -> camera, present iff tracked
    point_ids: np.ndarray = None  # (N,) int64 map point per keypoint, -1 none
    bow: dict = field(default_factory=dict)
    features_by_node: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.point_ids is None:
            self.point_ids = np.full(len(self.keypoints), -1, dtype=np.int64)

    def compute_bow(self, vocab: vb.Vocabulary) -> None:
        if not self.bow and len(self.descriptors):
            self.bow, self.features_by_node = vb.transform(self.descriptors, vocab)


def build_frame(
    left: np.ndarray,
    right: np.ndarray,
    rig: StereoRig,
    timestamp: float,
    settings: TrackerSettings,
) -> Frame:
    """Extract features from a stereo pair and attach stereo depths."""
    fl = ft.extract_features(
        left, settings.n_features, levels=settings.levels,
        scale_factor=settings.scale_factor, threshold=settings.fast_threshold,
        fallback=settings.fast_fallback,
    )
    fr = ft.extract_features(
        right, settings.n_features, levels=settings.levels,
        scale_factor=settings.scale_factor, threshold=settings.fast_threshold,
        fallback=settings.fast_fallback,
    )
    obs = ft.match_stereo(
        fl.keypoints, fl.descriptors, fr.keypoints, fr.descriptors, rig,
        fl.pyramid.blurred[0], fr.pyramid.blurred[0],
        max_dist=settings.max_hamming,
    )
    depths = np.full(len(fl.keypoints), -1.0)
    for o in obs:
        depths[o.index] = o.depth
    return Frame(timestamp=timestamp, keypoints=fl.keypoints,
                 descriptors=fl.descriptors, depths=depths)


@dataclass
class TrackState:
    UNINITIALIZED = "uninitialized"
    TRACKING = "tracking"
    LOST = "lost"

    status: str = UNINITIALIZED
    velocity: Pose | None = None  # T_cur * inv(T_prev) of the last two frames
    last_pose: Pose | None = None
    last_frame: Frame | None = None
    reference_kf: int | None = None
    consecutive_lost: int = 0
    last_reloc_time: float = -math.inf


# -- pose-only optimization -------------------------------------------------


@dataclass
class PoseOptimizationProblem:
    initial: Pose
    points: np.ndarray  # (N, 3) world
    pixels: np.ndarray  # (N, 2) observed
    octaves: np.ndarray  # (N,)
    intrinsics: CameraIntrinsics
    scale_factor: float = 1.2
    chi2: float = 5.991


def projection_jacobian(pose: Pose, point: np.ndarray,
                        k: CameraIntrinsics) -> np.ndarray:
    """(2, 6) Jacobian of the projected pixel w.r.t. a left-multiplicative
    pose perturbation (rotation vector first, translation last)."""
    p = pose.apply(point)
    x, y, z = p
    j_proj = np.array([
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ])
    j_pose = np.hstack([-skew(p), np.eye(3)])
    return j_proj @ j_pose


def _apply_delta(delta: np.ndarray, pose: Pose) -> Pose:
    R = rotvec_to_matrix(delta[:3])
    return compose(Pose.from_rt(R, delta[3:]), pose)


def batch_projection_jacobian(cam_points: np.ndarray,
                              k: CameraIntrinsics) -> np.ndarray:
    """(N, 2, 6) pose Jacobians for camera-frame points (vectorized
    counterpart of projection_jacobian)."""
    x, y, z = cam_points.T
    zi = 1.0 / z
    n = len(cam_points)
    j_proj = np.zeros((n, 2, 3))
    j_proj[:, 0, 0] = k.fx * zi
    j_proj[:, 0, 2] = -k.fx * x * zi * zi
    j_proj[:, 1, 1] = k.fy * zi
    j_proj[:, 1, 2] = -k.fy * y * zi * zi
    j_pose = np.zeros((n, 3, 6))
    j_pose[:, 0, 1] = z
    j_pose[:, 0, 2] = -y
    j_pose[:, 1, 0] = -z
    j_pose[:, 1, 2] = x
    j_pose[:, 2, 0] = y
    j_pose[:, 2, 1] = -x
    j_pose[:, 0, 3] = j_pose[:, 1, 4] = j_pose[:, 2, 5] = 1.0
    return np.einsum("nij,njk->nik", j_proj, j_pose)


def _residuals(pose: Pose, pts: np.ndarray, px: np.ndarray,
               k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted pixel residuals and a validity mask (positive depth)."""
    cam = pose.apply(pts)
    z = cam[:, 2]
    valid = z > 1e-6
    zs = np.where(valid, z, 1.0)
    proj = np.stack([k.fx * cam[:, 0] / zs + k.cx,
                     k.fy * cam[:, 1] / zs + k.cy], axis=1)
    return proj - px, valid

def _robust_cost(res: np.ndarray, valid: np.ndarray, inv_sigma: np.ndarray,
                 delta: float) -> float:
    s = np.linalg.norm(res, axis=1) * inv_sigma
    rho = np.where(s <= delta, s * s, 2 * delta * s - delta * delta)
    # invalid (behind-camera) correspondences pay a fixed saturated penalty
    return float(np.sum(np.where(valid, rho, 2 * delta * 1e3)))


def _lm_pose(pose: Pose, pts: np.ndarray, px: np.ndarray,
             octaves: np.ndarray, k: CameraIntrinsics, scale_factor: float,
             chi2: float, iterations: int) -> tuple[Pose, float]:
    delta_h = math.sqrt(chi2)
    inv_sigma = scale_factor ** (-octaves.astype(np.float64))
    res, valid = _residuals(pose, pts, px, k)
    cost = _robust_cost(res, valid, inv_sigma, delta_h)
    lam = 1e-3
    for _ in range(iterations):
        s = np.linalg.norm(res, axis=1) * inv_sigma
        w_huber = np.where(s <= delta_h, 1.0, delta_h / np.maximum(s, 1e-12))
        idx = np.nonzero(valid)[0]
        J = batch_projection_jacobian(pose.apply(pts[idx]), k)
        J *= inv_sigma[idx, None, None]
        e = res[idx] * inv_sigma[idx, None]
        w = w_huber[idx]
        H = np.einsum("n,nij,nik->jk", w, J, J)
        g = np.einsum("n,nij,ni->j", w, J, e)
        stepped = False
        for _ in range(8):
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = _apply_delta(step, pose)
            cand_res, cand_valid = _residuals(cand, pts, px, k)
            cand_cost = _robust_cost(cand_res, cand_valid, inv_sigma, delta_h)
            if cand_cost <= cost:
                pose, res, valid, cost = cand, cand_res, cand_valid, cand_cost
                lam = max(lam / 3, 1e-9)
                stepped = True
                break
            lam *= 10
        if not stepped or float(np.max(np.abs(g))) < 1e-12:
            break
    return pose, cost


def optimize_pose(problem: PoseOptimizationProblem
                  ) -> tuple[Pose, np.ndarray, float]:
    """Robust pose refinement: 4 rounds of 10 LM iterations each, with
    chi-square inlier reclassification between rounds."""
    pts = np.asarray(problem.points, dtype=np.float64).reshape(-1, 3)
    px = np.asarray(problem.pixels, dtype=np.float64).reshape(-1, 2)
    octaves = np.asarray(problem.octaves).reshape(-1)
    if len(pts) < 3:
        raise TooFewCorrespondences(f"{len(pts)} correspondences; need 3")
    k = problem.intrinsics
    inv_sigma2 = problem.scale_factor ** (-2.0 * octaves)
    pose = problem.initial
    inliers = np.ones(len(pts), dtype=bool)
    cost = math.inf
    for _ in range(4):
        if inliers.sum() < 3:
            break
        pose, cost = _lm_pose(
            pose, pts[inliers], px[inliers], octaves[inliers], k,
            problem.scale_factor, problem.chi2, iterations=10,
        )
        res, valid = _residuals(pose, pts, px, k)
        err2 = np.sum(res * res, axis=1) * inv_sigma2
        inliers = valid & (err2 <= problem.chi2)
    return pose, inliers, cost


# -- matching helpers -------------------------------------------------------


def _match_in_windows(
    frame: Frame,
    centers: np.ndarray,
    radii: np.ndarray,
    target_descs: np.ndarray,
    max_hamming: int,
    skip_matched: bool = True,
) -> list[tuple[int, int]]:
    """Match each projected target to the best frame keypoint in a window.

    Returns (target index, keypoint index) pairs; each keypoint is used at
    most once (best Hamming distance wins).
    """
    kp_xy = np.array([[kp.x, kp.y] for kp in frame.keypoints])
    if not len(kp_xy):
        return []
    free = np.ones(len(kp_xy), dtype=bool)
    if skip_matched:
        free &= frame.point_ids < 0
    claims: dict[int, tuple[int, int]] = {}  # kp -> (dist, target)
    for ti in range(len(centers)):
        d2 = np.sum((kp_xy - centers[ti]) ** 2, axis=1)
        near = np.nonzero(free & (d2 <= radii[ti] ** 2))[0]
        if not len(near):
            continue
        dists = ft.hamming_matrix(target_descs[ti:ti + 1],
                                  frame.descriptors[near])[0]
        order = int(np.argmin(dists))
        if dists[order] > max_hamming:
            continue
        kp_idx = int(near[order])
        dist = int(dists[order])
        if kp_idx not in claims or dist < claims[kp_idx][0]:
            claims[kp_idx] = (dist, ti)
    return sorted((ti, kp) for kp, (_, ti) in claims.items())


def _match_by_nodes(
    frame: Frame,
    kf_descs: np.ndarray,
    kf_nodes: dict[int, list[int]],
    kf_eligible: np.ndarray,
    max_hamming: int,
    ratio: float = 0.75,
) -> list[tuple[int, int]]:
    """Match frame keypoints to keyframe keypoints sharing a vocabulary
    node. Returns (frame kp index, keyframe kp index) pairs."""
    out = []
    used_f, used_k = set(), set()
    for node in sorted(set(frame.features_by_node) & set(kf_nodes)):
        fi = [i for i in frame.features_by_node[node] if i not in used_f]
        ki = [j for j in kf_nodes[node] if kf_eligible[j] and j not in used_k]
        if not fi or not ki:
            continue
        dists = ft.hamming_matrix(frame.descriptors[fi], kf_descs[ki])
        for row in range(len(fi)):
            order = np.argsort(dists[row], kind="stable")
            best = int(order[0])
            if dists[row][best] > max_hamming:
                continue
            if len(order) > 1 and dists[row][best] >= ratio * dists[row][int(order[1])]:
                continue
            f_idx, k_idx = fi[row], ki[best]
            if k_idx in used_k:
                continue
            used_f.add(f_idx)
            used_k.add(k_idx)
            out.append((f_idx, k_idx))
    return out


def _correspondences(frame: Frame, wm: WorldMap, indices: np.ndarray):
    pts = np.array([wm.mappoints[int(frame.point_ids[i])].position
                    for i in indices]).reshape(-1, 3)
    px = np.array([[frame.keypoints[i].x, frame.keypoints[i].y]
                   for i in indices]).reshape(-1, 2)
    octs = np.array([frame.keypoints[i].octave for i in indices])
    return pts, px, octs


def _optimize_frame(frame: Frame, wm: WorldMap, initial: Pose,
                    rig: StereoRig, settings: TrackerSettings) -> int:
    """Optimize the frame pose over its current point matches; drops
    outlier associations. Returns the inlier count."""
    idx = np.nonzero(frame.point_ids >= 0)[0]
    live = np.array([int(frame.point_ids[i]) in wm.mappoints for i in idx])
    for i in idx[~live] if len(idx) else []:
        frame.point_ids[i] = -1
    idx = idx[live] if len(idx) else idx
    if len(idx) < 3:
        return 0
    pts, px, octs = _correspondences(frame, wm, idx)
    pose, inliers, _ = optimize_pose(PoseOptimizationProblem(
        initial=initial, points=pts, pixels=px, octaves=octs,
        intrinsics=rig.intrinsics, scale_factor=settings.scale_factor,
        chi2=settings.chi2,
    ))
    for i in idx[~inliers]:
        frame.point_ids[i] = -1
    frame.pose = pose
    return int(inliers.sum())


# -- tracking stages --------------------------------------------------------


def initialize(frame: Frame, wm: WorldMap, rig: StereoRig,
               vocab: vb.Vocabulary, settings: TrackerSettings) -> int:
    """Bootstrap the map from the first stereo frame.

    The frame becomes keyframe 0 at the identity pose; every stereo
    observation closer than the depth threshold seeds a map point.
    """
    if wm.keyframes or wm.mappoints:
        raise ValueError("map is not empty")
    n_stereo = int(np.sum(frame.depths > 0))
    if n_stereo < settings.min_init_stereo:
        raise InsufficientStereoPoints(
            f"{n_stereo} stereo points; need {settings.min_init_stereo}"
        )
    frame.pose = Pose.identity()
    frame.compute_bow(vocab)
    from .mapping import create_keyframe  # cycle: mapping builds keyframes

    kf_id, _ = create_keyframe(frame, wm, rig, vocab, settings,
                               max_new_points=None)
    return kf_id


def track_motion_model(frame: Frame, state: TrackState, wm: WorldMap,
                       rig: StereoRig, settings: TrackerSettings) -> int:
    """Constant-velocity prediction plus window matching to the previous
    frame's map points. Returns the inlier count (0 = failure)."""
    if state.velocity is None or state.last_frame is None:
        return 0
    predicted = compose(state.velocity, state.last_pose)
    prev = state.last_frame
    prev_ids = [int(p) for p in np.unique(prev.point_ids[prev.point_ids >= 0])
                if int(p) in wm.mappoints]
    if not prev_ids:
        return 0
    positions = np.array([wm.mappoints[p].position for p in prev_ids])
    descs = np.stack([wm.mappoints[p].descriptor for p in prev_ids])
    cam = predicted.apply(positions)
    k = rig.intrinsics
    z_ok = cam[:, 2] > 0.1
    zs = np.where(z_ok, cam[:, 2], 1.0)
    uv = np.stack([k.fx * cam[:, 0] / zs + k.cx,
                   k.fy * cam[:, 1] / zs + k.cy], axis=1)
    in_img = (z_ok & (uv[:, 0] >= 0) & (uv[:, 0] < k.width)
              & (uv[:, 1] >= 0) & (uv[:, 1] < k.height))
    if not in_img.any():
        return 0
    cand = np.nonzero(in_img)[0]
    for radius in (settings.search_radius, 2 * settings.search_radius):
        frame.point_ids[:] = -1
        pairs = _match_in_windows(
            frame, uv[cand], np.full(len(cand), radius),
            descs[cand], settings.max_hamming,
        )
        for ti, kp in pairs:
            frame.point_ids[kp] = prev_ids[cand[ti]]
        if len(pairs) >= max(settings.min_inliers_track, 10):
            inliers = _optimize_frame(frame, wm, predicted, rig, settings)
            if inliers >= settings.min_inliers_track:
                return inliers
    frame.point_ids[:] = -1
    return 0


def track_reference_keyframe(frame: Frame, kf_id: int, wm: WorldMap,
                             vocab: vb.Vocabulary, initial: Pose,
                             rig: StereoRig, settings: TrackerSettings) -> int:
    """BoW-node guided matching against a reference keyframe."""
    if kf_id not in wm.keyframes:
        return 0
    kf = wm.keyframes[kf_id]
    frame.compute_bow(vocab)
    eligible = kf.point_ids >= 0
    pairs = _match_by_nodes(frame, kf.descriptors, kf.features_by_node,
                            eligible, settings.max_hamming)
    frame.point_ids[:] = -1
    for f_idx, k_idx in pairs:
        pid = int(kf.point_ids[k_idx])
        if pid in wm.mappoints:
            frame.point_ids[f_idx] = pid
    inliers = _optimize_frame(frame, wm, initial, rig, settings)
    if inliers >= settings.min_inliers_track:
        return inliers
    frame.point_ids[:] = -1
    return 0


def track_local_map(frame: Frame, wm: WorldMap, rig: StereoRig,
                    settings: TrackerSettings) -> int:
    """Project local-map points into the frame, add window matches, and
    re-optimize. Returns the final inlier count."""
    matched = frame.point_ids[frame.point_ids >= 0]
    seeds = set()
    for pid in np.unique(matched):
        if int(pid) in wm.mappoints:
            seeds.update(wm.mappoints[int(pid)].observations)
    if not seeds:
        return _optimize_frame(frame, wm, frame.pose, rig, settings)
    _, pts = wm.local_map(sorted(seeds))
    already = set(int(p) for p in matched)
    extra = [p for p in sorted(pts) if p not in already and p in wm.mappoints]
    if extra:
        positions = np.array([wm.mappoints[p].position for p in extra])
        cam = frame.pose.apply(positions)
        k = rig.intrinsics
        z_ok = cam[:, 2] > 0.1
        zs = np.where(z_ok, cam[:, 2], 1.0)
        uv = np.stack([k.fx * cam[:, 0] / zs + k.cx,
                       k.fy * cam[:, 1] / zs + k.cy], axis=1)
        centers = frame.pose.center()
        keep = []
        radii = []
        for row, pid in enumerate(extra):
            if not z_ok[row]:
                continue
            if not (0 <= uv[row, 0] < k.width and 0 <= uv[row, 1] < k.height):
                continue
            point = wm.mappoints[pid]
            ray = point.position - centers
            dist = float(np.linalg.norm(ray))
            if not (0.8 * point.min_dist <= dist <= 1.2 * point.max_dist):
                continue
            if dist > 0 and float(ray @ point.normal) / dist < 0.5:
                continue  # viewing angle beyond 60 degrees
            level = 0
            if dist > 0 and point.max_dist > 0:
                level = int(np.clip(
                    round(math.log(point.max_dist / dist, settings.scale_factor)),
                    0, settings.levels - 1,
                ))
            keep.append(row)
            radii.append(3.0 * settings.scale_factor ** level)
        if settings.update_stats:
            for r in keep:
                wm.mappoints[extra[r]].n_visible += 1
        if keep:
            descs = np.stack([wm.mappoints[extra[r]].descriptor for r in keep])
            pairs = _match_in_windows(
                frame, uv[keep], np.array(radii), descs, settings.max_hamming,
            )
            for ti, kp in pairs:
                frame.point_ids[kp] = extra[keep[ti]]
    inliers = _optimize_frame(frame, wm, frame.pose, rig, settings)
    if settings.update_stats:
        for pid in frame.point_ids[frame.point_ids >= 0]:
            point = wm.mappoints.get(int(pid))
            if point:
                point.n_tracked += 1
    return inliers


def relocalize(frame: Frame, wm: WorldMap, db: vb.KeyFrameDatabase,
               vocab: vb.Vocabulary, rig: StereoRig,
               settings: TrackerSettings) -> int:
    """Place-recognition recovery: BoW candidates, P3P RANSAC, refinement.

    Returns the inlier count after a local-map pass (0 = failure); on
    success the frame pose is set.
    """
    frame.compute_bow(vocab)
    if not frame.bow:
        return 0
    candidates = db.query(frame.bow,
                          min_common_words=settings.min_common_words)
    rng = np.random.default_rng(settings.ransac_seed)
    k = rig.intrinsics
    K = np.array([[k.fx, 0, k.cx], [0, k.fy, k.cy], [0, 0, 1.0]])
    for kf_id in candidates[:settings.reloc_candidates]:
        kf = wm.keyframes.get(kf_id)
        if kf is None:
            continue
        pairs = _match_by_nodes(frame, kf.descriptors, kf.features_by_node,
                                kf.point_ids >= 0, settings.max_hamming)
        pairs = [(f, kidx) for f, kidx in pairs
                 if int(kf.point_ids[kidx]) in wm.mappoints]
        if len(pairs) < settings.reloc_min_matches:
            continue
        pts = np.array([wm.mappoints[int(kf.point_ids[kidx])].position
                        for _, kidx in pairs])
        px = np.array([[frame.keypoints[f].x, frame.keypoints[f].y]
                       for f, _ in pairs])
        octs = np.array([frame.keypoints[f].octave for f, _ in pairs])
        inv_sigma2 = settings.scale_factor ** (-2.0 * octs)
        best_pose, best_count = None, 0
        for _ in range(settings.ransac_iters):
            sel = rng.choice(len(pairs), size=3, replace=False)
            ok, rvecs, tvecs = cv2.solveP3P(
                pts[sel].reshape(-1, 1, 3), px[sel].reshape(-1, 1, 2),
                K, None, flags=cv2.SOLVEPNP_AP3P,
            )
            for rvec, tvec in zip(rvecs, tvecs):
                pose = Pose.from_rt(rotvec_to_matrix(rvec.ravel()),
                                    tvec.ravel())
                res, valid = _residuals(pose, pts, px, k)
                err2 = np.sum(res * res, axis=1) * inv_sigma2
                count = int(np.sum(valid & (err2 <= settings.chi2)))
                if count > best_count:
                    best_count, best_pose = count, pose
            if best_count >= 0.8 * len(pairs):
                break
        if best_pose is None or best_count < settings.min_inliers_track:
            continue
        frame.point_ids[:] = -1
        for f, kidx in pairs:
            frame.point_ids[f] = int(kf.point_ids[kidx])
        frame.pose = best_pose
        if _optimize_frame(frame, wm, best_pose, rig, settings) < 3:
            continue
        inliers = track_local_map(frame, wm, rig, settings)
        if inliers >= settings.min_inliers_reloc:
            return inliers
    frame.point_ids[:] = -1
    frame.pose = None
    return 0


def _best_reference(frame: Frame, wm: WorldMap) -> int | None:
    counts: dict[int, int] = {}
    for pid in frame.point_ids[frame.point_ids >= 0]:
        point = wm.mappoints.get(int(pid))
        if point:
            for kf_id in point.observations:
                counts[kf_id] = counts.get(kf_id, 0) + 1
    if not counts:
        return None
    return min(counts, key=lambda kf_id: (-counts[kf_id], kf_id))


def track_frame(frame: Frame, state: TrackState, wm: WorldMap,
                db: vb.KeyFrameDatabase, vocab: vb.Vocabulary,
                rig: StereoRig, settings: TrackerSettings):
    """Per-frame dispatch: motion model, reference keyframe, then (when
    lost) relocalization; every success ends with a local-map pass.

    Returns (state, pose or None, tracked flag). The caller records the
    outcome and drives keyframe creation in SLAM mode.
    """
    tracked = False
    if state.status == TrackState.TRACKING:
        inliers = track_motion_model(frame, state, wm, rig, settings)
        if not inliers and state.reference_kf is not None:
            inliers = track_reference_keyframe(
                frame, state.reference_kf, wm, vocab, state.last_pose,
                rig, settings,
            )
        if inliers:
            total = track_local_map(frame, wm, rig, settings)
            needed = settings.min_inliers_local
            if frame.timestamp - state.last_reloc_time < settings.reloc_strict_window:
                needed = settings.min_inliers_reloc
            tracked = total >= needed
    else:
        inliers = relocalize(frame, wm, db, vocab, rig, settings)
        if inliers:
            tracked = True
            state.last_reloc_time = frame.timestamp

    if tracked:
        if state.status == TrackState.TRACKING and state.last_pose is not None:
            state.velocity = compose(frame.pose, inverse(state.last_pose))
        else:
            state.velocity = None
        state.status = TrackState.TRACKING
        state.last_pose = frame.pose
        state.last_frame = frame
        state.consecutive_lost = 0
        ref = _best_reference(frame, wm)
        if ref is not None:
            state.reference_kf = ref
        return state, frame.pose, True

    frame.pose = None
    frame.point_ids[:] = -1
    state.status = TrackState.LOST
    state.velocity = None
    state.consecutive_lost += 1
    return state, None, False
