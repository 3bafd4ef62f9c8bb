"""SLAM-mode map growth: keyframe policy, landmark creation, local bundle
adjustment, and map-point culling. Never used in localization-only mode.

Local BA jointly refines a window of keyframe poses and the points they
observe, keeping outside observers fixed for gauge. The normal equations
are solved with the points eliminated by their 3x3 Schur blocks, which
keeps the dense system at 6 unknowns per adjustable keyframe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, StereoRig, backproject, inverse
from .tracking import (
    DivergedOptimization,
    Frame,
    TrackerSettings,
    _residuals,
    projection_jacobian,
)
from .vocabulary import KeyFrameDatabase, Vocabulary
from .worldmap import KeyFrame, WorldMap


class FrameNotTracked(ValueError):
    pass


@dataclass(frozen=True)
class KeyframeDecisionInputs:
    frames_since_last_kf: int
    tracked_points: int
    tracked_ratio_vs_reference: float
    close_points_tracked: int
    close_points_available: int


def need_new_keyframe(
    inputs: KeyframeDecisionInputs,
    max_frame_gap: int = 20,
    min_tracked_ratio: float = 0.9,
    close_tracked_floor: int = 100,
    close_available_floor: int = 70,
) -> bool:
    """Admission policy: stale reference, decayed overlap, or a wealth of
    unexploited close stereo points."""
    return (
        inputs.frames_since_last_kf >= max_frame_gap
        or inputs.tracked_ratio_vs_reference < min_tracked_ratio
        or (inputs.close_points_tracked < close_tracked_floor
            and inputs.close_points_available > close_available_floor)
    )


def create_keyframe(
    frame: Frame,
    wm: WorldMap,
    rig: StereoRig,
    vocab: Vocabulary,
    settings: TrackerSettings,
    db: KeyFrameDatabase | None = None,
    max_new_points: int | None = 100,
) -> tuple[int, list[int]]:
    """Promote a tracked frame to a keyframe and seed new close landmarks.

    Unmatched keypoints with stereo depth below the close threshold become
    map points, nearest first, capped at ``max_new_points``.
    """
    if frame.pose is None:
        raise FrameNotTracked("frame has no pose")
    frame.compute_bow(vocab)
    kf = KeyFrame(
        id=-1,
        timestamp=frame.timestamp,
        pose=frame.pose,
        keypoints=list(frame.keypoints),
        descriptors=frame.descriptors.copy(),
        depths=np.where(frame.depths > 0, frame.depths, -1.0),
        point_ids=frame.point_ids.copy(),
        bow=dict(frame.bow),
        features_by_node={n: list(i) for n, i in frame.features_by_node.items()},
    )
    kf_id = wm.insert_keyframe(kf)
    close_limit = settings.depth_factor * rig.baseline
    cam_to_world = inverse(frame.pose)
    unmatched = [
        i for i in range(len(frame.keypoints))
        if kf.point_ids[i] < 0 and 0 < frame.depths[i] < close_limit
    ]
    unmatched.sort(key=lambda i: (frame.depths[i], i))
    if max_new_points is not None:
        unmatched = unmatched[:max_new_points]
    new_ids = []
    for i in unmatched:
        kp = frame.keypoints[i]
        cam_pt = backproject(np.array([kp.x, kp.y]), float(frame.depths[i]),
                             rig.intrinsics)
        pid = wm.insert_mappoint(
            cam_to_world.apply(cam_pt), kf_id, i, frame.descriptors[i],
            scale_factor=settings.scale_factor, levels=settings.levels,
        )
        new_ids.append(pid)
    frame.point_ids = kf.point_ids.copy()
    if db is not None:
        db.insert(kf_id, kf.bow)
    return kf_id, new_ids


# -- local bundle adjustment ------------------------------------------------


@dataclass
class LocalBaProblem:
    poses: dict[int, Pose]  # adjustable keyframes
    fixed: dict[int, Pose]  # gauge-fixing observers outside the window
    points: dict[int, np.ndarray]  # point id -> (3,) world position
    observations: list[tuple[int, int, np.ndarray, int]]  # (kf, pid, px, octave)
    rig: StereoRig
    scale_factor: float = 1.2
    chi2: float = 5.991


def build_local_ba_problem(wm: WorldMap, center_kf: int,
                           rig: StereoRig,
                           settings: TrackerSettings,
                           max_window: int = 20) -> LocalBaProblem:
    center = wm.keyframes[center_kf]
    # dense normal equations stay cheap only for small windows, so keep
    # the center plus its strongest covisible neighbors
    top = sorted(center.covisible.items(), key=lambda kv: (-kv[1], kv[0]))
    window = {center_kf} | {kf for kf, _ in top[:max_window - 1]}
    points = {}
    for kf_id in window:
        for pid in wm.keyframes[kf_id].observed_points():
            points[pid] = wm.mappoints[pid].position.copy()
    fixed_ids = set()
    observations = []
    for pid in sorted(points):
        point = wm.mappoints[pid]
        for kf_id, idx in sorted(point.observations.items()):
            kf = wm.keyframes[kf_id]
            kp = kf.keypoints[idx]
            observations.append((kf_id, pid, np.array([kp.x, kp.y]), kp.octave))
            if kf_id not in window:
                fixed_ids.add(kf_id)
    return LocalBaProblem(
        poses={k: wm.keyframes[k].pose for k in sorted(window)},
        fixed={k: wm.keyframes[k].pose for k in sorted(fixed_ids)},
        points=points,
        observations=observations,
        rig=rig,
        scale_factor=settings.scale_factor,
        chi2=settings.chi2,
    )


def point_jacobian(pose: Pose, point: np.ndarray, k) -> np.ndarray:
    """(2, 3) Jacobian of the projected pixel w.r.t. the world point."""
    p = pose.apply(point)
    x, y, z = p
    j_proj = np.array([
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ])
    return j_proj @ pose.rotation_matrix()


def _ba_cost(poses, points, obs, k, scale_factor, delta_h):
    total = 0.0
    for kf_id, pid, px, octave in obs:
        res, valid = _residuals(poses[kf_id], points[pid][None, :],
                                px[None, :], k)
        inv_sigma = scale_factor ** (-octave)
        if not valid[0]:
            total += 2 * delta_h * 1e3
            continue
        s = float(np.linalg.norm(res[0])) * inv_sigma
        total += s * s if s <= delta_h else 2 * delta_h * s - delta_h ** 2
    return total


def _ba_iterate(problem: LocalBaProblem, iterations: int,
                poses: dict[int, Pose], points: dict[int, np.ndarray],
                obs: list) -> float:
    """LM iterations over the active observation list; mutates poses and
    points in place. Returns the final cost.

    Residuals, Jacobians, and normal-equation blocks are accumulated with
    batched array operations; only the per-point Schur subtraction loops
    in Python, over small dense blocks.
    """
    from .tracking import _apply_delta, batch_projection_jacobian

    k = problem.rig.intrinsics
    delta_h = math.sqrt(problem.chi2)
    cam_ids = sorted(problem.poses)
    cam_index = {c: i for i, c in enumerate(cam_ids)}
    pt_ids = sorted(points)
    pt_index = {p: i for i, p in enumerate(pt_ids)}
    all_ids = sorted(set(problem.fixed) | set(poses))
    all_index = {c: i for i, c in enumerate(all_ids)}
    nc, npt = len(cam_ids), len(pt_ids)

    obs_cam = np.array([all_index[kf] for kf, _, _, _ in obs])
    obs_adj = np.array([cam_index.get(kf, -1) for kf, _, _, _ in obs])
    obs_pt = np.array([pt_index[p] for _, p, _, _ in obs])
    obs_px = np.array([px for _, _, px, _ in obs], dtype=np.float64)
    inv_sigma = problem.scale_factor ** (
        -np.array([o for _, _, _, o in obs], dtype=np.float64))

    def stacks(pose_map):
        all_poses = dict(problem.fixed)
        all_poses.update(pose_map)
        R = np.stack([all_poses[c].rotation_matrix() for c in all_ids])
        t = np.stack([all_poses[c].t for c in all_ids])
        return R, t

    def residuals(R, t, P):
        cam = np.einsum("mij,mj->mi", R[obs_cam], P[obs_pt]) + t[obs_cam]
        z = cam[:, 2]
        ok = z > 1e-6
        zs = np.where(ok, z, 1.0)
        proj = np.stack([k.fx * cam[:, 0] / zs + k.cx,
                         k.fy * cam[:, 1] / zs + k.cy], axis=1)
        return proj - obs_px, ok, cam

    def cost_of(res, ok):
        s = np.linalg.norm(res, axis=1) * inv_sigma
        rho = np.where(s <= delta_h, s * s, 2 * delta_h * s - delta_h ** 2)
        return float(np.sum(np.where(ok, rho, 2 * delta_h * 1e3)))

    R_all, t_all = stacks(poses)
    P = np.stack([points[p] for p in pt_ids]) if npt else np.zeros((0, 3))
    res, valid, cam_pts = residuals(R_all, t_all, P)
    cost = cost_of(res, valid)
    lam = 1e-4
    adjustable = obs_adj >= 0
    for _ in range(iterations):
        a = np.nonzero(valid)[0]
        s = np.linalg.norm(res[a], axis=1) * inv_sigma[a]
        w = np.where(s <= delta_h, 1.0, delta_h / np.maximum(s, 1e-12))
        e = res[a] * inv_sigma[a, None]
        cam_a = cam_pts[a]
        x, y, z = cam_a.T
        zi = 1.0 / z
        j_proj = np.zeros((len(a), 2, 3))
        j_proj[:, 0, 0] = k.fx * zi
        j_proj[:, 0, 2] = -k.fx * x * zi * zi
        j_proj[:, 1, 1] = k.fy * zi
        j_proj[:, 1, 2] = -k.fy * y * zi * zi
        Jp = np.einsum("nij,njk->nik", j_proj, R_all[obs_cam[a]])
        Jp *= inv_sigma[a, None, None]
        V = np.zeros((npt, 3, 3))
        g_p = np.zeros((npt, 3))
        np.add.at(V, obs_pt[a],
                  w[:, None, None] * np.einsum("nij,nik->njk", Jp, Jp))
        np.add.at(g_p, obs_pt[a],
                  w[:, None] * np.einsum("nij,ni->nj", Jp, e))
        b = np.nonzero(adjustable[a])[0]
        ci_b = obs_adj[a[b]]
        pi_b = obs_pt[a[b]]
        Jc = batch_projection_jacobian(cam_a[b], k)
        Jc *= inv_sigma[a[b], None, None]
        U = np.zeros((nc, 6, 6))
        g_c = np.zeros((nc, 6))
        np.add.at(U, ci_b,
                  w[b, None, None] * np.einsum("nij,nik->njk", Jc, Jc))
        np.add.at(g_c, ci_b, w[b, None] * np.einsum("nij,ni->nj", Jc, e[b]))
        # one W block per (camera, point) pair: each pair occurs once
        W_blocks = w[b, None, None] * np.einsum("nij,nik->njk", Jc, Jp[b])
        order = np.argsort(pi_b, kind="stable")
        group_pts, group_starts = np.unique(pi_b[order], return_index=True)
        bounds = list(group_starts) + [len(order)]
        stepped = False
        for _ in range(6):
            U_d = U + lam * np.stack(
                [np.diag(np.maximum(np.diag(u), 1e-12)) for u in U]
            ) if nc else U
            V_d = V + lam * np.stack(
                [np.diag(np.maximum(np.diag(v), 1e-12)) for v in V]
            ) if npt else V
            try:
                V_inv = np.linalg.inv(V_d)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            S4 = np.zeros((nc, 6, nc, 6))
            for ci in range(nc):
                S4[ci, :, ci, :] += U_d[ci]
            WaV = np.einsum("nij,njk->nik", W_blocks, V_inv[pi_b])
            rhs2 = -g_c.copy()
            np.add.at(rhs2, ci_b, np.einsum("nij,nj->ni", WaV, g_p[pi_b]))
            for gi in range(len(group_pts)):
                sel = order[bounds[gi]:bounds[gi + 1]]
                cams = ci_b[sel]
                C = np.einsum("aij,bkj->abik", WaV[sel], W_blocks[sel])
                S4[cams[:, None], :, cams[None, :], :] -= C
            try:
                dc = (np.linalg.solve(S4.reshape(6 * nc, 6 * nc),
                                      rhs2.reshape(-1))
                      if nc else np.zeros(0))
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dc2 = dc.reshape(nc, 6)
            back = -g_p.copy()
            np.add.at(back, pi_b,
                      -np.einsum("nij,ni->nj", W_blocks, dc2[ci_b]))
            dp = np.einsum("pij,pj->pi", V_inv, back)
            cand_poses = {
                c: _apply_delta(dc2[ci], poses[c])
                for c, ci in cam_index.items()
            }
            P_cand = P + dp
            R_cand, t_cand = stacks(cand_poses)
            cand_res, cand_valid, cand_cam = residuals(R_cand, t_cand,
                                                       P_cand)
            cand_cost = cost_of(cand_res, cand_valid)
            if cand_cost <= cost:
                poses.update(cand_poses)
                for p, pi in pt_index.items():
                    points[p] = P_cand[pi]
                P, R_all, t_all = P_cand, R_cand, t_cand
                res, valid, cam_pts = cand_res, cand_valid, cand_cam
                cost = cand_cost
                lam = max(lam / 3, 1e-10)
                stepped = True
                break
            lam *= 10
        if not stepped:
            break
    return cost


def local_bundle_adjustment(problem: LocalBaProblem):
    """Two robust LM rounds (5 then 10 iterations) with chi-square outlier
    observation removal in between.

    Returns (updated poses, updated points, list of culled observations).
    """
    poses = dict(problem.poses)
    points = {p: v.copy() for p, v in problem.points.items()}
    obs = list(problem.observations)
    if not obs:
        return poses, points, []
    k = problem.rig.intrinsics
    start_cost = _ba_cost({**problem.fixed, **poses}, points, obs, k,
                          problem.scale_factor, math.sqrt(problem.chi2))
    culled = []
    for iterations in (5, 10):
        cost = _ba_iterate(problem, iterations, poses, points, obs)
        keep = []
        all_poses = dict(problem.fixed)
        all_poses.update(poses)
        for entry in obs:
            kf_id, pid, px, octave = entry
            res, valid = _residuals(all_poses[kf_id], points[pid][None, :],
                                    px[None, :], k)
            err2 = float(res[0] @ res[0]) * problem.scale_factor ** (-2 * octave)
            if valid[0] and err2 <= problem.chi2:
                keep.append(entry)
            else:
                culled.append(entry)
        obs = keep
        if not obs:
            break
    if cost > start_cost + 1e-9:
        raise DivergedOptimization("bundle adjustment increased the cost")
    return poses, points, culled


def run_local_ba(wm: WorldMap, center_kf: int, rig: StereoRig,
                 settings: TrackerSettings) -> None:
    """Build, solve, and apply a local BA window around a keyframe."""
    problem = build_local_ba_problem(wm, center_kf, rig, settings)
    poses, points, culled = local_bundle_adjustment(problem)
    for kf_id, pose in poses.items():
        wm.keyframes[kf_id].pose = pose
    for pid, pos in points.items():
        if pid in wm.mappoints:
            wm.mappoints[pid].position = pos
    for kf_id, pid, _, _ in culled:
        point = wm.mappoints.get(pid)
        if point is not None and kf_id in point.observations:
            wm._remove_observation(point, kf_id)
            if not point.observations:
                wm.remove_mappoint(pid)


def cull(wm: WorldMap, min_observations: int = 3, grace_keyframes: int = 3,
         min_tracked_ratio: float = 0.25) -> list[int]:
    """Remove weak landmarks; returns the removed point ids.

    A point goes when it is still under-observed ``grace_keyframes``
    keyframes after its creation, or when it is matched in too small a
    fraction of the frames that predicted it visible.
    """
    removed = []
    for pid in sorted(wm.mappoints):
        point = wm.mappoints[pid]
        aged = wm.next_keyframe_id - point.created_kf >= grace_keyframes
        weak = aged and len(point.observations) < min_observations
        ratio = point.n_tracked / max(point.n_visible, 1)
        if weak or ratio < min_tracked_ratio:
            wm.remove_mappoint(pid)
            removed.append(pid)
    return removed
