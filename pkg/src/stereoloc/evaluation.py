"""Trajectory association, error metrics, and trajectory/report file I/O.

Metrics follow the common odometry-benchmark conventions: absolute
translation RMSE after rigid SE(3) alignment, averaged relative
translation/rotation errors over fixed-length path segments, and lost-track
statistics over per-frame outcome records. Trajectories hold
camera-to-world poses with strictly increasing timestamps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, compose, inverse, matrix_to_quat


class TooFewPairs(ValueError):
    pass


class DegenerateGeometry(ValueError):
    pass


class TrajectoryTooShort(ValueError):
    def __init__(self, msg, evaluable=()):
        super().__init__(msg)
        self.evaluable = tuple(evaluable)


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class TrajectoryRecord:
    """Ordered (timestamp, camera-to-world pose) samples."""

    entries: list[tuple[float, Pose]] = field(default_factory=list)

    def __post_init__(self):
        ts = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def append(self, timestamp: float, pose: Pose) -> None:
        if self.entries and timestamp <= self.entries[-1][0]:
            raise ValueError("timestamps must be strictly increasing")
        self.entries.append((float(timestamp), pose))

    def __len__(self):
        return len(self.entries)

    def positions(self) -> np.ndarray:
        return np.array([p.t for _, p in self.entries]).reshape(-1, 3)


@dataclass(frozen=True)
class FrameOutcome:
    """What happened to one scheduled frame."""

    timestamp: float
    tracked: bool
    dropped: bool = False
    processing_time: float = 0.0


def associate(
    est: TrajectoryRecord, ref: TrajectoryRecord, max_dt: float
) -> list[tuple[Pose, Pose]]:
    """Pair estimate and reference poses by nearest timestamp.

    Greedy over ascending |dt|; each entry on either side is used at most
    once and pairs farther apart than ``max_dt`` are discarded.
    """
    if not est.entries or not ref.entries:
        return []
    candidates = []
    ref_ts = np.array([t for t, _ in ref.entries])
    for i, (t, _) in enumerate(est.entries):
        lo = int(np.searchsorted(ref_ts, t - max_dt, side="left"))
        hi = int(np.searchsorted(ref_ts, t + max_dt, side="right"))
        for j in range(lo, hi):
            candidates.append((abs(ref_ts[j] - t), i, j))
    candidates.sort()
    used_e, used_r = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_e or j in used_r:
            continue
        used_e.add(i)
        used_r.add(j)
        pairs.append((i, j))
    pairs.sort()
    return [(est.entries[i][1], ref.entries[j][1]) for i, j in pairs]


def _align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares R, t with R @ src + t ~ dst (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, S, Vt = np.linalg.svd(cov)
    if S[1] < 1e-9 * max(S[0], 1e-300):
        raise DegenerateGeometry("point sets are collinear; alignment is ambiguous")
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(pairs: list[tuple[Pose, Pose]]) -> float:
    """Absolute translation RMSE after rigid alignment of (est, ref) pairs."""
    if len(pairs) < 3:
        raise TooFewPairs(f"{len(pairs)} pairs; need at least 3")
    est = np.array([e.t for e, _ in pairs])
    ref = np.array([r.t for _, r in pairs])
    R, t = _align_rigid(est, ref)
    resid = est @ R.T + t - ref
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


def kitti_rel_errors(
    pairs: list[tuple[Pose, Pose]],
    lengths=(100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0),
) -> tuple[float, float, dict[float, tuple[float, float, int]]]:
    """Averaged relative errors over fixed-length reference path segments.

    For each start frame i and segment length L, the end frame j is the
    first whose reference path distance from i reaches L. The residual
    E = (Q_i^-1 Q_j)^-1 (P_i^-1 P_j) (Q reference, P estimate) yields a
    translation error in percent of L and a rotation error in degrees per
    100 m. Returns (t_rel, r_rel, per-length details {L: (t, r, count)}).
    """
    if len(pairs) < 2:
        raise TrajectoryTooShort("need at least 2 pairs")
    ref_pos = np.array([r.t for _, r in pairs])
    steps = np.linalg.norm(np.diff(ref_pos, axis=0), axis=1)
    cumdist = np.concatenate([[0.0], np.cumsum(steps)])
    t_errs, r_errs = [], []
    details: dict[float, tuple[float, float, int]] = {}
    for L in lengths:
        seg_t, seg_r = [], []
        for i in range(len(pairs)):
            j = int(np.searchsorted(cumdist, cumdist[i] + L))
            if j >= len(pairs):
                break
            p_i, q_i = pairs[i]
            p_j, q_j = pairs[j]
            rel_q = compose(inverse(q_i), q_j)
            rel_p = compose(inverse(p_i), p_j)
            err = compose(inverse(rel_q), rel_p)
            seg_t.append(np.linalg.norm(err.t) / L * 100.0)
            seg_r.append(np.degrees(err.angle()) / L * 100.0)
        if seg_t:
            details[float(L)] = (
                float(np.mean(seg_t)), float(np.mean(seg_r)), len(seg_t)
            )
            t_errs.extend(seg_t)
            r_errs.extend(seg_r)
    if not t_errs:
        raise TrajectoryTooShort(
            f"no segment of lengths {tuple(lengths)} fits the trajectory",
            evaluable=(),
        )
    return float(np.mean(t_errs)), float(np.mean(r_errs)), details


def lost_track_stats(outcomes: list[FrameOutcome]) -> tuple[float, float]:
    """(LT percent, longest continuous outage in seconds).

    Dropped frames count as lost. The outage duration spans from the last
    good frame before a lost run to the first good frame after it; runs
    touching the sequence boundary fall back to the run's own endpoints.
    """
    if not outcomes:
        raise ValueError("no outcomes")
    lost = [not (o.tracked and not o.dropped) for o in outcomes]
    ts = [o.timestamp for o in outcomes]
    lt = 100.0 * sum(lost) / len(lost)
    worst = 0.0
    i = 0
    while i < len(lost):
        if not lost[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(lost) and lost[j + 1]:
            j += 1
        before = ts[i - 1] if i > 0 else ts[i]
        after = ts[j + 1] if j + 1 < len(ts) else ts[j]
        worst = max(worst, after - before)
        i = j + 1
    return lt, worst


# -- file formats -----------------------------------------------------------


def write_trajectory(traj: TrajectoryRecord, path) -> None:
    """One line per pose: ``timestamp tx ty tz qx qy qz qw``."""
    lines = []
    for t, pose in traj.entries:
        w, x, y, z = pose.q
        tx, ty, tz = pose.t
        lines.append(
            f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_trajectory(path) -> TrajectoryRecord:
    """Read either 8-column timestamped lines or 12-column 3x4 pose rows.

    The matrix format carries no timestamps; the line index is used.
    """
    traj = TrajectoryRecord()
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise TrajectoryFormatError(
                    f"line {lineno}: non-numeric value in {path}"
                ) from None
            if len(vals) == 8:
                t, tx, ty, tz, qx, qy, qz, qw = vals
                pose = Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
            elif len(vals) == 12:
                M = np.array(vals).reshape(3, 4)
                t = float(len(traj))
                pose = Pose(matrix_to_quat(M[:, :3]), M[:, 3])
            else:
                raise TrajectoryFormatError(
                    f"line {lineno}: expected 8 or 12 values, got {len(vals)}"
                )
            try:
                traj.append(t, pose)
            except ValueError as exc:
                raise TrajectoryFormatError(f"line {lineno}: {exc}") from None
    return traj


def metrics_report(
    t_rel: float,
    r_rel: float,
    t_abs: float,
    lt: float,
    lt_t_max: float,
    details: dict | None = None,
) -> str:
    """JSON report with one field per metric column."""
    doc = {
        "t_rel": t_rel,
        "r_rel": r_rel,
        "t_abs": t_abs,
        "LT": lt,
        "LT_t_max": lt_t_max,
    }
    if details:
        doc["segments"] = {
            str(int(L)): {"t_rel": t, "r_rel": r, "count": n}
            for L, (t, r, n) in details.items()
        }
    return json.dumps(doc, indent=2, sort_keys=True)
