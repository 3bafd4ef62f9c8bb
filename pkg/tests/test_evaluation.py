import itertools
import json

import numpy as np
import pytest

import stereoloc.evaluation as ev
from stereoloc.geometry import Pose, compose, inverse, rotvec_to_matrix


def traj_from_positions(positions, times=None, rotations=None):
    traj = ev.TrajectoryRecord()
    for i, p in enumerate(positions):
        R = rotations[i] if rotations is not None else np.eye(3)
        t = times[i] if times is not None else float(i)
        traj.append(t, Pose.from_rt(R, np.asarray(p, dtype=float)))
    return traj


def random_traj(rng, n=30, step=0.5):
    pos = np.cumsum(rng.normal(scale=step, size=(n, 3)), axis=0)
    rots = [rotvec_to_matrix(rng.normal(scale=0.1, size=3)) for _ in range(n)]
    return traj_from_positions(pos, rotations=rots)


class TestAssociate:
    def test_identical_timestamps_full_pairing(self):
        a = random_traj(np.random.default_rng(0))
        pairs = ev.associate(a, a, max_dt=0.01)
        assert len(pairs) == len(a)
        for e, r in pairs:
            assert np.array_equal(e.t, r.t)

    def test_missing_frames_leave_reference_unpaired(self):
        ref = random_traj(np.random.default_rng(1), n=20)
        est = ev.TrajectoryRecord(
            [e for i, e in enumerate(ref.entries) if not 5 <= i < 10]
        )
        pairs = ev.associate(est, ref, max_dt=0.01)
        assert len(pairs) == 15

    def test_jittered_matches_optimal_assignment_oracle(self):
        rng = np.random.default_rng(2)
        max_dt = 0.05
        ref = traj_from_positions(rng.normal(size=(6, 3)), times=np.arange(6.0))
        jitter = rng.uniform(-max_dt / 2, max_dt / 2, size=6)
        est = traj_from_positions(
            rng.normal(size=(6, 3)), times=np.arange(6.0) + jitter
        )
        got = ev.associate(est, ref, max_dt)
        # oracle: exhaustive assignment minimizing total |dt|
        est_ts = [t for t, _ in est.entries]
        ref_ts = [t for t, _ in ref.entries]
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(6)):
            if any(abs(est_ts[i] - ref_ts[j]) > max_dt for i, j in enumerate(perm)):
                continue
            cost = sum(abs(est_ts[i] - ref_ts[j]) for i, j in enumerate(perm))
            if cost < best_cost:
                best, best_cost = perm, cost
        want = [(est.entries[i][1], ref.entries[j][1]) for i, j in enumerate(best)]
        assert len(got) == len(want)
        for (ge, gr), (we, wr) in zip(got, want):
            assert np.array_equal(ge.t, we.t) and np.array_equal(gr.t, wr.t)

    def test_empty_inputs(self):
        t = random_traj(np.random.default_rng(3))
        assert ev.associate(ev.TrajectoryRecord(), t, 1.0) == []


class TestAteRmse:
    def test_identical_is_zero(self):
        t = random_traj(np.random.default_rng(4))
        pairs = list(zip([p for _, p in t.entries], [p for _, p in t.entries]))
        assert ev.ate_rmse(pairs) == pytest.approx(0.0, abs=1e-12)

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(5)
        ref = random_traj(rng)
        T = Pose.from_rt(rotvec_to_matrix(rng.normal(size=3)), rng.normal(size=3))
        pairs = [(compose(T, p), p) for _, p in ref.entries]
        assert ev.ate_rmse(pairs) == pytest.approx(0.0, abs=1e-9)

    def test_displaced_square_matches_grid_search_oracle(self):
        square = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
        est_pos = square.copy()
        est_pos[2] += [0.1, 0.0, 0.0]
        pairs = [
            (Pose.from_rt(np.eye(3), e), Pose.from_rt(np.eye(3), r))
            for e, r in zip(est_pos, square)
        ]
        got = ev.ate_rmse(pairs)
        # oracle: coarse-to-fine search over in-plane rigid transforms
        def rmse(theta, tx, ty):
            c, s = np.cos(theta), np.sin(theta)
            R = np.array([[c, -s], [s, c]])
            moved = est_pos[:, :2] @ R.T + [tx, ty]
            return np.sqrt(np.mean(np.sum((moved - square[:, :2]) ** 2, axis=1)))
        center, span = np.zeros(3), 0.2
        for _ in range(8):
            grid = [np.linspace(c - span, c + span, 21) for c in center]
            best = min(
                ((rmse(a, b, c), (a, b, c)) for a in grid[0] for b in grid[1]
                 for c in grid[2]),
                key=lambda x: x[0],
            )
            center, span = np.array(best[1]), span / 5
        assert got == pytest.approx(best[0], abs=1e-3)

    def test_too_few_pairs(self):
        p = Pose.identity()
        with pytest.raises(ev.TooFewPairs):
            ev.ate_rmse([(p, p), (p, p)])

    def test_collinear_raises(self):
        pts = [np.array([i, 0.0, 0.0]) for i in range(5)]
        pairs = [(Pose.from_rt(np.eye(3), p), Pose.from_rt(np.eye(3), p))
                 for p in pts]
        with pytest.raises(ev.DegenerateGeometry):
            ev.ate_rmse(pairs)


def naive_rel_errors(pairs, lengths):
    """Independent double-loop 4x4-matrix implementation."""
    def mat(p):
        T = np.eye(4)
        T[:3, :3] = p.rotation_matrix()
        T[:3, 3] = p.t
        return T

    ref_pos = np.array([r.t for _, r in pairs])
    dist = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(ref_pos, axis=0), axis=1))]
    )
    t_all, r_all = [], []
    for L in lengths:
        for i in range(len(pairs)):
            j = None
            for jj in range(i, len(pairs)):
                if dist[jj] - dist[i] >= L:
                    j = jj
                    break
            if j is None:
                continue
            P_i, Q_i = mat(pairs[i][0]), mat(pairs[i][1])
            P_j, Q_j = mat(pairs[j][0]), mat(pairs[j][1])
            E = np.linalg.inv(np.linalg.inv(Q_i) @ Q_j) @ (np.linalg.inv(P_i) @ P_j)
            t_all.append(np.linalg.norm(E[:3, 3]) / L * 100.0)
            ang = np.arccos(np.clip((np.trace(E[:3, :3]) - 1) / 2, -1, 1))
            r_all.append(np.degrees(ang) / L * 100.0)
    return float(np.mean(t_all)), float(np.mean(r_all))


class TestKittiRelErrors:
    def test_identical_zero(self):
        t = random_traj(np.random.default_rng(6), n=40, step=1.0)
        pairs = [(p, p) for _, p in t.entries]
        t_rel, r_rel, _ = ev.kitti_rel_errors(pairs, lengths=(5.0, 10.0))
        assert t_rel == pytest.approx(0.0, abs=1e-9)
        assert r_rel == pytest.approx(0.0, abs=1e-9)

    def test_one_percent_scale_inflation(self):
        n = 50
        ref = traj_from_positions([[i, 0, 0] for i in range(n)])
        est = traj_from_positions([[1.01 * i, 0, 0] for i in range(n)])
        pairs = list(zip([p for _, p in est.entries], [p for _, p in ref.entries]))
        t_rel, r_rel, _ = ev.kitti_rel_errors(pairs, lengths=(10.0,))
        assert t_rel == pytest.approx(1.0, abs=1e-6)
        assert r_rel == pytest.approx(0.0, abs=1e-9)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        ref = random_traj(rng, n=60, step=0.8)
        noise = [
            compose(p, Pose.from_rt(rotvec_to_matrix(rng.normal(scale=0.02, size=3)),
                                    rng.normal(scale=0.05, size=3)))
            for _, p in ref.entries
        ]
        pairs = list(zip(noise, [p for _, p in ref.entries]))
        lengths = (3.0, 6.0, 12.0)
        t_rel, r_rel, _ = ev.kitti_rel_errors(pairs, lengths=lengths)
        nt, nr = naive_rel_errors(pairs, lengths)
        assert t_rel == pytest.approx(nt, abs=1e-9)
        assert r_rel == pytest.approx(nr, abs=1e-9)

    def test_too_short(self):
        ref = traj_from_positions([[0, 0, 0], [1, 0, 0]])
        pairs = [(p, p) for _, p in ref.entries]
        with pytest.raises(ev.TrajectoryTooShort):
            ev.kitti_rel_errors(pairs, lengths=(100.0,))


class TestLostTrack:
    @staticmethod
    def outcomes(n=100, hz=10.0, lost=()):
        return [
            ev.FrameOutcome(timestamp=i / hz, tracked=i not in lost)
            for i in range(n)
        ]

    def test_no_losses(self):
        assert ev.lost_track_stats(self.outcomes()) == (0.0, 0.0)

    def test_five_lost_frames_hand_count(self):
        lt, ltmax = ev.lost_track_stats(self.outcomes(lost=set(range(10, 15))))
        assert lt == pytest.approx(5.0)
        # outage spans the good frame at 0.9 s to the good frame at 1.5 s
        assert ltmax == pytest.approx(0.6)

    def test_all_lost(self):
        lt, ltmax = ev.lost_track_stats(self.outcomes(n=50, lost=set(range(50))))
        assert lt == pytest.approx(100.0)
        assert ltmax == pytest.approx(49 / 10.0)

    def test_dropped_counts_as_lost(self):
        o = self.outcomes(n=10)
        o[3] = ev.FrameOutcome(timestamp=o[3].timestamp, tracked=True, dropped=True)
        lt, _ = ev.lost_track_stats(o)
        assert lt == pytest.approx(10.0)


class TestTrajectoryIO:
    def test_round_trip(self, tmp_path):
        t = random_traj(np.random.default_rng(8), n=10)
        path = tmp_path / "traj.txt"
        ev.write_trajectory(t, path)
        back = ev.load_trajectory(path)
        assert len(back) == len(t)
        for (ta, pa), (tb, pb) in zip(t.entries, back.entries):
            assert tb == pytest.approx(ta, abs=1e-9)
            assert np.allclose(pb.t, pa.t, atol=1e-8)
            assert min(np.linalg.norm(pb.q - pa.q),
                       np.linalg.norm(pb.q + pa.q)) < 1e-8

    def test_matrix_format(self, tmp_path):
        R = rotvec_to_matrix(np.array([0.0, 0.3, 0.0]))
        row = np.hstack([R, np.array([[1.0], [2.0], [3.0]])]).ravel()
        path = tmp_path / "kitti.txt"
        path.write_text(
            " ".join("1 0 0 0 0 1 0 0 0 0 1 0".split()) + "\n"
            + " ".join(f"{v:.9f}" for v in row) + "\n"
        )
        traj = ev.load_trajectory(path)
        assert len(traj) == 2
        assert np.allclose(traj.entries[1][1].t, [1, 2, 3])
        assert np.allclose(traj.entries[1][1].rotation_matrix(), R, atol=1e-8)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0 0 0 0 0 1\nnot a pose\n")
        with pytest.raises(ev.TrajectoryFormatError, match="line 2"):
            ev.load_trajectory(path)


def test_metrics_report_fields():
    doc = json.loads(ev.metrics_report(1.0, 0.2, 0.05, 7.44, 0.2,
                                       details={100.0: (1.0, 0.2, 42)}))
    assert set(doc) == {"t_rel", "r_rel", "t_abs", "LT", "LT_t_max", "segments"}
    assert doc["LT"] == 7.44
    assert doc["segments"]["100"]["count"] == 42
