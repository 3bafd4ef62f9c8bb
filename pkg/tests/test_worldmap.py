import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereoloc.features import Keypoint, hamming
from stereoloc.geometry import Pose, rotvec_to_matrix
from stereoloc.worldmap import (
    KeyFrame,
    NoObservations,
    UnknownKeyFrame,
    UnknownMapPoint,
    WorldMap,
)


def make_kf(n, pose=None, seed=0, timestamp=0.0):
    rng = np.random.default_rng(seed)
    kps = [
        Keypoint(x=float(10 + 5 * i), y=float(20 + 3 * i), octave=i % 4,
                 orientation=0.0, response=10.0)
        for i in range(n)
    ]
    return KeyFrame(
        id=-1,
        timestamp=timestamp,
        pose=pose or Pose.identity(),
        keypoints=kps,
        descriptors=rng.integers(0, 256, size=(n, 32), dtype=np.uint8),
        depths=np.full(n, 5.0),
    )


def seed_points(wm, kf_id, count, seed=1):
    """Create `count` map points observed by keyframe kf_id at indices 0..count-1."""
    rng = np.random.default_rng(seed)
    kf = wm.keyframes[kf_id]
    free = [int(i) for i in np.nonzero(kf.point_ids < 0)[0][:count]]
    assert len(free) == count
    ids = []
    for i in free:
        pos = kf.center() + rng.normal(size=3) + np.array([0, 0, 10.0])
        ids.append(wm.insert_mappoint(pos, kf_id, i, kf.descriptors[i]))
    return ids


class TestInsertKeyframe:
    def test_first_keyframe_id_zero_no_edges(self):
        wm = WorldMap()
        kid = wm.insert_keyframe(make_kf(10))
        assert kid == 0
        assert wm.keyframes[0].covisible == {}

    def _shared_fixture(self, shared):
        wm = WorldMap()
        a = wm.insert_keyframe(make_kf(30, seed=1))
        pids = seed_points(wm, a, 30)
        b = make_kf(30, seed=2)
        b.point_ids[:shared] = pids[:shared]
        bid = wm.insert_keyframe(b)
        return wm, a, bid

    def test_twenty_shared_points_edge_weight_twenty(self):
        wm, a, b = self._shared_fixture(20)
        assert wm.keyframes[a].covisible == {b: 20}
        assert wm.keyframes[b].covisible == {a: 20}

    def test_fourteen_shared_points_no_edge(self):
        wm, a, b = self._shared_fixture(14)
        assert wm.keyframes[a].covisible == {}
        assert wm.keyframes[b].covisible == {}


class TestInsertMappoint:
    def test_point_on_optical_axis_normal_is_viewing_direction(self):
        R = rotvec_to_matrix(np.array([0.1, -0.2, 0.3]))
        pose = Pose.from_rt(R, np.array([1.0, 2.0, 3.0]))
        wm = WorldMap()
        kid = wm.insert_keyframe(make_kf(5, pose=pose))
        kf = wm.keyframes[kid]
        world_pt = kf.center() + 5.0 * kf.viewing_direction()
        pid = wm.insert_mappoint(world_pt, kid, 0, kf.descriptors[0])
        assert np.allclose(wm.mappoints[pid].normal, kf.viewing_direction(), atol=1e-12)

    def test_distance_range_formula(self):
        # oracle: max = d * s^octave, min = d * s^(octave - levels + 1)
        wm = WorldMap()
        kid = wm.insert_keyframe(make_kf(8))
        kf = wm.keyframes[kid]
        idx = 2  # octave 2 in the fixture
        pt = np.array([0.0, 0.0, 7.0])
        pid = wm.insert_mappoint(pt, kid, idx, kf.descriptors[idx],
                                 scale_factor=1.2, levels=8)
        p = wm.mappoints[pid]
        assert p.max_dist == pytest.approx(7.0 * 1.2 ** 2)
        assert p.min_dist == pytest.approx(7.0 * 1.2 ** (2 - 7))
        assert p.min_dist <= p.max_dist

    def test_unknown_keyframe_raises(self):
        wm = WorldMap()
        with pytest.raises(UnknownKeyFrame):
            wm.insert_mappoint(np.zeros(3), 99, 0, np.zeros(32, np.uint8))

    def test_integrity_after_many_insertions(self):
        rng = np.random.default_rng(7)
        wm = WorldMap()
        kf_ids = [wm.insert_keyframe(make_kf(50, seed=s)) for s in range(5)]
        pids = []
        used = {k: set() for k in kf_ids}
        for _ in range(1000):
            k = int(rng.choice(kf_ids))
            free = [i for i in range(50) if i not in used[k]]
            if not free:
                continue
            i = int(rng.choice(free))
            used[k].add(i)
            if pids and rng.random() < 0.5:
                pid = int(rng.choice(pids))
                if k not in wm.mappoints[pid].observations:
                    wm.add_observation(pid, k, i)
                else:
                    used[k].discard(i)
            else:
                pids.append(
                    wm.insert_mappoint(rng.normal(size=3), k, i,
                                       wm.keyframes[k].descriptors[i])
                )
        wm.check_integrity()


class TestRepresentativeDescriptor:
    def _map_with_descs(self, descs):
        wm = WorldMap()
        kids = []
        for i, d in enumerate(descs):
            kf = make_kf(1, seed=100 + i)
            kf.descriptors[0] = d
            kids.append(wm.insert_keyframe(kf))
        pid = wm.insert_mappoint(np.array([0, 0, 5.0]), kids[0], 0, descs[0])
        for k in kids[1:]:
            wm.add_observation(pid, k, 0)
        return wm, pid

    def test_single_observation_returns_it(self):
        d = np.arange(32, dtype=np.uint8)
        wm, pid = self._map_with_descs([d])
        assert np.array_equal(wm.representative_descriptor(pid), d)

    def test_majority_of_identical_pair(self):
        a = np.zeros(32, np.uint8)
        b = np.full(32, 255, np.uint8)
        wm, pid = self._map_with_descs([a, a, b])
        assert np.array_equal(wm.representative_descriptor(pid), a)

    def test_matches_exhaustive_median_oracle(self):
        rng = np.random.default_rng(3)
        descs = list(rng.integers(0, 256, size=(7, 32), dtype=np.uint8))
        wm, pid = self._map_with_descs(descs)
        got = wm.representative_descriptor(pid)
        # oracle: exhaustive median-of-distances minimizer, first wins ties
        meds = [
            np.median([hamming(a, b) for b in descs]) for a in descs
        ]
        want = descs[int(np.argmin(meds))]
        assert np.array_equal(got, want)

    def test_no_observations_raises(self):
        wm = WorldMap()
        kid = wm.insert_keyframe(make_kf(1))
        pid = wm.insert_mappoint(np.array([0, 0, 5.0]), kid, 0,
                                 wm.keyframes[kid].descriptors[0])
        wm.mappoints[pid].observations.clear()
        with pytest.raises(NoObservations):
            wm.representative_descriptor(pid)


def chain_map():
    """Three keyframes where A-B and B-C share 20 points but A-C share none."""
    wm = WorldMap()
    a = wm.insert_keyframe(make_kf(40, seed=1))
    b_kf = make_kf(40, seed=2)
    ab = seed_points(wm, a, 20, seed=10)
    b_kf.point_ids[:20] = ab
    b = wm.insert_keyframe(b_kf)
    bc = seed_points(wm, b, 20, seed=11)
    # b's points 0..19 are shared with a; its own new points sit at 0..19 too,
    # so give c the b-created points
    c_kf = make_kf(40, seed=3)
    c_kf.point_ids[:20] = bc
    c = wm.insert_keyframe(c_kf)
    return wm, a, b, c


class TestLocalMap:
    def test_isolated_keyframe(self):
        wm = WorldMap()
        a = wm.insert_keyframe(make_kf(10))
        pids = seed_points(wm, a, 5)
        kfs, pts = wm.local_map([a])
        assert kfs == {a}
        assert pts == set(pids)

    def test_chain_seed_reaches_neighbors_only(self):
        wm, a, b, c = chain_map()
        kfs, pts = wm.local_map([a])
        assert kfs == {a, b}
        assert pts == wm.keyframes[a].observed_points() | wm.keyframes[b].observed_points()

    def test_empty_seeds(self):
        wm = WorldMap()
        wm.insert_keyframe(make_kf(5))
        assert wm.local_map([]) == (set(), set())


class TestRemoval:
    def test_edge_decrements_and_drops(self):
        wm = WorldMap(covisibility_threshold=15)
        a = wm.insert_keyframe(make_kf(30, seed=1))
        pids = seed_points(wm, a, 15)
        b_kf = make_kf(30, seed=2)
        b_kf.point_ids[:15] = pids
        b = wm.insert_keyframe(b_kf)
        assert wm.keyframes[a].covisible[b] == 15
        for pid in pids[:-1]:
            wm.remove_mappoint(pid)
        assert wm.keyframes[a].covisible[b] == 1
        wm.remove_mappoint(pids[-1])
        assert b not in wm.keyframes[a].covisible
        assert a not in wm.keyframes[b].covisible
        wm.check_integrity()

    def test_remove_then_requery_raises(self):
        wm = WorldMap()
        a = wm.insert_keyframe(make_kf(5))
        pid = seed_points(wm, a, 1)[0]
        wm.remove_mappoint(pid)
        with pytest.raises(UnknownMapPoint):
            wm.remove_mappoint(pid)
        wm.remove_keyframe(a)
        with pytest.raises(UnknownKeyFrame):
            wm.remove_keyframe(a)

    def test_remove_keyframe_cascades(self):
        wm, a, b, c = chain_map()
        only_a = [p for p in wm.keyframes[a].observed_points()
                  if list(wm.mappoints[p].observations) == [a]]
        wm.remove_keyframe(a)
        for p in only_a:
            assert p not in wm.mappoints
        for p in wm.mappoints.values():
            assert a not in p.observations
        wm.check_integrity()

    def test_ids_never_reused(self):
        wm = WorldMap()
        a = wm.insert_keyframe(make_kf(5))
        pid = seed_points(wm, a, 1)[0]
        wm.remove_mappoint(pid)
        b = wm.insert_keyframe(make_kf(5))
        pid2 = seed_points(wm, b, 1)[0]
        assert b > a and pid2 > pid


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_operation_sequences_keep_integrity(seed):
    rng = np.random.default_rng(seed)
    wm = WorldMap(covisibility_threshold=3)
    pids = []
    for step in range(40):
        op = rng.random()
        kf_ids = list(wm.keyframes)
        if op < 0.35 or not kf_ids:
            kf = make_kf(12, seed=int(rng.integers(1 << 30)))
            if pids and rng.random() < 0.7:
                chosen = rng.choice(pids, size=min(len(pids), 8), replace=False)
                live = [p for p in chosen if p in wm.mappoints][:12]
                kf.point_ids[: len(live)] = live
            wm.insert_keyframe(kf)
        elif op < 0.65:
            k = int(rng.choice(kf_ids))
            kf = wm.keyframes[k]
            free = np.nonzero(kf.point_ids < 0)[0]
            if len(free):
                i = int(rng.choice(free))
                pids.append(
                    wm.insert_mappoint(rng.normal(size=3), k, i, kf.descriptors[i])
                )
        elif op < 0.85:
            live = [p for p in pids if p in wm.mappoints]
            if live:
                wm.remove_mappoint(int(rng.choice(live)))
        else:
            if len(kf_ids) > 1:
                wm.remove_keyframe(int(rng.choice(kf_ids)))
    wm.check_integrity()
