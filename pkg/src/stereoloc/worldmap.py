"""Sparse world model: landmarks, keyframes, observations, covisibility.

The map is a pair of id-indexed collections (keyframes and map points) plus
a covisibility graph over keyframes. Edges appear once two keyframes share
at least ``covisibility_threshold`` points; after that the weight tracks the
exact shared count and the edge is dropped when it reaches zero. All
mutations cascade so referential integrity holds after every operation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import Keypoint, hamming_matrix
from .geometry import Pose

_DIST_FLOOR = 1e-9


class UnknownKeyFrame(KeyError):
    pass


class UnknownMapPoint(KeyError):
    pass


class NoObservations(ValueError):
    pass


@dataclass
class MapPoint:
    """A landmark: world position plus everything needed to re-find it."""

    id: int
    position: np.ndarray  # (3,) world meters
    normal: np.ndarray  # (3,) unit mean viewing direction
    descriptor: np.ndarray  # (32,) uint8 representative descriptor
    observations: dict[int, int] = field(default_factory=dict)  # kf id -> kp index
    min_dist: float = _DIST_FLOOR
    max_dist: float = _DIST_FLOOR
    # Session-only tracking statistics (not serialized): the keyframe that
    # created the point and how often it was predicted visible vs actually
    # matched as an inlier. Used by the culling policy in SLAM mode.
    created_kf: int = 0
    n_visible: int = 1
    n_tracked: int = 1


@dataclass
class KeyFrame:
    """A retained stereo frame with its features and graph edges.

    ``point_ids[i]`` is the map point observed by keypoint ``i`` (-1 when
    none); it mirrors MapPoint.observations in the other direction.
    """

    id: int
    timestamp: float
    pose: Pose  # world -> camera
    keypoints: list[Keypoint]
    descriptors: np.ndarray  # (N, 32) uint8
    depths: np.ndarray  # (N,) meters, <= 0 when no stereo depth
    point_ids: np.ndarray = field(default=None)  # (N,) int64, -1 = unassociated
    bow: dict[int, float] = field(default_factory=dict)
    features_by_node: dict[int, list[int]] = field(default_factory=dict)
    covisible: dict[int, int] = field(default_factory=dict)  # kf id -> shared count

    def __post_init__(self):
        n = len(self.keypoints)
        if len(self.descriptors) != n or len(self.depths) != n:
            raise ValueError("keypoints, descriptors and depths must align")
        if self.point_ids is None:
            self.point_ids = np.full(n, -1, dtype=np.int64)
        elif len(self.point_ids) != n:
            raise ValueError("point_ids must align with keypoints")

    def center(self) -> np.ndarray:
        return self.pose.center()

    def viewing_direction(self) -> np.ndarray:
        """Optical axis of the camera in world coordinates."""
        return self.pose.rotation_matrix().T @ np.array([0.0, 0.0, 1.0])

    def observed_points(self) -> set[int]:
        return set(int(i) for i in self.point_ids[self.point_ids >= 0])


class WorldMap:
    """Mutable map guarded by a readers-writer contract.

    Readers (tracking) may share the map; a writer (mapping) must have it to
    itself for each whole operation below. In localization mode the map is
    read-only after load, so no locking is needed there.
    """

    def __init__(self, covisibility_threshold: int = 15):
        self.keyframes: dict[int, KeyFrame] = {}
        self.mappoints: dict[int, MapPoint] = {}
        self.next_keyframe_id = 0
        self.next_mappoint_id = 0
        self.covisibility_threshold = int(covisibility_threshold)

    # -- keyframes ---------------------------------------------------------

    def insert_keyframe(self, kf: KeyFrame) -> int:
        """Register a keyframe; assigns its id and wires up covisibility.

        Any keypoints already associated to map points (``point_ids`` >= 0)
        become observations of the existing points.
        """
        kf.id = self.next_keyframe_id
        self.next_keyframe_id += 1
        pending = [
            (i, int(pid)) for i, pid in enumerate(kf.point_ids) if pid >= 0
        ]
        kf.point_ids = np.full(len(kf.keypoints), -1, dtype=np.int64)
        kf.covisible = {}
        self.keyframes[kf.id] = kf
        for i, pid in pending:
            self.add_observation(pid, kf.id, i)
        return kf.id

    def remove_keyframe(self, kf_id: int) -> None:
        kf = self._keyframe(kf_id)
        for pid in list(kf.observed_points()):
            point = self.mappoints[pid]
            self._remove_observation(point, kf_id)
            if not point.observations:
                self.remove_mappoint(pid)
        for other in list(kf.covisible):
            self.keyframes[other].covisible.pop(kf_id, None)
        del self.keyframes[kf_id]

    # -- map points --------------------------------------------------------

    def insert_mappoint(
        self,
        position: np.ndarray,
        kf_id: int,
        kp_index: int,
        descriptor: np.ndarray,
        scale_factor: float = 1.2,
        levels: int = 8,
    ) -> int:
        """Create a landmark from its first observation.

        The scale-invariance range [min_dist, max_dist] comes from the
        observation distance and the keypoint's pyramid octave.
        """
        kf = self._keyframe(kf_id)
        position = np.asarray(position, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(position)):
            raise ValueError("non-finite map point position")
        ray = position - kf.center()
        norm = float(np.linalg.norm(ray))
        normal = ray / norm if norm > 0 else kf.viewing_direction()
        octave = kf.keypoints[kp_index].octave
        dist = max(norm, _DIST_FLOOR)
        max_dist = dist * scale_factor ** octave
        min_dist = max(dist * scale_factor ** (octave - levels + 1), _DIST_FLOOR)
        point = MapPoint(
            id=self.next_mappoint_id,
            position=position,
            normal=normal,
            descriptor=np.array(descriptor, dtype=np.uint8).reshape(32),
            min_dist=min_dist,
            max_dist=max_dist,
            created_kf=kf_id,
        )
        self.next_mappoint_id += 1
        self.mappoints[point.id] = point
        self.add_observation(point.id, kf_id, kp_index)
        return point.id

    def remove_mappoint(self, point_id: int) -> None:
        point = self._mappoint(point_id)
        for kf_id in list(point.observations):
            self._remove_observation(point, kf_id)
        del self.mappoints[point_id]

    def add_observation(self, point_id: int, kf_id: int, kp_index: int) -> None:
        """Record that keyframe ``kf_id`` sees the point at keypoint index."""
        point = self._mappoint(point_id)
        kf = self._keyframe(kf_id)
        if kf_id in point.observations:
            return
        point.observations[kf_id] = int(kp_index)
        kf.point_ids[kp_index] = point_id
        for other_id in point.observations:
            if other_id == kf_id:
                continue
            other = self.keyframes[other_id]
            if other_id in kf.covisible:
                kf.covisible[other_id] += 1
                other.covisible[kf_id] += 1
            else:
                shared = len(kf.observed_points() & other.observed_points())
                if shared >= self.covisibility_threshold:
                    kf.covisible[other_id] = shared
                    other.covisible[kf_id] = shared

    def _remove_observation(self, point: MapPoint, kf_id: int) -> None:
        kp_index = point.observations.pop(kf_id)
        kf = self.keyframes[kf_id]
        kf.point_ids[kp_index] = -1
        for other_id in point.observations:
            other = self.keyframes[other_id]
            if other_id in kf.covisible:
                kf.covisible[other_id] -= 1
                other.covisible[kf_id] -= 1
                if kf.covisible[other_id] <= 0:
                    del kf.covisible[other_id]
                    del other.covisible[kf_id]

    # -- queries -----------------------------------------------------------

    def representative_descriptor(self, point_id: int) -> np.ndarray:
        """The observed descriptor minimizing median Hamming distance to the
        others; ties break toward the lowest observing keyframe id."""
        point = self._mappoint(point_id)
        if not point.observations:
            raise NoObservations(f"map point {point_id} has no observations")
        kf_ids = sorted(point.observations)
        descs = np.stack(
            [self.keyframes[k].descriptors[point.observations[k]] for k in kf_ids]
        )
        if len(descs) == 1:
            return descs[0].copy()
        dist = hamming_matrix(descs, descs).astype(np.float64)
        medians = np.median(dist, axis=1)
        return descs[int(np.argmin(medians))].copy()

    def local_map(self, seed_ids) -> tuple[set[int], set[int]]:
        """Seeds plus their strongest covisibility neighbors, with the union
        of map points those keyframes observe."""
        kf_set: set[int] = set()
        for sid in seed_ids:
            kf = self._keyframe(sid)
            kf_set.add(sid)
            top = sorted(kf.covisible.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
            kf_set.update(k for k, _ in top)
        points: set[int] = set()
        for kf_id in kf_set:
            points |= self.keyframes[kf_id].observed_points()
        return kf_set, points

    def update_point_stats(
        self, point_id: int, scale_factor: float = 1.2, levels: int = 8
    ) -> None:
        """Refresh a point's normal, distance range and descriptor after its
        observation set changed."""
        point = self._mappoint(point_id)
        if not point.observations:
            raise NoObservations(f"map point {point_id} has no observations")
        rays = []
        for kf_id in sorted(point.observations):
            ray = point.position - self.keyframes[kf_id].center()
            n = float(np.linalg.norm(ray))
            if n > 0:
                rays.append(ray / n)
        if rays:
            mean = np.mean(rays, axis=0)
            n = float(np.linalg.norm(mean))
            if n > 0:
                point.normal = mean / n
        ref_id = min(point.observations)
        ref = self.keyframes[ref_id]
        dist = max(
            float(np.linalg.norm(point.position - ref.center())), _DIST_FLOOR
        )
        octave = ref.keypoints[point.observations[ref_id]].octave
        point.max_dist = dist * scale_factor ** octave
        point.min_dist = max(dist * scale_factor ** (octave - levels + 1), _DIST_FLOOR)
        point.descriptor = self.representative_descriptor(point_id)

    def check_integrity(self) -> None:
        """Raise AssertionError when cross-references or covisibility
        weights disagree with a brute-force recount."""
        for pid, point in self.mappoints.items():
            assert point.observations, f"point {pid} retained without observations"
            for kf_id, idx in point.observations.items():
                kf = self.keyframes.get(kf_id)
                assert kf is not None, f"point {pid} observes missing keyframe {kf_id}"
                assert kf.point_ids[idx] == pid, f"back-reference broken for point {pid}"
        for kf_id, kf in self.keyframes.items():
            for idx, pid in enumerate(kf.point_ids):
                if pid >= 0:
                    point = self.mappoints.get(int(pid))
                    assert point is not None, f"keyframe {kf_id} references missing point {pid}"
                    assert point.observations.get(kf_id) == idx
            for other_id, weight in kf.covisible.items():
                other = self.keyframes.get(other_id)
                assert other is not None
                assert other.covisible.get(kf_id) == weight, "asymmetric covisibility"
                actual = len(kf.observed_points() & other.observed_points())
                assert actual == weight, (
                    f"covisibility weight {weight} != shared count {actual}"
                )

    # -- internal ----------------------------------------------------------

    def _keyframe(self, kf_id: int) -> KeyFrame:
        try:
            return self.keyframes[kf_id]
        except KeyError:
            raise UnknownKeyFrame(kf_id) from None

    def _mappoint(self, point_id: int) -> MapPoint:
        try:
            return self.mappoints[point_id]
        except KeyError:
            raise UnknownMapPoint(point_id) from None
