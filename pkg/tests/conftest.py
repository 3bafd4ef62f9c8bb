import numpy as np
import pytest

import stereoloc.tracking as tr
import stereoloc.vocabulary as vb
from stereoloc.dataset import SyntheticSequence
from stereoloc.features import Keypoint
from stereoloc.geometry import CameraIntrinsics, Pose, StereoRig
from stereoloc.worldmap import KeyFrame, WorldMap


@pytest.fixture(scope="session")
def rig():
    return StereoRig(CameraIntrinsics(300.0, 300.0, 200.0, 150.0, 400, 300), 0.4)


@pytest.fixture(scope="session")
def settings():
    return tr.TrackerSettings()


@pytest.fixture(scope="session")
def seq(rig):
    """A short arc of the synthetic loop (frames rendered on demand)."""
    return SyntheticSequence.create(rig, n_frames=60, hz=10.0,
                                    loop_fraction=0.3, seed=0)


@pytest.fixture(scope="session")
def frames(seq, rig, settings):
    cache = {}

    def get(i):
        if i not in cache:
            left, right = seq.frame(i)
            cache[i] = tr.build_frame(left, right, rig,
                                      float(seq.timestamps[i]), settings)
        return cache[i]

    return get


@pytest.fixture(scope="session")
def vocab(frames):
    descs = np.vstack([frames(i).descriptors for i in range(3)])
    return vb.train(descs, k=5, L=3, seed=1)


def fabricate_frame(positions, descriptors, world_to_cam, k, timestamp=0.0,
                    vocab=None):
    """A noise-free frame observing the given world points exactly.

    Points projecting outside the image are skipped; depths carry the true
    camera-frame depth so stereo-derived logic works.
    """
    kps, descs, depths, pids = [], [], [], []
    for row, X in enumerate(positions):
        cam = world_to_cam.apply(X)
        if cam[2] <= 0.1:
            continue
        u = k.fx * cam[0] / cam[2] + k.cx
        v = k.fy * cam[1] / cam[2] + k.cy
        if not (0 <= u < k.width and 0 <= v < k.height):
            continue
        kps.append(Keypoint(x=float(u), y=float(v), octave=0,
                            orientation=0.0, response=50.0))
        descs.append(descriptors[row])
        depths.append(float(cam[2]))
        pids.append(row)
    frame = tr.Frame(
        timestamp=timestamp,
        keypoints=kps,
        descriptors=np.array(descs, dtype=np.uint8).reshape(-1, 32),
        depths=np.array(depths),
    )
    if vocab is not None:
        frame.compute_bow(vocab)
    return frame, pids


class PlantedWorld:
    """A map seeded from one fabricated keyframe at a known pose, together
    with the fabricated source frame (point_ids wired to the map)."""

    def __init__(self, rng, k, n_points=300, vocab=None, kf_pose=None):
        pose = kf_pose or Pose.identity()
        self.pose = pose
        self.positions = np.stack([
            rng.uniform(-5, 5, size=n_points),
            rng.uniform(-2.5, 2.5, size=n_points),
            rng.uniform(4.0, 12.0, size=n_points),
        ], axis=1)
        self.descriptors = rng.integers(0, 256, size=(n_points, 32),
                                        dtype=np.uint8)
        frame, rows = fabricate_frame(self.positions, self.descriptors, pose,
                                      k, vocab=vocab)
        self.rows = rows
        self.wm = WorldMap()
        kf = KeyFrame(
            id=-1, timestamp=0.0, pose=pose, keypoints=frame.keypoints,
            descriptors=frame.descriptors, depths=frame.depths,
            bow=dict(frame.bow),
            features_by_node={n: list(i)
                              for n, i in frame.features_by_node.items()},
        )
        self.kf_id = self.wm.insert_keyframe(kf)
        self.pids = [
            self.wm.insert_mappoint(self.positions[row], self.kf_id, idx,
                                    self.descriptors[row])
            for idx, row in enumerate(rows)
        ]
        frame.point_ids = np.array(self.pids, dtype=np.int64)
        self.frame = frame
        self.k = k
        self.vocab = vocab

    def fresh_frame(self, world_to_cam=None, timestamp=0.0, matched=False):
        """A new frame seeing the same points, optionally pre-associated."""
        frame, rows = fabricate_frame(self.positions, self.descriptors,
                                      world_to_cam or self.pose, self.k,
                                      timestamp=timestamp, vocab=self.vocab)
        row_to_pid = dict(zip(self.rows, self.pids))
        if matched:
            frame.point_ids = np.array(
                [row_to_pid.get(r, -1) for r in rows], dtype=np.int64)
        return frame


def pose_errors(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation, rotation) distance between two world-to-camera poses."""
    from stereoloc.geometry import relative

    d = relative(a, b)
    return float(np.linalg.norm(a.center() - b.center())), d.angle()
