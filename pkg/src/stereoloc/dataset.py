"""Stereo sequence sources: dataset readers and a synthetic world renderer.

Two on-disk layouts are supported: the odometry-benchmark layout
(``image_0``/``image_1`` with zero-padded 6-digit grayscale frames,
``times.txt``, ``calib.txt`` with P0/P1 projection rows) and a plain
stereo-folders layout (``left``/``right`` directories plus
``timestamps.txt``; calibration comes from the settings file).

The synthetic world renders textured squares pinned to the walls of a
circular corridor and views them from a camera driving the loop. Rendering
uses exact per-square homographies, so the imagery is geometrically
consistent: features on a square correspond to fixed world points across
every view, which makes the generator usable as ground truth for
end-to-end tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraIntrinsics, Pose, StereoRig, compose


class DatasetError(ValueError):
    pass


@dataclass
class StereoSequence:
    """Ordered stereo frames with a shared calibration."""

    rig: StereoRig
    timestamps: np.ndarray  # (N,) seconds, strictly increasing

    def __len__(self):
        return len(self.timestamps)

    def frame(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass
class ImageFolderSequence(StereoSequence):
    left_paths: list[Path] = field(default_factory=list)
    right_paths: list[Path] = field(default_factory=list)

    def frame(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        pair = []
        for path in (self.left_paths[index], self.right_paths[index]):
            img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise DatasetError(f"unreadable image: {path}")
            pair.append(img)
        return pair[0], pair[1]


def _check_timestamps(ts: np.ndarray, what: str) -> np.ndarray:
    if len(ts) == 0:
        raise DatasetError(f"{what}: no timestamps")
    if np.any(np.diff(ts) <= 0):
        raise DatasetError(f"{what}: timestamps must be strictly increasing")
    return ts


def load_kitti(root) -> ImageFolderSequence:
    """Odometry-benchmark layout reader."""
    root = Path(root)
    calib = root / "calib.txt"
    if not calib.exists():
        raise DatasetError(f"missing calibration file: {calib}")
    rows = {}
    for line in calib.read_text().splitlines():
        if ":" in line:
            key, vals = line.split(":", 1)
            rows[key.strip()] = np.array([float(v) for v in vals.split()])
    for key in ("P0", "P1"):
        if key not in rows or len(rows[key]) != 12:
            raise DatasetError(f"calibration is missing projection row {key}")
    P0 = rows["P0"].reshape(3, 4)
    P1 = rows["P1"].reshape(3, 4)
    fx, fy, cx, cy = P0[0, 0], P0[1, 1], P0[0, 2], P0[1, 2]
    baseline = -P1[0, 3] / P1[0, 0]
    if baseline <= 0:
        raise DatasetError("calibration implies a non-positive baseline")

    times = root / "times.txt"
    if not times.exists():
        raise DatasetError(f"missing timestamp file: {times}")
    ts = _check_timestamps(
        np.array([float(v) for v in times.read_text().split()]), str(times)
    )
    left = sorted((root / "image_0").glob("*.png"))
    right = sorted((root / "image_1").glob("*.png"))
    if len(left) != len(right):
        raise DatasetError(
            f"left/right frame counts differ: {len(left)} vs {len(right)}"
        )
    if len(left) != len(ts):
        raise DatasetError(
            f"{len(ts)} timestamps but {len(left)} stereo frames"
        )
    probe = cv2.imread(str(left[0]), cv2.IMREAD_GRAYSCALE)
    if probe is None:
        raise DatasetError(f"unreadable image: {left[0]}")
    h, w = probe.shape
    rig = StereoRig(CameraIntrinsics(fx, fy, cx, cy, w, h), baseline)
    return ImageFolderSequence(rig=rig, timestamps=ts,
                               left_paths=left, right_paths=right)


def load_folders(root, rig: StereoRig) -> ImageFolderSequence:
    """Plain left/right folders with a timestamps.txt file."""
    root = Path(root)
    left = sorted(p for p in (root / "left").glob("*") if p.is_file())
    right = sorted(p for p in (root / "right").glob("*") if p.is_file())
    if not left or len(left) != len(right):
        raise DatasetError(
            f"left/right frame counts differ or empty: {len(left)} vs {len(right)}"
        )
    times = root / "timestamps.txt"
    if not times.exists():
        raise DatasetError(f"missing timestamp file: {times}")
    ts = _check_timestamps(
        np.array([float(v) for v in times.read_text().split()]), str(times)
    )
    if len(ts) != len(left):
        raise DatasetError(f"{len(ts)} timestamps but {len(left)} stereo frames")
    return ImageFolderSequence(rig=rig, timestamps=ts,
                               left_paths=left, right_paths=right)


# -- synthetic world --------------------------------------------------------


@dataclass
class _Square:
    center: np.ndarray  # (3,) world
    u_axis: np.ndarray  # (3,) world, length = half width
    v_axis: np.ndarray  # (3,) world, length = half height
    texture: np.ndarray  # (T, T) uint8

    def corners(self) -> np.ndarray:
        c, u, v = self.center, self.u_axis, self.v_axis
        return np.stack([c - u - v, c + u - v, c + u + v, c - u + v])


def _make_texture(rng: np.random.Generator, size: int = 24) -> np.ndarray:
    """High-contrast blocky texture: rich in corners at several scales."""
    coarse = rng.integers(30, 226, size=(size // 4, size // 4), dtype=np.uint8)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_NEAREST)


class SyntheticWorld:
    """Textured squares on the walls of a circular corridor.

    The camera drives a circle of ``radius`` meters between an inner and an
    outer wall; squares sit on both walls at several heights with radial
    normals. ``ground_truth_pose(s)`` gives the camera-to-world pose at arc
    parameter s in [0, 1).
    """

    def __init__(
        self,
        rig: StereoRig,
        radius: float = 20.0,
        inner_offset: float = 4.0,
        outer_offset: float = 4.0,
        spacing: float = 0.8,
        heights=(-1.5, 0.0, 1.5),
        square_half_size: float = 0.45,
        seed: int = 0,
    ):
        self.rig = rig
        self.radius = radius
        rng = np.random.default_rng(seed)
        self.squares: list[_Square] = []
        for wall_r, inward in ((radius + outer_offset, True),
                               (radius - inner_offset, False)):
            count = int(2 * np.pi * wall_r / spacing)
            for i in range(count):
                theta = 2 * np.pi * i / count
                radial = np.array([np.cos(theta), 0.0, np.sin(theta)])
                tangent = np.array([-np.sin(theta), 0.0, np.cos(theta)])
                for h in heights:
                    center = wall_r * radial + np.array([0.0, h, 0.0])
                    jitter = rng.normal(scale=0.15, size=3)
                    self.squares.append(_Square(
                        center=center + jitter,
                        u_axis=square_half_size * tangent,
                        v_axis=square_half_size * np.array([0.0, 1.0, 0.0]),
                        texture=_make_texture(rng),
                    ))

    def ground_truth_pose(self, s: float) -> Pose:
        """Camera-to-world pose at loop parameter s (fraction of the loop).

        The camera looks along the direction of travel, so the walls sweep
        past on both sides as on a road.
        """
        theta = 2 * np.pi * s
        pos = self.radius * np.array([np.cos(theta), 0.0, np.sin(theta)])
        forward = np.array([-np.sin(theta), 0.0, np.cos(theta)])  # camera z
        down = np.array([0.0, -1.0, 0.0])  # camera y (world y is up)
        right = np.cross(down, forward)  # camera x
        R_cw = np.stack([right, down, forward], axis=1)  # columns = camera axes
        return Pose.from_rt(R_cw, pos)

    def render(self, cam_to_world: Pose) -> tuple[np.ndarray, np.ndarray]:
        """Render the stereo pair seen from a camera-to-world pose."""
        from .geometry import inverse

        world_to_cam = inverse(cam_to_world)
        offset = Pose(np.array([1.0, 0, 0, 0]),
                      np.array([-self.rig.baseline, 0.0, 0.0]))
        left = self._render_view(world_to_cam)
        right = self._render_view(compose(offset, world_to_cam))
        return left, right

    def _render_view(self, world_to_cam: Pose) -> np.ndarray:
        k = self.rig.intrinsics
        canvas = np.full((k.height, k.width), 110, dtype=np.uint8)
        visible = []
        for sq in self.squares:
            cam_pts = world_to_cam.apply(sq.corners())
            if np.any(cam_pts[:, 2] < 0.5):
                continue
            uv = np.stack([
                k.fx * cam_pts[:, 0] / cam_pts[:, 2] + k.cx,
                k.fy * cam_pts[:, 1] / cam_pts[:, 2] + k.cy,
            ], axis=1)
            if (uv[:, 0].max() < 0 or uv[:, 0].min() > k.width
                    or uv[:, 1].max() < 0 or uv[:, 1].min() > k.height):
                continue
            visible.append((float(np.mean(cam_pts[:, 2])), uv, sq))
        # painter's algorithm: far squares first
        visible.sort(key=lambda item: -item[0])
        for _, uv, sq in visible:
            self._stamp(canvas, uv, sq.texture)
        return canvas

    @staticmethod
    def _stamp(canvas: np.ndarray, uv: np.ndarray, texture: np.ndarray) -> None:
        h, w = canvas.shape
        x0 = max(int(np.floor(uv[:, 0].min())), 0)
        y0 = max(int(np.floor(uv[:, 1].min())), 0)
        x1 = min(int(np.ceil(uv[:, 0].max())) + 1, w)
        y1 = min(int(np.ceil(uv[:, 1].max())) + 1, h)
        if x1 - x0 < 2 or y1 - y0 < 2:
            return
        t = texture.shape[0] - 1
        src = np.array([[0, 0], [t, 0], [t, t], [0, t]], dtype=np.float32)
        dst = (uv - [x0, y0]).astype(np.float32)
        H = cv2.getPerspectiveTransform(src, dst)
        roi = canvas[y0:y1, x0:x1]
        warped = cv2.warpPerspective(
            texture, H, (x1 - x0, y1 - y0),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
        )
        mask = cv2.warpPerspective(
            np.full_like(texture, 255), H, (x1 - x0, y1 - y0),
            flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
        )
        roi[mask > 0] = warped[mask > 0]


@dataclass
class SyntheticSequence(StereoSequence):
    """A rendered drive around the synthetic loop, with ground truth."""

    world: SyntheticWorld = None
    poses: list[Pose] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def create(
        rig: StereoRig,
        n_frames: int = 200,
        hz: float = 10.0,
        loop_fraction: float = 1.0,
        seed: int = 0,
        start: float = 0.0,
    ) -> "SyntheticSequence":
        world = SyntheticWorld(rig, seed=seed)
        fractions = start + loop_fraction * np.arange(n_frames) / n_frames
        poses = [world.ground_truth_pose(float(s)) for s in fractions]
        ts = np.arange(n_frames) / hz
        return SyntheticSequence(rig=rig, timestamps=ts, world=world, poses=poses)

    def frame(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        if index not in self._cache:
            self._cache[index] = self.world.render(self.poses[index])
        return self._cache[index]

    def ground_truth(self):
        return list(zip(self.timestamps.tolist(), self.poses))
