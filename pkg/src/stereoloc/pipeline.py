"""Session orchestration: settings, operating mode, and playback.

A session either builds a map (SLAM mode) or localizes against a map
loaded at startup (localization-only mode); the mode is fixed for the
whole run by whether ``map.load`` is set — it is never toggled mid-run.
Playback replays recorded timestamps on a virtual timeline: in real-time
mode the tracker's processing time is charged against the schedule and
stale frames are dropped (latest frame wins, queue depth one); offline
every frame is delivered and runs are bit-reproducible.
"""
from __future__ import annotations

import dataclasses
import enum
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import FrameOutcome, TrajectoryRecord
from .geometry import CameraIntrinsics, StereoRig, inverse
from .mapping import (
    KeyframeDecisionInputs,
    create_keyframe,
    cull,
    need_new_keyframe,
    run_local_ba,
)
from .persistence import load_map, save_map
from .tracking import (
    Frame,
    InsufficientStereoPoints,
    TrackerSettings,
    TrackState,
    build_frame,
    initialize,
    track_frame,
)
from .vocabulary import KeyFrameDatabase, Vocabulary
from .worldmap import WorldMap


class InvalidConfig(ValueError):
    pass


class SystemMode(enum.Enum):
    SLAM = "slam"
    LOCALIZATION_ONLY = "localization-only"


_REQUIRED_KEYS = (
    "camera.fx", "camera.fy", "camera.cx", "camera.cy",
    "camera.width", "camera.height", "camera.baseline",
    "orb.features", "orb.levels", "orb.scale",
    "map.load", "map.path",
    "playback.speed_factor", "playback.real_time",
    "seeds.ransac",
)
_OPTIONAL_KEYS = ("vocab.path",)


def parse_settings_text(text: str) -> dict[str, str]:
    """Parse UTF-8 ``key=value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _parse_bool(value: str, key: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise InvalidConfig(f"{key}: expected a boolean, got {value!r}")


def _parse_num(value: str, key: str, cast):
    try:
        return cast(value)
    except ValueError:
        raise InvalidConfig(f"{key}: invalid number {value!r}") from None


@dataclass(frozen=True)
class SessionConfig:
    """Validated settings for one run."""

    rig: StereoRig
    tracker: TrackerSettings
    map_load: bool
    map_path: str
    speed_factor: float
    real_time: bool
    vocab_path: str | None = None

    def __post_init__(self):
        if self.speed_factor <= 0:
            raise InvalidConfig("playback.speed_factor must be > 0")
        if self.map_load and not self.map_path:
            raise InvalidConfig("map.load requires map.path")

    @staticmethod
    def from_text(text: str) -> "SessionConfig":
        values = parse_settings_text(text)
        unknown = sorted(set(values) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS))
        if unknown:
            raise InvalidConfig(f"unknown settings keys: {', '.join(unknown)}")
        missing = sorted(set(_REQUIRED_KEYS) - set(values))
        if missing:
            raise InvalidConfig(f"missing settings keys: {', '.join(missing)}")
        rig = StereoRig(
            CameraIntrinsics(
                fx=_parse_num(values["camera.fx"], "camera.fx", float),
                fy=_parse_num(values["camera.fy"], "camera.fy", float),
                cx=_parse_num(values["camera.cx"], "camera.cx", float),
                cy=_parse_num(values["camera.cy"], "camera.cy", float),
                width=_parse_num(values["camera.width"], "camera.width", int),
                height=_parse_num(values["camera.height"], "camera.height", int),
            ),
            baseline=_parse_num(values["camera.baseline"], "camera.baseline", float),
        )
        tracker = TrackerSettings(
            n_features=_parse_num(values["orb.features"], "orb.features", int),
            levels=_parse_num(values["orb.levels"], "orb.levels", int),
            scale_factor=_parse_num(values["orb.scale"], "orb.scale", float),
            ransac_seed=_parse_num(values["seeds.ransac"], "seeds.ransac", int),
        )
        return SessionConfig(
            rig=rig,
            tracker=tracker,
            map_load=_parse_bool(values["map.load"], "map.load"),
            map_path=values["map.path"],
            speed_factor=_parse_num(values["playback.speed_factor"],
                                    "playback.speed_factor", float),
            real_time=_parse_bool(values["playback.real_time"],
                                  "playback.real_time"),
            vocab_path=values.get("vocab.path") or None,
        )

    @staticmethod
    def from_file(path) -> "SessionConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InvalidConfig(f"cannot read settings file: {exc}") from exc
        return SessionConfig.from_text(text)


@dataclass(frozen=True)
class FrameSchedule:
    """Recorded timestamps and the sped-up timeline they play back on."""

    recorded: np.ndarray
    speed_factor: float = 1.0

    def __post_init__(self):
        recorded = np.asarray(self.recorded, dtype=np.float64)
        object.__setattr__(self, "recorded", recorded)
        if self.speed_factor <= 0:
            raise InvalidConfig("speed_factor must be > 0")
        if len(recorded) > 1 and not np.all(np.diff(recorded) > 0):
            raise InvalidConfig("timestamps must be strictly increasing")

    @property
    def effective(self) -> np.ndarray:
        return self.recorded / self.speed_factor

    def __len__(self):
        return len(self.recorded)


@dataclass
class RunStats:
    """Per-frame outcomes of one session; covers every scheduled frame."""

    outcomes: list[FrameOutcome] = field(default_factory=list)

    @property
    def n_tracked(self) -> int:
        return sum(1 for o in self.outcomes if o.tracked)

    @property
    def n_lost(self) -> int:
        return sum(1 for o in self.outcomes if not o.tracked and not o.dropped)

    @property
    def n_dropped(self) -> int:
        return sum(1 for o in self.outcomes if o.dropped)

    def as_dict(self) -> dict:
        return {
            "frames": len(self.outcomes),
            "tracked": self.n_tracked,
            "lost": self.n_lost,
            "dropped": self.n_dropped,
            "processing_times": [o.processing_time for o in self.outcomes],
        }


@dataclass
class Session:
    config: SessionConfig
    mode: SystemMode
    vocab: Vocabulary
    wm: WorldMap
    db: KeyFrameDatabase
    state: TrackState = field(default_factory=TrackState)
    settings: TrackerSettings = None

    def __post_init__(self):
        if self.settings is None:
            self.settings = dataclasses.replace(
                self.config.tracker,
                update_stats=self.mode is SystemMode.SLAM,
            )


def start_session(config: SessionConfig, vocab: Vocabulary) -> Session:
    """Initialize a run; loading a map selects localization-only mode.

    In localization-only mode the mapping stage is never started and the
    map stays read-only for the whole session.
    """
    if config.map_load:
        wm, db = load_map(config.map_path, vocab.fingerprint)
        mode = SystemMode.LOCALIZATION_ONLY
    else:
        wm, db = WorldMap(), KeyFrameDatabase()
        mode = SystemMode.SLAM
    return Session(config=config, mode=mode, vocab=vocab, wm=wm, db=db)


def playback(schedule: FrameSchedule, real_time: bool,
             handler) -> list[FrameOutcome]:
    """Deliver frames to ``handler(i) -> (tracked, processing_seconds)``.

    Offline (``real_time=False``) every frame is delivered in order. In
    real-time mode frames are released at their effective timestamps on a
    virtual timeline; while the handler is busy at most one frame waits,
    and a newer release evicts it as dropped. The virtual clock advances
    by the handler-reported processing time, which makes simulated delays
    (and therefore drop patterns) deterministic.
    """
    e = schedule.effective
    n = len(e)
    outcomes: list[FrameOutcome | None] = [None] * n
    if not real_time:
        for i in range(n):
            tracked, duration = handler(i)
            outcomes[i] = FrameOutcome(float(e[i]), tracked,
                                       processing_time=duration)
        return outcomes

    def deliver(i: int, start_time: float) -> float:
        tracked, duration = handler(i)
        outcomes[i] = FrameOutcome(float(e[i]), tracked,
                                   processing_time=duration)
        return start_time + duration

    busy_until = -math.inf
    queued: int | None = None
    for i in range(n):
        release = float(e[i])
        if queued is not None and busy_until <= release:
            busy_until = deliver(queued, busy_until)
            queued = None
        if busy_until <= release:
            busy_until = deliver(i, release)
        elif queued is None:
            queued = i
        else:
            outcomes[queued] = FrameOutcome(float(e[queued]), False,
                                            dropped=True)
            queued = i
    if queued is not None:
        deliver(queued, busy_until)
    return outcomes


def _keyframe_decision(frame: Frame, session: Session,
                       frames_since_kf: int) -> KeyframeDecisionInputs:
    settings = session.settings
    close_limit = settings.depth_factor * session.config.rig.baseline
    close = (frame.depths > 0) & (frame.depths < close_limit)
    matched = frame.point_ids >= 0
    ref = session.state.reference_kf
    if ref in session.wm.keyframes:
        ref_count = len(session.wm.keyframes[ref].observed_points())
    else:
        ref_count = max(int(matched.sum()), 1)
    return KeyframeDecisionInputs(
        frames_since_last_kf=frames_since_kf,
        tracked_points=int(matched.sum()),
        tracked_ratio_vs_reference=int(matched.sum()) / max(ref_count, 1),
        close_points_tracked=int((close & matched).sum()),
        close_points_available=int(close.sum()),
    )


def run(session: Session, dataset, frame_builder=None, simulate_delay=None
        ) -> tuple[TrajectoryRecord, RunStats]:
    """Play a dataset through the tracker; returns the trajectory (one
    camera-to-world pose per tracked frame, recorded timestamps) and the
    per-frame stats.

    In SLAM mode tracked frames feed the mapping stage (keyframe policy,
    landmark creation, local bundle adjustment, culling) and the map is
    saved to ``config.map_path`` when the stream ends; in localization-only
    mode the map is left untouched. ``frame_builder(i)`` may be supplied to
    reuse precomputed features; ``simulate_delay(i)`` substitutes a
    deterministic processing time for the measured one. Offline runs
    record a processing time of zero so outputs are bit-reproducible.
    """
    config = session.config
    rig = config.rig
    settings = session.settings
    schedule = FrameSchedule(np.asarray(dataset.timestamps, dtype=np.float64),
                             config.speed_factor)
    if frame_builder is None:
        def frame_builder(i):
            left, right = dataset.frame(i)
            return build_frame(left, right, rig,
                               float(dataset.timestamps[i]), settings)

    trajectory = TrajectoryRecord()
    mapping_state = {"frames_since_kf": 0}

    def handler(i: int) -> tuple[bool, float]:
        t0 = time.perf_counter()
        frame = frame_builder(i)
        recorded_pose = None
        if (session.mode is SystemMode.SLAM
                and session.state.status == TrackState.UNINITIALIZED):
            try:
                initialize(frame, session.wm, rig, session.vocab, settings)
                session.db.insert(0, session.wm.keyframes[0].bow)
                session.state.status = TrackState.TRACKING
                session.state.last_pose = frame.pose
                session.state.last_frame = frame
                session.state.reference_kf = 0
                recorded_pose = frame.pose
                tracked = True
            except InsufficientStereoPoints:
                tracked = False
        else:
            _, _, tracked = track_frame(frame, session.state, session.wm,
                                        session.db, session.vocab, rig,
                                        settings)
            recorded_pose = frame.pose
            if tracked and session.mode is SystemMode.SLAM:
                decision = _keyframe_decision(frame, session,
                                              mapping_state["frames_since_kf"])
                if need_new_keyframe(decision):
                    kf_id, _ = create_keyframe(frame, session.wm, rig,
                                               session.vocab, settings,
                                               db=session.db)
                    run_local_ba(session.wm, kf_id, rig, settings)
                    cull(session.wm)
                    session.state.reference_kf = kf_id
                    mapping_state["frames_since_kf"] = 0
                    # record the bundle-adjusted pose so the trajectory
                    # stays consistent with the map it describes
                    recorded_pose = session.wm.keyframes[kf_id].pose
                else:
                    mapping_state["frames_since_kf"] += 1
        if tracked:
            trajectory.append(float(dataset.timestamps[i]),
                              inverse(recorded_pose))
        if simulate_delay is not None:
            duration = float(simulate_delay(i))
        elif config.real_time:
            duration = time.perf_counter() - t0
        else:
            duration = 0.0
        return tracked, duration

    outcomes = playback(schedule, config.real_time, handler)
    stats = RunStats(outcomes=outcomes)
    if session.mode is SystemMode.SLAM and config.map_path:
        save_map(session.wm, session.db, session.vocab.fingerprint,
                 config.map_path)
    return trajectory, stats
