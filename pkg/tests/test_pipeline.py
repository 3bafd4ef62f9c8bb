"""Tests for session configuration, playback scheduling, and run modes.

Playback behavior is verified on a virtual timeline with handler-supplied
processing times, so drop patterns are deterministic; the analytic 50%
drop-rate expectation for a service time of twice the frame period comes
from the latest-frame-wins queueing recurrence evaluated by hand.
"""
import numpy as np
import pytest

import stereoloc.pipeline as pl
from stereoloc.persistence import IoFailure
from stereoloc.vocabulary import KeyFrameDatabase

SETTINGS_TEXT = """
# stereo rig
camera.fx = 300.0
camera.fy = 300.0
camera.cx = 200.0
camera.cy = 150.0
camera.width = 400
camera.height = 300
camera.baseline = 0.4

orb.features = 400
orb.levels = 4
orb.scale = 1.2

map.load = false
map.path = out/map.bin

playback.speed_factor = 1.0
playback.real_time = false

seeds.ransac = 7
"""


class TestSessionConfig:
    def test_full_settings_file(self):
        cfg = pl.SessionConfig.from_text(SETTINGS_TEXT)
        assert cfg.rig.intrinsics.fx == 300.0
        assert cfg.rig.baseline == 0.4
        assert cfg.tracker.n_features == 400
        assert cfg.tracker.ransac_seed == 7
        assert not cfg.map_load
        assert not cfg.real_time
        assert cfg.speed_factor == 1.0

    def test_unknown_key_rejected(self):
        text = SETTINGS_TEXT + "\norb.fetures = 500\n"
        with pytest.raises(pl.InvalidConfig, match="orb.fetures"):
            pl.SessionConfig.from_text(text)

    def test_missing_key_rejected(self):
        text = SETTINGS_TEXT.replace("camera.baseline = 0.4", "")
        with pytest.raises(pl.InvalidConfig, match="camera.baseline"):
            pl.SessionConfig.from_text(text)

    def test_malformed_line_rejected(self):
        with pytest.raises(pl.InvalidConfig, match="line 2"):
            pl.SessionConfig.from_text("# ok\nnonsense\n")

    def test_nonpositive_speed_factor_rejected(self):
        text = SETTINGS_TEXT.replace("playback.speed_factor = 1.0",
                                     "playback.speed_factor = 0")
        with pytest.raises(pl.InvalidConfig, match="speed_factor"):
            pl.SessionConfig.from_text(text)

    def test_map_load_requires_path(self):
        text = SETTINGS_TEXT.replace("map.load = false", "map.load = true")
        text = text.replace("map.path = out/map.bin", "map.path =")
        with pytest.raises(pl.InvalidConfig, match="map.path"):
            pl.SessionConfig.from_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(pl.InvalidConfig):
            pl.SessionConfig.from_file(tmp_path / "absent.cfg")


class TestFrameSchedule:
    def test_effective_timestamps_scaled_exactly(self):
        recorded = np.array([0.0, 0.1, 0.25, 0.31])
        sched = pl.FrameSchedule(recorded, speed_factor=4.0)
        assert np.array_equal(sched.effective, recorded / 4.0)
        assert np.array_equal(np.diff(sched.effective),
                              np.diff(recorded) / 4.0)

    def test_non_increasing_rejected(self):
        with pytest.raises(pl.InvalidConfig):
            pl.FrameSchedule(np.array([0.0, 0.2, 0.2]))


class TestPlayback:
    def test_offline_delivers_everything(self):
        sched = pl.FrameSchedule(np.arange(100) * 0.1)
        calls = []

        def handler(i):
            calls.append(i)
            return True, 100.0  # enormous processing time

        outcomes = pl.playback(sched, real_time=False, handler=handler)
        assert calls == list(range(100))
        assert sum(o.dropped for o in outcomes) == 0

    def test_double_period_service_drops_half(self):
        n = 200
        period = 0.1
        sched = pl.FrameSchedule(np.arange(n) * period)
        outcomes = pl.playback(sched, real_time=True,
                               handler=lambda i: (True, 2 * period))
        rate = sum(o.dropped for o in outcomes) / n
        assert abs(rate - 0.5) <= 0.05

    def test_fast_service_drops_nothing(self):
        sched = pl.FrameSchedule(np.arange(50) * 0.1)
        outcomes = pl.playback(sched, real_time=True,
                               handler=lambda i: (True, 0.05))
        assert sum(o.dropped for o in outcomes) == 0

    def test_conservation(self):
        rng = np.random.default_rng(5)
        sched = pl.FrameSchedule(np.cumsum(rng.uniform(0.05, 0.2, size=300)))
        outcomes = pl.playback(
            sched, real_time=True,
            handler=lambda i: (i % 3 != 0, float(rng.uniform(0.0, 0.3))))
        stats = pl.RunStats(outcomes=outcomes)
        assert stats.n_tracked + stats.n_lost + stats.n_dropped == 300
        assert all(o is not None for o in outcomes)

    def test_dropped_frames_never_reach_handler(self):
        period = 0.1
        sched = pl.FrameSchedule(np.arange(20) * period)
        seen = []

        def handler(i):
            seen.append(i)
            return True, 2 * period

        outcomes = pl.playback(sched, real_time=True, handler=handler)
        dropped = {i for i, o in enumerate(outcomes) if o.dropped}
        assert dropped
        assert dropped.isdisjoint(seen)
        assert sorted(seen) == seen  # ascending delivery order


class TestStartSession:
    def make_config(self, **overrides):
        base = dict(
            rig=pl.SessionConfig.from_text(SETTINGS_TEXT).rig,
            tracker=pl.SessionConfig.from_text(SETTINGS_TEXT).tracker,
            map_load=False, map_path="", speed_factor=1.0, real_time=False,
        )
        base.update(overrides)
        return pl.SessionConfig(**base)

    def test_slam_mode_starts_empty(self, vocab):
        session = pl.start_session(self.make_config(), vocab)
        assert session.mode is pl.SystemMode.SLAM
        assert not session.wm.keyframes
        assert session.settings.update_stats

    def test_loading_map_selects_localization(self, tmp_path, vocab, rig):
        from stereoloc.persistence import save_map
        from stereoloc.worldmap import WorldMap

        path = tmp_path / "map.bin"
        save_map(WorldMap(), KeyFrameDatabase(), vocab.fingerprint, path)
        session = pl.start_session(
            self.make_config(map_load=True, map_path=str(path)), vocab)
        assert session.mode is pl.SystemMode.LOCALIZATION_ONLY
        assert not session.settings.update_stats

    def test_missing_map_file_fails_startup(self, tmp_path, vocab):
        config = self.make_config(map_load=True,
                                  map_path=str(tmp_path / "none.bin"))
        with pytest.raises(IoFailure):
            pl.start_session(config, vocab)
