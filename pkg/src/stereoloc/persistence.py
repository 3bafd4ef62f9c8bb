"""Versioned binary serialization of the complete map state.

Layout (all integers little-endian, all floats IEEE-754 f64 little-endian):

    magic "VLMP" | version u16 | vocabulary fingerprint 32 bytes
    | keyframe count u32 | mappoint count u32
    | next keyframe id u64 | next mappoint id u64 | covisibility threshold u32
    | mappoint records (ascending id) | keyframe records (ascending id)
    | database marker u8 (1 = rebuild inverted index from stored BowVectors)
    | CRC-32 u32 of every preceding byte

Map point record:
    id u64 | position 3 f64 | normal 3 f64 | descriptor 32 bytes
    | min_dist f64 | max_dist f64
    | observation count u32 | per observation (ascending keyframe id):
      keyframe id u64, keypoint index u32

Keyframe record:
    id u64 | timestamp f64 | pose quaternion (w,x,y,z) 4 f64 | translation 3 f64
    | keypoint count u32 | per keypoint: x f64, y f64, octave i32,
      orientation f64, response f64
    | descriptors count*32 bytes | stereo depths count f64
    | point ids count i64 (-1 = none)
    | bow entry count u32 | per entry (ascending word): word u32, weight f64
    | feature-vector node count u32 | per node (ascending id): node u32,
      index count u32, indices u32 each
    | covisibility edge count u32 | per edge (ascending id):
      keyframe id u64, weight u32

Writes are atomic (temp file + rename); encoding is deterministic, so an
unchanged map always produces identical bytes.
"""
from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .features import Keypoint
from .geometry import Pose
from .vocabulary import KeyFrameDatabase
from .worldmap import KeyFrame, MapPoint, WorldMap

MAP_MAGIC = b"VLMP"
MAP_VERSION = 1
_U32_MAX = 0xFFFFFFFF


class IoFailure(OSError):
    pass


class SerializationOverflow(ValueError):
    pass


class BadMagic(ValueError):
    pass


class UnsupportedVersion(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


class VocabularyMismatch(ValueError):
    pass


class IntegrityViolation(ValueError):
    pass


def _check_u32(value: int, what: str) -> int:
    if value > _U32_MAX:
        raise SerializationOverflow(f"{what} {value} exceeds u32")
    return value


def _encode_mappoint(p: MapPoint) -> bytes:
    parts = [
        struct.pack("<Q", p.id),
        np.asarray(p.position, dtype="<f8").tobytes(),
        np.asarray(p.normal, dtype="<f8").tobytes(),
        np.asarray(p.descriptor, dtype=np.uint8).tobytes(),
        struct.pack("<ddI", p.min_dist, p.max_dist,
                    _check_u32(len(p.observations), "observation count")),
    ]
    for kf_id in sorted(p.observations):
        parts.append(struct.pack("<QI", kf_id, p.observations[kf_id]))
    return b"".join(parts)


def _encode_keyframe(kf: KeyFrame) -> bytes:
    n = _check_u32(len(kf.keypoints), "keypoint count")
    parts = [
        struct.pack("<Qd", kf.id, kf.timestamp),
        np.asarray(kf.pose.q, dtype="<f8").tobytes(),
        np.asarray(kf.pose.t, dtype="<f8").tobytes(),
        struct.pack("<I", n),
    ]
    for kp in kf.keypoints:
        parts.append(struct.pack("<ddidd", kp.x, kp.y, kp.octave,
                                 kp.orientation, kp.response))
    parts.append(np.asarray(kf.descriptors, dtype=np.uint8).tobytes())
    parts.append(np.asarray(kf.depths, dtype="<f8").tobytes())
    parts.append(np.asarray(kf.point_ids, dtype="<i8").tobytes())
    parts.append(struct.pack("<I", _check_u32(len(kf.bow), "bow size")))
    for word in sorted(kf.bow):
        parts.append(struct.pack("<Id", word, kf.bow[word]))
    parts.append(struct.pack("<I", _check_u32(len(kf.features_by_node), "node count")))
    for node in sorted(kf.features_by_node):
        idxs = kf.features_by_node[node]
        parts.append(struct.pack(f"<II{len(idxs)}I", node, len(idxs), *idxs))
    parts.append(struct.pack("<I", _check_u32(len(kf.covisible), "edge count")))
    for other in sorted(kf.covisible):
        parts.append(struct.pack("<QI", other, kf.covisible[other]))
    return b"".join(parts)


def encode_map(wm: WorldMap, vocab_fingerprint: bytes) -> bytes:
    if len(vocab_fingerprint) != 32:
        raise ValueError("vocabulary fingerprint must be 32 bytes")
    parts = [
        MAP_MAGIC,
        struct.pack("<H", MAP_VERSION),
        bytes(vocab_fingerprint),
        struct.pack(
            "<IIQQI",
            _check_u32(len(wm.keyframes), "keyframe count"),
            _check_u32(len(wm.mappoints), "mappoint count"),
            wm.next_keyframe_id,
            wm.next_mappoint_id,
            _check_u32(wm.covisibility_threshold, "covisibility threshold"),
        ),
    ]
    for pid in sorted(wm.mappoints):
        parts.append(_encode_mappoint(wm.mappoints[pid]))
    for kf_id in sorted(wm.keyframes):
        parts.append(_encode_keyframe(wm.keyframes[kf_id]))
    parts.append(struct.pack("<B", 1))  # database marker: rebuild from bows
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_map(wm: WorldMap, db: KeyFrameDatabase, vocab_fingerprint: bytes,
             path) -> int:
    """Atomically write the map file; returns bytes written.

    ``db`` is accepted for interface symmetry but not serialized: its
    inverted index is derivable from the stored BowVectors.
    """
    blob = encode_map(wm, vocab_fingerprint)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def unpack(self, fmt: str):
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def raw(self, n: int) -> bytes:
        out = self.blob[self.off:self.off + n]
        if len(out) != n:
            raise ChecksumMismatch("unexpected end of file")
        self.off += n
        return out

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.raw(8 * n), dtype="<f8").copy()


def decode_map(blob: bytes, vocab_fingerprint: bytes | None = None
               ) -> tuple[WorldMap, KeyFrameDatabase]:
    if len(blob) < 8 or blob[:4] != MAP_MAGIC:
        raise BadMagic("not a map file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ChecksumMismatch("map file checksum mismatch")
    r = _Reader(blob[:-4])
    r.raw(4)  # magic
    (version,) = r.unpack("<H")
    if version != MAP_VERSION:
        raise UnsupportedVersion(f"map format version {version}")
    fingerprint = r.raw(32)
    if vocab_fingerprint is not None and fingerprint != bytes(vocab_fingerprint):
        raise VocabularyMismatch(
            "map was saved under a different vocabulary"
        )
    n_kf, n_pts, next_kf, next_pt, covis = r.unpack("<IIQQI")
    wm = WorldMap(covisibility_threshold=covis)
    wm.next_keyframe_id = next_kf
    wm.next_mappoint_id = next_pt

    points = []
    for _ in range(n_pts):
        (pid,) = r.unpack("<Q")
        position = r.floats(3)
        normal = r.floats(3)
        descriptor = np.frombuffer(r.raw(32), dtype=np.uint8).copy()
        min_dist, max_dist, n_obs = r.unpack("<ddI")
        obs = {}
        for _ in range(n_obs):
            kf_id, idx = r.unpack("<QI")
            obs[kf_id] = idx
        points.append(MapPoint(id=pid, position=position, normal=normal,
                               descriptor=descriptor, observations=obs,
                               min_dist=min_dist, max_dist=max_dist))

    for _ in range(n_kf):
        kf_id, timestamp = r.unpack("<Qd")
        q = r.floats(4)
        t = r.floats(3)
        (n,) = r.unpack("<I")
        kps = []
        for _ in range(n):
            x, y, octave, orientation, response = r.unpack("<ddidd")
            kps.append(Keypoint(x=x, y=y, octave=octave,
                                orientation=orientation, response=response))
        descriptors = np.frombuffer(r.raw(32 * n), dtype=np.uint8).reshape(n, 32).copy()
        depths = r.floats(n)
        point_ids = np.frombuffer(r.raw(8 * n), dtype="<i8").copy()
        (n_bow,) = r.unpack("<I")
        bow = {}
        for _ in range(n_bow):
            word, weight = r.unpack("<Id")
            bow[word] = weight
        (n_nodes,) = r.unpack("<I")
        features_by_node = {}
        for _ in range(n_nodes):
            node, count = r.unpack("<II")
            features_by_node[node] = list(r.unpack(f"<{count}I"))
        (n_edges,) = r.unpack("<I")
        covisible = {}
        for _ in range(n_edges):
            other, weight = r.unpack("<QI")
            covisible[other] = weight
        wm.keyframes[kf_id] = KeyFrame(
            id=kf_id, timestamp=timestamp, pose=Pose(q, t), keypoints=kps,
            descriptors=descriptors, depths=depths, point_ids=point_ids,
            bow=bow, features_by_node=features_by_node, covisible=covisible,
        )

    for p in points:
        wm.mappoints[p.id] = p
    (marker,) = r.unpack("<B")
    if marker != 1:
        raise IntegrityViolation("unknown database marker")
    if r.off != len(r.blob):
        raise ChecksumMismatch("trailing bytes after database section")

    try:
        wm.check_integrity()
    except AssertionError as exc:
        raise IntegrityViolation(str(exc)) from None

    db = KeyFrameDatabase()
    for kf_id in sorted(wm.keyframes):
        db.insert(kf_id, wm.keyframes[kf_id].bow)
    return wm, db


def load_map(path, vocab_fingerprint: bytes | None = None
             ) -> tuple[WorldMap, KeyFrameDatabase]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_map(blob, vocab_fingerprint)
