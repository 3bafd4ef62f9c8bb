"""Multi-scale oriented binary features: detection, description, matching.

Detection is a contiguous-arc segment test on a 16-pixel circle, with a
quad-tree pass that spreads keypoints over the image. Descriptors are 256
pairwise intensity comparisons on a fixed, seeded point-pair pattern rotated
by the keypoint orientation (see brief_pattern). Everything is deterministic:
the same image and parameters produce bit-identical output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .brief_pattern import PAIRS
from .geometry import StereoRig

PATCH_RADIUS = 15
BORDER = 16  # keeps the 31x31 patch (plus rotation rounding) inside the image

# (x, y) offsets of the 16-pixel Bresenham circle of radius 3.
_CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int32,
)
_ARC = 9  # minimum contiguous run length

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _build_arc_lut() -> np.ndarray:
    """For every 16-bit circle mask: does it contain a circular run of
    >= _ARC consecutive set bits?"""
    v = np.arange(1 << 16, dtype=np.uint32)
    bits = ((v[:, None] >> np.arange(16)) & 1).astype(np.uint8)
    ext = np.concatenate([bits, bits[:, : _ARC - 1]], axis=1)
    cs = np.cumsum(ext, axis=1, dtype=np.uint8)
    win = cs[:, _ARC - 1:_ARC - 1 + 16].copy()
    win[:, 1:] -= cs[:, :15]
    return (win == _ARC).any(axis=1)


_ARC_LUT = _build_arc_lut()


class EmptyImage(ValueError):
    pass


class PatchOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: float  # level-0 pixels
    y: float
    octave: int
    orientation: float  # radians in [0, 2*pi)
    response: float


@dataclass(frozen=True)
class StereoObservation:
    index: int  # left keypoint index
    disparity: float  # pixels, > 0
    depth: float  # meters


@dataclass
class ImagePyramid:
    levels: list[np.ndarray]
    scale_factor: float
    blurred: list[np.ndarray] = field(default_factory=list)

    def scale(self, octave: int) -> float:
        return self.scale_factor ** octave


def build_pyramid(image: np.ndarray, levels: int, scale_factor: float) -> ImagePyramid:
    if image is None or image.size == 0:
        raise EmptyImage("empty input image")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if scale_factor <= 1.0:
        raise ValueError("scale_factor must be > 1")
    img = np.ascontiguousarray(image)
    if img.dtype != np.uint8:
        img = np.clip(img, 0, 255).astype(np.uint8)
    h0, w0 = img.shape
    out = [img]
    for i in range(1, levels):
        s = scale_factor ** i
        w, h = int(round(w0 / s)), int(round(h0 / s))
        out.append(cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR))
    blurred = [cv2.GaussianBlur(lv, (7, 7), 2.0) for lv in out]
    return ImagePyramid(levels=out, scale_factor=float(scale_factor), blurred=blurred)


def _segment_responses(img: np.ndarray, thresholds) -> list[np.ndarray]:
    """Corner response maps (0 where not a corner), one per threshold.

    A pixel is a corner when at least 9 contiguous circle pixels are all
    brighter than center + threshold or all darker than center - threshold.
    The response is the sum of absolute circle differences.
    """
    h, w = img.shape
    if h <= 6 or w <= 6:
        return [np.zeros((h, w), dtype=np.int32) for _ in thresholds]
    c = img[3:h - 3, 3:w - 3].astype(np.int16)
    diffs = np.empty((16, h - 6, w - 6), dtype=np.int16)
    for i, (ox, oy) in enumerate(_CIRCLE):
        diffs[i] = img[3 + oy:h - 3 + oy, 3 + ox:w - 3 + ox].astype(np.int16) - c
    strength = np.abs(diffs.astype(np.int32)).sum(axis=0)
    out = []
    for threshold in thresholds:
        corner = _has_arc(diffs > threshold) | _has_arc(diffs < -threshold)
        resp = np.zeros((h, w), dtype=np.int32)
        resp[3:h - 3, 3:w - 3] = np.where(corner, strength, 0)
        out.append(resp)
    return out


def _segment_test(img: np.ndarray, threshold: int) -> np.ndarray:
    return _segment_responses(img, (threshold,))[0]


def _has_arc(mask: np.ndarray) -> np.ndarray:
    """True where a circular run of >= _ARC consecutive set bits exists."""
    packed = np.zeros(mask.shape[1:], dtype=np.uint16)
    for i in range(16):
        packed |= mask[i].astype(np.uint16) << i
    return _ARC_LUT[packed]


def _nms_strict(resp: np.ndarray) -> np.ndarray:
    """3x3 non-maximum suppression; plateau ties go to the first pixel in
    raster order (earlier neighbors compared strictly)."""
    h, w = resp.shape
    keep = resp > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            shifted = np.zeros_like(resp)
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys_src = slice(max(0, -dy), h + min(0, -dy))
            xs_src = slice(max(0, -dx), w + min(0, -dx))
            shifted[ys, xs] = resp[ys_src, xs_src]
            # shifted[y, x] = resp[y - dy, x - dx], so the neighbor is earlier
            # in raster order when dy > 0 (or dy == 0 and dx > 0)
            earlier = (dy > 0) or (dy == 0 and dx > 0)
            if earlier:
                keep &= resp > shifted
            else:
                keep &= resp >= shifted
    return keep


def _detect_level(
    img: np.ndarray, threshold: int, fallback: int, cell: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate corners on one level: (xs, ys, responses), border excluded."""
    resp_hi_raw, resp_lo = _segment_responses(img, (threshold, fallback))
    resp_hi = np.where(resp_hi_raw > 0, resp_lo, 0)
    h, w = img.shape
    border_mask = np.zeros_like(resp_hi, dtype=bool)
    border_mask[BORDER:h - BORDER, BORDER:w - BORDER] = True

    picked = _nms_strict(np.where(border_mask, resp_hi, 0))
    # fall back to the low threshold in cells the high threshold left empty
    lo_only = _nms_strict(np.where(border_mask, resp_lo, 0)) & ~picked
    ny, nx = (h + cell - 1) // cell, (w + cell - 1) // cell
    for cy in range(ny):
        for cx in range(nx):
            sl = (slice(cy * cell, (cy + 1) * cell), slice(cx * cell, (cx + 1) * cell))
            if not picked[sl].any() and lo_only[sl].any():
                picked[sl] |= lo_only[sl]
    ys, xs = np.nonzero(picked)
    return xs, ys, resp_lo[ys, xs].astype(np.float64)


def _quadtree(xs, ys, rs, width, height, quota):
    """Spread candidates spatially; keep the strongest per final cell."""
    if len(xs) == 0 or quota <= 0:
        return np.array([], dtype=int)
    idx = np.arange(len(xs))
    nodes = [(0.0, 0.0, float(width), float(height), idx)]
    final: list[np.ndarray] = []
    # Split whole rounds so spatial granularity stays uniform across the
    # image; the quota is checked at round boundaries only.
    while nodes and len(nodes) + len(final) < quota:
        current, nodes = nodes, []
        for (x0, y0, x1, y1, ids) in current:
            if len(ids) == 1:
                final.append(ids)
                continue
            mx, my = (x0 + x1) / 2, (y0 + y1) / 2
            for (ax0, ay0, ax1, ay1) in (
                (x0, y0, mx, my), (mx, y0, x1, my), (x0, my, mx, y1), (mx, my, x1, y1),
            ):
                sel = ids[
                    (xs[ids] >= ax0) & (xs[ids] < ax1) & (ys[ids] >= ay0) & (ys[ids] < ay1)
                ]
                if len(sel) == 1:
                    final.append(sel)
                elif len(sel):
                    nodes.append((ax0, ay0, ax1, ay1, sel))
        if all(len(n[4]) == 1 for n in nodes):
            break
    for (_, _, _, _, ids) in nodes:
        final.append(ids)
    keep = []
    for ids in final:
        best = ids[np.lexsort((xs[ids], ys[ids], -rs[ids]))[0]]
        keep.append(best)
    return np.array(sorted(keep), dtype=int)


def detect(
    pyramid: ImagePyramid,
    target_count: int,
    threshold: int = 20,
    fallback: int = 7,
    cell: int = 32,
) -> list[Keypoint]:
    """Detect corners on every level, spread them spatially, and map the
    coordinates back to level-0 scale. Returns at most 1.1 * target_count
    keypoints sorted by (octave, -response, x, y)."""
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    sf = pyramid.scale_factor
    n_levels = len(pyramid.levels)
    inv_areas = np.array([1.0 / sf ** (2 * i) for i in range(n_levels)])
    quotas = np.maximum(1, np.round(target_count * inv_areas / inv_areas.sum()).astype(int))
    kps: list[Keypoint] = []
    for lvl, img in enumerate(pyramid.levels):
        xs, ys, rs = _detect_level(img, threshold, fallback, cell)
        if len(xs) == 0:
            continue
        sel = _quadtree(xs, ys, rs, img.shape[1], img.shape[0], int(quotas[lvl]))
        s = sf ** lvl
        for i in sel:
            angle = orient(img, int(xs[i]), int(ys[i]))
            kps.append(
                Keypoint(
                    x=float(xs[i]) * s,
                    y=float(ys[i]) * s,
                    octave=lvl,
                    orientation=angle,
                    response=float(rs[i]),
                )
            )
    kps.sort(key=lambda k: (k.octave, -k.response, k.x, k.y))
    cap = int(target_count * 1.1)
    if len(kps) > cap:
        kps = sorted(kps, key=lambda k: (-k.response, k.octave, k.x, k.y))[:cap]
        kps.sort(key=lambda k: (k.octave, -k.response, k.x, k.y))
    return kps


_OY, _OX = np.mgrid[-PATCH_RADIUS:PATCH_RADIUS + 1, -PATCH_RADIUS:PATCH_RADIUS + 1]
_DISK = (_OX ** 2 + _OY ** 2) <= PATCH_RADIUS ** 2
_MX = np.where(_DISK, _OX, 0).astype(np.float64)
_MY = np.where(_DISK, _OY, 0).astype(np.float64)


def orient(image: np.ndarray, x: int, y: int) -> float:
    """Intensity-centroid orientation of the 31x31 patch at (x, y).

    Returns atan2(m01, m10) normalized to [0, 2*pi); 0 when both moments
    vanish.
    """
    h, w = image.shape
    if not (PATCH_RADIUS <= x < w - PATCH_RADIUS and PATCH_RADIUS <= y < h - PATCH_RADIUS):
        raise PatchOutOfBounds(f"patch at ({x}, {y}) leaves the image")
    patch = image[y - PATCH_RADIUS:y + PATCH_RADIUS + 1, x - PATCH_RADIUS:x + PATCH_RADIUS + 1]
    patch = patch.astype(np.float64)
    m10 = float((patch * _MX).sum())
    m01 = float((patch * _MY).sum())
    if m10 == 0.0 and m01 == 0.0:
        return 0.0
    return float(np.arctan2(m01, m10) % (2 * np.pi))


def describe(image: np.ndarray, x: int, y: int, orientation: float) -> np.ndarray:
    """256-bit descriptor as a (32,) uint8 array."""
    return describe_many(
        image, np.array([x]), np.array([y]), np.array([orientation])
    )[0]


def describe_many(
    image: np.ndarray, xs: np.ndarray, ys: np.ndarray, angles: np.ndarray
) -> np.ndarray:
    h, w = image.shape
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if len(xs) == 0:
        return np.zeros((0, 32), dtype=np.uint8)
    if (
        (xs < PATCH_RADIUS).any()
        or (xs >= w - PATCH_RADIUS).any()
        or (ys < PATCH_RADIUS).any()
        or (ys >= h - PATCH_RADIUS).any()
    ):
        raise PatchOutOfBounds("descriptor patch leaves the image")
    c = np.cos(angles)
    s = np.sin(angles)
    pts = PAIRS.reshape(-1, 2).astype(np.float64)  # (512, 2) as (x, y)
    rx = np.rint(c[:, None] * pts[:, 0] - s[:, None] * pts[:, 1]).astype(np.int64)
    ry = np.rint(s[:, None] * pts[:, 0] + c[:, None] * pts[:, 1]).astype(np.int64)
    vals = image[ys[:, None] + ry, xs[:, None] + rx]  # (N, 512)
    bits = vals[:, 0::2] < vals[:, 1::2]  # (N, 256)
    return np.packbits(bits, axis=1)


@dataclass
class FrameFeatures:
    keypoints: list[Keypoint]
    descriptors: np.ndarray  # (N, 32) uint8, aligned with keypoints
    pyramid: ImagePyramid


def extract_features(
    image: np.ndarray,
    n_features: int,
    levels: int = 8,
    scale_factor: float = 1.2,
    threshold: int = 20,
    fallback: int = 7,
) -> FrameFeatures:
    """Detect keypoints and compute their descriptors on the right pyramid
    level (descriptors are sampled from the blurred level the keypoint was
    found on)."""
    pyr = build_pyramid(image, levels, scale_factor)
    kps = detect(pyr, n_features, threshold, fallback)
    desc = np.zeros((len(kps), 32), dtype=np.uint8)
    by_octave: dict[int, list[int]] = {}
    for i, k in enumerate(kps):
        by_octave.setdefault(k.octave, []).append(i)
    for octave, idxs in by_octave.items():
        s = pyr.scale(octave)
        xs = np.array([int(round(kps[i].x / s)) for i in idxs])
        ys = np.array([int(round(kps[i].y / s)) for i in idxs])
        angles = np.array([kps[i].orientation for i in idxs])
        desc[idxs] = describe_many(pyr.blurred[octave], xs, ys, angles)
    return FrameFeatures(keypoints=kps, descriptors=desc, pyramid=pyr)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) matrix of Hamming distances, chunked over rows."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1, 32)
    b = np.asarray(b, dtype=np.uint8).reshape(-1, 32)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.uint16)
    step = max(1, (1 << 24) // max(1, b.shape[0] * 32))
    for i in range(0, a.shape[0], step):
        x = np.bitwise_xor(a[i:i + step, None, :], b[None, :, :])
        out[i:i + step] = _POPCOUNT[x].sum(axis=2, dtype=np.uint16)
    return out


def match(
    query: np.ndarray,
    train: np.ndarray,
    max_dist: int = 50,
    ratio: float = 0.75,
) -> list[tuple[int, int, int]]:
    """Nearest-neighbor descriptor matching with a ratio test.

    Accepts a query/train pair iff the best distance is <= max_dist and
    strictly beats ratio * second-best. One-to-one on the train side: of two
    queries hitting the same train descriptor, the worse match is discarded.
    """
    if not (0 < ratio < 1):
        raise ValueError("ratio must be in (0, 1)")
    query = np.asarray(query, dtype=np.uint8).reshape(-1, 32)
    train = np.asarray(train, dtype=np.uint8).reshape(-1, 32)
    if len(query) == 0 or len(train) == 0:
        return []
    d = hamming_matrix(query, train)
    best_idx = d.argmin(axis=1)
    best = d[np.arange(len(query)), best_idx].astype(np.int64)
    if train.shape[0] > 1:
        part = np.partition(d, 1, axis=1)
        second = part[:, 1].astype(np.int64)
    else:
        second = np.full(len(query), 10 ** 9, dtype=np.int64)
    ok = (best <= max_dist) & (best < ratio * second)
    cands = sorted(
        ((int(best[i]), int(i), int(best_idx[i])) for i in np.nonzero(ok)[0]),
    )
    used_train: set[int] = set()
    out = []
    for dist, qi, ti in cands:
        if ti in used_train:
            continue
        used_train.add(ti)
        out.append((qi, ti, dist))
    out.sort()
    return out


def match_stereo(
    left_kps: list[Keypoint],
    left_desc: np.ndarray,
    right_kps: list[Keypoint],
    right_desc: np.ndarray,
    rig: StereoRig,
    left_image: np.ndarray,
    right_image: np.ndarray,
    max_dist: int = 50,
    ratio: float = 0.9,
    row_band: float = 2.0,
    min_depth: float = 0.3,
    min_disparity: float = 1.0,
) -> list[StereoObservation]:
    """Left-right correspondence on a rectified pair.

    Candidates sit within +-row_band rows of the left keypoint and at positive
    disparity. The best Hamming match within max_dist wins; disparity is then
    refined by parabolic interpolation of a 5x5 patch SAD over +-1 px.
    """
    if not left_kps or not right_kps:
        return []
    max_disp = rig.fb / min_depth
    r_y = np.array([k.y for k in right_kps])
    r_x = np.array([k.x for k in right_kps])
    order = np.argsort(r_y, kind="stable")
    r_y_sorted = r_y[order]
    out: list[StereoObservation] = []
    h, w = right_image.shape
    for li, kp in enumerate(left_kps):
        lo = np.searchsorted(r_y_sorted, kp.y - row_band, side="left")
        hi = np.searchsorted(r_y_sorted, kp.y + row_band, side="right")
        if lo >= hi:
            continue
        cand = order[lo:hi]
        disp = kp.x - r_x[cand]
        cand = cand[(disp > 0) & (disp <= max_disp)]
        if len(cand) == 0:
            continue
        d = hamming_matrix(left_desc[li:li + 1], right_desc[cand])[0].astype(np.int64)
        j = int(d.argmin())
        best = int(d[j])
        if best > max_dist:
            continue
        if len(d) > 1:
            second = int(np.partition(d, 1)[1])
            if not (best < ratio * second):
                continue
        ri = int(cand[j])
        disparity = _refine_disparity(
            left_image, right_image, kp.x, kp.y, r_x[ri], r_y[ri]
        )
        if disparity is None or disparity < min_disparity:
            continue
        out.append(StereoObservation(index=li, disparity=float(disparity), depth=rig.fb / float(disparity)))
    return out


def _refine_disparity(left, right, xl, yl, xr, yr, win: int = 2, search: int = 3):
    """Sub-pixel disparity via patch SAD around the matched right keypoint.

    Both patches are anchored on the integer pixel grid, so the result is
    independent of fractional keypoint coordinates (which are quantized for
    keypoints found on coarser pyramid levels). Returns None when the
    windows leave the image; falls back to the raw keypoint difference then
    happens at the caller via None handling.
    """
    h, w = right.shape
    ixl, iyl = int(round(xl)), int(round(yl))
    # Rectified pair: epipolar lines are rows, so the right patch sits on the
    # left keypoint's row even when the matched keypoint's row differs a bit.
    ixr, iyr = int(round(xr)), iyl
    reach = win + search
    if not (
        win <= ixl < left.shape[1] - win
        and win <= iyl < left.shape[0] - win
        and reach <= ixr < w - reach
        and win <= iyr < h - win
    ):
        d = xl - xr
        return float(d) if d > 0 else None
    lp = left[iyl - win:iyl + win + 1, ixl - win:ixl + win + 1].astype(np.int32)
    offs = list(range(-search, search + 1))
    sads = []
    for dx in offs:
        rp = right[iyr - win:iyr + win + 1, ixr + dx - win:ixr + dx + win + 1].astype(np.int32)
        sads.append(float(np.abs(lp - rp).sum()))
    j = int(np.argmin(sads))
    delta = 0.0
    if 0 < j < len(offs) - 1:
        s_m1, s_0, s_p1 = sads[j - 1], sads[j], sads[j + 1]
        denom = s_m1 - 2 * s_0 + s_p1
        if denom > 0:
            delta = max(-1.0, min(1.0, 0.5 * (s_m1 - s_p1) / denom))
    return float(ixl - (ixr + offs[j] + delta))
