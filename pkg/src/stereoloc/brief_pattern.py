"""Fixed point-pair sampling table for the 256-bit binary descriptor.

Pairs were drawn once from a Gaussian (sigma = 31/5) over the 31x31 patch with
seed 42 and frozen here so descriptors are bit-identical across runs and
platforms. Each row is (x1, y1, x2, y2) relative to the patch center; every
point lies within radius 13 so a rotated pair stays inside radius 15.
"""
import numpy as np

PATCH_RADIUS = 15

_PAIRS = (
    (2, -6, 5, 6),
    (1, -2, 0, -5),
    (5, 5, 0, 7),
    (3, -5, 2, -6),
    (5, 0, -1, -4),
    (8, -1, -3, -2),
    (3, 2, 3, 3),
    (-3, -5, 4, 7),
    (-1, -5, -5, 4),
    (5, 3, -4, 1),
    (1, 1, 5, 1),
    (4, 0, 2, 4),
    (-9, -2, -3, -4),
    (-2, 9, -5, 6),
    (-10, -2, 1, 4),
    (4, 5, -2, -3),
    (5, -1, -8, -7),
    (-6, 3, 1, 4),
    (-3, 1, 4, -2),
    (3, -4, -2, -2),
    (-7, 3, -3, 0),
    (3, 3, 4, -1),
    (-3, 0, -8, -6),
    (2, -6, -2, 8),
    (-2, 5, -6, -1),
    (-6, -2, 5, -11),
    (3, 1, -4, -9),
    (0, -3, 1, 0),
    (10, -1, -6, 1),
    (1, 8, 5, 2),
    (9, -7, -4, -6),
    (-2, -9, 4, -1),
    (-9, -6, 2, 5),
    (3, -6, -5, -3),
    (-4, -1, 7, 1),
    (-1, -6, -10, -3),
    (0, 11, 1, 6),
    (-3, -7, -6, -4),
    (5, -6, 6, 2),
    (-1, 0, -4, 3),
    (-3, -8, -8, 1),
    (10, 1, -1, 2),
    (8, 1, -3, 7),
    (3, 10, 1, -8),
    (-8, 10, 11, -1),
    (-2, 9, -7, -6),
    (4, -2, 0, -1),
    (2, 9, 1, 4),
    (-13, 0, -5, -8),
    (-5, -2, 6, -8),
    (0, -3, -2, 6),
    (3, 8, -1, -4),
    (-1, 2, 1, -7),
    (1, 1, -5, -2),
    (-9, -4, 2, 7),
    (-5, -4, -7, -3),
    (-5, -1, -2, 2),
    (11, -6, -2, 5),
    (3, -2, -1, -9),
    (-1, -2, 1, -3),
    (3, 6, 1, 2),
    (0, 0, -4, 2),
    (10, 2, -5, -7),
    (7, 2, 3, -11),
    (6, 3, -7, -3),
    (2, 0, -2, -1),
    (-2, 1, -1, 1),
    (2, -2, -11, 2),
    (5, -2, 0, -7),
    (-2, 8, 4, 11),
    (7, 3, 11, 3),
    (5, -2, 0, -4),
    (6, -7, 5, -1),
    (7, 5, 11, 5),
    (-10, 0, -7, -3),
    (9, 4, -4, -6),
    (0, -8, -4, 2),
    (7, 4, 0, 3),
    (-4, 4, 2, 5),
    (-4, 5, 7, 1),
    (1, 2, -5, -1),
    (-1, 2, 6, -7),
    (-1, 9, -5, -5),
    (1, 5, 0, 8),
    (5, 5, -1, -12),
    (10, -3, 1, 8),
    (-10, -8, -10, -5),
    (3, 3, 2, -9),
    (-3, 3, 4, 1),
    (5, 1, 3, -4),
    (-1, 1, 5, -2),
    (3, -2, -1, 5),
    (-4, 5, -2, 1),
    (7, 8, 0, 8),
    (1, -5, -4, -9),
    (-6, -2, 5, 11),
    (-9, 2, -6, 3),
    (-1, -11, 6, -4),
    (-3, -7, -4, 3),
    (-1, 2, 2, 8),
    (-2, -9, 7, -2),
    (7, 2, -1, 2),
    (0, 1, 7, -5),
    (2, 0, 2, -5),
    (-7, -3, -2, 12),
    (7, -6, 2, -3),
    (-2, 1, 4, -2),
    (7, -7, 1, 9),
    (1, 4, 0, -1),
    (-5, 3, -5, 4),
    (7, 2, -2, 3),
    (-2, 6, -11, -2),
    (8, 6, -4, -9),
    (-3, 3, -10, -2),
    (1, -1, 5, 2),
    (4, -4, 6, 10),
    (-6, -6, 8, -1),
    (9, -3, 9, 1),
    (2, 10, -2, -6),
    (-3, 3, -10, 4),
    (-3, 7, -10, -5),
    (2, -1, -2, -1),
    (1, -6, 4, 4),
    (2, 3, -1, -2),
    (-5, -6, -8, -6),
    (0, 2, 0, -5),
    (6, 5, -1, -4),
    (3, 1, -9, 0),
    (2, -6, 1, -9),
    (8, 8, -2, 2),
    (-2, -7, 4, 12),
    (-7, -5, 1, 10),
    (-8, 2, -8, -3),
    (-3, 5, 1, -11),
    (3, -4, 8, -4),
    (-4, 3, 5, 3),
    (-10, 3, -6, 1),
    (-9, 3, -5, -8),
    (4, 1, -4, 9),
    (-3, 0, 2, -4),
    (3, -3, -3, 8),
    (-3, -12, -2, -2),
    (-1, -7, 4, 3),
    (-9, 4, -2, -1),
    (4, -11, 1, -2),
    (11, -1, 10, -7),
    (4, 2, -5, 1),
    (8, -2, -10, 0),
    (-6, -2, -1, -11),
    (-10, 3, 5, 2),
    (-4, -8, 5, 2),
    (2, -1, 5, 4),
    (8, -3, -3, -3),
    (5, 9, -3, -3),
    (2, -2, -5, -5),
    (-6, -1, 7, -2),
    (-6, 0, 7, -6),
    (-6, 3, -1, 4),
    (0, 4, -6, 0),
    (-1, -8, -10, 4),
    (-2, -6, -1, 7),
    (-6, 9, 2, 5),
    (-7, -7, 3, 0),
    (3, -1, 2, 1),
    (5, 5, 6, 7),
    (1, 6, 11, 3),
    (-2, -6, 0, -2),
    (-6, 5, 4, 3),
    (8, 4, 5, 4),
    (2, -11, 1, -3),
    (-8, 10, 2, 8),
    (0, 1, -7, 2),
    (0, -8, 0, 0),
    (11, 6, 0, 2),
    (0, -1, -7, -1),
    (-5, -8, 3, 2),
    (-11, -1, 6, 7),
    (6, 0, -5, -7),
    (2, 2, 8, 7),
    (-1, -8, -2, 1),
    (-1, -4, 2, -3),
    (-4, 2, -2, 2),
    (2, -7, -3, 9),
    (-12, 0, 0, -1),
    (2, 10, -7, -2),
    (-5, -6, -2, 9),
    (11, -2, 12, 0),
    (11, -1, 1, 2),
    (-4, 6, -2, -3),
    (6, 0, 2, 0),
    (2, 3, -12, 4),
    (-6, -9, 0, 1),
    (-4, 5, -8, -3),
    (-4, 0, 2, -6),
    (4, 0, 0, -1),
    (-1, 0, 1, 6),
    (-7, -7, -7, 2),
    (8, -3, -5, -3),
    (-3, 0, -2, 7),
    (-4, -5, 3, -10),
    (2, 1, -1, 10),
    (-1, -8, 0, -7),
    (-5, 2, 3, -4),
    (6, 7, 9, 3),
    (-2, -5, 1, -4),
    (-1, 12, -1, 3),
    (-1, 0, 0, 3),
    (7, 10, 2, 4),
    (-7, -1, 6, 5),
    (1, 5, 3, 7),
    (2, -2, -11, 3),
    (3, -7, -4, 8),
    (0, 3, 10, 1),
    (-6, -1, 0, -8),
    (-2, -5, 6, 0),
    (-2, -1, 1, 4),
    (-6, -6, 7, -3),
    (-9, 3, 3, -9),
    (1, 5, 2, 4),
    (-9, 2, -2, -3),
    (5, 9, -1, 2),
    (5, 1, 1, 5),
    (0, -5, -3, 4),
    (0, 2, 4, -2),
    (5, 2, -8, 9),
    (-3, -10, -6, -6),
    (0, -2, -2, 4),
    (2, 2, 3, 4),
    (0, 6, 7, 1),
    (-3, 3, -3, 0),
    (6, -3, 5, 4),
    (-6, 6, 4, 1),
    (-5, -5, -3, 3),
    (-6, 3, -8, -1),
    (-9, 9, 1, 3),
    (1, 3, -1, 9),
    (-3, 7, -4, 0),
    (-7, 3, 9, 0),
    (-1, -7, -1, -10),
    (-6, 1, -4, 9),
    (2, -1, 3, 0),
    (1, -3, 4, -2),
    (-4, 0, 5, 1),
    (-4, 8, 10, 3),
    (6, 8, 7, 4),
    (4, 3, -7, 4),
    (-8, -5, 8, 5),
    (9, -2, -7, -1),
    (1, 0, 7, -2),
    (2, -6, 3, 0),
    (-5, -1, -1, -2),
    (11, -1, -6, -2),
    (-4, 9, -1, 8),
    (0, 0, -1, 0),
    (-12, -3, 0, 4),
    (3, -2, 6, 6),
)

# (256, 4) int array: columns x1, y1, x2, y2.
PAIRS = np.array(_PAIRS, dtype=np.int32)
