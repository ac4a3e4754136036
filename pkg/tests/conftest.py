import sys
from pathlib import Path

import numpy as np

from rszero.tensorcore import BinaryMask

sys.path.insert(0, str(Path(__file__).parent))


def rect_mask(h, w, y0, x0, rh, rw):
    bits = np.zeros((h, w), dtype=bool)
    bits[y0 : y0 + rh, x0 : x0 + rw] = True
    return BinaryMask(bits)


def coord_mask(h, w, coords):
    bits = np.zeros((h, w), dtype=bool)
    for y, x in coords:
        bits[y, x] = True
    return BinaryMask(bits)
