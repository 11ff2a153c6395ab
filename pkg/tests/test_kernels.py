import os
import random
import subprocess
import sys

import numpy as np
import pytest

from oracles import star_polygon
from tempeo import _accel, kernels
from tempeo.geom import Polygon

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def _fill_both(poly, h, w, label=1):
    xs, ys, starts = poly.flat()
    a = np.zeros((h, w), np.uint8)
    b = np.zeros((h, w), np.uint8)
    kernels.fill_polygon_nb(a, xs, ys, starts, np.uint8(label))
    kernels.fill_polygon_np(b, xs, ys, starts, np.uint8(label))
    return a, b


@needs_numba
def test_fill_backends_agree_on_random_polygons():
    rng = random.Random(2)
    for _ in range(200):
        h, w = rng.randint(1, 80), rng.randint(1, 80)
        poly = Polygon(star_polygon(rng, rng.uniform(-10, w + 10), rng.uniform(-10, h + 10), 1, 40))
        a, b = _fill_both(poly, h, w, rng.randint(1, 9))
        assert a.tobytes() == b.tobytes()


@needs_numba
def test_fill_backends_agree_on_holes_and_integer_edges():
    outer = [(0, 0), (40, 0), (40, 40), (0, 40)]
    holes = [[(5, 5), (15, 5), (15, 15), (5, 15)], [(20.5, 20.5), (35, 22), (30, 35)]]
    a, b = _fill_both(Polygon(outer, holes), 48, 48)
    assert a.tobytes() == b.tobytes()
    assert a[10, 10] == 0 and a[2, 2] == 1


@needs_numba
def test_confusion_backends_agree():
    rng = np.random.default_rng(0)
    for k in (2, 3, 7):
        p = rng.integers(0, k, (50, 61), dtype=np.uint8)
        g = rng.integers(0, k, (50, 61), dtype=np.uint8)
        assert np.array_equal(kernels.confusion_nb(p, g, k), kernels.confusion_np(p, g, k))
        assert tuple(kernels.binary_counts_nb(p, g)) == tuple(kernels.binary_counts_np(p, g))


def test_confusion_matrix_orientation():
    p = np.array([[1, 1, 0]], np.uint8)
    g = np.array([[1, 0, 1]], np.uint8)
    cm = kernels.confusion_np(p, g, 2)
    assert cm.tolist() == [[0, 1], [1, 1]]  # cm[gt, pred]
    assert kernels.binary_counts_np(p, g) == (1, 1, 1)


def test_env_flag_selects_numpy_backend():
    code = "from tempeo import backend_name, kernels; print(backend_name(), kernels.fill_polygon.__name__)"
    env = dict(os.environ, TEMPEO_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "fill_polygon_np"]


@needs_numba
def test_default_backend_is_numba():
    code = "from tempeo import backend_name; print(backend_name())"
    env = {k: v for k, v in os.environ.items() if k != "TEMPEO_DISABLE_NUMBA"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"
