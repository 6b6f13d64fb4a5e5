import os
import subprocess
import sys

import numpy as np
import pytest

from gradmask import _kernels

pytestmark = pytest.mark.skipif(_kernels.numba_impl is None, reason="numba not importable")


def both(name, *args):
    return getattr(_kernels.numpy_impl, name)(*args), getattr(_kernels.numba_impl, name)(*args)


@pytest.mark.parametrize("k,pad", [(1, 0), (3, 1), (3, 0), (5, 2)])
def test_im2col_col2im_parity(k, pad, rng):
    x = rng.standard_normal((2, 3, 7, 6))
    a, b = both("im2col", x, k, pad)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape)
    a, b = both("col2im", cols, 2, 3, 7, 6, k, pad)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


def test_filter_valid_parity(rng):
    img = rng.uniform(0, 255, (20, 17))
    taps = rng.random(5)
    a, b = both("filter_valid", img, taps)
    assert a.shape == (16, 13)
    np.testing.assert_allclose(a, b, rtol=1e-13)


def test_counter_uniform_reference_value():
    # splitmix64 from state 0 first emits 0xE220A8397B1DCDAF
    u = _kernels.counter_uniform(0, 0, 1)[0]
    assert u == (0xE220A8397B1DCDAF >> 11) * 2.0 ** -53


def test_counter_uniform_parity_and_offsets():
    key = np.uint64(_kernels.mix_key(4, 5, 6))
    a, b = both("counter_uniform", key, 0, 1000)
    assert np.array_equal(a, b)
    assert np.array_equal(_kernels.counter_uniform(int(key), 400, 100), a[400:500])
    assert 0.0 <= a.min() and a.max() < 1.0


def test_counter_uniform_is_uniform():
    u = _kernels.counter_uniform(_kernels.mix_key(1), 0, 100_000)
    hist = np.histogram(u, bins=10, range=(0, 1))[0]
    assert np.all(np.abs(hist - 10_000) < 5 * np.sqrt(10_000 * 0.9 * 0.1))


def test_mix_key_distinguishes_parts():
    keys = {_kernels.mix_key(s, r, c) for s in range(4) for r in range(4) for c in range(4)}
    assert len(keys) == 64
    assert _kernels.mix_key(1, 2) != _kernels.mix_key(2, 1)


def test_env_flag_selects_numpy():
    code = "from gradmask import _kernels as k; print(k.active is k.numpy_impl)"
    env = dict(os.environ, GRADMASK_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"
    env["GRADMASK_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
