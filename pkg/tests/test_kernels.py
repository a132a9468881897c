"""The numba and numpy kernel paths must agree."""
import numpy as np
import pytest

from clft import _kernels

pytestmark = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


def _random_case(rng):
    T = int(rng.integers(1, 12))
    K = int(rng.integers(2, 6))
    logits = rng.normal(size=(T, K))
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    L = int(rng.integers(0, 5))
    target = rng.integers(1, K, size=L)
    return logp, target


def test_ctc_kernels_agree():
    rng = np.random.default_rng(0)
    for _ in range(200):
        logp, target = _random_case(rng)
        n1, g1 = _kernels.ctc_forward_backward_numba(np.ascontiguousarray(logp), target.astype(np.int64), 0)
        n2, g2 = _kernels.ctc_forward_backward_numpy(logp, target, 0)
        if np.isinf(n2):
            assert np.isinf(n1)
            continue
        assert n1 == pytest.approx(n2, abs=1e-10)
        np.testing.assert_allclose(g1, g2, atol=1e-10)


def test_edit_distance_kernels_agree():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.integers(0, 4, size=int(rng.integers(0, 9)))
        b = rng.integers(0, 4, size=int(rng.integers(0, 9)))
        assert _kernels.edit_distance_numba(a, b) == _kernels.edit_distance_python(a, b)


def test_backend_flag_is_reported():
    assert _kernels.BACKEND in ("numba", "numpy")
