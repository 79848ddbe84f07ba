import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from campusflow import _accel
from campusflow.kernels import Propagator, _csr_spmm, _to_csr


def _sparse(rng, n, density, symmetric):
    a = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    return a + a.T if symmetric else a


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 30), width=st.integers(1, 40),
       density=st.floats(0.0, 1.0), symmetric=st.booleans())
def test_backends_agree_with_dense_product(seed, n, width, density, symmetric):
    rng = np.random.default_rng(seed)
    a = _sparse(rng, n, density, symmetric)
    x = rng.standard_normal((n, width))
    for backend in ("numpy", "numba"):
        op = Propagator(a, backend=backend)
        assert np.allclose(op.apply(x), a @ x, rtol=0, atol=1e-12)
        assert np.allclose(op.apply_t(x), a.T @ x, rtol=0, atol=1e-12)
    assert Propagator(a).nnz == np.count_nonzero(a)


def test_pure_python_kernel_matches_dense():
    rng = np.random.default_rng(0)
    a = _sparse(rng, 12, 0.3, False)
    x = rng.standard_normal((12, 5))
    kernel = getattr(_csr_spmm, "py_func", _csr_spmm)
    assert np.allclose(kernel(*_to_csr(a), x, np.zeros_like(x)), a @ x, rtol=0, atol=1e-12)


def test_backend_selection_and_errors():
    assert Propagator(np.eye(3), backend="numpy").backend == "numpy"
    assert Propagator(np.eye(3), backend="numba").backend == ("numba" if _accel.HAVE_NUMBA else "numpy")
    assert Propagator(np.eye(3)).symmetric and not Propagator(np.triu(np.ones((3, 3)))).symmetric
    with pytest.raises(ValueError):
        Propagator(np.ones((2, 3)))
    with pytest.raises(ValueError):
        Propagator(np.eye(2), backend="cuda")
    with pytest.raises(ValueError):
        Propagator(np.eye(2)).apply(np.ones((3, 1)))


def test_env_flag_forces_numpy_fallback():
    code = ("from campusflow import _accel; from campusflow.kernels import Propagator; import numpy as np;"
            "print(_accel.backend_name(), Propagator(np.eye(2)).backend)")
    env = dict(os.environ, CAMPUSFLOW_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "numpy"]
