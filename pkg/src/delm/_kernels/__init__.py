"""Hot-loop kernels: compiled extension when built, pure Python otherwise.

``lcs_run`` dispatches to the Cython kernel if the extension module imported
successfully, else to the pure-Python twin. benchmarks/bench_lcs.py compares
the two; tests assert they agree exactly.
"""

import numpy as np

from delm._kernels import _lcs_py

try:
    from delm._kernels import _lcs_cy
except ImportError:
    _lcs_cy = None

HAVE_COMPILED = _lcs_cy is not None


def lcs_run(a: np.ndarray, b: np.ndarray) -> int:
    """Longest common contiguous run between two int arrays."""
    if HAVE_COMPILED:
        return _lcs_cy.lcs_run(
            np.ascontiguousarray(a, dtype=np.int32),
            np.ascontiguousarray(b, dtype=np.int32),
        )
    return _lcs_py.lcs_run(a.tolist() if isinstance(a, np.ndarray) else list(a),
                           b.tolist() if isinstance(b, np.ndarray) else list(b))


def lcs_run_pure(a, b) -> int:
    """Pure-Python path, exposed for benchmarks and equivalence tests."""
    return _lcs_py.lcs_run(list(a), list(b))


def lcs_run_compiled(a, b) -> int:
    """Compiled path; raises if the extension was not built."""
    if not HAVE_COMPILED:
        raise RuntimeError("compiled kernels are not available in this install")
    return _lcs_cy.lcs_run(
        np.ascontiguousarray(a, dtype=np.int32),
        np.ascontiguousarray(b, dtype=np.int32),
    )
