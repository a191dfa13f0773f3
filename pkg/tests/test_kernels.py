"""Compiled vs pure-Python kernel equivalence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delm import _kernels


def test_dispatch_works():
    a = np.array([1, 2, 3, 4], dtype=np.int64)
    b = np.array([9, 2, 3, 4, 7], dtype=np.int64)
    assert _kernels.lcs_run(a, b) == 3


def test_pure_path_always_available():
    assert _kernels.lcs_run_pure([1, 2, 3], [3, 1, 2, 3]) == 3


@pytest.mark.skipif(not _kernels.HAVE_COMPILED, reason="extension not built")
def test_compiled_path_available():
    a = np.array([1, 2], dtype=np.int64)
    assert _kernels.lcs_run_compiled(a, a) == 2


@given(st.lists(st.integers(min_value=0, max_value=5), max_size=40),
       st.lists(st.integers(min_value=0, max_value=5), max_size=40))
@settings(max_examples=300, deadline=None)
def test_compiled_equals_pure(a, b):
    if not _kernels.HAVE_COMPILED:
        pytest.skip("extension not built")
    aa = np.array(a, dtype=np.int64)
    bb = np.array(b, dtype=np.int64)
    assert _kernels.lcs_run_compiled(aa, bb) == _kernels.lcs_run_pure(a, b)


def test_long_runs():
    a = np.arange(1000, dtype=np.int64)
    b = np.concatenate([np.arange(500, 1000), np.arange(500)]).astype(np.int64)
    assert _kernels.lcs_run(a, b) == 500
