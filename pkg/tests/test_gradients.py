import numpy as np
import pytest

from gradcases import CASES, EPS, N_INSTANCES, TOLERANCE
from v2ifuse.gradcheck import check_gradients


@pytest.mark.parametrize("name", list(CASES))
def test_finite_differences(name):
    worst = 0.0
    for seed in range(N_INSTANCES):
        fn, arrays = CASES[name](np.random.default_rng(1000 + seed))
        worst = max(worst, max(check_gradients(fn, arrays, EPS)))
    assert worst <= TOLERANCE, f"{name}: relative error {worst:.2e}"
