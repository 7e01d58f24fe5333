import numpy as np
import pytest

from teinet import gradcheck
from teinet.tensor import Tensor, apply_op, mul, sum_all


@pytest.mark.parametrize("op", sorted(gradcheck.CASES))
def test_op_gradients(op):
    results = gradcheck.run_checks([op], seeds=range(20))
    assert len(results) == 20
    worst = max(r.max_rel_error for r in results)
    assert all(r.ok for r in results), f"{op}: max relative error {worst:.3e}"
    assert all(r.coords > 0 for r in results)


def _bad_square(x):
    # forward x^2 with a deliberately wrong backward (x instead of 2x)
    return apply_op(x.data ** 2, (x,), lambda g: (g * x.data,))


def test_harness_catches_wrong_gradient(monkeypatch):
    def build(rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
        r = Tensor(rng.standard_normal(5), dtype=np.float64)
        return (lambda: sum_all(mul(_bad_square(x), r))), [x]

    monkeypatch.setitem(gradcheck.CASES, "bad", build)
    result = gradcheck.check_case("bad", 0)
    assert not result.ok
    assert result.max_rel_error > 0.1


def test_unknown_op():
    with pytest.raises(KeyError):
        gradcheck.run_checks(["nope"])
