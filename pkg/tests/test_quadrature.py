import numpy as np
import pytest

from ferrosim.quadrature import interval_rule, monomial_integral, triangle_rule


@pytest.mark.parametrize("degree", [2, 4, 6, 8])
def test_triangle_rule_exact_for_monomials(degree):
    q = triangle_rule(degree)
    assert np.all(q.weights > 0)
    x, y = q.points.T
    assert np.all((x > 0) & (y > 0) & (x + y < 1))
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            val = np.sum(q.weights * x**a * y**b)
            assert abs(val - monomial_integral(a, b)) <= 1e-15


def test_monomial_integral_known_values():
    assert monomial_integral(0, 0) == 0.5
    assert monomial_integral(1, 0) == pytest.approx(1 / 6, abs=1e-16)


def test_interval_rule():
    q = interval_rule(7)
    for k in range(8):
        assert abs(np.sum(q.weights * q.points**k) - 1 / (k + 1)) <= 1e-15
