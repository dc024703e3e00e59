from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taupmp.errors import InvalidParams, NonFiniteValue
from taupmp.problem import (
    FINITE_DIFFERENCE,
    Box,
    ClosedForm,
    ControlProblem,
    Finite,
    PiecewiseConstant,
    TauSequence,
    evaluate_dynamics,
    fd_jacobian,
    jacobian_x,
    load_problem,
    problem_from_dict,
    projection_residual,
)
from taupmp.registry import registry_get

from conftest import REGISTRY_CASES


def _linear_problem(M, fd=False):
    M = np.asarray(M, dtype=float)
    m = M.shape[0]
    return ControlProblem(
        m,
        m,
        np.ones(m),
        lambda t, x, u: M @ x + u,
        lambda t, x, u: float(np.sum(x)),
        FINITE_DIFFERENCE if fd else (lambda t, x, u: M),
        FINITE_DIFFERENCE if fd else (lambda t, x, u: np.ones(m)),
        Box(-np.ones(m), np.ones(m)),
    )


class TestControlSets:
    def test_box_projection(self):
        b = Box([0.5], [1.0])
        np.testing.assert_array_equal(b.project([2.0], 0.0), [1.0])
        assert projection_residual(b, [0.7], 0.0) == 0.0

    def test_time_dependent_box(self):
        b = Box(lambda t: [0.0], lambda t: [t])
        np.testing.assert_array_equal(b.bounds(3.0)[1], [3.0])

    def test_empty_box_rejected(self):
        with pytest.raises(InvalidParams):
            Box([1.0], [0.0]).bounds(0.0)

    def test_finite_projection(self):
        f = Finite([[-1.0], [1.0]])
        np.testing.assert_array_equal(f.project([0.2], 0.0), [1.0])
        assert projection_residual(f, [-1.0], 0.0) == 0.0

    def test_empty_finite_rejected(self):
        with pytest.raises(InvalidParams):
            Finite([]).candidates(0.0)


class TestLaws:
    def test_piecewise_right_continuous(self):
        law = PiecewiseConstant([0.0, 1.0, 2.0], [[0.0], [1.0], [2.0]])
        assert law(1.0)[0] == 1.0
        assert law(1.0 - 1e-12)[0] == 0.0
        assert law(5.0)[0] == 2.0
        assert law.breakpoints(0.0, 2.5) == [1.0, 2.0]

    def test_piecewise_validation(self):
        with pytest.raises(InvalidParams):
            PiecewiseConstant([0.0, 0.0], [[1.0], [2.0]])
        with pytest.raises(InvalidParams):
            PiecewiseConstant([0.0, 1.0], [[1.0]])

    def test_closed_form_locates_switches(self):
        law = ClosedForm(lambda t: [math.copysign(1.0, math.sin(t))])
        bps = law.breakpoints(0.5, 10.0)
        np.testing.assert_allclose(bps, [math.pi, 2 * math.pi, 3 * math.pi], atol=1e-9)

    def test_closed_form_smooth_has_no_breakpoints(self):
        assert ClosedForm(lambda t: [t**2]).breakpoints(0.0, 20.0) == []

    def test_sgn_law_single_breakpoint_per_switch(self):
        # sgn passes through 0 exactly at the switch
        law = ClosedForm(lambda t: [float(np.sign(math.sin(1.0 - t)))])
        np.testing.assert_allclose(law.breakpoints(0.0, 5.0), [1.0, 1.0 + math.pi], atol=1e-9)


class TestTau:
    def test_geometric_default(self):
        np.testing.assert_allclose(TauSequence.geometric().values, [5, 10, 20, 40, 80, 160])

    def test_invariants(self):
        with pytest.raises(InvalidParams):
            TauSequence.explicit([1.0, 2.0])
        with pytest.raises(InvalidParams):
            TauSequence.explicit([1.0, 3.0, 2.0])
        with pytest.raises(InvalidParams):
            TauSequence.explicit([0.0, 1.0, 2.0])
        with pytest.raises(InvalidParams):
            TauSequence.geometric(1.0, 1.0, 4)


class TestDynamics:
    def test_seisei_evaluation(self):
        p, _, _ = registry_get("seisei", {})
        dx, rate = evaluate_dynamics(p, 0.0, [1.0], [1.0])
        np.testing.assert_array_equal(dx, [1.0])
        assert rate == 1.0

    def test_sternstern_evaluation(self):
        p, _, _ = registry_get("sternstern", {})
        dx, rate = evaluate_dynamics(p, 0.0, [1.0, 0.0], [0.0])
        np.testing.assert_array_equal(dx, [0.0, -1.0])
        assert rate == 0.0

    def test_zero_field(self):
        p = _linear_problem(np.zeros((2, 2)))
        dx, _ = evaluate_dynamics(p, 1.0, [3.0, 4.0], [0.0, 0.0])
        np.testing.assert_array_equal(dx, [0.0, 0.0])

    def test_nonfinite_rejected(self):
        p = ControlProblem(
            1, 1, [1.0], lambda t, x, u: np.array([np.inf]), lambda t, x, u: 0.0,
            FINITE_DIFFERENCE, FINITE_DIFFERENCE, Box([0.0], [1.0]),
        )
        with pytest.raises(NonFiniteValue):
            evaluate_dynamics(p, 0.0, [1.0], [0.0])

    def test_seisei_jacobians(self):
        p, _, _ = registry_get("seisei", {})
        F, G = jacobian_x(p, 0.3, [2.0], [0.75])
        np.testing.assert_array_equal(F, [[0.75]])
        np.testing.assert_allclose(G, [math.exp(-0.6)], rtol=1e-15)

    def test_sternstern_jacobians(self):
        p, _, _ = registry_get("sternstern", {})
        F, G = jacobian_x(p, 0.0, [1.0, 2.0], [1.0])
        np.testing.assert_array_equal(F, [[0.0, 1.0], [-1.0, 0.0]])
        np.testing.assert_array_equal(G, [0.0, 1.0])

    def test_linear_field_exact(self):
        M = np.array([[1.0, 2.0], [-3.0, 0.5]])
        F, _ = jacobian_x(_linear_problem(M), 0.0, [1.0, 1.0], [0.0, 0.0])
        np.testing.assert_array_equal(F, M)

    def test_finite_difference_marker(self):
        M = np.array([[1.0, 2.0], [-3.0, 0.5]])
        F, G = jacobian_x(_linear_problem(M, fd=True), 0.0, [1.0, 1.0], [0.0, 0.0])
        np.testing.assert_allclose(F, M, atol=1e-8)
        np.testing.assert_allclose(G, [1.0, 1.0], atol=1e-8)


def _sample_point(name, data):
    m = 2 if name == "sternstern" else 1
    lo_x = 0.1 if name == "avav" else -3.0
    t = data.draw(st.floats(0.0, 20.0))
    x = np.array(data.draw(st.lists(st.floats(lo_x, 5.0), min_size=m, max_size=m)))
    if name == "avav":
        u = [data.draw(st.floats(0.0, 10.0))]
    elif name == "sternstern":
        u = [data.draw(st.floats(-1.0, 1.0))]
    elif name == "seisei":
        u = [data.draw(st.floats(0.5, 1.0))]
    else:
        u = [data.draw(st.floats(0.0, 0.5))]
    return t, x, np.array(u)


class TestJacobianProperty:
    @pytest.mark.parametrize("name", sorted(REGISTRY_CASES))
    @settings(max_examples=100)
    @given(data=st.data())
    def test_analytic_matches_fd(self, name, data):
        p, _, _ = registry_get(name, REGISTRY_CASES[name])
        t, x, u = _sample_point(name, data)
        F, G = jacobian_x(p, t, x, u)
        Ffd = fd_jacobian(p.f, t, x, u)
        Gfd = fd_jacobian(p.g, t, x, u, scalar=True)
        assert np.linalg.norm(F - Ffd) / (1.0 + np.linalg.norm(F)) < 1e-5
        assert np.linalg.norm(G - Gfd) / (1.0 + np.linalg.norm(G)) < 1e-5


class TestProblemFiles:
    DOC = {
        "state_dim": 1,
        "control_dim": 1,
        "x_init": [1.0],
        "f": ["u1*x1"],
        "g": "x1*exp(-2*t)",
        "control_set": {"box": {"lo": [0.5], "hi": [1.0]}},
        "law": {"closed_form": "1"},
    }

    def test_from_dict_auto_jacobians(self):
        p, law = problem_from_dict(self.DOC)
        F, G = jacobian_x(p, 0.5, [2.0], [0.75])
        np.testing.assert_allclose(F, [[0.75]])
        np.testing.assert_allclose(G, [math.exp(-1.0)], rtol=1e-14)
        np.testing.assert_array_equal(law(3.0), [1.0])

    def test_load_file(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(self.DOC))
        p, _ = load_problem(path)
        dx, rate = evaluate_dynamics(p, 0.0, [1.0], [1.0])
        assert dx[0] == 1.0 and rate == 1.0

    def test_finite_set_and_piecewise(self):
        doc = dict(self.DOC, control_set={"finite": [[0.5], [1.0]]},
                   law={"piecewise": {"times": [0.0, 1.0], "values": [[0.5], [1.0]]}})
        p, law = problem_from_dict(doc)
        assert law.breakpoints(0.0, 2.0) == [1.0]
        assert p.control_set.candidates(0.0).shape == (2, 1)

    def test_missing_field(self):
        doc = {k: v for k, v in self.DOC.items() if k != "g"}
        with pytest.raises(InvalidParams):
            problem_from_dict(doc)

    def test_wrong_f_length(self):
        with pytest.raises(InvalidParams):
            problem_from_dict(dict(self.DOC, f=["x1", "x1"]))
