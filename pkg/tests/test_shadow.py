from __future__ import annotations

import csv
import dataclasses
import json
import math

import numpy as np
import pytest

from taupmp.errors import IndexOutOfRange, InsufficientData, VerdictMismatch
from taupmp.ode import integrate_bundle
from taupmp.problem import Box, ClosedForm, ControlProblem, TauSequence
from taupmp.registry import registry_get
from taupmp.shadow import (
    BallSpec,
    EvidenceTable,
    build_cluster_multipliers,
    build_multiplier,
    check_domination,
    classify_limit,
    finite_tau_approximant,
    run_shadow,
    sample_I,
    verdict_to_dict,
    write_evidence_csv,
)

from conftest import REGISTRY_CASES

TWO_PI = 2 * math.pi


def I0_stern(s):
    return np.array([math.cos(s) - 1.0, math.sin(s)])


def _table(nominal, tau=None):
    nominal = np.asarray(nominal, dtype=float)
    n, m = nominal.shape
    tau = np.arange(1.0, n + 1) if tau is None else np.asarray(tau)
    return EvidenceTable(tau, np.zeros((1, m)), np.array([-1]), nominal[None])


def _scaled_reward(p, c):
    return dataclasses.replace(
        p, g=lambda t, x, u: c * p.g(t, x, u), dgdx=lambda t, x, u: c * np.asarray(p.dgdx(t, x, u))
    )


class TestBallSpec:
    def test_perturbations(self):
        pts = BallSpec(1e-3, 2).perturbations(2)
        assert len(pts) == 8
        assert pts[0][0] == 0 and np.allclose(pts[0][1], [1e-3, 0.0])
        assert pts[-1][0] == 1 and np.allclose(pts[-1][1], [0.0, -5e-4])

    def test_validation(self):
        with pytest.raises(ValueError):
            BallSpec(0.0, 3)


class TestSample:
    def test_sternstern_periodic(self):
        p, _, _ = registry_get("sternstern", {})
        law = ClosedForm(lambda t: [0.0])
        table = sample_I(p, law, [TWO_PI, 2 * TWO_PI, 3 * TWO_PI], BallSpec(1e-3, 2))
        np.testing.assert_allclose(table.values, 0.0, atol=1e-6)
        assert table.values.shape == (9, 3, 2)

    def test_seisei(self, seisei):
        p, law, _ = seisei
        table = sample_I(p, law, [5.0, 10.0, 20.0], None)
        tau = np.array([5.0, 10.0, 20.0])
        np.testing.assert_allclose(table.nominal[:, 0], 1 - np.exp(-tau), rtol=1e-7)

    def test_linlin_divergent(self):
        p, law, _ = registry_get("linlin", {"alpha": 0, "beta": 0.5})
        table = sample_I(p, law, [5.0, 10.0, 20.0], None)
        np.testing.assert_allclose(table.nominal[:, 0], np.expm1(np.array([5.0, 10.0, 20.0]) / 2), rtol=1e-6)

    def test_failures_recorded_per_xi(self):
        # x' = x^2 from 0.1 blows up at 1/(0.1 + xi)
        p = ControlProblem(
            1, 1, [0.1], lambda t, x, u: x * x, lambda t, x, u: float(x[0]),
            lambda t, x, u: np.array([[2 * x[0]]]), lambda t, x, u: np.array([1.0]),
            Box([0.0], [1.0]),
        )
        law = ClosedForm(lambda t: [0.0])
        table = sample_I(p, law, [2.0, 5.0, 9.6], BallSpec(1e-2, 3))
        failed = {tuple(table.xis[k]) for k in table.errors}
        assert failed == {(1e-2,), (5e-3,)}
        assert np.all(np.isnan(table.values[list(table.errors)]))
        assert not np.any(np.isnan(table.nominal))
        assert "xi=[0.01]" in table.errors[1]


class TestClassify:
    def test_seisei_converged(self, seisei):
        p, law, _ = seisei
        v = classify_limit(sample_I(p, law, TauSequence.geometric(), BallSpec()))
        assert v.kind == "converged"
        np.testing.assert_allclose(v.I_star, [1.0], atol=1e-7)
        assert v.uniformity_ok

    def test_linlin_diverged(self):
        p, law, _ = registry_get("linlin", {"alpha": 0, "beta": 0.5})
        v = classify_limit(sample_I(p, law, TauSequence.geometric(), None))
        assert v.kind == "diverged"
        np.testing.assert_array_equal(v.iota_star, [1.0])

    def test_iota_unit_norm(self):
        rows = [[1.0, 1.0], [10.0, 10.0 + 1e-6], [100.0, 100.0], [1000.0, 1000.0]]
        v = classify_limit(_table(rows))
        assert v.kind == "diverged"
        assert abs(np.linalg.norm(v.iota_star) - 1.0) < 1e-12

    def test_sternstern_two_clusters(self):
        p, law, _ = registry_get("sternstern", {"varsigma": 0.0})
        phases = [math.pi / 3, math.pi] * 3
        tau = [TWO_PI * (n + 1) + s for n, s in enumerate(phases)]
        v = classify_limit(sample_I(p, law, tau, None))
        assert v.kind == "oscillating"
        assert len(v.clusters) == 2
        got = sorted(v.clusters, key=lambda c: c[0])
        np.testing.assert_allclose(got[0], I0_stern(math.pi), atol=1e-6)
        np.testing.assert_allclose(got[1], I0_stern(math.pi / 3), atol=1e-6)

    def test_cluster_order_earliest_first(self):
        rows = [[0.0], [5.0], [0.0], [5.0], [0.0], [5.0]]
        v = classify_limit(_table(rows))
        np.testing.assert_array_equal([c[0] for c in v.clusters], [5.0, 0.0])

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            classify_limit(_table([[1.0], [1.0]]))

    def test_failed_nominal(self):
        t = _table([[1.0], [np.nan], [1.0]])
        with pytest.raises(InsufficientData):
            classify_limit(t)

    def test_nonuniform_ball_blocks_convergence(self):
        vals = np.array([[[1.0]] * 3, [[1.5]] * 3, [[1.5]] * 3])
        t = EvidenceTable(np.arange(1.0, 4.0), np.array([[0.0], [1e-3], [-1e-3]]),
                          np.array([-1, 0, 0]), vals)
        v = classify_limit(t)
        assert v.kind != "converged"
        assert v.uniformity_ok is False

    @pytest.mark.parametrize("name,params", [
        ("seisei", {}), ("linlin", {"alpha": 0, "beta": 0.5}), ("linlin", {"alpha": 2, "beta": 3}),
    ])
    def test_reward_scaling_invariance(self, name, params):
        p, law, _ = registry_get(name, params)
        tau = TauSequence.geometric(5.0, 2.0, 5)
        base = classify_limit(sample_I(p, law, tau, None))
        for c in (0.1, 7.0):
            v = classify_limit(sample_I(_scaled_reward(p, c), law, tau, None))
            assert v.kind == base.kind
            if base.kind == "converged":
                np.testing.assert_allclose(v.I_star, c * base.I_star, rtol=1e-9)
            else:
                np.testing.assert_allclose(v.iota_star, base.iota_star, atol=1e-12)

    def test_table_scaling(self):
        t = _table([[1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(t.scaled(2.0).nominal[:, 0], [2.0, 4.0, 6.0])


class TestUniformity:
    @pytest.mark.parametrize("name", ["seisei", "avav"])
    def test_ball_deviation_shrinks(self, name):
        p, law, _ = registry_get(name, {})
        v = classify_limit(sample_I(p, law, [5.0, 10.0, 20.0], BallSpec()))
        d = v.ball_deviation
        assert len(d) == 3
        floor = 1e-7
        assert d[1] <= d[0] + floor and d[2] <= d[1] + floor
        assert d[2] < 1e-4
        assert v.uniformity_ok


class TestMultipliers:
    def test_seisei_normal(self, seisei):
        p, law, _ = seisei
        run = run_shadow(p, law)
        mu = run.multipliers[0]
        assert mu.lam == 1.0 and mu.source == "normal" and mu.normalized
        assert mu.psi0[0] == run.verdict.I_star[0]
        ts = np.linspace(0.0, 10.0, 201)
        np.testing.assert_allclose(mu.psi(ts)[:, 0], np.exp(-2 * ts), rtol=1e-5)

    def test_linlin_degenerate(self):
        p, law, _ = registry_get("linlin", {"alpha": 0, "beta": 0.5})
        run = run_shadow(p, law)
        mu = run.multipliers[0]
        assert mu.lam == 0.0 and mu.source == "degenerate" and mu.normalized
        ts = np.linspace(0.0, 20.0, 101)
        np.testing.assert_allclose(mu.psi(ts)[:, 0], np.exp(-ts / 2), rtol=1e-6)
        b = run.bundle
        np.testing.assert_allclose(
            mu.psi.psi_path, np.einsum("i,nij->nj", mu.psi0, b.Ainv_path), rtol=1e-15
        )

    def test_sternstern_clusters(self):
        p, law, _ = registry_get("sternstern", {"varsigma": 0.0})
        phases = [math.pi / 3, math.pi] * 3
        tau = [TWO_PI * (n + 1) + s for n, s in enumerate(phases)]
        run = run_shadow(p, law, tau, None)
        assert run.verdict.kind == "oscillating"
        assert len(run.multipliers) == 2
        ts = np.linspace(0.0, 4 * math.pi, 300)
        for mu in run.multipliers:
            s = math.atan2(mu.psi0[1], mu.psi0[0] + 1.0)
            ref = np.column_stack([np.cos(s - ts) - 1.0, np.sin(s - ts)])
            np.testing.assert_allclose(mu.psi(ts), ref, atol=1e-6)

    def test_verdict_mismatch(self, seisei):
        p, law, _ = seisei
        run = run_shadow(p, law, None, None)
        with pytest.raises(VerdictMismatch):
            build_cluster_multipliers(run.verdict, run.bundle)
        osc = dataclasses.replace(run.verdict, kind="oscillating", clusters=[np.array([1.0])])
        with pytest.raises(VerdictMismatch):
            build_multiplier(osc, run.bundle)


class TestFiniteTau:
    @pytest.mark.parametrize("name", sorted(REGISTRY_CASES))
    def test_terminal_zero(self, name):
        p, law, _ = registry_get(name, REGISTRY_CASES[name])
        tau = TauSequence.geometric(2.0, 1.5, 6)
        b = integrate_bundle(p, law, None, tau.values[-1], nodes=tau.values)
        for n in range(1, 7):
            mu = finite_tau_approximant(b, tau, n)
            assert np.all(mu.psi(tau.values[n - 1]) == 0.0)
            assert mu.source == "finite_tau" and mu.n == n

    def test_seisei_convergence(self, seisei):
        p, law, _ = seisei
        tau = TauSequence.geometric()
        b = integrate_bundle(p, law, None, tau.values[-1], nodes=tau.values)
        ts = np.linspace(0.0, 5.0, 201)
        ref = np.exp(-2 * ts)
        dist = [np.max(np.abs(finite_tau_approximant(b, tau, n).psi(ts)[:, 0] - ref)) for n in (1, 2, 3)]
        assert dist[0] > dist[1] > dist[2]
        # |psi_n - psi| = e^{-tau_n} e^{-T}, largest at T=0; the third value
        # sits below the integration error floor
        np.testing.assert_allclose(dist[:2], np.exp(-np.array(tau.values[:2])), rtol=1e-3)
        assert dist[2] < 1e-6

    def test_sternstern_full_periods(self):
        p, law, _ = registry_get("sternstern", {"varsigma": 0.0})
        tau = [TWO_PI * n for n in (1, 2, 3)]
        b = integrate_bundle(p, law, None, tau[-1], nodes=tau)
        for n in (1, 2, 3):
            np.testing.assert_allclose(finite_tau_approximant(b, tau, n).psi0, [0.0, 0.0], atol=1e-7)

    def test_index_errors(self, seisei_bundle):
        with pytest.raises(IndexOutOfRange):
            finite_tau_approximant(seisei_bundle, [1.0, 2.0, 3.0], 0)
        with pytest.raises(IndexOutOfRange):
            finite_tau_approximant(seisei_bundle, [1.0, 2.0, 3.0], 4)
        with pytest.raises(IndexOutOfRange):
            finite_tau_approximant(seisei_bundle, [1.0, 2.0, 50.0], 3)


class TestDomination:
    def test_seisei_valid(self):
        c = check_domination(lambda t: [[1.0]], lambda t: [math.exp(-2 * t)], lambda t: math.exp(-t))
        assert c.valid
        assert c.margin >= -1e-9
        np.testing.assert_allclose(c.B_star_path[:, 0, 0], np.exp(c.grid), rtol=1e-7)

    def test_zero_gradient(self):
        c = check_domination(lambda t: [[0.0]], lambda t: [0.0], lambda t: 1.0 + t, t_end=3.0)
        assert c.valid and c.margin == 1.0

    def test_seisei_too_small_majorant(self):
        c = check_domination(lambda t: [[1.0]], lambda t: [math.exp(-2 * t)], lambda t: math.exp(-3 * t))
        assert not c.valid
        assert c.margin_at(2.0) < -0.1
        np.testing.assert_allclose(c.margin_at(2.0), math.exp(-6) - math.exp(-2), rtol=1e-3)

    def test_shift_rescaling(self):
        # F = 1 shifted by m = -1 gives B = Id and R = e^{-t}
        c = check_domination(lambda t: [[1.0]], lambda t: [math.exp(-2 * t)], lambda t: math.exp(-t),
                             m_shift=lambda t: -1.0, t_end=5.0)
        np.testing.assert_allclose(c.R_path, np.exp(-c.grid), rtol=1e-7)
        np.testing.assert_allclose(c.margin_path, np.exp(-2 * c.grid) - np.exp(-2 * c.grid), atol=1e-8)

    def test_infinite_tail_invalidates(self):
        c = check_domination(lambda t: [[0.0]], lambda t: [0.0], lambda t: 1.0, tail_bound=math.inf)
        assert not c.valid


class TestSerialization:
    def test_verdict_json(self, seisei, tmp_path):
        p, law, _ = seisei
        run = run_shadow(p, law)
        d = verdict_to_dict(run.verdict, run.multipliers)
        assert d["verdict"] == "converged"
        assert d["lambda"] == 1.0
        assert set(d) >= {"verdict", "I_star", "lambda", "psi0", "evidence_table", "uniformity_ok"}
        json.dumps(d, allow_nan=False)
        path = tmp_path / "e.csv"
        write_evidence_csv(run.verdict.evidence, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["row", "level", "xi1", "tau", "I1", "norm"]
        assert len(rows) == 1 + 7 * len(TauSequence.geometric())
