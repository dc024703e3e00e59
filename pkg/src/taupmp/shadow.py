"""Tau-vanishing multipliers from sampled sensitivity covectors.

The pipeline samples ``I_xi(tau_n)`` for the nominal start and a small ball
of perturbed starts, classifies the limit behaviour of the nominal column,
and turns the verdict into a multiplier ``(lambda, psi)``:

* bounded limit ``I*``    -> ``lambda = 1``, ``psi(T) = (I* - I_0(T)) A_0^{-1}(T)``
* divergent direction     -> ``lambda = 0``, ``psi(T) = iota* A_0^{-1}(T)``
* several partial limits  -> one normal multiplier per cluster.

Finite-tau approximants and the domination certificate, which guarantees
the bounded case a priori, are also provided here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    IndexOutOfRange,
    InsufficientData,
    TauPmpError,
    VerdictMismatch,
)
from .ode import (
    AdjointPath,
    IntegratorConfig,
    TrajectoryBundle,
    adjoint_via_cauchy,
    integrate,
    integrate_bundle,
    integrate_bundles,
)
from .problem import ControlLaw, ControlProblem, TauSequence

__all__ = [
    "BallSpec",
    "EvidenceTable",
    "LimitVerdict",
    "Multiplier",
    "DominationCertificate",
    "sample_I",
    "classify_limit",
    "build_multiplier",
    "build_cluster_multipliers",
    "finite_tau_approximant",
    "check_domination",
    "run_shadow",
    "ShadowRun",
    "verdict_to_dict",
    "write_evidence_csv",
]

EPS_CONV = 1e-4
M_DIV = 1e6


# ---------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class BallSpec:
    """Perturbations ``+-radius * 2**-l * e_j`` for ``l < levels``."""

    radius: float = 1e-3
    levels: int = 3

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        if self.levels < 0:
            raise ValueError("ball levels must be nonnegative")

    def perturbations(self, m: int) -> list[tuple[int, np.ndarray]]:
        """``(level, xi)`` pairs in a fixed order: level, coordinate, sign."""
        out = []
        for lev in range(self.levels):
            r = self.radius * 2.0**-lev
            for j in range(m):
                for sgn in (1.0, -1.0):
                    xi = np.zeros(m)
                    xi[j] = sgn * r
                    out.append((lev, xi))
        return out


@dataclass
class EvidenceTable:
    """Sampled ``I_xi(tau_n)``.

    Attributes
    ----------
    tau : ndarray, shape (N,)
    xis : ndarray, shape (K, m)
        Row 0 is the nominal start ``xi = 0``.
    levels : ndarray of int, shape (K,)
        Ball level of each row, ``-1`` for the nominal row.
    values : ndarray, shape (K, N, m)
        NaN where the integration for that ``xi`` failed.
    errors : dict
        Row index -> error message for failed rows.
    """

    tau: np.ndarray
    xis: np.ndarray
    levels: np.ndarray
    values: np.ndarray
    errors: dict = field(default_factory=dict)

    @property
    def nominal(self) -> np.ndarray:
        return self.values[0]

    @property
    def m(self) -> int:
        return self.values.shape[2]

    def scaled(self, c: float) -> "EvidenceTable":
        return EvidenceTable(self.tau, self.xis, self.levels, c * self.values, dict(self.errors))


def _tau_values(tau) -> np.ndarray:
    if isinstance(tau, TauSequence):
        return np.asarray(tau.values, dtype=float)
    return np.asarray(TauSequence.explicit(tau).values, dtype=float)


def sample_I(
    p: ControlProblem,
    law: ControlLaw,
    tau,
    ball: BallSpec | None = BallSpec(),
    cfg: IntegratorConfig | None = None,
    nominal: TrajectoryBundle | None = None,
) -> EvidenceTable:
    """Tabulate ``I_xi(tau_n)`` over the nominal start and the xi-ball.

    Parameters
    ----------
    tau : TauSequence or sequence of float
    ball : BallSpec or None
        ``None`` samples the nominal start only.
    nominal : TrajectoryBundle, optional
        A nominal bundle that already covers ``tau``; it is reused instead
        of integrating again.

    Notes
    -----
    Integrator failures are stored per row in ``errors`` and leave NaN
    values; they never abort the sweep.
    """
    tv = _tau_values(tau)
    m = p.state_dim
    rows = [(-1, np.zeros(m))]
    if ball is not None:
        rows += ball.perturbations(m)
    values = np.full((len(rows), tv.size, m), np.nan)
    errors: dict = {}
    t_end = float(tv[-1])
    _fail = (TauPmpError, ArithmeticError, ValueError)

    def one(k, xi):
        try:
            values[k] = integrate_bundle(p, law, xi, t_end, cfg, nodes=tv).I_at(tv)
        except _fail as exc:
            errors[k] = f"xi={xi.tolist()}: {type(exc).__name__}: {exc}"

    if nominal is not None and nominal.t_end >= tv[-1]:
        values[0] = nominal.I_at(tv)
    else:
        one(0, rows[0][1])
    if len(rows) > 1:
        try:
            batch = integrate_bundles(p, law, [xi for _, xi in rows[1:]], t_end, cfg, nodes=tv)
            for k, b in enumerate(batch, start=1):
                values[k] = b.I_at(tv)
        except _fail:
            # locate the failing perturbations one by one
            for k, (_, xi) in enumerate(rows[1:], start=1):
                one(k, xi)
    return EvidenceTable(
        tau=tv,
        xis=np.array([xi for _, xi in rows]),
        levels=np.array([lev for lev, _ in rows], dtype=int),
        values=values,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Classification


@dataclass
class LimitVerdict:
    """Classification of the nominal sequence ``I_0(tau_n)``.

    ``kind`` is ``"converged"``, ``"diverged"`` or ``"oscillating"``; only the
    matching one of ``I_star``, ``iota_star``, ``clusters`` is set.
    ``uniformity_ok`` is ``None`` when the table carries no ball rows.
    """

    kind: str
    evidence: EvidenceTable
    I_star: np.ndarray | None = None
    iota_star: np.ndarray | None = None
    clusters: list = field(default_factory=list)
    uniformity_ok: bool | None = None
    ball_deviation: list = field(default_factory=list)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.evidence.nominal, axis=1)


def _ball_deviation(table: EvidenceTable) -> list[float]:
    """Per level: max over xi of ||I_xi(tau_N) - I_0(tau_N)||."""
    lv = table.levels
    if not np.any(lv >= 0):
        return []
    ref = table.values[0, -1]
    devs = []
    for lev in range(int(lv.max()) + 1):
        rows = table.values[lv == lev, -1]
        d = np.linalg.norm(rows - ref, axis=1)
        devs.append(float(np.max(d)) if not np.any(np.isnan(d)) else math.inf)
    return devs


def _uniformity(devs: list[float], eps_conv: float) -> bool | None:
    if not devs:
        return None
    # differences below the floor are integration noise, counted as ties
    floor = 1e-3 * eps_conv
    mono = all(b <= a + floor for a, b in zip(devs, devs[1:]))
    return bool(mono and devs[-1] < eps_conv)


def _tail_spread(rows: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(rows - rows[-1], axis=1)))


def _clusters(rows: np.ndarray, radius: float) -> list[np.ndarray]:
    groups: list[list[np.ndarray]] = []
    for r in rows:
        for grp in groups:
            if np.linalg.norm(r - grp[0]) <= radius:
                grp.append(r)
                break
        else:
            groups.append([r])
    return [np.mean(grp, axis=0) for grp in groups]


def classify_limit(
    table: EvidenceTable, eps_conv: float = EPS_CONV, M_div: float = M_DIV
) -> LimitVerdict:
    """Classify ``I_0(tau_n)`` as converged, diverged or oscillating.

    Converged
        the last three nominal rows lie within ``eps_conv`` of the last one
        and the ball deviation check passes (or no ball was sampled).
    Diverged
        the last three norms increase, the last one exceeds ``M_div`` or is at
        least twice the third-to-last, and the directions ``I/||I||`` agree
        within ``eps_conv``; ``iota*`` is the last direction.
    Oscillating
        anything else; the tail (last ``max(3, ceil(N/2))`` rows) is grouped
        greedily, each row joining the earliest cluster whose first member
        is within ``2 eps_conv``.
    """
    nom = table.nominal
    n = nom.shape[0]
    if n < 3:
        raise InsufficientData(f"need at least 3 tau rows, got {n}")
    if 0 in table.errors or np.any(np.isnan(nom)):
        raise InsufficientData(f"nominal trajectory failed: {table.errors.get(0, 'NaN values')}")
    devs = _ball_deviation(table)
    unif = _uniformity(devs, eps_conv)
    tail = nom[-3:]
    if _tail_spread(tail) < eps_conv and unif is not False:
        return LimitVerdict(
            "converged", table, I_star=nom[-1].copy(), uniformity_ok=unif, ball_deviation=devs
        )
    norms = np.linalg.norm(tail, axis=1)
    if np.all(norms > 0) and np.all(np.diff(norms) > 0):
        growth = norms[-1] > M_div or norms[-1] >= 2.0 * norms[0]
        dirs = tail / norms[:, None]
        if growth and _tail_spread(dirs) < eps_conv:
            iota = dirs[-1] / np.linalg.norm(dirs[-1])
            return LimitVerdict(
                "diverged", table, iota_star=iota, uniformity_ok=unif, ball_deviation=devs
            )
    k = max(3, math.ceil(n / 2))
    cl = _clusters(nom[-k:], 2.0 * eps_conv)
    return LimitVerdict("oscillating", table, clusters=cl, uniformity_ok=unif, ball_deviation=devs)


# ---------------------------------------------------------------------------
# Multipliers


@dataclass
class Multiplier:
    """``(lambda, psi)`` with its provenance.

    ``source`` is ``"normal"``, ``"degenerate"`` or ``"finite_tau"``; for the
    latter ``n`` is the (1-based) tau index.
    """

    lam: float
    psi: AdjointPath
    source: str
    n: int | None = None

    @property
    def psi0(self) -> np.ndarray:
        return self.psi.psi0

    @property
    def normalized(self) -> bool:
        """``lambda = 1``, or ``lambda = 0`` with ``||psi(0)|| = 1``."""
        if self.lam == 1.0:
            return True
        return self.lam == 0.0 and abs(np.linalg.norm(self.psi0) - 1.0) < 1e-12


def build_multiplier(v: LimitVerdict, bundle: TrajectoryBundle) -> Multiplier:
    """Multiplier for a converged or diverged verdict along the nominal bundle."""
    if v.kind == "converged":
        return Multiplier(1.0, adjoint_via_cauchy(bundle, v.I_star, 1.0), "normal")
    if v.kind == "diverged":
        iota = v.iota_star / np.linalg.norm(v.iota_star)
        return Multiplier(0.0, adjoint_via_cauchy(bundle, iota, 0.0), "degenerate")
    raise VerdictMismatch("oscillating verdict: build one multiplier per cluster")


def build_cluster_multipliers(v: LimitVerdict, bundle: TrajectoryBundle) -> list[Multiplier]:
    """One normal multiplier per partial limit of an oscillating verdict."""
    if v.kind != "oscillating":
        raise VerdictMismatch(f"expected an oscillating verdict, got {v.kind}")
    return [Multiplier(1.0, adjoint_via_cauchy(bundle, c, 1.0), "normal") for c in v.clusters]


def finite_tau_approximant(
    bundle: TrajectoryBundle, tau, n: int, lambda_n: float = 1.0
) -> Multiplier:
    """``psi_n(T) = lambda_n (I(tau_n) - I(T)) A^{-1}(T)``, zero at ``tau_n``.

    Parameters
    ----------
    tau : TauSequence or sequence of float
    n : int
        1-based index into ``tau``.
    """
    tv = _tau_values(tau)
    if not 1 <= n <= tv.size:
        raise IndexOutOfRange(f"n={n} outside 1..{tv.size}")
    tn = float(tv[n - 1])
    if tn > bundle.t_end * (1 + 1e-12):
        raise IndexOutOfRange(f"tau_{n}={tn} lies beyond the bundle end {bundle.t_end}")
    lam = float(lambda_n)
    psi = adjoint_via_cauchy(bundle, lam * bundle.I_at(tn), lam)
    return Multiplier(lam, psi, "finite_tau", n)


# ---------------------------------------------------------------------------
# Domination certificate


@dataclass
class DominationCertificate:
    """Numerical check of ``||G(t) B_*(t)|| <= omega(t) exp(int_0^t m)``.

    ``margin_path`` holds ``omega R - ||G B_*||`` at each grid node and
    ``margin`` its minimum.
    """

    grid: np.ndarray
    B_star_path: np.ndarray
    R_path: np.ndarray
    margin_path: np.ndarray
    margin: float
    margin_tol: float
    tail_bound: float | None
    valid: bool

    def margin_at(self, t: float) -> float:
        return float(np.interp(t, self.grid, self.margin_path))


def check_domination(
    F: Callable[[float], object],
    G: Callable[[float], object],
    omega: Callable[[float], float],
    m_shift: Callable[[float], float] | None = None,
    t_end: float = 10.0,
    tail_bound: float | None = None,
    cfg: IntegratorConfig | None = None,
    margin_tol: float = 1e-9,
) -> DominationCertificate:
    """Integrate ``B_*' = (F + m Id) B_*``, ``B_*(0) = Id`` and test the margin.

    Parameters
    ----------
    F, G : callables of t
        Jacobians along the nominal path, ``(m, m)`` and ``(m,)``.
    omega : callable of t
        Candidate summable majorant.
    m_shift : callable of t, optional
        Scalar shift; ``R(t) = exp(int_0^t m)`` rescales ``omega``.
    tail_bound : float, optional
        User-declared value of ``int_{t_end}^inf omega``; an infinite or NaN
        bound invalidates the certificate.
    margin_tol : float
        Slack for roundoff when the majorant is attained exactly.
    """
    m_shift = m_shift or (lambda t: 0.0)
    F0 = np.atleast_2d(np.asarray(F(0.0), dtype=float))
    m = F0.shape[0]
    eye = np.eye(m)

    def rhs(t, y, seg):
        B = y[:-1].reshape(m, m)
        Ft = np.atleast_2d(np.asarray(F(t), dtype=float))
        mt = float(m_shift(t))
        out = np.empty_like(y)
        out[:-1] = ((Ft + mt * eye) @ B).ravel()
        out[-1] = mt
        return out

    y0 = np.concatenate([eye.ravel(), [0.0]])
    sol = integrate(rhs, 0.0, float(t_end), y0, cfg)
    B = sol.y[:, :-1].reshape(-1, m, m)
    R = np.exp(sol.y[:, -1])
    gb = np.array(
        [np.linalg.norm(np.asarray(G(t), dtype=float).reshape(m) @ Bt) for t, Bt in zip(sol.t, B)]
    )
    om = np.array([float(omega(t)) for t in sol.t])
    margin_path = om * R - gb
    margin = float(np.min(margin_path))
    tail_ok = tail_bound is None or math.isfinite(tail_bound)
    return DominationCertificate(
        grid=sol.t,
        B_star_path=B,
        R_path=R,
        margin_path=margin_path,
        margin=margin,
        margin_tol=margin_tol,
        tail_bound=tail_bound,
        valid=bool(margin >= -margin_tol and tail_ok),
    )


# ---------------------------------------------------------------------------
# Pipeline and serialization


@dataclass
class ShadowRun:
    verdict: LimitVerdict
    bundle: TrajectoryBundle
    multipliers: list


def run_shadow(
    p: ControlProblem,
    law: ControlLaw,
    tau=None,
    ball: BallSpec | None = BallSpec(),
    cfg: IntegratorConfig | None = None,
    eps_conv: float = EPS_CONV,
    M_div: float = M_DIV,
) -> ShadowRun:
    """Sample, classify and build the multiplier(s).

    The ball is only integrated when the nominal tail is Cauchy, since the
    uniformity flag matters only for the converged verdict.
    """
    tau = TauSequence.geometric() if tau is None else tau
    tv = _tau_values(tau)
    nominal = integrate_bundle(p, law, None, float(tv[-1]), cfg, nodes=tv)
    table = sample_I(p, law, tv, None, cfg, nominal=nominal)
    if ball is not None and ball.levels > 0 and table.nominal.shape[0] >= 3:
        if _tail_spread(table.nominal[-3:]) < eps_conv:
            table = sample_I(p, law, tv, ball, cfg, nominal=nominal)
    v = classify_limit(table, eps_conv, M_div)
    if v.kind == "oscillating":
        mults = build_cluster_multipliers(v, nominal)
    else:
        mults = [build_multiplier(v, nominal)]
    return ShadowRun(v, nominal, mults)


def _vec(a) -> list | None:
    if a is None:
        return None
    return [None if not math.isfinite(float(x)) else float(x) for x in np.ravel(a)]


def verdict_to_dict(v: LimitVerdict, multipliers: Sequence[Multiplier] = ()) -> dict:
    """JSON-ready payload with stable keys."""
    t = v.evidence
    out: dict = {"verdict": v.kind}
    if v.kind == "converged":
        out["I_star"] = _vec(v.I_star)
    elif v.kind == "diverged":
        out["iota_star"] = _vec(v.iota_star)
    else:
        out["clusters"] = [_vec(c) for c in v.clusters]
    out["uniformity_ok"] = v.uniformity_ok
    out["ball_deviation"] = [d if math.isfinite(d) else None for d in v.ball_deviation]
    out["multipliers"] = [
        {"lambda": float(mu.lam), "psi0": _vec(mu.psi0), "source": mu.source} for mu in multipliers
    ]
    if len(multipliers) == 1:
        out["lambda"] = float(multipliers[0].lam)
        out["psi0"] = _vec(multipliers[0].psi0)
    out["evidence_table"] = {
        "tau": _vec(t.tau),
        "xi": [_vec(x) for x in t.xis],
        "level": [int(lv) for lv in t.levels],
        "I": [[_vec(r) for r in rows] for rows in t.values],
        "norm_nominal": _vec(np.linalg.norm(t.nominal, axis=1)),
        "errors": {str(k): msg for k, msg in sorted(t.errors.items())},
    }
    return out


def write_evidence_csv(t: EvidenceTable, path) -> None:
    """Columns: row, level, xi1..xim, tau, I1..Im, norm."""
    m = t.m
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["row", "level"]
            + [f"xi{j + 1}" for j in range(m)]
            + ["tau"]
            + [f"I{j + 1}" for j in range(m)]
            + ["norm"]
        )
        for k in range(t.values.shape[0]):
            for i, tau in enumerate(t.tau):
                I = t.values[k, i]
                w.writerow(
                    [k, int(t.levels[k])]
                    + [repr(float(x)) for x in t.xis[k]]
                    + [repr(float(tau))]
                    + [repr(float(x)) for x in I]
                    + [repr(float(np.linalg.norm(I)))]
                )
