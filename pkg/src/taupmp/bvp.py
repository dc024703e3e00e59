"""Shooting for the boundary-value problem closed by the maximum condition.

Substituting the Hamiltonian argmax into the state and adjoint equations
leaves an ODE in ``z`` with some initial components unknown and an
asymptotic terminal condition. The condition at infinity is replaced by a
condition at a finite horizon ``T_max``, and the truncation bias is
removed afterwards by extrapolating over a doubling sequence of horizons.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dsl
from .errors import (
    DomainError,
    InvalidParams,
    MaxIterations,
    NoBracket,
    NonFiniteValue,
    PathBlowup,
    StepSizeUnderflow,
)
from .ode import IntegratorConfig, OdeSolution, integrate

__all__ = [
    "ClosedSystem",
    "ShootResult",
    "RichardsonResult",
    "build_avav_system",
    "system_from_dict",
    "shoot",
    "richardson",
    "verify_solution",
    "write_solution_csv",
]

_INFEASIBLE = (PathBlowup, DomainError, NonFiniteValue, StepSizeUnderflow, OverflowError, ZeroDivisionError)
SHOOT_CFG = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)


@dataclass
class ClosedSystem:
    """``z' = rhs(t, z)`` with a split of ``z(0)`` into known and unknown parts.

    Attributes
    ----------
    dim : int
    rhs : callable ``(t, z) -> ndarray``
    known : dict
        Component index -> fixed initial value.
    shoot : list of int
        Indices of the unknown initial components.
    terminal : callable ``(t, z) -> ndarray``
        Residual at the horizon, one entry per unknown.
    guard : callable ``(t, z) -> bool``, optional
        Feasibility along the path (checked at every node but the last).
    infeasible_sign : float
        Sign given to the residual of a path that breaks down or violates
        the guard, so that bisection can still bracket.
    control : callable ``(t, z) -> ndarray``, optional
        Argmax control recovered from ``z``.
    reward_rate : callable ``(t, z) -> float``, optional
        Running reward, integrated as ``J`` during verification.
    """

    dim: int
    rhs: Callable
    known: dict
    shoot: list
    terminal: Callable
    guard: Callable | None = None
    infeasible_sign: float = -1.0
    control: Callable | None = None
    reward_rate: Callable | None = None
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = sorted(list(self.known) + list(self.shoot))
        if idx != list(range(self.dim)):
            raise InvalidParams("known and shoot components must partition 0..dim-1")

    def initial(self, unknowns) -> np.ndarray:
        z0 = np.zeros(self.dim)
        for i, v in self.known.items():
            z0[i] = v
        z0[list(self.shoot)] = np.atleast_1d(unknowns)
        return z0


@dataclass
class ShootResult:
    """Outcome of one shot.

    ``solution`` is the dense path of ``z`` on ``[0, T_max]`` (``None`` if the
    final guess was infeasible).
    """

    init_values: np.ndarray
    unknowns: np.ndarray
    terminal_residual: float
    solution: OdeSolution | None
    iterations: int
    converged: bool
    T_max: float
    tol: float
    infeasible: list = field(default_factory=list)
    positivity_ok: bool = True


# ---------------------------------------------------------------------------
# Systems


def _weight(w) -> Callable[[float], float]:
    if isinstance(w, str):
        w = dsl.parse(w, (0, 0))
    if isinstance(w, dsl.Expr):
        return lambda t, e=w: e(t, [], [])
    return lambda t: float(w(t))


def build_avav_system(
    nu: float,
    sigma: float,
    b: float,
    K0: float,
    g_expr="(1+t)^(-4/3)",
    h_expr="(1+t)^(-4/3)",
    horizon: float = 1000.0,
) -> ClosedSystem:
    """Closed system for the investment example in ``z = (x, I)``.

    ``x' = -nu x + e^{nu t} I / (b h(t))``, ``x(0) = K0``;
    ``I' = -sigma g(t) e^{-nu t} x^{sigma - 1}``, ``I(0)`` unknown;
    terminal residual ``I(T_max)``, with ``x > 0`` and ``I > 0`` guarded.

    Parameters
    ----------
    g_expr, h_expr : str, Expr or callable of t
        Weights; ``h`` must be positive on ``[0, horizon]``.
    """
    if not 0.0 < sigma <= 1.0:
        raise InvalidParams(f"sigma must lie in (0, 1], got {sigma}")
    if b <= 0.0:
        raise InvalidParams(f"b must be positive, got {b}")
    if K0 <= 0.0:
        raise InvalidParams(f"K0 must be positive, got {K0}")
    if nu < 0.0:
        raise InvalidParams(f"nu must be nonnegative, got {nu}")
    g, h = _weight(g_expr), _weight(h_expr)
    for t in np.linspace(0.0, horizon, 2001):
        if not h(t) > 0.0:
            raise InvalidParams(f"h(t) must be positive, h({t:g}) = {h(t)}")

    def rhs(t, z):
        x, I = z
        if not x > 0.0:
            raise PathBlowup(f"capital left the positive axis at t={t:.6g}")
        dx = -nu * x + math.exp(nu * t) * I / (b * h(t))
        dI = -sigma * g(t) * math.exp(-nu * t) * x ** (sigma - 1.0)
        return np.array([dx, dI])

    def control(t, z):
        return np.array([math.exp(nu * t) * z[1] / (b * h(t))])

    def reward_rate(t, z):
        u = control(t, z)[0]
        return g(t) * z[0] ** sigma - 0.5 * b * h(t) * u * u

    return ClosedSystem(
        dim=2,
        rhs=rhs,
        known={0: float(K0)},
        shoot=[1],
        terminal=lambda t, z: np.array([z[1]]),
        guard=lambda t, z: z[0] > 0.0 and z[1] > 0.0,
        infeasible_sign=-1.0,
        control=control,
        reward_rate=reward_rate,
        name="avav",
        params={"nu": nu, "sigma": sigma, "b": b, "K0": K0},
    )


def system_from_dict(doc: dict) -> ClosedSystem:
    """Closed system from DSL sources in ``t, z1..zn``.

    Keys: ``dim``, ``rhs`` (list of n sources), ``known`` (map of 1-based
    index to value), ``terminal`` (one source per unknown), optional
    ``guard`` (sources that must stay positive along the path).
    """
    n = int(doc["dim"])
    dims = (n, 0)
    rhs_e = [dsl.parse(s, dims, "z") for s in doc["rhs"]]
    if len(rhs_e) != n:
        raise InvalidParams(f"rhs needs {n} expressions, got {len(rhs_e)}")
    known = {int(k) - 1: float(v) for k, v in doc.get("known", {}).items()}
    shoot_idx = [i for i in range(n) if i not in known]
    term_e = [dsl.parse(s, dims, "z") for s in doc["terminal"]]
    if len(term_e) != len(shoot_idx):
        raise InvalidParams("terminal needs one expression per unknown component")
    guard_e = [dsl.parse(s, dims, "z") for s in doc.get("guard", [])]

    def rhs(t, z):
        return np.array([e(t, z, []) for e in rhs_e])

    def terminal(t, z):
        return np.array([e(t, z, []) for e in term_e])

    guard = None
    if guard_e:
        guard = lambda t, z: all(e(t, z, []) > 0.0 for e in guard_e)  # noqa: E731
    return ClosedSystem(
        dim=n,
        rhs=rhs,
        known=known,
        shoot=shoot_idx,
        terminal=terminal,
        guard=guard,
        infeasible_sign=float(doc.get("infeasible_sign", -1.0)),
        name=str(doc.get("name", "dsl")),
    )


# ---------------------------------------------------------------------------
# Shooting


def _run(sys: ClosedSystem, unknowns, T_max: float, cfg) -> tuple[np.ndarray, OdeSolution | None, bool]:
    """Residual, dense path and feasibility for one initial guess."""
    z0 = sys.initial(unknowns)
    k = len(sys.shoot)
    try:
        sol = integrate(lambda t, z, seg: sys.rhs(t, z), 0.0, T_max, z0, cfg)
    except _INFEASIBLE:
        return np.full(k, sys.infeasible_sign * math.inf), None, False
    if sys.guard is not None:
        for t, z in zip(sol.t[:-1], sol.y[:-1]):
            if not sys.guard(t, z):
                r = np.asarray(sys.terminal(sol.t[-1], sol.y[-1]), dtype=float)
                return r, sol, False
    return np.asarray(sys.terminal(sol.t[-1], sol.y[-1]), dtype=float), sol, True


def shoot(
    sys: ClosedSystem,
    search: dict,
    T_max: float = 200.0,
    tol: float = 1e-8,
    cfg: IntegratorConfig | None = None,
    newton_steps: int = 5,
    max_iter: int = 50,
) -> ShootResult:
    """Solve for the unknown initial components.

    One unknown: bisection on ``[lo, hi]`` until the bracket is narrower
    than ``tol``, then ``newton_steps`` Newton steps with a finite-difference
    slope, each kept only if it lowers the residual. Several unknowns:
    damped Newton from the box centre with a finite-difference Jacobian.

    Parameters
    ----------
    search : dict
        ``{"lo": [...], "hi": [...]}``, one entry per unknown.

    Raises
    ------
    NoBracket
        The scalar residual has the same sign at both ends.
    MaxIterations
        Vector Newton did not reach ``tol``.
    """
    cfg = cfg or SHOOT_CFG
    lo = np.atleast_1d(np.asarray(search["lo"], dtype=float))
    hi = np.atleast_1d(np.asarray(search["hi"], dtype=float))
    if lo.size != len(sys.shoot) or hi.size != len(sys.shoot):
        raise InvalidParams("search box must give one bound per unknown")
    if np.any(hi <= lo):
        raise InvalidParams("search box needs lo < hi")
    if lo.size == 1:
        return _shoot_scalar(sys, float(lo[0]), float(hi[0]), T_max, tol, cfg, newton_steps)
    return _shoot_vector(sys, lo, hi, T_max, tol, cfg, max_iter)


def _shoot_scalar(sys, lo, hi, T_max, tol, cfg, newton_steps) -> ShootResult:
    infeasible: list = []

    def r(s):
        res, sol, ok = _run(sys, [s], T_max, cfg)
        if not ok:
            infeasible.append(float(s))
            return sys.infeasible_sign * math.inf, sol, ok
        return float(res[0]), sol, ok

    r_lo, _, _ = r(lo)
    r_hi, _, _ = r(hi)
    if r_lo == 0.0:
        hi = lo
    elif r_hi == 0.0:
        lo = hi
    elif math.copysign(1.0, r_lo) == math.copysign(1.0, r_hi):
        raise NoBracket(f"residual has the same sign at {lo} and {hi} ({r_lo:.3g}, {r_hi:.3g})")
    it = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        r_mid, _, _ = r(mid)
        it += 1
        if r_mid == 0.0:
            lo = hi = mid
            break
        if math.copysign(1.0, r_mid) == math.copysign(1.0, r_lo):
            lo, r_lo = mid, r_mid
        else:
            hi, r_hi = mid, r_mid
    s = 0.5 * (lo + hi)
    rs, sol, ok = r(s)
    if not ok:
        # fall back to the bracket end that stayed feasible
        ends = [(abs(v), e) for v, e in ((r_lo, lo), (r_hi, hi)) if math.isfinite(v)]
        if ends:
            s = min(ends)[1]
            rs, sol, ok = r(s)
    for _ in range(newton_steps):
        if not ok or rs == 0.0:
            break
        ds = 1e-7 * max(1.0, abs(s))
        rp, _, okp = r(s + ds)
        it += 1
        if not okp or rp == rs:
            break
        cand = s - rs * ds / (rp - rs)
        rc, solc, okc = r(cand)
        it += 1
        if okc and abs(rc) < abs(rs):
            s, rs, sol = cand, rc, solc
        else:
            break
    res = abs(rs) if ok else math.inf
    return _result(sys, [s], res, sol, it, tol, T_max, infeasible, ok)


def _shoot_vector(sys, lo, hi, T_max, tol, cfg, max_iter) -> ShootResult:
    infeasible: list = []
    s = 0.5 * (lo + hi)
    res, sol, ok = _run(sys, s, T_max, cfg)
    if not ok:
        infeasible.append(s.tolist())
        raise PathBlowup(f"initial guess {s.tolist()} is infeasible")
    k = s.size
    for it in range(1, max_iter + 1):
        if np.max(np.abs(res)) < tol:
            return _result(sys, s, float(np.max(np.abs(res))), sol, it, tol, T_max, infeasible, True)
        J = np.empty((k, k))
        for j in range(k):
            ds = 1e-7 * max(1.0, abs(s[j]))
            sp = s.copy()
            sp[j] += ds
            rp, _, okp = _run(sys, sp, T_max, cfg)
            if not okp:
                infeasible.append(sp.tolist())
                sp[j] -= 2 * ds
                rp, _, _ = _run(sys, sp, T_max, cfg)
                ds = -ds
            J[:, j] = (rp - res) / ds
        step = np.linalg.lstsq(J, -res, rcond=None)[0]
        lam = 1.0
        while lam > 1e-6:
            cand = np.clip(s + lam * step, lo, hi)
            rc, solc, okc = _run(sys, cand, T_max, cfg)
            if okc and np.max(np.abs(rc)) < np.max(np.abs(res)):
                s, res, sol = cand, rc, solc
                break
            if not okc:
                infeasible.append(cand.tolist())
            lam *= 0.5
        else:
            break
    raise MaxIterations(f"damped Newton stopped with residual {np.max(np.abs(res)):.3g}")


def _result(sys, unknowns, res, sol, it, tol, T_max, infeasible, ok) -> ShootResult:
    u = np.atleast_1d(np.asarray(unknowns, dtype=float))
    pos = True
    if sol is not None and sys.guard is not None:
        pos = all(sys.guard(t, z) for t, z in zip(sol.t[:-1], sol.y[:-1]))
    return ShootResult(
        init_values=sys.initial(u),
        unknowns=u,
        terminal_residual=float(res),
        solution=sol,
        iterations=int(it),
        converged=bool(ok and res < tol),
        T_max=float(T_max),
        tol=float(tol),
        infeasible=infeasible,
        positivity_ok=bool(pos),
    )


# ---------------------------------------------------------------------------
# Horizon extrapolation


@dataclass
class RichardsonResult:
    """Shots at a geometric sequence of horizons and their extrapolation.

    With three horizons in ratio ``q`` and a truncation error ``~ C T^-p``,
    ``p`` is estimated from the successive differences and the limit is
    ``s_3 + d_2 / (q^p - 1)``, which for ``q^p = d_1/d_2`` is Aitken's
    delta-squared formula.
    """

    T_values: list
    raw: list
    extrapolated: np.ndarray
    order: np.ndarray

    def raw_unknowns(self) -> np.ndarray:
        return np.array([r.unknowns for r in self.raw])


def richardson(
    sys: ClosedSystem,
    search: dict,
    T_values: Sequence[float] = (100.0, 200.0, 400.0),
    tol: float = 1e-8,
    cfg: IntegratorConfig | None = None,
) -> RichardsonResult:
    """Shoot at each horizon and extrapolate the unknowns to ``T -> inf``."""
    T_values = [float(T) for T in T_values]
    if len(T_values) != 3:
        raise InvalidParams("extrapolation needs exactly three horizons")
    if not T_values[0] < T_values[1] < T_values[2]:
        raise InvalidParams("horizons must increase")
    raw = [shoot(sys, search, T, tol, cfg) for T in T_values]
    s = np.array([r.unknowns for r in raw])
    d1, d2 = s[1] - s[0], s[2] - s[1]
    q = T_values[1] / T_values[0]
    ext = s[2].copy()
    order = np.full(s.shape[1], np.nan)
    for j in range(s.shape[1]):
        if d1[j] != 0 and d2[j] != 0 and d1[j] / d2[j] > 1.0:
            ratio = d1[j] / d2[j]
            order[j] = math.log(ratio) / math.log(q)
            ext[j] = s[2, j] + d2[j] / (ratio - 1.0)
    return RichardsonResult(T_values, raw, ext, order)


# ---------------------------------------------------------------------------
# Verification


def verify_solution(
    sys: ClosedSystem,
    result: ShootResult | None = None,
    reference: dict | None = None,
    t_check: float | None = None,
    unknowns=None,
    cfg: IntegratorConfig | None = None,
) -> dict:
    """Re-integrate at 10x tighter tolerance and compare.

    Parameters
    ----------
    result : ShootResult, optional
        Source of the initial values and of the path to compare against.
    reference : dict, optional
        Component name (``"z1"``, ``"z2"``, ..., ``"J"``) -> callable of t.
    t_check : float, optional
        Comparison horizon; defaults to the shot horizon.
    unknowns : array_like, optional
        Initial unknowns to use instead of ``result.unknowns`` (for example
        an extrapolated value).

    Returns
    -------
    dict
        ``self_deviation`` (max |z_tight - z_shot| on the shot grid, only
        when the shot's own unknowns are used), ``terminal_residual`` of the
        tight path, ``J_end`` when a reward rate is known (``J`` is then
        integrated alongside ``z``) and ``reference_rel_error`` per
        component.
    """
    cfg = (cfg or SHOOT_CFG).tighter(10.0)
    own = unknowns is None
    if unknowns is None:
        if result is None:
            raise InvalidParams("need a shot result or explicit unknowns")
        unknowns = result.unknowns
    T = float(t_check if t_check is not None else (result.T_max if result else 0.0))
    if T <= 0:
        raise InvalidParams("verification horizon must be positive")
    z0 = sys.initial(unknowns)
    n = sys.dim
    with_j = sys.reward_rate is not None

    def rhs(t, y, seg):
        dz = sys.rhs(t, y[:n])
        if not with_j:
            return dz
        return np.append(dz, sys.reward_rate(t, y[:n]))

    y0 = np.append(z0, 0.0) if with_j else z0
    sol = integrate(rhs, 0.0, T, y0, cfg)
    report: dict = {"t_check": T, "notes": []}
    if result is not None and not result.converged:
        report["notes"].append("shot did not converge")
    if own and result.solution is not None:
        span = min(T, result.T_max)
        ts = sol.t[sol.t <= span]
        report["self_deviation"] = float(np.max(np.abs(result.solution(ts) - sol.y[sol.t <= span, :n])))
    report["terminal_residual"] = float(np.max(np.abs(sys.terminal(sol.t[-1], sol.y[-1, :n]))))
    if with_j:
        report["J_end"] = float(sol.y[-1, n])
    if reference:
        errs = {}
        mask = sol.t > 0
        for name, fn in sorted(reference.items()):
            if name == "J":
                if not with_j:
                    continue
                vals = sol.y[mask, n]
            else:
                vals = sol.y[mask, int(name[1:]) - 1]
            ref = np.array([float(np.ravel(fn(t))[0]) for t in sol.t[mask]])
            errs[name] = float(np.max(np.abs(vals - ref) / np.maximum(np.abs(ref), 1e-300)))
        report["reference_rel_error"] = errs
    report["solution"] = sol
    return report


def write_solution_csv(sol: OdeSolution, path, names: Sequence[str] | None = None) -> None:
    n = sol.y.shape[1]
    names = list(names) if names else [f"z{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *names])
        for t, y in zip(sol.t, sol.y):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in y)])
