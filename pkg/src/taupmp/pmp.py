"""Maximum-principle residuals, transversality and cone-order reports.

Everything here checks a candidate ``(x, u, lambda, psi)`` after the fact:
the Hamiltonian maximum, the adjoint and state equations in integral form,
the normalization of the multiplier, the four transversality conditions on
the sampled tau-sequence, and the orthant (monotone) estimates.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GridMismatch, NonFiniteValue, UnboundedSet
from .ode import AdjointPath, TrajectoryBundle, adjoint_via_cauchy
from .problem import Box, ControlLaw, ControlProblem, Finite, TauSequence, jacobian_x

__all__ = [
    "hamiltonian",
    "maximize_hamiltonian",
    "PmpReport",
    "ConeReport",
    "check_pmp",
    "monotone_report",
    "trend_slope",
    "report_to_dict",
]

ZERO_TOL = 1e-5
TREND_TOL = -1e-3
_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def hamiltonian(p: ControlProblem, x, t: float, u, lam: float, psi) -> float:
    """``H = psi . f(t, x, u) + lam g(t, x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    fx = np.asarray(p.f(t, x, u), dtype=float)
    gx = float(p.g(t, x, u))
    h = float(np.dot(np.atleast_1d(psi), fx)) + lam * gx
    if not math.isfinite(h):
        raise NonFiniteValue(f"Hamiltonian is not finite at t={t}")
    return h


def _pick(cands: list, vals: list) -> tuple[np.ndarray, float]:
    """Maximum with ties broken by the lexicographically smallest control."""
    vals = np.asarray(vals, dtype=float)
    top = float(np.max(vals))
    slack = 1e-12 * (1.0 + abs(top))
    tied = [np.asarray(c, dtype=float) for c, v in zip(cands, vals) if v >= top - slack]
    best = min(tied, key=lambda c: tuple(c))
    return best.copy(), top


def _golden(phi, a: float, b: float, iters: int) -> tuple[float, float, float]:
    """Golden-section maximization; returns (argmax, value, final width)."""
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = phi(c), phi(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = phi(d)
    return (c, fc, b - a) if fc >= fd else (d, fd, b - a)


def _parabolic(phi, s: float, w: float, lo: float, hi: float) -> float | None:
    """Vertex of the parabola through ``s - w, s, s + w`` when concave."""
    if w <= 0:
        return None
    a, b = max(lo, s - w), min(hi, s + w)
    if not a < s < b:
        return None
    fa, fs, fb = phi(a), phi(s), phi(b)
    den = (s - a) * (fs - fb) - (s - b) * (fs - fa)
    if den == 0:
        return None
    num = (s - a) ** 2 * (fs - fb) - (s - b) ** 2 * (fs - fa)
    v = s - 0.5 * num / den
    return v if lo <= v <= hi else None


def maximize_hamiltonian(
    p: ControlProblem,
    x,
    t: float,
    lam: float,
    psi,
    n_grid: int = 33,
    sweeps: int = 2,
    golden_iters: int = 20,
) -> tuple[np.ndarray, float]:
    """Maximize ``H(t, x, ., lam, psi)`` over ``U(t)``.

    Finite sets are searched exhaustively. Boxes get an ``n_grid`` tensor
    grid, then ``sweeps`` cyclic passes of golden-section search per axis
    whose brackets keep shrinking, then one parabolic step per axis that is
    kept only if it raises ``H``.

    Returns
    -------
    u_star : ndarray
    H_star : float

    Raises
    ------
    UnboundedSet
        If a box side is infinite.
    """
    cs = p.control_set

    def H(u):
        return hamiltonian(p, x, t, u, lam, psi)

    if isinstance(cs, Finite):
        cands = list(cs.candidates(t))
        return _pick(cands, [H(u) for u in cands])
    if not isinstance(cs, Box):
        raise TypeError(f"unsupported control set {type(cs).__name__}")
    lo, hi = cs.bounds(t)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise UnboundedSet("box control set has an infinite side; supply a cap")
    k = lo.size
    axes = [np.linspace(lo[j], hi[j], n_grid) if hi[j] > lo[j] else lo[j : j + 1] for j in range(k)]
    grid = [np.array(c) for c in itertools.product(*axes)]
    gvals = [H(u) for u in grid]
    u, hu = _pick(grid, gvals)
    half = (hi - lo) / max(n_grid - 1, 1)
    for _ in range(sweeps):
        for j in range(k):
            if hi[j] <= lo[j]:
                continue
            a, b = max(lo[j], u[j] - half[j]), min(hi[j], u[j] + half[j])

            def phi(s, j=j):
                v = u.copy()
                v[j] = s
                return H(v)

            s, hs, width = _golden(phi, a, b, golden_iters)
            if hs > hu:
                u[j], hu = s, hs
            half[j] = width
    for j in range(k):

        def phi(s, j=j):
            v = u.copy()
            v[j] = s
            return H(v)

        s = _parabolic(phi, u[j], half[j], lo[j], hi[j])
        if s is not None:
            hs = phi(s)
            if hs > hu:
                u[j], hu = s, hs
    return _pick(grid + [u], gvals + [hu])


# ---------------------------------------------------------------------------
# Helpers


def trend_slope(t: np.ndarray, values: np.ndarray) -> float:
    """Least-squares slope of ``log values`` over the last third of ``[t0, t_end]``."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    cut = t[0] + (2.0 / 3.0) * (t[-1] - t[0])
    sel = t >= cut
    if np.count_nonzero(sel) < 2:
        sel = np.ones_like(t, dtype=bool)
    ts, vs = t[sel], v[sel]
    if ts[-1] == ts[0]:
        return 0.0
    logs = np.log(np.maximum(vs, 1e-300))
    return float(np.polyfit(ts, logs, 1)[0])


def _law_inside(law: ControlLaw, t: float, a: float, b: float) -> np.ndarray:
    """Law value sampled strictly inside ``[a, b]`` near ``t``."""
    d = min(1e-9, 0.25 * (b - a))
    return law(min(max(t, a + d), b - d))


def _node_controls(bundle: TrajectoryBundle, law: ControlLaw) -> list[np.ndarray]:
    """Control at each node, taken from the adjacent smooth interval."""
    g = bundle.grid
    out = []
    for i, t in enumerate(g):
        if i + 1 < len(g) and g[i + 1] > t:
            out.append(_law_inside(law, t, t, g[i + 1]))
        elif i > 0 and g[i - 1] < t:
            out.append(_law_inside(law, t, g[i - 1], t))
        else:
            out.append(law(t))
    return out


def _simpson_defect(bundle, law, path, rate, scale_of) -> float:
    """max over intervals of ``|y(b) - y(a) - int rate| / (h (1 + |y|))``.

    The integral uses composite Simpson on the dense output with two
    panels per grid interval.
    """
    g = bundle.grid
    worst = 0.0
    w = np.array([1.0, 4.0, 2.0, 4.0, 1.0]) / 12.0
    for a, b in zip(g[:-1], g[1:]):
        h = b - a
        if h <= 1e-9 * (1.0 + abs(a)):
            continue
        s = a + h * np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        ys = path(s)
        xs = bundle.x_at(s)
        rs = np.array([rate(si, xi, _law_inside(law, si, a, b), yi) for si, xi, yi in zip(s, xs, ys)])
        integral = h * (w @ rs)
        defect = np.max(np.abs(ys[-1] - ys[0] - integral)) / h
        worst = max(worst, float(defect / (1.0 + scale_of(ys))))
    return worst


# ---------------------------------------------------------------------------
# PMP report


@dataclass
class PmpReport:
    """Residuals and transversality values for one candidate multiplier.

    The multiplier is first rescaled by ``scale = 1 / (||psi(0)|| + lambda)``
    (left unscaled when that sum is zero); every value below refers to the
    rescaled pair. ``partlim`` and ``partlim_1`` are minima over the sampled
    tau, a finite proxy for the lower limits.
    """

    max_residual: float
    adjoint_residual: float
    state_residual: float
    normalization_defect: float
    scale: float
    lam: float
    psi0: list
    transversality: dict
    lem1_check: dict
    tau_consistent: bool
    cap_touched: bool = False
    notes: list = field(default_factory=list)

    def residuals_ok(self, tol: float = ZERO_TOL) -> bool:
        return (
            self.max_residual < tol
            and self.adjoint_residual < tol
            and self.state_residual < tol
            and self.normalization_defect < 1e-9
        )

    def passed(self, tol: float = ZERO_TOL) -> bool:
        return self.residuals_ok(tol) and self.tau_consistent


def _as_path(multiplier) -> AdjointPath:
    return multiplier.psi if hasattr(multiplier, "psi") else multiplier


def check_pmp(
    p: ControlProblem,
    bundle: TrajectoryBundle,
    law: ControlLaw,
    multiplier,
    tau,
    zero_tol: float = ZERO_TOL,
) -> PmpReport:
    """Score a candidate ``(x, u, lambda, psi)`` along ``bundle``.

    Parameters
    ----------
    multiplier : Multiplier or AdjointPath
    tau : TauSequence or sequence of float
        Sampled times for the lower-limit conditions; all must lie in the
        bundle.

    Raises
    ------
    GridMismatch
        If the adjoint path or ``tau`` does not cover the bundle horizon.
    """
    path = _as_path(multiplier)
    tv = np.asarray(tau.values if isinstance(tau, TauSequence) else tau, dtype=float)
    t_end = bundle.t_end
    if path.grid[0] > bundle.grid[0] or path.grid[-1] < t_end * (1 - 1e-12):
        raise GridMismatch("adjoint path does not cover the bundle grid")
    if tv.size == 0 or tv[-1] > t_end * (1 + 1e-12) or tv[0] < 0:
        raise GridMismatch("tau samples must lie inside the bundle horizon")
    lam0 = float(path.lam)
    psi0_raw = np.atleast_1d(np.asarray(path.psi0, dtype=float))
    total = float(np.linalg.norm(psi0_raw)) + lam0
    scale = 1.0 / total if total > 0 else 1.0
    lam = scale * lam0
    psi0 = scale * psi0_raw
    norm_defect = abs(float(np.linalg.norm(psi0)) + lam - 1.0)

    def psi_at(s):
        return scale * np.atleast_2d(path(np.atleast_1d(s)))

    grid = bundle.grid
    psi_nodes = psi_at(grid)
    controls = _node_controls(bundle, law)
    notes = []

    # maximum condition
    worst_h = 0.0
    cap = p.params.get("umax") if isinstance(p.params, dict) else None
    cap_touched = False
    for t, x, u, ps in zip(grid, bundle.x_path, controls, psi_nodes):
        u_star, h_star = maximize_hamiltonian(p, x, t, lam, ps)
        if cap is not None and np.any(u_star >= cap * (1 - 1e-12)):
            cap_touched = True
        gap = h_star - hamiltonian(p, x, t, u, lam, ps)
        worst_h = max(worst_h, gap)
    if cap_touched:
        notes.append("argmax touched the control cap umax")

    def adj_rate(t, x, u, ps):
        F, G = jacobian_x(p, t, x, u)
        return -(ps @ F) - lam * G

    def state_rate(t, x, u, _):
        return np.asarray(p.f(t, x, u), dtype=float)

    adj_res = _simpson_defect(
        bundle, law, psi_at, adj_rate, lambda ys: float(np.max(np.abs(ys)))
    )
    st_res = _simpson_defect(
        bundle, law, bundle.x_at, state_rate, lambda ys: float(np.max(np.abs(ys)))
    )

    # transversality
    A_nodes = bundle.A_path
    psiA_nodes = np.einsum("ni,nij->nj", psi_nodes, A_nodes)
    n_psi = np.linalg.norm(psi_nodes, axis=1)
    n_psiA = np.linalg.norm(psiA_nodes, axis=1)
    _, A_tau, _, I_tau, _ = bundle.at(tv)
    psi_tau = psi_at(tv)
    n_psi_tau = np.linalg.norm(psi_tau, axis=1)
    n_psiA_tau = np.linalg.norm(np.einsum("ni,nij->nj", psi_tau, A_tau), axis=1)

    tail = grid >= grid[0] + (2.0 / 3.0) * (t_end - grid[0])

    def trend(values):
        end = float(values[-1])
        slope = trend_slope(grid, values)
        # a tail already at the integration floor counts as vanished
        flat_zero = float(np.max(values[tail])) < zero_tol
        return {"value": end, "slope": slope, "ok": bool(end <= 1e-12 or flat_zero or slope < TREND_TOL)}

    def lower(values):
        i = int(np.argmin(values))
        return {"value": float(values[i]), "tau": float(tv[i]), "ok": bool(values[i] < zero_tol)}

    trans = trend(n_psi)
    lim = trend(n_psiA)
    lim["value_tau_N"] = float(n_psiA_tau[-1])
    transversality = {
        "trans": trans,
        "partlim": lower(n_psi_tau),
        "lim": lim,
        "partlim_1": lower(n_psiA_tau),
    }

    # Lemma: psiA vanishes along tau_n iff psi(0) is a partial limit of lam I_0(tau_n)
    d = np.linalg.norm(psi0[None, :] - lam * I_tau, axis=1)
    j = int(np.argmin(d))
    lem1 = {
        "distance": float(d[j]),
        "tau": float(tv[j]),
        "consistent": bool((d[j] < zero_tol) == transversality["partlim_1"]["ok"]),
    }
    if lam > 0:
        tau_ok = transversality["partlim_1"]["ok"]
    else:
        # degenerate: psi(0) must be a partial limit of the directions I_0/|I_0|
        nI = np.linalg.norm(I_tau, axis=1)
        n0 = float(np.linalg.norm(psi0))
        if n0 == 0 or not np.any(nI > 0):
            tau_ok = False
        else:
            dirs = I_tau[nI > 0] / nI[nI > 0, None]
            tau_ok = bool(np.min(np.linalg.norm(dirs - psi0 / n0, axis=1)) < zero_tol)
        lem1["direction_check"] = tau_ok
    if norm_defect >= 1e-9:
        notes.append("normalization defect: multiplier is trivial")

    return PmpReport(
        max_residual=float(worst_h),
        adjoint_residual=adj_res,
        state_residual=st_res,
        normalization_defect=float(norm_defect),
        scale=float(scale),
        lam=float(lam),
        psi0=[float(v) for v in psi0],
        transversality=transversality,
        lem1_check=lem1,
        tau_consistent=bool(tau_ok),
        cap_touched=cap_touched,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Monotone case


@dataclass
class ConeReport:
    """Orthant-order diagnostics along the nominal path.

    ``sandwich`` lists, per basis direction ``e_j``, the triple
    ``(lam max_xi I_xi(tau_N)_j, psi(0)_j, lam I_0(t_end)_j)``. When
    ``lambda = 0`` the weight is read as ``1 / ||I_0(tau_N)||``, the limit
    weight of the normalized approximants ``psi_n(0) = lam_n I(tau_n)``.
    """

    gradient_sign_ok: bool
    offdiag_ok: bool
    shift_lower_bound: float
    psi_nonneg: float
    sandwich: list
    sandwich_ok: bool | None
    strict_point: float | None
    gradient_integral: list
    degeneracy_flag: bool
    applicable: bool
    notes: list = field(default_factory=list)


def monotone_report(
    p: ControlProblem,
    bundle: TrajectoryBundle,
    law: ControlLaw,
    multiplier,
    table,
    M_div: float = 1e6,
    slack: float = 1e-6,
) -> ConeReport:
    """Check the orthant hypotheses and the resulting estimates.

    Parameters
    ----------
    table : EvidenceTable
        Sampled ``I_xi(tau_n)``; the nominal row supplies the tau grid for
        the growth test of ``int dg/dx``.
    """
    path = _as_path(multiplier)
    grid = bundle.grid
    controls = _node_controls(bundle, law)
    Fs, Gs = [], []
    for t, x, u in zip(grid, bundle.x_path, controls):
        F, G = jacobian_x(p, t, x, u)
        Fs.append(F)
        Gs.append(G)
    Fs, Gs = np.array(Fs), np.array(Gs)
    m = p.state_dim
    off = Fs[:, ~np.eye(m, dtype=bool)]
    grad_ok = bool(np.all(Gs >= -1e-12))
    off_ok = bool(off.size == 0 or np.all(off >= -1e-12))
    d_lower = float(np.min(np.diagonal(Fs, axis1=1, axis2=2)))
    psi_nodes = np.atleast_2d(path(grid))
    psi_min = float(np.min(psi_nodes))
    applicable = grad_ok and off_ok
    notes = []
    if not applicable:
        notes.append("cone hypotheses fail: monotone conclusions inapplicable")

    strict = None
    pos = np.all(Gs > 1e-8, axis=1)
    if np.any(pos):
        strict = float(grid[int(np.argmax(pos))])

    # running integral of dg/dx at the sampled tau (trapezoid on the grid)
    h = np.diff(grid)
    cum = np.vstack([np.zeros(m), np.cumsum(0.5 * h[:, None] * (Gs[1:] + Gs[:-1]), axis=0)])
    tv = np.asarray(table.tau, dtype=float)
    tv_in = tv[tv <= bundle.t_end * (1 + 1e-12)]
    ints = np.array([[np.interp(s, grid, cum[:, j]) for j in range(m)] for s in tv_in])
    nrm = np.linalg.norm(ints, axis=1)
    growing = False
    if nrm.size >= 3:
        last = nrm[-3:]
        growing = bool(
            np.all(np.diff(last) > 0) and (last[-1] > M_div or last[-1] >= 2.0 * last[0])
        )
    zero_shift = off_ok and d_lower >= -1e-12
    flag = bool(applicable and zero_shift and growing)

    lam = float(path.lam)
    psi0 = np.atleast_1d(path.psi0)
    nominal = table.values[0]
    ok_rows = ~np.any(np.isnan(table.values[:, -1, :]), axis=1)
    upper = np.max(table.values[ok_rows, -1, :], axis=0)
    I_end = bundle.I_path[-1]
    if lam > 0:
        w = lam
    else:
        nI = float(np.linalg.norm(nominal[-1]))
        w = 1.0 / nI if nI > 0 else 0.0
    sandwich = [(float(w * upper[j]), float(psi0[j]), float(w * I_end[j])) for j in range(m)]
    ordered = all(a >= b - slack and b >= c - slack and c >= -slack for a, b, c in sandwich)
    return ConeReport(
        gradient_sign_ok=grad_ok,
        offdiag_ok=off_ok,
        shift_lower_bound=d_lower,
        psi_nonneg=psi_min,
        sandwich=sandwich,
        sandwich_ok=bool(ordered) if applicable else None,
        strict_point=strict,
        gradient_integral=[float(v) for v in nrm],
        degeneracy_flag=flag,
        applicable=applicable,
        notes=notes,
    )


def report_to_dict(r) -> dict:
    """Plain-dict form of a PmpReport or ConeReport for JSON output."""
    d = asdict(r)
    if isinstance(r, ConeReport):
        d["sandwich"] = [list(s) for s in r.sandwich]
    if isinstance(r, PmpReport):
        d["passed"] = r.passed()
    return d
