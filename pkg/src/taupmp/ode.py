"""Adaptive integration of trajectories, fundamental matrices and adjoints.

The stepper is the Dormand--Prince 5(4) pair with FSAL and standard
proportional step control. Accepted nodes store the state and its
derivative, so the dense output is the cubic Hermite interpolant.
Control-law jumps split the integration into segments; each segment starts
a fresh step sequence and the law is sampled strictly inside it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, StepSizeUnderflow
from .problem import ControlLaw, ControlProblem, jacobian_x

__all__ = [
    "IntegratorConfig",
    "OdeSolution",
    "integrate",
    "TrajectoryBundle",
    "AdjointPath",
    "integrate_bundle",
    "integrate_bundles",
    "adjoint_via_cauchy",
    "adjoint_via_backward",
    "write_bundle_csv",
]


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf
    max_steps: int = 2_000_000

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("integrator tolerances must be positive")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")

    def tighter(self, factor: float = 10.0) -> "IntegratorConfig":
        return IntegratorConfig(
            self.rel_tol / factor, self.abs_tol / factor, self.max_step, self.max_steps
        )


# Dormand--Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_E = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)
_A_MAT = np.zeros((7, 7))
for _i, _row in enumerate(_A):
    _A_MAT[_i, : len(_row)] = _row
_E_VEC = np.array(_E)
_A_ROWS = [_A_MAT[s, :s] for s in range(7)]


@dataclass
class OdeSolution:
    """Accepted nodes (ascending) with derivatives; calling it gives Hermite
    dense output.

    At a breakpoint the node time appears twice (left and right limit);
    evaluation exactly there returns the right-hand segment.
    """

    t: np.ndarray
    y: np.ndarray
    dy: np.ndarray

    def __call__(self, s):
        t = self.t
        scalar = np.ndim(s) == 0
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        idx = np.searchsorted(t, s_arr, side="right") - 1
        idx = np.clip(idx, 0, len(t) - 2)
        # skip zero-length intervals at duplicated breakpoint nodes
        dup = t[idx + 1] == t[idx]
        while np.any(dup):
            idx = np.where(dup, np.minimum(idx + 1, len(t) - 2), idx)
            dup = (t[idx + 1] == t[idx]) & (idx < len(t) - 2)
        t0 = t[idx]
        h = t[idx + 1] - t0
        th = ((s_arr - t0) / h)[:, None]
        y0, y1 = self.y[idx], self.y[idx + 1]
        d0, d1 = self.dy[idx] * h[:, None], self.dy[idx + 1] * h[:, None]
        th2 = th * th
        th3 = th2 * th
        out = (
            (2 * th3 - 3 * th2 + 1) * y0
            + (th3 - 2 * th2 + th) * d0
            + (-2 * th3 + 3 * th2) * y1
            + (th3 - th2) * d1
        )
        return out[0] if scalar else out


def _initial_step(rhs, t0, y0, f0, direction, cfg, span):
    scale = cfg.abs_tol + np.abs(y0) * cfg.rel_tol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span, cfg.max_step)
    y1 = y0 + direction * h0 * f0
    f1 = rhs(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span, cfg.max_step)


def _segment(rhs, a, b, y0, cfg, ts, ys, dys, counter):
    """Integrate from a to b (either direction), appending accepted nodes."""
    direction = 1.0 if b >= a else -1.0
    span = abs(b - a)
    t = a
    y = np.array(y0, dtype=float)
    k1 = np.asarray(rhs(t, y), dtype=float)
    ts.append(t)
    ys.append(y)
    dys.append(k1)
    if span == 0.0:
        return y
    h = _initial_step(rhs, t, y, k1, direction, cfg, span)
    rtol, atol = cfg.rel_tol, cfg.abs_tol
    K = np.empty((7, y.size))
    while direction * (b - t) > 0:
        counter[0] += 1
        if counter[0] > cfg.max_steps:
            raise StepSizeUnderflow(f"step budget exhausted at t={t}")
        h = min(h, cfg.max_step)
        last = False
        if h >= abs(b - t) * (1 - 1e-12):
            h = abs(b - t)
            last = True
        min_h = 16 * np.spacing(max(abs(t), 1.0))
        if h < min_h:
            raise StepSizeUnderflow(f"step size underflow at t={t:.6g} (h={h:.3g})")
        hs = direction * h
        K[0] = k1
        for s in range(1, 7):
            yi = y + hs * (_A_ROWS[s] @ K[:s])
            K[s] = rhs(b if (s >= 5 and last) else t + _C[s] * hs, yi)
        y_new = yi
        err = hs * (_E_VEC @ K)
        if not np.all(np.isfinite(y_new)):
            if h <= min_h * 4:
                raise NonFiniteValue(f"solution became non-finite near t={t:.6g}")
            h *= 0.25
            continue
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.max(np.abs(err) / scale))
        if err_norm <= 1.0:
            t = b if last else t + hs
            y = y_new
            k1 = K[6].copy()
            ts.append(t)
            ys.append(y)
            dys.append(k1)
            fac = 5.0 if err_norm == 0.0 else min(5.0, max(0.2, 0.9 * err_norm ** -0.2))
            h *= fac
        else:
            h *= max(0.2, 0.9 * err_norm ** -0.2)
    return y


def integrate(
    rhs: Callable,
    t0: float,
    t1: float,
    y0,
    cfg: IntegratorConfig | None = None,
    breakpoints: Sequence[float] = (),
) -> OdeSolution:
    """Integrate ``y' = rhs(t, y, seg)`` from t0 to t1.

    ``seg`` is the ``(start, end)`` pair of the current smooth segment, so
    right-hand sides may sample discontinuous inputs strictly inside it.
    Breakpoints become duplicated nodes.
    """
    cfg = cfg or IntegratorConfig()
    lo, hi = min(t0, t1), max(t0, t1)
    bps = sorted({float(s) for s in breakpoints if lo < s < hi}, reverse=bool(t1 < t0))
    edges = [t0, *bps, t1]
    ts: list = []
    ys: list = []
    dys: list = []
    counter = [0]
    y = np.asarray(y0, dtype=float)
    for a, b in zip(edges, edges[1:]):
        seg = (a, b)
        y = _segment(lambda t, yy: rhs(t, yy, seg), a, b, y, cfg, ts, ys, dys, counter)
    if len(ts) == 1:
        ts.append(ts[0])
        ys.append(ys[0])
        dys.append(dys[0])
    return OdeSolution(np.array(ts), np.array(ys), np.array(dys))


def _law_time(t: float, seg: tuple, jumps: set) -> float:
    """Clamp a stage time away from segment ends that are control jumps."""
    a, b = min(seg), max(seg)
    delta = min(1e-9, 0.25 * (b - a))
    if a in jumps and t < a + delta:
        return a + delta
    if b in jumps and t > b - delta:
        return b - delta
    return t


# ---------------------------------------------------------------------------
# Bundles


@dataclass
class TrajectoryBundle:
    """State, fundamental matrix and its inverse, sensitivity covector I and
    objective J on a shared adaptive grid, for one perturbation ``xi``."""

    grid: np.ndarray
    x_path: np.ndarray
    A_path: np.ndarray
    Ainv_path: np.ndarray
    I_path: np.ndarray
    J_path: np.ndarray
    xi: np.ndarray
    problem: ControlProblem = field(repr=False)
    law: ControlLaw = field(repr=False)
    solution: OdeSolution = field(repr=False)
    breakpoints: tuple = ()

    @property
    def m(self) -> int:
        return self.x_path.shape[1]

    @property
    def t_end(self) -> float:
        return float(self.grid[-1])

    def _unpack(self, y):
        m = self.m
        y = np.atleast_2d(y)
        n = y.shape[0]
        x = y[:, :m]
        A = y[:, m : m + m * m].reshape(n, m, m)
        Ainv = y[:, m + m * m : m + 2 * m * m].reshape(n, m, m)
        I = y[:, m + 2 * m * m : 2 * m + 2 * m * m]
        J = y[:, -1]
        return x, A, Ainv, I, J

    def at(self, t):
        """Dense ``(x, A, Ainv, I, J)`` at time(s) ``t``."""
        scalar = np.ndim(t) == 0
        parts = self._unpack(self.solution(np.atleast_1d(t)))
        return tuple(p[0] for p in parts) if scalar else parts

    def x_at(self, t):
        return self.at(t)[0]

    def I_at(self, t):
        return self.at(t)[3]

    def inverse_defect(self) -> float:
        """max over nodes of ||A Ainv - Id||_inf."""
        eye = np.eye(self.m)
        prod = np.einsum("nij,njk->nik", self.A_path, self.Ainv_path)
        return float(np.max(np.abs(prod - eye)))


def _pack(x, A, Ainv, I, J):
    return np.concatenate([x, A.ravel(), Ainv.ravel(), I, [J]])


def integrate_bundle(
    p: ControlProblem,
    law: ControlLaw,
    xi=None,
    t_end: float = 10.0,
    cfg: IntegratorConfig | None = None,
    nodes: Sequence[float] = (),
) -> TrajectoryBundle:
    """Advance x, A, A^{-1}, I and J together along ``law`` up to ``t_end``.

    ``nodes`` are extra times forced onto the grid (for instance the
    tau-sequence), so that values there are step endpoints rather than
    interpolants.
    """
    m = p.state_dim
    xi = np.zeros(m) if xi is None else xi
    return integrate_bundles(p, law, [xi], t_end, cfg, nodes)[0]


def integrate_bundles(
    p: ControlProblem,
    law: ControlLaw,
    xis: Sequence,
    t_end: float = 10.0,
    cfg: IntegratorConfig | None = None,
    nodes: Sequence[float] = (),
) -> list[TrajectoryBundle]:
    """Bundles for several perturbations on one shared grid.

    The stacked system is stepped once, so the law and the step control are
    shared; the max-norm error test bounds every member separately.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    m = p.state_dim
    xis = [np.asarray(xi, dtype=float).reshape(m) for xi in xis]
    eye = np.eye(m)
    bps = tuple(law.breakpoints(0.0, t_end))
    jumps = set(bps)
    f, g, dfdx, dgdx = p.f, p.g, p.dfdx, p.dgdx
    analytic = not isinstance(dfdx, str) and not isinstance(dgdx, str)
    n_mat = m * m
    width = 2 * m + 2 * n_mat + 1
    offsets = [k * width for k in range(len(xis))]

    def rhs(t, y, seg):
        u = law(_law_time(t, seg, jumps) if jumps else t)
        out = np.empty_like(y)
        for o in offsets:
            x = y[o : o + m]
            A = y[o + m : o + m + n_mat].reshape(m, m)
            Ainv = y[o + m + n_mat : o + m + 2 * n_mat].reshape(m, m)
            if analytic:
                F = np.asarray(dfdx(t, x, u)).reshape(m, m)
                G = np.asarray(dgdx(t, x, u)).reshape(m)
            else:
                F, G = jacobian_x(p, t, x, u)
            out[o : o + m] = f(t, x, u)
            out[o + m : o + m + n_mat] = (F @ A).ravel()
            out[o + m + n_mat : o + m + 2 * n_mat] = (-(Ainv @ F)).ravel()
            out[o + m + 2 * n_mat : o + width - 1] = G @ A
            out[o + width - 1] = g(t, x, u)
        return out

    y0 = np.concatenate([_pack(p.x_init + xi, eye, eye, np.zeros(m), 0.0) for xi in xis])
    # extra nodes that nearly coincide with a jump would leave slivers
    extra = tuple(s for s in nodes if all(abs(s - j) > 1e-9 * (1.0 + abs(j)) for j in bps))
    sol = integrate(rhs, 0.0, t_end, y0, cfg, bps + extra)
    n = len(sol.t)
    out = []
    for xi, o in zip(xis, offsets):
        ys = sol.y[:, o : o + width]
        own = sol if len(xis) == 1 else OdeSolution(sol.t, ys, sol.dy[:, o : o + width])
        out.append(
            TrajectoryBundle(
                grid=sol.t,
                x_path=ys[:, :m],
                A_path=ys[:, m : m + n_mat].reshape(n, m, m),
                Ainv_path=ys[:, m + n_mat : m + 2 * n_mat].reshape(n, m, m),
                I_path=ys[:, m + 2 * n_mat : 2 * m + 2 * n_mat],
                J_path=ys[:, -1],
                xi=xi,
                problem=p,
                law=law,
                solution=own,
                breakpoints=bps,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Adjoints


@dataclass
class AdjointPath:
    """Shadow-price covector on a grid, with the multiplier weight ``lam``."""

    grid: np.ndarray
    psi_path: np.ndarray
    lam: float
    psi0: np.ndarray
    evaluator: Callable | None = field(default=None, repr=False)

    def __call__(self, t):
        if self.evaluator is not None:
            return self.evaluator(t)
        sol = OdeSolution(self.grid, self.psi_path, np.zeros_like(self.psi_path))
        return sol(t)

    def scaled(self, c: float) -> "AdjointPath":
        ev = self.evaluator
        return AdjointPath(
            self.grid,
            c * self.psi_path,
            c * self.lam,
            c * self.psi0,
            (lambda t: c * ev(t)) if ev is not None else None,
        )


def adjoint_via_cauchy(b: TrajectoryBundle, psi0, lam: float) -> AdjointPath:
    """psi(T) = (psi0 - lam * I(T)) A^{-1}(T) at every node and in between."""
    psi0 = np.atleast_1d(np.asarray(psi0, dtype=float))
    lam = float(lam)
    coeff = psi0[None, :] - lam * b.I_path
    psi = np.einsum("ni,nij->nj", coeff, b.Ainv_path)

    def evaluator(t):
        _, _, Ainv, I, _ = b.at(t)
        if np.ndim(t) == 0:
            return (psi0 - lam * I) @ Ainv
        return np.einsum("ni,nij->nj", psi0[None, :] - lam * I, Ainv)

    return AdjointPath(b.grid.copy(), psi, lam, psi0.copy(), evaluator)


def adjoint_via_backward(
    p: ControlProblem,
    b: TrajectoryBundle,
    lam: float,
    psi_terminal,
    t_terminal: float,
    cfg: IntegratorConfig | None = None,
) -> AdjointPath:
    """Integrate psi' = -psi df/dx - lam dg/dx backward from ``t_terminal``."""
    if t_terminal > b.t_end * (1 + 1e-12):
        raise ValueError("t_terminal lies beyond the bundle horizon")
    m = p.state_dim
    lam = float(lam)
    law = b.law
    jumps = set(b.breakpoints)
    bps = [s for s in b.breakpoints if s < t_terminal]

    def rhs(t, psi, seg):
        u = law(_law_time(t, seg, jumps))
        x = b.solution(t)[:m]
        F, G = jacobian_x(p, t, x, u)
        return -(psi @ F) - lam * G

    psiT = np.atleast_1d(np.asarray(psi_terminal, dtype=float))
    cfg = cfg or IntegratorConfig()
    # backward, absolute errors grow with the homogeneous solution, so the
    # absolute tolerance is capped relative to the terminal scale
    tT = float(t_terminal)
    xT = b.solution(tT)[:m]
    _, GT = jacobian_x(p, tT, xT, law(_law_time(tT, (0.0, tT), jumps)))
    scale = max(float(np.max(np.abs(psiT))), abs(lam) * float(np.max(np.abs(GT))))
    if scale > 0:
        cfg = IntegratorConfig(
            cfg.rel_tol, min(cfg.abs_tol, cfg.rel_tol * scale), cfg.max_step, cfg.max_steps
        )
    sol = integrate(rhs, tT, 0.0, psiT, cfg, bps)
    # ascending order; duplicated breakpoint nodes keep their left/right order
    order = np.arange(len(sol.t))[::-1]
    asc = OdeSolution(sol.t[order], sol.y[order], sol.dy[order])
    return AdjointPath(asc.t, asc.y, lam, asc.y[0].copy(), asc)


def write_bundle_csv(b: TrajectoryBundle, path) -> None:
    """Columns: t, x1..xm, A11..Amm, I1..Im, J."""
    m = b.m
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(m)]
        + [f"A{i + 1}{j + 1}" for i in range(m) for j in range(m)]
        + [f"I{i + 1}" for i in range(m)]
        + ["J"]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for n, t in enumerate(b.grid):
            row = [t, *b.x_path[n], *b.A_path[n].ravel(), *b.I_path[n], b.J_path[n]]
            w.writerow([repr(float(v)) for v in row])
