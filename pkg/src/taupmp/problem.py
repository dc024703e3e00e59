"""Control-problem model: dynamics, reward, control sets and control laws."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dsl
from .errors import InvalidParams, NonFiniteValue

FINITE_DIFFERENCE = "finite-difference"

VectorField = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
ScalarField = Callable[[float, np.ndarray, np.ndarray], float]


def _as_time_fn(v) -> Callable[[float], np.ndarray]:
    if callable(v):
        return lambda t: np.atleast_1d(np.asarray(v(t), dtype=float))
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    return lambda t: arr


@dataclass(frozen=True)
class Box:
    """Componentwise interval ``lo(t) <= u <= hi(t)``; bounds may be callables."""

    lo: object
    hi: object

    def bounds(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        lo = _as_time_fn(self.lo)(t)
        hi = _as_time_fn(self.hi)(t)
        if np.any(lo > hi):
            raise InvalidParams(f"empty box at t={t}: lo={lo}, hi={hi}")
        return lo, hi

    def project(self, u, t: float) -> np.ndarray:
        lo, hi = self.bounds(t)
        return np.clip(np.asarray(u, dtype=float), lo, hi)


@dataclass(frozen=True)
class Finite:
    """Finite point set; ``points`` is a list of vectors or a callable of t."""

    points: object

    def candidates(self, t: float) -> np.ndarray:
        pts = self.points(t) if callable(self.points) else self.points
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.size == 0:
            raise InvalidParams("finite control set is empty")
        return pts

    def project(self, u, t: float) -> np.ndarray:
        pts = self.candidates(t)
        d = np.linalg.norm(pts - np.asarray(u, dtype=float), axis=1)
        return pts[int(np.argmin(d))]


ControlSet = Box | Finite


def projection_residual(cs: ControlSet, u, t: float) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(np.linalg.norm(cs.project(u, t) - u))


# ---------------------------------------------------------------------------
# Control laws


class ControlLaw:
    """Admissible control u(t); subclasses supply evaluation and switch times."""

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def breakpoints(self, a: float, b: float) -> list[float]:
        """Discontinuity times inside the open interval (a, b)."""
        raise NotImplementedError


class ClosedForm(ControlLaw):
    """Control given by a formula of time.

    Jumps are found by scanning at ``scan_step`` and bisecting each
    suspicious cell down to ``locate_tol``; cells whose change vanishes
    under refinement are continuous and dropped.
    """

    def __init__(
        self,
        fn: Callable[[float], object],
        scan_step: float = 1e-2,
        jump_tol: float = 1e-6,
        locate_tol: float = 1e-10,
        label: str = "",
    ):
        self.fn = fn
        self.scan_step = scan_step
        self.jump_tol = jump_tol
        self.locate_tol = locate_tol
        self.label = label
        self._cache: dict = {}

    def __call__(self, t: float) -> np.ndarray:
        return np.array(self.fn(t), dtype=float, ndmin=1)

    def __repr__(self) -> str:
        return f"ClosedForm({self.label or self.fn!r})"

    def breakpoints(self, a: float, b: float) -> list[float]:
        key = (float(a), float(b))
        if key not in self._cache:
            self._cache[key] = self._scan(*key)
        return list(self._cache[key])

    def _scan(self, a: float, b: float) -> tuple:
        if b <= a:
            return ()
        n = max(1, int(math.ceil((b - a) / self.scan_step)))
        ts = np.linspace(a, b, n + 1)
        vals = np.array([self(t) for t in ts])
        d = np.max(np.abs(np.diff(vals, axis=0)), axis=1)
        # smooth laws change by similar amounts in adjacent cells; a jump stands out
        pad = np.concatenate(([np.inf], d, [np.inf]))
        calm = np.minimum(pad[:-2], pad[2:])
        jumps = (d > self.jump_tol) & (d > 2.0 * calm)
        out = []
        for i in np.flatnonzero(jumps):
            lo, hi = ts[i], ts[i + 1]
            ulo, uhi = vals[i], vals[i + 1]
            while hi - lo > self.locate_tol:
                mid = 0.5 * (lo + hi)
                um = self(mid)
                if np.max(np.abs(um - ulo)) > np.max(np.abs(uhi - um)):
                    hi, uhi = mid, um
                else:
                    lo, ulo = mid, um
            if np.max(np.abs(uhi - ulo)) > 0.5 * self.jump_tol:
                tb = 0.5 * (lo + hi)
                if a + self.locate_tol < tb < b - self.locate_tol:
                    out.append(float(tb))
        # a law that passes through a middle value (sgn at 0) yields twin points
        merged: list[float] = []
        for tb in out:
            if merged and tb - merged[-1] < 8.0 * self.locate_tol:
                merged[-1] = 0.5 * (merged[-1] + tb)
            else:
                merged.append(tb)
        return tuple(merged)


class PiecewiseConstant(ControlLaw):
    """Right-continuous step function: ``values[i]`` on ``[times[i], times[i+1])``."""

    def __init__(self, times: Sequence[float], values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] == 1 and self.times.size > 1 and self.values.shape[1] == self.times.size:
            self.values = self.values.T
        if self.values.shape[0] != self.times.size:
            raise InvalidParams("piecewise law needs one value per grid time")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidParams("piecewise law grid must be strictly increasing")

    def __call__(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.values[max(i, 0)].copy()

    def breakpoints(self, a: float, b: float) -> list[float]:
        return [float(s) for s in self.times if a < s < b]


# ---------------------------------------------------------------------------
# Problem


@dataclass(frozen=True)
class ControlProblem:
    """Dynamics ``x' = f(t,x,u)``, reward rate ``g(t,x,u)``, ``x(0) = x_init``.

    ``dfdx`` and ``dgdx`` are callables or the string ``"finite-difference"``.
    """

    state_dim: int
    control_dim: int
    x_init: np.ndarray
    f: VectorField
    g: ScalarField
    dfdx: object
    dgdx: object
    control_set: ControlSet
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise InvalidParams("state_dim and control_dim must be positive")
        x0 = np.atleast_1d(np.asarray(self.x_init, dtype=float))
        if x0.shape != (self.state_dim,):
            raise InvalidParams(f"x_init must have length {self.state_dim}")
        object.__setattr__(self, "x_init", x0)


def _fd_step(x: np.ndarray) -> float:
    return max(1e-6, 1e-6 * float(np.linalg.norm(x)))


def fd_jacobian(fun, t: float, x: np.ndarray, u: np.ndarray, scalar: bool = False):
    """Central differences with step ``max(1e-6, 1e-6*||x||)``."""
    x = np.asarray(x, dtype=float)
    h = _fd_step(x)
    m = x.size
    cols = []
    for j in range(m):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((np.asarray(fun(t, xp, u), dtype=float) - np.asarray(fun(t, xm, u), dtype=float)) / (2 * h))
    if scalar:
        return np.array([float(c) for c in cols])
    return np.column_stack(cols)


def _finite(*vals) -> None:
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue("dynamics produced a non-finite value")


def evaluate_dynamics(p: ControlProblem, t: float, x, u) -> tuple[np.ndarray, float]:
    """Return ``(f(t,x,u), g(t,x,u))``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dx = np.asarray(p.f(t, x, u), dtype=float).reshape(p.state_dim)
    rate = float(p.g(t, x, u))
    _finite(dx, rate)
    return dx, rate


def jacobian_x(p: ControlProblem, t: float, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(df/dx, dg/dx)`` as an ``(m, m)`` matrix and an ``(m,)`` covector."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    m = p.state_dim
    if isinstance(p.dfdx, str):
        F = fd_jacobian(p.f, t, x, u)
    else:
        F = np.asarray(p.dfdx(t, x, u), dtype=float).reshape(m, m)
    if isinstance(p.dgdx, str):
        G = fd_jacobian(p.g, t, x, u, scalar=True)
    else:
        G = np.asarray(p.dgdx(t, x, u), dtype=float).reshape(m)
    _finite(F, G)
    return F, G


# ---------------------------------------------------------------------------
# Evaluation times


@dataclass(frozen=True)
class TauSequence:
    """Strictly increasing horizon sequence standing in for tau -> infinity."""

    values: tuple
    growth: str = "explicit"
    t0: float | None = None
    ratio: float | None = None

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 3:
            raise InvalidParams("a tau sequence needs at least 3 values")
        if vals[0] <= 0 or any(b <= a for a, b in zip(vals, vals[1:])):
            raise InvalidParams("tau values must be positive and strictly increasing")
        object.__setattr__(self, "values", vals)

    @classmethod
    def geometric(cls, t0: float = 5.0, ratio: float = 2.0, n: int = 6) -> "TauSequence":
        if ratio <= 1:
            raise InvalidParams("geometric ratio must exceed 1")
        return cls(tuple(t0 * ratio**i for i in range(n)), "geometric", t0, ratio)

    @classmethod
    def explicit(cls, values: Sequence[float]) -> "TauSequence":
        return cls(tuple(values))

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]


# ---------------------------------------------------------------------------
# Problem files


def _dsl_scalar(src: str, dims) -> dsl.Expr:
    return dsl.parse(str(src), dims)


def _time_bound(v, dims):
    if isinstance(v, str):
        e = dsl.parse(v, (dims[0], dims[1]))
        return lambda t: e(t, [0.0] * dims[0], [0.0] * dims[1])
    return float(v)


def problem_from_dict(doc: dict) -> tuple[ControlProblem, ControlLaw | None]:
    """Build a problem (and optional law) from a parsed problem document."""
    try:
        m = int(doc["state_dim"])
        k = int(doc["control_dim"])
        dims = (m, k)
        f_src = doc["f"]
        g_src = doc["g"]
    except KeyError as exc:
        raise InvalidParams(f"problem document lacks field {exc}") from None
    if isinstance(f_src, str):
        f_src = [f_src]
    if len(f_src) != m:
        raise InvalidParams(f"f must list {m} expressions")
    f_exprs = [_dsl_scalar(s, dims) for s in f_src]
    g_expr = _dsl_scalar(g_src, dims)

    def f(t, x, u):
        return np.array([e(t, x, u) for e in f_exprs])

    def g(t, x, u):
        return g_expr(t, x, u)

    dfdx = doc.get("dfdx")
    if dfdx == FINITE_DIFFERENCE:
        dfdx_fn = FINITE_DIFFERENCE
    elif dfdx is None:
        def dfdx_fn(t, x, u):
            return np.vstack([e.value_and_grad(t, x, u)[1] for e in f_exprs])
    else:
        rows = [[_dsl_scalar(s, dims) for s in row] for row in dfdx]
        def dfdx_fn(t, x, u):
            return np.array([[e(t, x, u) for e in row] for row in rows])

    dgdx = doc.get("dgdx")
    if dgdx == FINITE_DIFFERENCE:
        dgdx_fn = FINITE_DIFFERENCE
    elif dgdx is None:
        def dgdx_fn(t, x, u):
            return g_expr.value_and_grad(t, x, u)[1]
    else:
        comps = [_dsl_scalar(s, dims) for s in dgdx]
        def dgdx_fn(t, x, u):
            return np.array([e(t, x, u) for e in comps])

    cs_doc = doc.get("control_set")
    if not cs_doc:
        raise InvalidParams("problem document lacks control_set")
    if "box" in cs_doc:
        lo = [_time_bound(v, dims) for v in cs_doc["box"]["lo"]]
        hi = [_time_bound(v, dims) for v in cs_doc["box"]["hi"]]
        if len(lo) != k or len(hi) != k:
            raise InvalidParams(f"box bounds must have length {k}")
        cs: ControlSet = Box(
            lambda t: [b(t) if callable(b) else b for b in lo],
            lambda t: [b(t) if callable(b) else b for b in hi],
        )
    elif "finite" in cs_doc:
        cs = Finite(cs_doc["finite"])
    else:
        raise InvalidParams("control_set must be 'box' or 'finite'")

    problem = ControlProblem(
        m, k, np.asarray(doc["x_init"], dtype=float), f, g, dfdx_fn, dgdx_fn, cs,
        name=doc.get("name", "file"),
    )
    law = law_from_dict(doc.get("law"), k) if doc.get("law") else None
    return problem, law


def law_from_dict(doc, k: int) -> ControlLaw:
    if "closed_form" in doc:
        srcs = doc["closed_form"]
        if isinstance(srcs, str):
            srcs = [srcs]
        exprs = [dsl.parse(s, (0, 0)) for s in srcs]
        if len(exprs) != k:
            raise InvalidParams(f"law must list {k} expressions")
        return ClosedForm(lambda t: [e(t, [], []) for e in exprs], label=";".join(srcs))
    if "piecewise" in doc:
        pw = doc["piecewise"]
        return PiecewiseConstant(pw["times"], pw["values"])
    raise InvalidParams("law must be 'closed_form' or 'piecewise'")


def load_problem(path: str | Path) -> tuple[ControlProblem, ControlLaw | None]:
    with open(path, encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))
