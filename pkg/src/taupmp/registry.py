"""Built-in worked examples with their candidate optimal laws and references.

Every entry returns ``(problem, law, known)`` where ``known`` holds
closed-form reference paths (state, fundamental matrix, sensitivity
covector, objective, shadow price) whenever they are available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable
from urllib.parse import parse_qsl

import numpy as np

from . import dsl
from .errors import InvalidParams, UnknownExample
from .problem import Box, ClosedForm, ControlLaw, ControlProblem


@dataclass(frozen=True)
class KnownSolution:
    """Closed-form reference paths; any field may be ``None``."""

    x: Callable | None = None
    u: Callable | None = None
    A: Callable | None = None
    I: Callable | None = None
    J: Callable | None = None
    psi: Callable | None = None
    lam: float | None = None
    verdict: str | None = None
    I_star: np.ndarray | None = None
    iota_star: np.ndarray | None = None


_ALIASES = {
    "α": "alpha",
    "β": "beta",
    "ν": "nu",
    "σ": "sigma",
    "ς": "varsigma",
    "phase": "varsigma",
    "K₀": "K0",
    "k0": "K0",
}

_STRING_PARAMS = {"g", "h"}


def _normalize(params: dict | None) -> dict:
    out = {}
    for key, val in (params or {}).items():
        key = _ALIASES.get(key, key)
        if key in _STRING_PARAMS:
            out[key] = str(val)
            continue
        try:
            out[key] = float(val)
        except (TypeError, ValueError):
            raise InvalidParams(f"parameter {key!r} must be numeric, got {val!r}") from None
    return out


def _reject_unknown(name: str, params: dict, allowed: set) -> None:
    extra = set(params) - allowed
    if extra:
        raise InvalidParams(f"{name}: unknown parameter(s) {sorted(extra)}")


# ---------------------------------------------------------------------------


def _seisei(params: dict):
    _reject_unknown("seisei", params, set())

    def f(t, x, u):
        return np.array([u[0] * x[0]])

    def g(t, x, u):
        return x[0] * math.exp(-2.0 * t)

    def dfdx(t, x, u):
        return np.array([[u[0]]])

    def dgdx(t, x, u):
        return np.array([math.exp(-2.0 * t)])

    p = ControlProblem(1, 1, np.array([1.0]), f, g, dfdx, dgdx, Box([0.5], [1.0]), "seisei", {})
    law = ClosedForm(lambda t: [1.0], label="u=1")
    known = KnownSolution(
        x=lambda t: np.array([math.exp(t)]),
        u=lambda t: np.array([1.0]),
        A=lambda t: np.array([[math.exp(t)]]),
        I=lambda t: np.array([1.0 - math.exp(-t)]),
        J=lambda t: 1.0 - math.exp(-t),
        psi=lambda t: np.array([math.exp(-2.0 * t)]),
        lam=1.0,
        verdict="converged",
        I_star=np.array([1.0]),
    )
    return p, law, known


def _sternstern(params: dict):
    _reject_unknown("sternstern", params, {"varsigma"})
    vs = params.get("varsigma", 0.0)

    def f(t, x, u):
        return np.array([x[1], -x[0] + u[0]])

    def g(t, x, u):
        return x[1]

    F = np.array([[0.0, 1.0], [-1.0, 0.0]])
    G = np.array([0.0, 1.0])

    def dfdx(t, x, u):
        return F

    def dgdx(t, x, u):
        return G

    p = ControlProblem(
        2, 1, np.array([1.0, 0.0]), f, g, dfdx, dgdx, Box([-1.0], [1.0]), "sternstern",
        {"varsigma": vs},
    )

    def u0(t):
        s = math.sin(vs - t)
        return [float((s > 0) - (s < 0))]

    law = ClosedForm(u0, label=f"u=sgn sin({vs}-t)")
    known = KnownSolution(
        u=lambda t: np.array(u0(t)),
        A=lambda t: np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]]),
        I=lambda t: np.array([math.cos(t) - 1.0, math.sin(t)]),
        psi=lambda t: np.array([math.cos(vs - t) - 1.0, math.sin(vs - t)]),
        lam=1.0,
        verdict="converged",
        I_star=np.array([math.cos(vs) - 1.0, math.sin(vs)]),
    )
    return p, law, known


def _linlin(params: dict):
    _reject_unknown("linlin", params, {"alpha", "beta", "u"})
    alpha = params.get("alpha", 0.0)
    beta = params.get("beta", 0.5)
    if alpha > beta:
        raise InvalidParams(f"linlin needs alpha <= beta, got {alpha} > {beta}")
    if "u" in params:
        c = params["u"]
        if not alpha <= c <= beta:
            raise InvalidParams(f"constant control {c} outside [{alpha}, {beta}]")
    elif beta < 1.0:
        c = beta
    elif alpha >= 1.0:
        c = alpha
    else:
        raise InvalidParams(
            f"linlin with alpha={alpha} < 1 <= beta={beta} has no tau-optimal control; "
            "pass u=<constant> to study a specific law"
        )

    def f(t, x, u):
        return np.array([u[0] * x[0]])

    def g(t, x, u):
        return (1.0 - u[0]) * x[0]

    def dfdx(t, x, u):
        return np.array([[u[0]]])

    def dgdx(t, x, u):
        return np.array([1.0 - u[0]])

    p = ControlProblem(
        1, 1, np.array([1.0]), f, g, dfdx, dgdx, Box([alpha], [beta]), "linlin",
        {"alpha": alpha, "beta": beta, "u": c},
    )
    law = ClosedForm(lambda t: [c], label=f"u={c}")

    def I_ref(t):
        if c == 0.0:
            return np.array([t])
        return np.array([(1.0 - c) * math.expm1(c * t) / c])

    if c == 1.0:
        verdict, lam, iota, istar = "converged", 1.0, None, np.array([0.0])
        psi = lambda t: np.array([0.0])  # noqa: E731
    else:
        # |I| grows without bound for every constant c != 1 with c >= 0
        sign = 1.0 if c < 1.0 else -1.0
        if c < 0.0:
            verdict, lam, iota = "converged", 1.0, None
            istar = np.array([-(1.0 - c) / c])
            psi = lambda t: np.array([(istar[0] - I_ref(t)[0]) * math.exp(-c * t)])  # noqa: E731
        else:
            verdict, lam, istar = "diverged", 0.0, None
            iota = np.array([sign])
            psi = lambda t: np.array([sign * math.exp(-c * t)])  # noqa: E731

    known = KnownSolution(
        x=lambda t: np.array([math.exp(c * t)]),
        u=lambda t: np.array([c]),
        A=lambda t: np.array([[math.exp(c * t)]]),
        I=I_ref,
        J=lambda t: float(I_ref(t)[0]),
        psi=psi,
        lam=lam,
        verdict=verdict,
        I_star=istar,
        iota_star=iota,
    )
    return p, law, known


AVAV_DEFAULT = {"nu": 0.0, "sigma": 0.5, "b": 0.375, "K0": 1.0}
AVAV_DEFAULT_WEIGHT = "(1+t)^(-4/3)"


def avav_weights(params: dict) -> tuple[dsl.Expr, dsl.Expr]:
    g_src = params.get("g", AVAV_DEFAULT_WEIGHT)
    h_src = params.get("h", AVAV_DEFAULT_WEIGHT)
    return dsl.parse(g_src, (0, 0)), dsl.parse(h_src, (0, 0))


def validate_avav(params: dict) -> dict:
    full = {**AVAV_DEFAULT, "umax": 1e6, **params}
    if not 0.0 < full["sigma"] <= 1.0:
        raise InvalidParams(f"sigma must lie in (0, 1], got {full['sigma']}")
    if full["b"] <= 0.0:
        raise InvalidParams(f"b must be positive, got {full['b']}")
    if full["K0"] <= 0.0:
        raise InvalidParams(f"K0 must be positive, got {full['K0']}")
    if full["nu"] < 0.0:
        raise InvalidParams(f"nu must be nonnegative, got {full['nu']}")
    if full["umax"] <= 0.0:
        raise InvalidParams("umax must be positive")
    return full


def _is_default_avav(full: dict) -> bool:
    return (
        all(full[k] == v for k, v in AVAV_DEFAULT.items())
        and full.get("g", AVAV_DEFAULT_WEIGHT) == AVAV_DEFAULT_WEIGHT
        and full.get("h", AVAV_DEFAULT_WEIGHT) == AVAV_DEFAULT_WEIGHT
    )


class _ShotLaw(ControlLaw):
    """Investment law recovered by shooting, computed on first use."""

    def __init__(self, full: dict):
        self.full = full
        self._path = None

    def _solve(self):
        from .bvp import build_avav_system, shoot

        g_e, h_e = avav_weights(self.full)
        sys_ = build_avav_system(
            self.full["nu"], self.full["sigma"], self.full["b"], self.full["K0"], g_e, h_e
        )
        res = shoot(sys_, {"lo": [1e-4], "hi": [1e3]}, T_max=200.0)
        self._path = res.solution
        self._h = h_e

    def __call__(self, t):
        if self._path is None:
            self._solve()
        z = self._path(t)
        nu, b = self.full["nu"], self.full["b"]
        u = math.exp(nu * t) * z[1] / (b * self._h(t, [], []))
        return np.array([min(max(u, 0.0), self.full["umax"])])

    def breakpoints(self, a, b):
        return []


def _avav(params: dict):
    _reject_unknown("avav", params, {"nu", "sigma", "b", "K0", "umax", "g", "h"})
    full = validate_avav(params)
    nu, sigma, b, K0 = full["nu"], full["sigma"], full["b"], full["K0"]
    g_e, h_e = avav_weights(full)

    def gw(t):
        return g_e(t, [], [])

    def hw(t):
        return h_e(t, [], [])

    def f(t, x, u):
        return np.array([-nu * x[0] + u[0]])

    def g(t, x, u):
        return gw(t) * x[0] ** sigma - hw(t) * 0.5 * b * u[0] ** 2

    def dfdx(t, x, u):
        return np.array([[-nu]])

    def dgdx(t, x, u):
        return np.array([sigma * gw(t) * x[0] ** (sigma - 1.0)])

    p = ControlProblem(
        1, 1, np.array([K0]), f, g, dfdx, dgdx, Box([0.0], [full["umax"]]), "avav", full
    )
    if _is_default_avav(full):
        law = ClosedForm(lambda t: [4.0 / 3.0 * (1.0 + t) ** (1.0 / 3.0)], label="u=4/3(1+t)^(1/3)")
        known = KnownSolution(
            x=lambda t: np.array([(1.0 + t) ** (4.0 / 3.0)]),
            u=lambda t: np.array([4.0 / 3.0 * (1.0 + t) ** (1.0 / 3.0)]),
            A=lambda t: np.array([[1.0]]),
            I=lambda t: np.array([t / (2.0 * (1.0 + t))]),
            psi=lambda t: np.array([1.0 / (2.0 * (1.0 + t))]),
            lam=1.0,
            verdict="converged",
            I_star=np.array([0.5]),
        )
    else:
        law = _ShotLaw(full)
        known = None
    return p, law, known


_REGISTRY = {
    "seisei": (_seisei, "x'=u*x, x(0)=1, u in [1/2,1], reward x*exp(-2t)", ""),
    "sternstern": (_sternstern, "x'=y, y'=-x+u, u in [-1,1], reward y", "varsigma=0"),
    "linlin": (_linlin, "x'=u*x, x(0)=1, u in [alpha,beta], reward (1-u)*x", "alpha=0, beta=0.5[, u]"),
    "avav": (
        _avav,
        "x'=-nu*x+u, reward g(t)x^sigma - h(t)(b/2)u^2, u >= 0",
        "nu=0, sigma=0.5, b=0.375, K0=1, umax=1e6[, g, h]",
    ),
}


def names() -> list[str]:
    return list(_REGISTRY)


def describe() -> list[dict]:
    return [
        {"name": n, "problem": desc, "params": defaults}
        for n, (_, desc, defaults) in _REGISTRY.items()
    ]


def registry_get(name: str, params: dict | None = None) -> tuple[ControlProblem, ControlLaw, KnownSolution | None]:
    """Look up a worked example by name."""
    if name not in _REGISTRY:
        raise UnknownExample(f"unknown example {name!r}; choose from {names()}")
    return _REGISTRY[name][0](_normalize(params))


def parse_builtin_uri(uri: str) -> tuple[str, dict]:
    """Split ``builtin:<name>?k=v&...`` into name and raw params."""
    if not uri.startswith("builtin:"):
        raise InvalidParams(f"not a builtin URI: {uri!r}")
    rest = uri[len("builtin:"):]
    name, _, query = rest.partition("?")
    return name, dict(parse_qsl(query, keep_blank_values=True))


def get_builtin(uri: str):
    name, params = parse_builtin_uri(uri)
    return registry_get(name, params)
