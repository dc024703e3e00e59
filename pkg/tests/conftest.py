from __future__ import annotations

import functools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from taupmp.ode import IntegratorConfig, integrate_bundle
from taupmp.registry import registry_get

settings.register_profile(
    "taupmp", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("taupmp")

# one representative parameterization per registry entry
REGISTRY_CASES = {
    "seisei": {},
    "sternstern": {"varsigma": math.pi / 3},
    "linlin": {"alpha": 0.0, "beta": 0.5},
    "avav": {},
}


TIGHT = IntegratorConfig(1e-12, 1e-14)


@functools.lru_cache(maxsize=None)
def tight_bundle(name: str, t_end: float = 20.0):
    """Nominal registry bundle at tight tolerance, shared across tests."""
    p, law, known = registry_get(name, REGISTRY_CASES[name])
    return p, law, known, integrate_bundle(p, law, None, t_end, TIGHT)


@pytest.fixture(scope="session")
def seisei():
    return registry_get("seisei", {})


@pytest.fixture(scope="session")
def seisei_bundle(seisei):
    p, law, _ = seisei
    return integrate_bundle(p, law, None, 20.0, nodes=(5.0, 10.0))


@pytest.fixture(scope="session")
def registry_bundles():
    """Nominal bundles on [0, 20] for every registry problem."""
    out = {}
    for name, params in REGISTRY_CASES.items():
        p, law, known = registry_get(name, params)
        out[name] = (p, law, known, integrate_bundle(p, law, None, 20.0))
    return out


# one "criterion N: PASS|FAIL" line per acceptance criterion, printed at the end
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))
