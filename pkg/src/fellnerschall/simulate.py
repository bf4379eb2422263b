"""Synthetic datasets for examples and tests, deterministic per seed."""

from __future__ import annotations

import csv
import io
from typing import Callable

import numpy as np


class UnknownScenario(ValueError):
    pass


def sine_gaussian(rng, n, sigma=0.3):
    x = rng.uniform(0, 1, n)
    y = np.sin(2 * np.pi * x) + rng.normal(0, sigma, n)
    return {"x": x, "y": y}


def motorcycle_truth(x):
    """Flat up to t=14, then a damped oscillation, loosely shaped like crash-test data:
    a dip near -130 around t=19 and a rebound near +40 around t=29."""
    t = np.maximum(np.asarray(x, dtype=float) - 14.0, 0.0)
    return -220.0 * np.sin(2 * np.pi * t / 20.0) * np.exp(-t / 9.0)


def varying_smoothness(rng, n, sigma=20.0):
    x = np.sort(rng.uniform(2.4, 57.6, n))
    y = motorcycle_truth(x) + rng.normal(0, sigma, n)
    return {"times": x, "accel": y}


def poisson_additive(rng, n):
    x1 = rng.uniform(0, 1, n)
    x2 = rng.uniform(0, 1, n)
    eta = 1.0 + 0.8 * np.sin(2 * np.pi * x1) + 2.0 * (x2 - 0.5) ** 2
    y = rng.poisson(np.exp(eta)).astype(float)
    return {"x1": x1, "x2": x2, "y": y}


def cox_truth(x):
    return 0.8 * np.sin(2 * np.pi * x)


def survival_cox(rng, n, censor_rate=0.2):
    z1 = rng.normal(0, 1, n)
    z2 = rng.binomial(1, 0.5, n).astype(float)
    z3 = rng.uniform(-1, 1, n)
    x = rng.uniform(0, 1, n)
    eta = 0.5 * z1 - 0.4 * z2 + 0.3 * z3 + cox_truth(x)
    T = -np.log(rng.uniform(size=n)) / (0.1 * np.exp(eta))
    C = rng.exponential(1.0 / (0.1 * censor_rate / (1 - censor_rate)), n)
    time = np.minimum(T, C)
    status = (T <= C).astype(float)
    return {"time": time, "status": status, "z1": z1, "z2": z2, "z3": z3, "x": x}


def oneway_randeffect(rng, n, groups=10, sigma_b=1.0, sigma=1.0):
    groups = int(groups)
    per = max(int(n) // groups, 2)
    g = np.repeat(np.arange(groups), per)
    b = rng.normal(0, 1, groups) * sigma_b
    y = 2.0 + b[g] + rng.normal(0, sigma, g.size)
    return {"group": g, "y": y}


SCENARIOS: dict[str, Callable] = {
    "sine-gaussian": sine_gaussian,
    "varying-smoothness-gaussian": varying_smoothness,
    "poisson-additive": poisson_additive,
    "survival-cox": survival_cox,
    "oneway-randeffect": oneway_randeffect,
}

DEFAULT_N = {"varying-smoothness-gaussian": 133}


def simulate(scenario: str, seed: int, n: int | None = None, **params) -> dict[str, np.ndarray]:
    if scenario not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    rng = np.random.default_rng(seed)
    n = n or DEFAULT_N.get(scenario, 200)
    return SCENARIOS[scenario](rng, n, **params)


def _fmt(v) -> str:
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))


def to_csv(data: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(data)
    w.writerow(names)
    for row in zip(*(data[k] for k in names)):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> dict[str, np.ndarray]:
    """Read a comma-separated file with a header row into named columns.

    Columns that parse as numbers become float arrays; the rest stay strings.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(set(header)) != len(header):
        raise ValueError(f"{path}: duplicate column names")
    out = {}
    for i, name in enumerate(header):
        try:
            col = [r[i] for r in body]
        except IndexError:
            raise ValueError(f"{path}: ragged row in column {name!r}") from None
        try:
            out[name] = np.array([float(v) for v in col])
        except ValueError:
            out[name] = np.array(col)
    return out
