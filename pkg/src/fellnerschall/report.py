"""Fit reports and their JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np


@dataclass
class FitReport:
    family: str
    link: str
    converged: bool
    iterations: int
    coefficients: list[dict[str, Any]]
    smoothing_parameters: list[dict[str, Any]]
    scale: float
    edf_total: float
    edf_per_term: dict[str, float]
    reml: float
    trajectory: list[dict[str, Any]]
    message: str = ""
    step_control: str = "halving"
    hessian_modes: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def lam(self) -> np.ndarray:
        return np.array([s["value"] for s in self.smoothing_parameters])

    @property
    def beta(self) -> np.ndarray:
        return np.array([c["value"] for c in self.coefficients])

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        return cls.from_dict(json.loads(text))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj
