"""Channel parameters, fixed duct geometry and the shared sampling grid.

All quantities are SI. The eight entries of :class:`ChannelParams` are the
ones that vary across a dataset; :class:`FixedGeometry` holds the constants
kept fixed for every realization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import cached_property

import numpy as np

PARAM_NAMES = ("D", "v_bar", "kappa", "k_f", "k_r", "B_tot", "z_rx", "ell_z")


class ParameterError(ValueError):
    """A channel parameter is outside its admissible range."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


class GeometryError(ValueError):
    """The receiver ring and transmitter (or duct) are inconsistent."""


@dataclass(frozen=True)
class ChannelParams:
    D: float
    v_bar: float
    kappa: float
    k_f: float
    k_r: float
    B_tot: float
    z_rx: float
    ell_z: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "ChannelParams":
        values = [float(v) for v in values]
        if len(values) != len(PARAM_NAMES):
            raise ValueError(f"expected {len(PARAM_NAMES)} values, got {len(values)}")
        return cls(*values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelParams":
        missing = [n for n in PARAM_NAMES if n not in data]
        if missing:
            raise ParameterError(missing[0], f"missing parameter {missing[0]!r}")
        return cls(**{n: float(data[n]) for n in PARAM_NAMES})


@dataclass(frozen=True)
class FixedGeometry:
    a_c: float = 60e-6
    a_tx: float = 10e-6
    z_tx: float = 30e-6
    L: float = 4.5e-4
    N_0: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not (math.isfinite(val) and val > 0):
                raise GeometryError(f"{f.name} must be positive and finite, got {val!r}")
        if self.a_tx >= self.a_c:
            raise GeometryError("transmitter radius a_tx must be smaller than duct radius a_c")
        if self.z_tx >= self.L:
            raise GeometryError("transmitter center z_tx must lie inside the duct")

    @property
    def V_tx(self) -> float:
        return 4.0 / 3.0 * math.pi * self.a_tx**3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FixedGeometry":
        return cls(**{f.name: float(data[f.name]) for f in fields(cls) if f.name in data})


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_l = l * t_end / N_s for l = 1..N_s (t = 0 excluded)."""

    N_s: int = 500
    t_end: float = 0.5

    def __post_init__(self):
        if int(self.N_s) != self.N_s or self.N_s < 1:
            raise ValueError(f"N_s must be a positive integer, got {self.N_s!r}")
        if not (math.isfinite(self.t_end) and self.t_end > 0):
            raise ValueError(f"t_end must be positive, got {self.t_end!r}")

    @property
    def dt(self) -> float:
        return self.t_end / self.N_s

    @cached_property
    def t(self) -> np.ndarray:
        return np.arange(1, self.N_s + 1, dtype=np.float64) * (self.t_end / self.N_s)

    def to_dict(self) -> dict:
        return {"N_s": int(self.N_s), "t_end": float(self.t_end)}

    @classmethod
    def from_dict(cls, data: dict) -> "TimeGrid":
        return cls(N_s=int(data.get("N_s", 500)), t_end=float(data.get("t_end", 0.5)))


def validate_params(p: ChannelParams, g: FixedGeometry | None = None) -> ChannelParams:
    """Return ``p`` unchanged if every invariant holds, otherwise raise."""
    g = g or FixedGeometry()
    for name in PARAM_NAMES:
        val = getattr(p, name)
        if not isinstance(val, (int, float)) or not math.isfinite(val):
            raise ParameterError(name, f"{name} must be a finite number")
        if name == "kappa":
            if val < 0:
                raise ParameterError(name, "kappa must be non-negative")
        elif val <= 0:
            raise ParameterError(name, f"{name} must be positive")

    upstream_edge = p.z_rx - p.ell_z / 2
    if upstream_edge <= g.z_tx + g.a_tx:
        raise GeometryError(
            f"receiver ring starts at z={upstream_edge:.3e} m, overlapping the transmitter "
            f"(ends at z={g.z_tx + g.a_tx:.3e} m)"
        )
    if p.z_rx + p.ell_z / 2 >= g.L:
        raise GeometryError("receiver ring extends past the duct outlet")
    return p
