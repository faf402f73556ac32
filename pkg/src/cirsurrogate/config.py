"""Flat JSON pipeline configuration with full defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .codec import TauGrid
from .core import FixedGeometry, TimeGrid
from .dataset import DesignBox
from .net import TrainConfig
from .solver import Mesh


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    sigma_w: float = 2.0
    N_tau: int = 1201
    tau_min: float = -4.0
    tau_max: float = 8.0
    variance_target: float = 0.995

    @property
    def tau_grid(self) -> TauGrid:
        return TauGrid(self.N_tau, self.tau_min, self.tau_max)


@dataclass(frozen=True)
class PipelineConfig:
    geometry: FixedGeometry = field(default_factory=FixedGeometry)
    box: DesignBox = field(default_factory=DesignBox)
    grid: TimeGrid = field(default_factory=TimeGrid)
    mesh: dict = field(default_factory=lambda: {"N_rho": 24, "N_z": 192})
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n: int = 500
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0
    workers: int = 1
    out: str = "run"

    def solver_mesh(self) -> Mesh:
        return Mesh(int(self.mesh["N_rho"]), int(self.mesh["N_z"]), self.geometry)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "box": self.box.to_dict(),
            "grid": self.grid.to_dict(),
            "mesh": {"N_rho": int(self.mesh["N_rho"]), "N_z": int(self.mesh["N_z"])},
            "codec": dict(self.codec.__dict__),
            "train": self.train.to_dict(),
            "n": int(self.n),
            "fractions": [float(f) for f in self.fractions],
            "seed": int(self.seed),
            "workers": int(self.workers),
            "out": str(self.out),
        }

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        known = {"geometry", "box", "grid", "mesh", "codec", "train", "n", "fractions", "seed", "workers", "out"}
        bad = set(data) - known
        if bad:
            raise ConfigError(f"unknown config keys {sorted(bad)}")
        d = cls()
        try:
            codec = dict(d.codec.__dict__)
            extra = set(data.get("codec", {})) - set(codec)
            if extra:
                raise ConfigError(f"unknown codec settings {sorted(extra)}")
            codec.update(data.get("codec", {}))
            mesh = {**d.mesh, **data.get("mesh", {})}
            if set(mesh) != {"N_rho", "N_z"}:
                raise ConfigError("mesh takes only N_rho and N_z")
            return cls(
                geometry=FixedGeometry.from_dict({**d.geometry.to_dict(), **data.get("geometry", {})}),
                box=DesignBox.from_dict(data.get("box", {})),
                grid=TimeGrid.from_dict({**d.grid.to_dict(), **data.get("grid", {})}),
                mesh=mesh,
                codec=CodecConfig(**codec),
                train=TrainConfig.from_dict({**d.train.to_dict(), **data.get("train", {})}),
                n=int(data.get("n", d.n)),
                fractions=tuple(float(f) for f in data.get("fractions", d.fractions)),
                seed=int(data.get("seed", d.seed)),
                workers=int(data.get("workers", d.workers)),
                out=str(data.get("out", d.out)),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad config: {exc}") from None


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return PipelineConfig.from_dict(data)


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
