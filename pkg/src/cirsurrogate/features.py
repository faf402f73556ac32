"""Derived physical features and the standardized 16-entry input vector."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import PARAM_NAMES, ChannelParams, FixedGeometry

DERIVED_NAMES = ("Pe", "Da", "t_diff", "t_adv", "zeta", "A_patch", "R_cap", "k_dim")
FEATURE_ORDER = PARAM_NAMES + DERIVED_NAMES


@dataclass(frozen=True)
class DerivedFeatures:
    Pe: float
    Da: float
    t_diff: float
    t_adv: float
    zeta: float
    A_patch: float
    R_cap: float
    k_dim: float

    def as_tuple(self):
        return tuple(getattr(self, n) for n in DERIVED_NAMES)


def derive(p: ChannelParams, g: FixedGeometry | None = None) -> DerivedFeatures:
    a_c = (g or FixedGeometry()).a_c
    t_diff = a_c**2 / (4.0 * p.D)
    t_adv = p.z_rx / p.v_bar
    A_patch = 2.0 * math.pi * a_c * p.ell_z
    return DerivedFeatures(
        Pe=p.v_bar * a_c / p.D,
        Da=p.k_f * p.B_tot * a_c / p.D,
        t_diff=t_diff,
        t_adv=t_adv,
        zeta=t_adv / t_diff,
        A_patch=A_patch,
        R_cap=p.B_tot * A_patch,
        k_dim=p.kappa * t_adv,
    )


def assemble(p: ChannelParams, d: DerivedFeatures) -> np.ndarray:
    return np.array(tuple(getattr(p, n) for n in PARAM_NAMES) + d.as_tuple(), dtype=np.float64)


def feature_vector(p: ChannelParams, g: FixedGeometry | None = None) -> np.ndarray:
    return assemble(p, derive(p, g))


def feature_matrix(params, g: FixedGeometry | None = None) -> np.ndarray:
    """Stack raw feature vectors for ChannelParams or 8-column parameter rows."""
    rows = []
    for p in params:
        if not isinstance(p, ChannelParams):
            p = ChannelParams.from_array(p)
        rows.append(feature_vector(p, g))
    return np.array(rows).reshape(-1, len(FEATURE_ORDER))


class StandardizationError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureStandardizer:
    log_mask: np.ndarray
    mu_X: np.ndarray
    sigma_X: np.ndarray
    train_hash: str = ""

    def _masked(self, X):
        X = np.asarray(X, dtype=np.float64)
        out = X.copy()
        out[..., self.log_mask] = np.log(X[..., self.log_mask])
        return out

    def transform(self, X) -> np.ndarray:
        return (self._masked(X) - self.mu_X) / self.sigma_X

    def inverse_transform(self, Xz) -> np.ndarray:
        out = np.asarray(Xz, dtype=np.float64) * self.sigma_X + self.mu_X
        out[..., self.log_mask] = np.exp(out[..., self.log_mask])
        return out

    def to_dict(self) -> dict:
        return {
            "order": list(FEATURE_ORDER),
            "log_mask": [bool(b) for b in self.log_mask],
            "mu_X": [float(v) for v in self.mu_X],
            "sigma_X": [float(v) for v in self.sigma_X],
            "train_hash": self.train_hash,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureStandardizer":
        if list(data["order"]) != list(FEATURE_ORDER):
            raise StandardizationError("feature order in file does not match this build")
        return cls(np.array(data["log_mask"], dtype=bool), np.array(data["mu_X"], dtype=np.float64),
                   np.array(data["sigma_X"], dtype=np.float64), data.get("train_hash", ""))

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def fit_standardizer(X_train, train_hash: str = "", allow_log=None) -> FeatureStandardizer:
    """Log-transform entries positive over the whole training set, then z-score.

    ``allow_log`` (boolean mask) further restricts which entries may be logged,
    e.g. to features that can reach zero somewhere in the sampling box.
    """
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise StandardizationError("need at least two training feature vectors")
    log_mask = np.all(X > 0, axis=0)
    if allow_log is not None:
        log_mask &= np.asarray(allow_log, dtype=bool)
    Xm = X.copy()
    Xm[:, log_mask] = np.log(X[:, log_mask])
    mu = Xm.mean(axis=0)
    sigma = Xm.std(axis=0)
    for k in np.nonzero(~(sigma > 1e-12 * np.maximum(1.0, np.abs(mu))))[0]:
        raise StandardizationError(f"feature {FEATURE_ORDER[k]!r} has zero variance in the training set")
    return FeatureStandardizer(log_mask, mu, sigma, train_hash)
