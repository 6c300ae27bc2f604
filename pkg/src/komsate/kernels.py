"""Polynomial (Mahalanobis) and Gaussian kernels on studentized covariates."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

FAMILIES = ("linear", "polynomial", "gaussian")


class KernelError(RuntimeError):
    """Gram matrix failed an internal consistency check."""


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 1.0
    theta: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "theta", "lam"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    @property
    def log(self) -> np.ndarray:
        return np.log([self.gamma, self.theta, self.lam])

    @classmethod
    def from_log(cls, logp) -> "Hyperparams":
        g, t, l = np.exp(np.asarray(logp, dtype=float))
        return cls(float(g), float(t), float(l))

    def as_dict(self) -> dict:
        return {"gamma": self.gamma, "theta": self.theta, "lambda": self.lam}


@dataclass(frozen=True)
class KernelSpec:
    family: str = "polynomial"
    degree: int = 3
    params: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "linear" and self.degree != 1:
            object.__setattr__(self, "degree", 1)
        if self.family != "gaussian" and not (1 <= int(self.degree) <= 5):
            raise ValueError(f"polynomial degree must be in 1..5, got {self.degree}")
        object.__setattr__(self, "degree", int(self.degree))

    def with_params(self, params: Hyperparams) -> "KernelSpec":
        return replace(self, params=params)

    @property
    def label(self) -> str:
        if self.family == "gaussian":
            return "gaussian"
        return f"poly{self.degree}"


def kernel_eval(spec: KernelSpec, z, z2) -> float:
    """Scalar kernel value for two studentized points."""
    z = np.asarray(z, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    g, th = spec.params.gamma, spec.params.theta
    if spec.family == "gaussian":
        return float(g * np.exp(-th * np.sum((z - z2) ** 2)))
    return float(g * (1.0 + th * float(z @ z2)) ** spec.degree)


def _sq_dists(Z: np.ndarray) -> np.ndarray:
    sq = np.sum(Z * Z, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def gram_parts(spec: KernelSpec, Z: np.ndarray):
    """Return ``(K, dK/dlog_theta)`` at gamma given by ``spec``.

    dK/dlog_gamma is K itself, so it is not returned separately.
    """
    Z = np.asarray(Z, dtype=float)
    g, th = spec.params.gamma, spec.params.theta
    if spec.family == "gaussian":
        D = _sq_dists(Z)
        K = g * np.exp(-th * D)
        return K, -th * D * K
    G = Z @ Z.T
    base = 1.0 + th * G
    d = spec.degree
    K = g * base**d
    dK = g * d * base ** (d - 1) * (th * G)
    return K, dK


def gram(spec: KernelSpec, Z: np.ndarray, check: bool = True) -> np.ndarray:
    """Gram matrix ``K[i, j] = kernel(Z_i, Z_j)``, symmetrized."""
    K, _ = gram_parts(spec, Z)
    K = 0.5 * (K + K.T)
    if check and K.shape[0] > 0:
        tr = float(np.trace(K))
        lo = float(np.linalg.eigvalsh(K)[0])
        if lo < -1e-8 * max(tr, 1e-300):
            raise KernelError(f"Gram matrix not PSD: min eigenvalue {lo:.3e}, trace {tr:.3e}")
    return K


def cross_gram(spec: KernelSpec, Za: np.ndarray, Zb: np.ndarray) -> np.ndarray:
    """Rectangular kernel matrix between two point sets."""
    g, th = spec.params.gamma, spec.params.theta
    if spec.family == "gaussian":
        D = (
            np.sum(Za**2, axis=1)[:, None]
            + np.sum(Zb**2, axis=1)[None, :]
            - 2.0 * Za @ Zb.T
        )
        return g * np.exp(-th * np.maximum(D, 0.0))
    return g * (1.0 + th * (Za @ Zb.T)) ** spec.degree
