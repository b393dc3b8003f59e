"""Normalization layers over the last axis.

All four variants are pure functions of tensors.  Variance is the biased
estimator and ``eps`` is added to it inside the square root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-6

NORM_TYPES = ("layernorm", "rmsnorm", "affine_only", "normalize_only")


@dataclass(frozen=True)
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = EPS

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError(f"gamma {self.gamma.shape} and beta {self.beta.shape} must be equal 1-d shapes")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @classmethod
    def init(cls, dim: int, dtype=np.float32, eps: float = EPS) -> "NormParams":
        return cls(
            Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
            Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
            eps,
        )


def standardize(x: Tensor, eps: float = EPS) -> Tensor:
    """(x - mean) / sqrt(var + eps) per slice of the last axis."""
    centered = x - T.mean(x, axis=-1, keepdims=True)
    denom = T.sqrt(T.var(x, axis=-1, keepdims=True) + eps)
    return centered / denom


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    _check_dim(x, p.gamma)
    return standardize(x, p.eps) * p.gamma + p.beta


def rms_norm(x: Tensor, gamma: Tensor, eps: float = EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gamma.  No centering, no shift."""
    _check_dim(x, gamma)
    rms = T.sqrt(T.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * gamma


def affine_only(x: Tensor, p: NormParams) -> Tensor:
    _check_dim(x, p.gamma)
    return x * p.gamma + p.beta


def normalize_only(x: Tensor, eps: float = EPS) -> Tensor:
    return standardize(x, eps)


def _check_dim(x: Tensor, gamma: Tensor) -> None:
    if x.shape[-1] != gamma.shape[0]:
        raise T.ShapeError(f"normalized axis has length {x.shape[-1]}, parameters have {gamma.shape[0]}")


def norm_param_names(kind: str) -> tuple[str, ...]:
    """Learnable parameter names each variant owns."""
    return {
        "layernorm": ("gamma", "beta"),
        "affine_only": ("gamma", "beta"),
        "rmsnorm": ("gamma",),
        "normalize_only": (),
    }[kind]


def apply_norm(kind: str, x: Tensor, params: dict[str, Tensor], eps: float = EPS) -> Tensor:
    """Dispatch by variant name; ``params`` holds the names from norm_param_names."""
    if kind == "layernorm":
        return layer_norm(x, NormParams(params["gamma"], params["beta"], eps))
    if kind == "rmsnorm":
        return rms_norm(x, params["gamma"], eps)
    if kind == "affine_only":
        return affine_only(x, NormParams(params["gamma"], params["beta"], eps))
    if kind == "normalize_only":
        return normalize_only(x, eps)
    raise ValueError(f"unknown norm type {kind!r}; expected one of {NORM_TYPES}")
