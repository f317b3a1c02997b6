"""Covariance and mean functions for the base GP.

Hyperparameters are stored unconstrained and mapped to the positive reals
through a softplus; every evaluation function accepts either plain numpy
arrays or tape refs, so the same code path serves prediction and training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import UsageError

FAMILIES = ("rbf-ard", "periodic", "white-noise", "sum")


def constrain(v):
    """Map unconstrained reals to strictly positive values (softplus)."""
    return ad.softplus(v)


def unconstrain(v):
    """Inverse of :func:`constrain`; numerically exact over the float range."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
        raise UsageError("unconstrain expects strictly positive finite values")
    with np.errstate(divide="ignore", over="ignore"):
        small = np.log(np.expm1(np.minimum(v, 1.0)))
        large = v + np.log1p(-np.exp(-np.maximum(v, 1.0)))
    return np.where(v > 1.0, large, small)


@dataclass(frozen=True)
class KernelConfig:
    """A covariance function family plus its constrained initial values."""

    family: str
    input_dim: int = 1
    variance: float = 1.0
    lengthscales: tuple = (1.0,)
    period: float = 1.0
    noise: float = 1e-6
    components: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UsageError(f"unknown kernel family {self.family!r}")
        if self.family == "rbf-ard" and len(self.lengthscales) != self.input_dim:
            raise UsageError("rbf-ard needs one lengthscale per input dimension")
        if self.family == "sum" and not self.components:
            raise UsageError("sum kernel needs components")


@dataclass(frozen=True)
class MeanConfig:
    family: str = "zero"          # "zero" | "constant"
    value: float = 0.0

    def __post_init__(self):
        if self.family not in ("zero", "constant"):
            raise UsageError(f"unknown mean family {self.family!r}")
        if not np.isfinite(self.value):
            raise UsageError("mean value must be finite")


def rbf_ard(input_dim, variance=1.0, lengthscale=1.0):
    ls = tuple([float(lengthscale)] * input_dim) if np.isscalar(lengthscale) \
        else tuple(float(v) for v in lengthscale)
    return KernelConfig(family="rbf-ard", input_dim=input_dim, variance=variance,
                        lengthscales=ls)


def periodic(variance=1.0, lengthscale=1.0, period=1.0):
    return KernelConfig(family="periodic", input_dim=1, variance=variance,
                        lengthscales=(float(lengthscale),), period=period)


def white_noise(noise=1e-6, input_dim=1):
    return KernelConfig(family="white-noise", input_dim=input_dim, noise=noise)


def kernel_sum(*components):
    dims = {c.input_dim for c in components}
    if len(dims) != 1:
        raise UsageError("sum components disagree on input dimension")
    return KernelConfig(family="sum", input_dim=dims.pop(), components=tuple(components))


# ---------------------------------------------------------------------------
# Parameter registry: names, shapes and unconstrained initial values.
# ---------------------------------------------------------------------------

def param_spec(config, prefix="kernel"):
    """Ordered (name, shape) pairs for the trainable hyperparameters."""
    if config.family == "rbf-ard":
        return [(f"{prefix}.raw_variance", ()),
                (f"{prefix}.raw_lengthscales", (config.input_dim,))]
    if config.family == "periodic":
        return [(f"{prefix}.raw_variance", ()),
                (f"{prefix}.raw_lengthscales", ()),
                (f"{prefix}.raw_period", ())]
    if config.family == "white-noise":
        return [(f"{prefix}.raw_noise", ())]
    out = []
    for i, comp in enumerate(config.components):
        out.extend(param_spec(comp, f"{prefix}.c{i}"))
    return out


def init_raw(config, prefix="kernel"):
    """Unconstrained initial values matching :func:`param_spec`."""
    if config.family == "rbf-ard":
        return {f"{prefix}.raw_variance": unconstrain(config.variance),
                f"{prefix}.raw_lengthscales": unconstrain(np.asarray(config.lengthscales))}
    if config.family == "periodic":
        return {f"{prefix}.raw_variance": unconstrain(config.variance),
                f"{prefix}.raw_lengthscales": unconstrain(config.lengthscales[0]),
                f"{prefix}.raw_period": unconstrain(config.period)}
    if config.family == "white-noise":
        return {f"{prefix}.raw_noise": unconstrain(config.noise)}
    out = {}
    for i, comp in enumerate(config.components):
        out.update(init_raw(comp, f"{prefix}.c{i}"))
    return out


def mean_param_spec(config, prefix="mean"):
    return [(f"{prefix}.value", ())] if config.family == "constant" else []


def mean_init_raw(config, prefix="mean"):
    return {f"{prefix}.value": np.float64(config.value)} if config.family == "constant" else {}


# ---------------------------------------------------------------------------
# Evaluation (numpy arrays or tape refs).
# ---------------------------------------------------------------------------

def _check_finite_np(params, names):
    # tape refs get the eager in-graph check instead
    for name in names:
        v = params[name]
        if isinstance(v, (ad.Ref, ad.Dual)):
            continue
        if not np.all(np.isfinite(v)):
            raise UsageError(f"non-finite hyperparameter {name!r}")


def _sq_dist(Xs, X2s):
    # ||a||^2 + ||b||^2 - 2 a.b, clamped at zero to keep k(x,x) exact
    n1 = ad.sum_(ad.square(Xs), axis=1, keepdims=True)
    n2 = ad.transpose(ad.sum_(ad.square(X2s), axis=1, keepdims=True))
    d2 = n1 + n2 - 2.0 * ad.matmul(Xs, ad.transpose(X2s))
    return ad.relu(d2)


def kernel_matrix(config, params, X, X2=None, prefix="kernel"):
    """Covariance block between X (N x D) and X2 (N' x D).

    ``X2=None`` means the square self-covariance of X, which is the only
    place a white-noise component contributes (it keys on data index, not
    coordinates).
    """
    _check_finite_np(params, [n for n, _ in param_spec(config, prefix)])
    same = X2 is None
    X2v = X if same else X2
    n, m = np.shape(X)[0], np.shape(X2v)[0]

    if config.family == "rbf-ard":
        var = constrain(params[f"{prefix}.raw_variance"])
        ell = constrain(params[f"{prefix}.raw_lengthscales"])
        Xs = X / ell
        X2s = X2v / ell
        return var * ad.exp(-0.5 * _sq_dist(Xs, X2s))

    if config.family == "periodic":
        var = constrain(params[f"{prefix}.raw_variance"])
        ell = constrain(params[f"{prefix}.raw_lengthscales"])
        per = constrain(params[f"{prefix}.raw_period"])
        d = ad.abs_(X - ad.transpose(X2v))
        s = ad.sin(d * (math.pi / per))
        return var * ad.exp(-2.0 * ad.square(s) / ad.square(ell))

    if config.family == "white-noise":
        if not same:
            return np.zeros((n, m))
        return constrain(params[f"{prefix}.raw_noise"]) * np.eye(n)

    total = None
    for i, comp in enumerate(config.components):
        if comp.family == "white-noise" and not same:
            continue
        k = kernel_matrix(comp, params, X, X2, prefix=f"{prefix}.c{i}")
        total = k if total is None else total + k
    return total


def kernel_diag(config, params, X, prefix="kernel"):
    """Diagonal of the self-covariance, as a length-N vector."""
    n = np.shape(X)[0]
    ones = np.ones(n)
    if config.family in ("rbf-ard", "periodic"):
        return constrain(params[f"{prefix}.raw_variance"]) * ones
    if config.family == "white-noise":
        return constrain(params[f"{prefix}.raw_noise"]) * ones
    total = None
    for i, comp in enumerate(config.components):
        d = kernel_diag(comp, params, X, prefix=f"{prefix}.c{i}")
        total = d if total is None else total + d
    return total


def mean_vector(config, params, X, prefix="mean"):
    """Mean function values at X, or None for the zero mean."""
    if config.family == "zero":
        return None
    n = np.shape(X)[0]
    return params[f"{prefix}.value"] * np.ones(n)
