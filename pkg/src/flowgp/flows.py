"""Invertible elementwise transformations and their compositions.

Each step is a strictly monotone map with closed-form forward expression;
log-derivatives come from forward-mode duals over the same expressions, so
they stay differentiable with respect to step parameters and there is a
single source of truth per step.  Inverses use closed forms where they
exist and bracketed Newton-Raphson (with bisection fallback) otherwise.

Positivity constraints on step parameters are realized by a softplus
reparameterization in the unconstrained optimization space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.special

from . import autodiff as ad
from .errors import ConvergenceError, DomainError, RangeError, SingularJacobian, UsageError

# parameter table: kind -> ordered (name, positive-constrained) pairs
_PARAMS = {
    "log": (),
    "exp": (),
    "softplus": (),
    "sinh": (),
    "arcsinh": (("a", True), ("b", True), ("c", False), ("d", False)),
    "affine": (("a", False), ("b", True)),
    "sinh-arcsinh": (("a", False), ("b", True)),
    "boxcox": (("lam", True),),
    "tukey": (("g", True), ("h", True)),
    "tanh": (("a", True), ("b", True), ("c", False), ("d", False)),
    "arcsinh-mixture": None,  # generated per component
}

# constrained-space defaults; exact identity where the family contains it
_DEFAULTS = {
    "arcsinh": {"a": 1.0, "b": 1.0, "c": 0.0, "d": 0.0},
    "affine": {"a": 0.0, "b": 1.0},
    "sinh-arcsinh": {"a": 0.0, "b": 1.0},
    "boxcox": {"lam": 1.0},
    "tukey": {"g": 0.5, "h": 0.1},
    "tanh": {"a": 1.0, "b": 1.0, "c": 0.0, "d": 0.0},
}

# steps whose inverse has a closed form usable as an expression
_CLOSED_INVERSE = ("log", "exp", "softplus", "sinh", "arcsinh", "affine",
                   "sinh-arcsinh", "boxcox", "tanh")

# steps that are bijections of the whole real line with parameter-free domain
_REAL_BIJECTION = ("sinh", "arcsinh", "affine", "sinh-arcsinh", "boxcox",
                   "tukey", "arcsinh-mixture")


@dataclass(frozen=True)
class FlowStep:
    kind: str
    inverted: bool = False
    mixture_size: int = 1
    slot_params: tuple = ()

    def __post_init__(self):
        if self.kind not in _PARAMS:
            raise UsageError(f"unknown flow step kind {self.kind!r}")
        if self.inverted and self.kind not in _CLOSED_INVERSE:
            raise UsageError(f"step {self.kind!r} has no closed-form inverse "
                             "and cannot be used in inverse parameterization")
        bad = set(self.slot_params) - {n for n, _ in step_params(self)}
        if bad:
            raise UsageError(f"unknown slot params {sorted(bad)} for {self.kind!r}")


@dataclass(frozen=True)
class FlowChain:
    """Ordered composition; step 0 is applied first."""

    steps: tuple = ()

    def __len__(self):
        return len(self.steps)


def step_params(step):
    """Ordered (name, positive-constrained) pairs for one step."""
    if step.kind == "arcsinh-mixture":
        out = []
        for i in range(step.mixture_size):
            out.extend([(f"a{i}", False), (f"b{i}", True),
                        (f"c{i}", False), (f"d{i}", True)])
        return tuple(out)
    return _PARAMS[step.kind]


def param_spec(chain, prefix="flow"):
    """(name, shape) pairs for the literal (non-slot) parameters."""
    out = []
    for i, step in enumerate(chain.steps):
        for pname, _ in step_params(step):
            if pname not in step.slot_params:
                out.append((f"{prefix}.k{i}.{pname}", ()))
    return out


def slot_spec(chain):
    """Ordered (step_index, param_name, constrained) triples for net slots."""
    out = []
    for i, step in enumerate(chain.steps):
        table = dict(step_params(step))
        for pname in step.slot_params:
            out.append((i, pname, table[pname]))
    return out


def _default_constrained(step):
    if step.kind == "arcsinh-mixture":
        centers = np.linspace(-1.0, 1.0, step.mixture_size) if step.mixture_size > 1 else [0.0]
        vals = {}
        for i in range(step.mixture_size):
            vals.update({f"a{i}": 0.0, f"b{i}": 1.0, f"c{i}": float(centers[i]), f"d{i}": 1.0})
        return vals
    return dict(_DEFAULTS.get(step.kind, {}))


def _to_raw(value, constrained):
    from .kernels import unconstrain
    return float(unconstrain(value)) if constrained else float(value)


def init_raw(chain, prefix="flow", mode="identity", rng=None):
    """Unconstrained initial parameter values.

    ``mode="identity"`` uses each family's identity (or mildest) values;
    ``mode="random"`` jitters them with seeded Gaussian noise.
    """
    out = {}
    for i, step in enumerate(chain.steps):
        defaults = _default_constrained(step)
        for pname, constrained in step_params(step):
            if pname in step.slot_params:
                continue
            raw = _to_raw(defaults[pname], constrained)
            if mode == "random":
                if rng is None:
                    raise UsageError("random init needs an rng")
                raw += 0.5 * rng.standard_normal()
            out[f"{prefix}.k{i}.{pname}"] = np.float64(raw)
    return out


def resolve(chain, params=None, prefix="flow", slot_values=None):
    """Constrained per-step parameter dicts from raw literals and net slots.

    ``slot_values`` maps (step_index, param_name) to raw backend values;
    positive-constrained entries pass through the same softplus map as
    literals, so monotonicity holds for every resolved parameterization.
    """
    resolved = []
    for i, step in enumerate(chain.steps):
        d = {}
        for pname, constrained in step_params(step):
            if pname in step.slot_params:
                raw = slot_values[(i, pname)]
            else:
                raw = params[f"{prefix}.k{i}.{pname}"]
            d[pname] = ad.softplus(raw) if constrained else raw
        resolved.append(d)
    return resolved


# ---------------------------------------------------------------------------
# Step expressions (generic over ndarray / Ref / Dual operands).
# ---------------------------------------------------------------------------

def _artanh(u):
    return 0.5 * (ad.log(1.0 + u) - ad.log(1.0 - u))


def _fwd_expr(kind, x, p):
    if kind == "log":
        return ad.log(x)
    if kind == "exp":
        return ad.exp(x)
    if kind == "softplus":
        return ad.softplus(x)
    if kind == "sinh":
        return ad.sinh(x)
    if kind == "arcsinh":
        return p["a"] * ad.arcsinh(p["b"] * (x + p["c"])) + p["d"]
    if kind == "affine":
        return p["a"] + p["b"] * x
    if kind == "sinh-arcsinh":
        return ad.sinh(p["b"] * ad.arcsinh(x) - p["a"])
    if kind == "boxcox":
        lam = p["lam"]
        return (ad.sign(x) * ad.power(ad.abs_(x), lam) - 1.0) / lam
    if kind == "tukey":
        g, h = p["g"], p["h"]
        return (ad.exp(g * x) - 1.0) / g * ad.exp(0.5 * h * ad.square(x))
    if kind == "tanh":
        return p["a"] * ad.tanh(p["b"] * (x + p["c"])) + p["d"]
    if kind == "arcsinh-mixture":
        total = None
        for i in sorted({int(k[1:]) for k in p if k.startswith("a")}):
            term = p[f"a{i}"] + p[f"b{i}"] * ad.arcsinh((x - p[f"c{i}"]) / p[f"d{i}"])
            total = term if total is None else total + term
        return total
    raise UsageError(f"unknown step kind {kind!r}")


def _inv_expr(kind, y, p):
    if kind == "log":
        return ad.exp(y)
    if kind == "exp":
        return ad.log(y)
    if kind == "softplus":
        return ad.log(ad.exp(y) - 1.0)
    if kind == "sinh":
        return ad.arcsinh(y)
    if kind == "arcsinh":
        return ad.sinh((y - p["d"]) / p["a"]) / p["b"] - p["c"]
    if kind == "affine":
        return (y - p["a"]) / p["b"]
    if kind == "sinh-arcsinh":
        return ad.sinh((ad.arcsinh(y) + p["a"]) / p["b"])
    if kind == "boxcox":
        lam = p["lam"]
        u = lam * y + 1.0
        return ad.sign(u) * ad.power(ad.abs_(u), 1.0 / lam)
    if kind == "tanh":
        return _artanh((y - p["d"]) / p["a"]) / p["b"] - p["c"]
    raise UsageError(f"no closed-form inverse for {kind!r}")


def _bounds_message(kind, y, p):
    """Why ``y`` lies outside the range of the forward map, or None."""
    if kind in ("exp", "softplus") and np.any(y <= 0.0):
        return f"values outside the positive range of {kind!r}"
    if kind == "tanh":
        u = (np.asarray(y) - p["d"]) / p["a"]
        if np.any(np.abs(u) >= 1.0):
            return "values outside the saturated range of tanh"
    return None


def _step_val(x):
    return x.val if isinstance(x, ad.Dual) else x


def _apply_step(step, index, x, p):
    v = _step_val(x)
    if not isinstance(v, ad.Ref):
        if not step.inverted:
            if step.kind == "log" and np.any(v <= 0.0):
                raise DomainError(f"log step {index} applied to non-positive values",
                                  step_index=index)
        else:
            msg = _bounds_message(step.kind, v, p)
            if msg is not None:
                raise DomainError(f"step {index}: {msg}", step_index=index)
    expr = _inv_expr if step.inverted else _fwd_expr
    return expr(step.kind, x, p)


def flow_forward(chain, x, resolved):
    """Apply the composition elementwise, step 0 first."""
    if len(resolved) != len(chain.steps):
        raise UsageError("resolved parameters do not match chain length")
    out = x
    for i, step in enumerate(chain.steps):
        out = _apply_step(step, i, out, resolved[i])
    return out


def flow_forward_logdet(chain, x, resolved):
    """Forward values and elementwise log|dG/df| along the chain.

    Computed once through forward-mode duals; the result is differentiable
    with respect to the resolved parameters when those are tape refs.
    """
    if len(resolved) != len(chain.steps):
        raise UsageError("resolved parameters do not match chain length")
    if not chain.steps:
        return x, x * 0.0
    d = ad.Dual(x, 1.0)
    for i, step in enumerate(chain.steps):
        d = _apply_step(step, i, d, resolved[i])
    tan = d.tan
    if not isinstance(tan, ad.Ref) and np.any(np.asarray(tan) == 0.0):
        raise SingularJacobian("flow derivative vanished")
    return d.val, ad.log(ad.abs_(tan))


def flow_log_deriv(chain, x, resolved):
    """Elementwise log-derivative of the full composition."""
    return flow_forward_logdet(chain, x, resolved)[1]


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-10
    max_iter: int = 100
    bracket_expansions: int = 200


def _newton_invert(step, index, y, p, options):
    """Bracketed Newton with bisection fallback for a monotone step."""
    y = np.asarray(y, dtype=np.float64)

    def g_and_deriv(v):
        d = _apply_step(step, index, ad.Dual(v, 1.0), p)
        return np.asarray(d.val, dtype=np.float64), np.asarray(d.tan, dtype=np.float64)

    with np.errstate(all="ignore"):
        lo = y - 1.0
        hi = y + 1.0
        span = 1.0
        for _ in range(options.bracket_expansions):
            f_lo, _ = g_and_deriv(lo)
            f_hi, _ = g_and_deriv(hi)
            need_lo = ~(f_lo <= y)
            need_hi = ~(f_hi >= y)
            if not (need_lo.any() or need_hi.any()):
                break
            span *= 2.0
            lo = np.where(need_lo, y - span, lo)
            hi = np.where(need_hi, y + span, hi)
        else:
            raise RangeError(f"step {index}: could not bracket inverse values")

        x = 0.5 * (lo + hi)
        for _ in range(options.max_iter):
            fx, dfx = g_and_deriv(x)
            resid = fx - y
            lo = np.where(resid < 0, x, lo)
            hi = np.where(resid > 0, x, hi)
            with np.errstate(all="ignore"):
                newton = x - resid / dfx
            bad = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
            x_new = np.where(bad, 0.5 * (lo + hi), newton)
            if np.max(np.abs(x_new - x)) <= options.tol:
                return x_new
            x = x_new
        raise ConvergenceError(f"step {index}: Newton did not converge "
                               f"in {options.max_iter} iterations")


def flow_inverse(chain, y, resolved, options=NewtonOptions()):
    """Invert the composition; closed forms where available, Newton elsewhere."""
    if len(resolved) != len(chain.steps):
        raise UsageError("resolved parameters do not match chain length")
    out = np.asarray(y, dtype=np.float64)
    for i in range(len(chain.steps) - 1, -1, -1):
        step, p = chain.steps[i], resolved[i]
        if step.inverted:
            # inverse of the inverse parameterization is the plain forward map
            if step.kind == "log" and np.any(out <= 0.0):
                raise RangeError(f"step {i}: values outside the range of inverted log")
            out = _fwd_expr(step.kind, out, p)
        elif step.kind in _CLOSED_INVERSE:
            msg = _bounds_message(step.kind, out, p)
            if msg is not None:
                raise RangeError(f"step {i}: {msg}")
            out = _inv_expr(step.kind, out, p)
        else:
            out = _newton_invert(step, i, out, p, options)
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise RangeError(f"step {i}: inverse produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# Chain-level predicates and manipulation.
# ---------------------------------------------------------------------------

def closed_invertible(chain):
    return all(s.kind in _CLOSED_INVERSE for s in chain.steps)


def real_bijection(chain):
    """True when the chain maps the real line onto itself."""
    return all(s.kind in _REAL_BIJECTION for s in chain.steps)


def invert_chain(chain):
    """Inverse parameterization: reversed steps with toggled direction."""
    if not closed_invertible(chain):
        raise UsageError("chain contains steps without closed-form inverses")
    steps = tuple(replace(s, inverted=not s.inverted, slot_params=())
                  for s in reversed(chain.steps))
    return FlowChain(steps=steps)


def mark_input_dependent(chain):
    """Route parameters through the flow net.

    Only the non-linear sinh-arcsinh parameters become input-dependent when
    present; otherwise every parameter of every step does.
    """
    has_sa = any(s.kind == "sinh-arcsinh" for s in chain.steps)
    steps = []
    for s in chain.steps:
        if has_sa and s.kind != "sinh-arcsinh":
            steps.append(s)
        else:
            steps.append(replace(s, slot_params=tuple(n for n, _ in step_params(s))))
    return FlowChain(steps=tuple(steps))


# ---------------------------------------------------------------------------
# Presets and serialization.
# ---------------------------------------------------------------------------

def parse_preset(name):
    """Chain from a preset string.

    Atoms joined by '+': sal, salK (K repeats), sp/softplus, tanh, arcsinh,
    boxcox, tukey, arcsinh-mixture(I), affine, sinh-arcsinh, sinh, log, exp,
    identity.  An ``inv-`` prefix yields the inverse parameterization.
    """
    s = name.strip().lower()
    inverted = s.startswith("inv-")
    if inverted:
        s = s[4:]
    steps = []
    for atom in filter(None, (a.strip() for a in s.split("+"))):
        steps.extend(_parse_atom(atom))
    chain = FlowChain(steps=tuple(steps))
    return invert_chain(chain) if inverted else chain


def _parse_atom(atom):
    if atom == "identity":
        return []
    if atom.startswith("sal"):
        reps = 1
        if atom != "sal":
            try:
                reps = int(atom[3:])
            except ValueError:
                raise UsageError(f"bad flow preset atom {atom!r}") from None
        out = []
        for _ in range(reps):
            out += [FlowStep("sinh-arcsinh"), FlowStep("affine")]
        return out
    if atom in ("sp", "softplus"):
        return [FlowStep("softplus")]
    if atom.startswith("arcsinh-mixture"):
        inner = atom[len("arcsinh-mixture"):]
        if not (inner.startswith("(") and inner.endswith(")")):
            raise UsageError(f"bad mixture preset {atom!r}")
        return [FlowStep("arcsinh-mixture", mixture_size=int(inner[1:-1]))]
    if atom in _PARAMS:
        return [FlowStep(atom)]
    raise UsageError(f"bad flow preset atom {atom!r}")


def chain_to_dict(chain):
    return {"steps": [{"kind": s.kind, "inverted": s.inverted,
                       "mixture_size": s.mixture_size,
                       "slot_params": list(s.slot_params)} for s in chain.steps]}


def chain_from_dict(doc):
    return FlowChain(steps=tuple(
        FlowStep(kind=d["kind"], inverted=bool(d.get("inverted", False)),
                 mixture_size=int(d.get("mixture_size", 1)),
                 slot_params=tuple(d.get("slot_params", ())))
        for d in doc["steps"]))


# ---------------------------------------------------------------------------
# Data-driven initialization.
# ---------------------------------------------------------------------------

def strip_slots(chain):
    return FlowChain(steps=tuple(replace(s, slot_params=()) for s in chain.steps))


def _fit_tape(tape, init_params, epochs, lr, seed):
    # local import: training depends on models which depends on this module
    from .training import AdamState, adam_step

    theta = tape.pack(init_params)
    state = AdamState.zeros(theta.size)
    loss = np.inf
    for _ in range(epochs):
        loss = tape.forward(theta)
        grad = tape.backward()
        theta, state = adam_step(theta, grad, state, lr=lr)
    final = tape.forward(theta)
    return tape.unpack(theta), min(loss, final)


def init_identity(chain, grid_range=(-3.0, 3.0), grid_size=101, epochs=2000,
                  lr=0.01, seed=0, mse_warn=1e-2):
    """Fit literal parameters so the chain approximates the identity map.

    Minimizes mean squared error against (x, x) pairs on an evenly spaced
    grid with Adam.  Returns (raw parameter dict, final mse); chains that
    cannot reach the identity on the grid produce a warning, not an error.
    """
    work = strip_slots(chain)
    init = init_raw(work)
    grid = np.linspace(grid_range[0], grid_range[1], grid_size)
    if not init:
        resolved = resolve(work, init)
        mse = float(np.mean((flow_forward(work, grid, resolved) - grid) ** 2))
        return {}, mse

    tape = ad.Tape()
    refs = {name: tape.slot(name, ()) for name in init}
    resolved = resolve(work, refs)
    pred = flow_forward(work, tape.const(grid), resolved)
    tape.set_loss(ad.mean_(ad.square(pred - tape.const(grid))))
    fitted, mse = _fit_tape(tape, init, epochs, lr, seed)
    if mse > mse_warn:
        warnings.warn(f"identity initialization stalled at mse={mse:.3g}; "
                      "the chain may not contain the identity on this grid")
    return fitted, mse


def _gaussianize_exact_ok(chain):
    # every step's inverse must have a parameter-independent domain
    return closed_invertible(chain) and all(s.kind != "tanh" for s in chain.steps)


def init_gaussianize(chain, y, epochs=2000, lr=0.01, seed=0):
    """Fit literal parameters so the chain maps N(0,1) to the law of ``y``.

    Maximizes the flow log-likelihood sum_n [log phi(G^{-1}(y_n)) +
    log |dG^{-1}/dy|_n] with Adam when every step has a closed-form,
    domain-stable inverse.  Chains without one (tanh, tukey, mixtures) fall
    back to quantile matching: the chain is fitted forward, mapping standard
    normal plotting positions onto the sorted data.

    Returns (raw parameter dict, mean data log-likelihood per point); the
    fallback reports the quantile mse negated, which is comparable only
    across runs of the same chain.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise UsageError("init_gaussianize needs data")
    if y.size < 8:
        warnings.warn("very little data for gaussianization; result is unreliable")
    work = strip_slots(chain)
    init = init_raw(work)

    if _gaussianize_exact_ok(work):
        # range pre-check against parameter-independent step domains
        flow_inverse(work, y, resolve(work, init))
        if not init:
            return {}, _flow_loglik(work, {}, y)
        tape = ad.Tape()
        refs = {name: tape.slot(name, ()) for name in init}
        inv = invert_chain(work)
        inv_resolved = _share_params(work, inv, resolve(work, refs))
        f0, logdet = flow_forward_logdet(inv, tape.const(y), inv_resolved)
        loglik = ad.mean_(-0.5 * ad.square(f0) - 0.5 * np.log(2.0 * np.pi) + logdet)
        tape.set_loss(-loglik)
        fitted, loss = _fit_tape(tape, init, epochs, lr, seed)
        return fitted, -loss

    # quantile-matching surrogate (forward direction only, no inverses)
    order = np.argsort(y)
    n = y.size
    z = scipy.special.ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    if not init:
        resolved = resolve(work, init)
        mse = float(np.mean((flow_forward(work, z, resolved) - y[order]) ** 2))
        return {}, -mse
    tape = ad.Tape()
    refs = {name: tape.slot(name, ()) for name in init}
    resolved = resolve(work, refs)
    pred = flow_forward(work, tape.const(z), resolved)
    tape.set_loss(ad.mean_(ad.square(pred - tape.const(y[order]))))
    fitted, mse = _fit_tape(tape, init, epochs, lr, seed)
    return fitted, -mse


def _share_params(chain, inverted, resolved):
    """Resolved parameters for the inverse chain, reusing the originals."""
    k = len(chain.steps)
    return [resolved[k - 1 - i] for i in range(k)]


def _flow_loglik(chain, params, y):
    inv = invert_chain(chain)
    resolved = _share_params(chain, inv, resolve(chain, params))
    f0, logdet = flow_forward_logdet(inv, y, resolved)
    return float(np.mean(-0.5 * f0 ** 2 - 0.5 * np.log(2.0 * np.pi) + logdet))
