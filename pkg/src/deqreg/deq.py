"""Weight-tied DEQ layer, fixed-point solvers and the phantom-gradient path.

The layer is ``f(z; x) = sigma(W z + U x + b)`` and the classification head is
``h(z) = V z + c``.  States, inputs and logits may carry a leading batch axis;
traces always put time first: ``states[t]`` has shape ``(d,)`` or ``(B, d)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, DivergenceError

PARAM_NAMES = ("W", "U", "b", "V", "c")
NONLINEARITIES = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class DeqModel:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    V: np.ndarray
    c: np.ndarray
    nonlinearity: str = "tanh"
    gamma: float = 0.9

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = ad.as_tensor(getattr(self, name), name)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.nonlinearity not in NONLINEARITIES:
            raise ContractError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"contraction factor must lie in (0, 1], got {self.gamma}")
        d, l = self.U.shape
        C = self.V.shape[0]
        expected = {"W": (d, d), "U": (d, l), "b": (d,), "V": (C, d), "c": (C,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self):
        """``(l, d, C)``: input, state and class dimensions."""
        return self.U.shape[1], self.W.shape[0], self.V.shape[0]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, **params):
        return replace(self, **params)

    def checksum(self):
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def init_model(l, d, C, rng, nonlinearity="tanh", gamma=0.9):
    """Weights uniform in ``[-1/sqrt(d), 1/sqrt(d)]``, zero biases, then ``spectral_rescale``."""
    rng = np.random.default_rng(rng)
    bound = 1.0 / np.sqrt(d)

    def uni(shape):
        return rng.uniform(-bound, bound, size=shape)

    model = DeqModel(
        W=uni((d, d)), U=uni((d, l)), b=np.zeros(d),
        V=uni((C, d)), c=np.zeros(C), nonlinearity=nonlinearity, gamma=gamma,
    )
    return spectral_rescale(model)


def activate(kind, a):
    """Elementwise nonlinearity named by ``kind``."""
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.where(a > 0, a, 0.0)
    return a


def _check_state_input(model, z, x):
    l, d, _ = model.dims
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.shape[-1] != d:
        raise DimensionError(f"state has trailing dimension {z.shape[-1]}, expected {d}")
    if x.shape[-1] != l:
        raise DimensionError(f"input has trailing dimension {x.shape[-1]}, expected {l}")
    if z.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"state batch {z.shape[:-1]} does not match input batch {x.shape[:-1]}")
    return z, x


def layer_apply(model: DeqModel, z, x):
    """One application of the weight-tied layer."""
    z, x = _check_state_input(model, z, x)
    return activate(model.nonlinearity, z @ model.W.T + (x @ model.U.T + model.b))


def head_apply(model: DeqModel, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dims[1]:
        raise DimensionError(f"head expects trailing dimension {model.dims[1]}, got {z.shape[-1]}")
    return z @ model.V.T + model.c


class Residual(NamedTuple):
    value: object
    absolute: object


def _residual_from(fz, z):
    num = np.linalg.norm(fz - z, axis=-1)
    den = np.linalg.norm(fz, axis=-1)
    absolute = den < 1e-12
    value = np.where(absolute, num, num / np.where(absolute, 1.0, den))
    return value, absolute


def rel_error(model: DeqModel, z, x) -> Residual:
    """``||f(z;x) - z|| / ||f(z;x)||``; absolute residual when ``f(z;x)`` vanishes."""
    fz = layer_apply(model, z, x)
    value, absolute = _residual_from(fz, np.asarray(z, dtype=np.float64))
    if value.ndim == 0:
        return Residual(float(value), bool(absolute))
    return Residual(value, absolute)


def spectral_norm(W):
    """Largest singular value of ``W``.

    Computed from the full SVD: power iteration undershoots when the top two
    singular values nearly coincide, which would break the rescale bound.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0 or not np.any(W):
        return 0.0
    return float(np.linalg.norm(W, 2))


def spectral_rescale(model: DeqModel) -> DeqModel:
    s = spectral_norm(model.W)
    if s <= model.gamma:
        return model
    return model.with_params(W=model.W * (model.gamma / s))


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    N: int = 8
    method: str = "anderson"
    damping: float = 1.0
    anderson_depth: int = 5
    anderson_mix: float = 1.0
    tol: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ContractError("solver needs N >= 1")
        if self.method not in ("naive", "anderson"):
            raise ContractError(f"unknown solver method {self.method!r}")
        if not 0.0 < self.damping <= 1.0:
            raise ContractError("damping must lie in (0, 1]")
        if self.anderson_depth < 1 or not 0.0 < self.anderson_mix <= 1.0:
            raise ContractError("invalid Anderson parameters")


@dataclass
class DynamicsTrace:
    states: np.ndarray
    residuals: np.ndarray
    logits: np.ndarray
    entropies: np.ndarray
    inputs_used: np.ndarray
    absolute_residual: np.ndarray = field(default=None)

    @property
    def N(self):
        return self.states.shape[0] - 1

    @property
    def batched(self):
        return self.states.ndim == 3

    def example(self, k):
        """Single-example view of a batched trace."""
        return DynamicsTrace(
            states=self.states[:, k], residuals=self.residuals[:, k], logits=self.logits[:, k],
            entropies=self.entropies[:, k], inputs_used=self.inputs_used[:, k],
            absolute_residual=None if self.absolute_residual is None else self.absolute_residual[:, k],
        )

    def predictions(self, t=None):
        t = self.N if t is None else t
        return np.argmax(self.logits[t], axis=-1)


class FixedPointSolver:
    """Step-wise solver keeping the full history ``z^[0..t]``.

    ``advance`` produces the next state from the history under the current
    input.  ``retract`` + ``set_input`` + ``advance`` re-solves the latest
    state with a new input, reusing ``z^[<=t]``.
    """

    def __init__(self, model: DeqModel, x, cfg: SolverConfig):
        self.model = model
        self.cfg = cfg
        self.x = np.array(x, dtype=np.float64)
        d = model.dims[1]
        z0 = np.zeros(self.x.shape[:-1] + (d,))
        _check_state_input(model, z0, self.x)
        self.states = [z0]
        self.inputs = [self.x]
        self._fvals = {}
        self._done = np.zeros(self.x.shape[:-1], dtype=bool)

    def f(self, k):
        if k not in self._fvals:
            self._fvals[k] = layer_apply(self.model, self.states[k], self.x)
        return self._fvals[k]

    def set_input(self, x):
        x = np.array(x, dtype=np.float64)
        if x.shape != self.x.shape:
            raise DimensionError(f"new input shape {x.shape} differs from {self.x.shape}")
        self.x = x
        self._fvals = {}

    def retract(self):
        if len(self.states) <= 1:
            raise ContractError("cannot retract the initial state")
        k = len(self.states) - 1
        self.states.pop()
        self.inputs.pop()
        self._fvals.pop(k, None)

    @property
    def t(self):
        return len(self.states) - 1

    def advance(self):
        k = self.t
        zk = self.states[k]
        fk = self.f(k)
        if self.cfg.method == "naive":
            lam = self.cfg.damping
            z_next = fk if lam == 1.0 else zk * (1.0 - lam) + fk * lam
        else:
            z_next = self._anderson_step(k)
        if self.cfg.tol > 0:
            res, _ = _residual_from(fk, zk)
            self._done = self._done | (res <= self.cfg.tol)
            z_next = np.where(self._done[..., None], zk, z_next)
        if not np.all(np.isfinite(z_next)):
            raise DivergenceError(f"non-finite state at iteration {k + 1}", iteration=k + 1)
        self.states.append(z_next)
        self.inputs.append(self.x)
        return z_next

    def _anderson_step(self, k):
        beta = self.cfg.anderson_mix
        zk, fk = self.states[k], self.f(k)
        rk = fk - zk
        mk = min(self.cfg.anderson_depth, k)
        plain = zk + beta * rk
        if mk == 0:
            return plain
        lo = k - mk
        Z = np.stack([self.states[j] for j in range(lo, k + 1)], axis=-1)
        F = np.stack([self.f(j) for j in range(lo, k + 1)], axis=-1)
        R = F - Z
        dR = np.diff(R, axis=-1)
        dZ = np.diff(Z, axis=-1)
        dRt = np.swapaxes(dR, -1, -2)
        G = dRt @ dR
        rhs = dRt @ rk[..., None]
        scale = np.trace(G, axis1=-2, axis2=-1)
        # an all-zero difference block is singular: take the plain step there
        singular = ~(scale > 0)
        reg = np.where(singular, 1.0, 1e-10 * scale / mk)
        G = G + reg[..., None, None] * np.eye(mk)
        coef = np.linalg.solve(G, rhs)
        coef = np.where(singular[..., None, None], 0.0, coef)
        z_next = plain - ((dZ + beta * dR) @ coef)[..., 0]
        bad = ~np.all(np.isfinite(z_next), axis=-1)
        if np.any(bad):
            z_next = np.where(bad[..., None], plain, z_next)
        return z_next


def build_trace(model: DeqModel, states, inputs) -> DynamicsTrace:
    states = np.stack(states)
    inputs = np.stack(inputs)
    fz = layer_apply(model, states, inputs)
    residuals, absolute = _residual_from(fz, states)
    logits = head_apply(model, states)
    return DynamicsTrace(
        states=states, residuals=residuals, logits=logits,
        entropies=ad.eval_pred_entropy(logits), inputs_used=inputs, absolute_residual=absolute,
    )


def solve(model: DeqModel, x, cfg: SolverConfig) -> DynamicsTrace:
    solver = FixedPointSolver(model, x, cfg)
    for _ in range(cfg.N):
        solver.advance()
    return build_trace(model, solver.states, solver.inputs)


def solve_naive(model: DeqModel, x, cfg: SolverConfig) -> DynamicsTrace:
    if cfg.method != "naive":
        raise ContractError("solve_naive requires method='naive'")
    return solve(model, x, cfg)


def solve_anderson(model: DeqModel, x, cfg: SolverConfig) -> DynamicsTrace:
    if cfg.method != "anderson":
        raise ContractError("solve_anderson requires method='anderson'")
    return solve(model, x, cfg)


# ---------------------------------------------------------------------------
# Differentiable unrolling
# ---------------------------------------------------------------------------

def model_nodes(g: ad.ExprGraph, model: DeqModel, trainable=True):
    """Register the parameters on ``g`` as leaves (or constants)."""
    make = g.leaf if trainable else (lambda v, name: g.const(v, name))
    return {name: make(getattr(model, name), name) for name in PARAM_NAMES}


def graph_layer(g, nodes, kind, z, ux):
    pre = g.add(g.affine(nodes["W"], z), ux)
    if kind == "tanh":
        return g.tanh(pre)
    if kind == "relu":
        return g.relu(pre)
    return g.identity(pre)


def graph_unroll(g, nodes, kind, z, x, steps, damping=1.0):
    """Append ``steps`` damped layer applications starting from node ``z``."""
    ux = g.affine(nodes["U"], x, nodes["b"])
    for _ in range(steps):
        fz = graph_layer(g, nodes, kind, z, ux)
        z = fz if damping == 1.0 else g.add(g.scale(z, 1.0 - damping), g.scale(fz, damping))
    return z


def graph_head(g, nodes, z):
    return g.affine(nodes["V"], z, nodes["c"])


def phantom_grad(model: DeqModel, trace: DynamicsTrace, x, loss_at, label, K_p=5, loss="ce"):
    """Gradients of the loss after ``K_p`` unrolled steps from ``states[loss_at]``.

    The anchor state is a constant.  ``loss`` is ``"ce"`` (mean softmax
    cross-entropy) or ``"logit"`` (negated mean logit of the target class,
    used for probing gradient reachability).  Grads cover every parameter
    and ``x``.
    """
    if not 1 <= loss_at <= trace.N:
        raise IndexError(f"loss_at={loss_at} outside 1..{trace.N}")
    if K_p < 1:
        raise ContractError("phantom gradient needs at least one unrolled step")
    g = ad.ExprGraph()
    nodes = model_nodes(g, model)
    xn = g.leaf(x, "x")
    z = g.const(trace.states[loss_at])
    z = graph_unroll(g, nodes, model.nonlinearity, z, xn, K_p)
    logits = graph_head(g, nodes, z)
    if loss == "ce":
        per = ad.cross_entropy_node(g, logits, label)
    elif loss == "logit":
        per = g.scale(g.pick(logits, label), -1.0)
    else:
        raise ContractError(f"unknown loss {loss!r}")
    out = ad.mean_node(g, per) if per.value.ndim else per
    return ad.reverse_grad(g, out)
