"""White-box L-inf attacks on DEQ dynamics.

Three gradient estimators share one PGD driver:

* ``readymade_pgd``: the default phantom tail, i.e. ``K_p`` plain steps
  unrolled from ``z^[N-K_p]``;
* ``intermediate_pgd``: ``K_a`` damped steps unrolled from ``z^[i]``;
* ``trades_kl_pgd``: the readymade tail with KL(p_adv || p_clean) as loss.

The anchor state is always a constant of the gradient graph.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .deq import (
    DeqModel, DynamicsTrace, SolverConfig, graph_head, graph_unroll, model_nodes, solve,
)
from .errors import ContractError, DivergenceError

KINDS = ("readymade_pgd", "intermediate_pgd", "trades_kl_pgd")
GRID_LAMBDAS = (0.5, 1.0)
GRID_MAX_KA = 9
DEFAULT_DOMAIN = (-3.0, 3.0)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "readymade_pgd"
    i: int = 0
    K_a: int = 0
    lam: float = 1.0
    steps: int = 10
    alpha: float = 2 / 255
    eps: float = 8 / 255
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0 or self.alpha <= 0 or self.steps < 0:
            raise ContractError("attack needs eps >= 0, alpha > 0, steps >= 0")
        if self.eps > 0 and self.alpha > self.eps:
            raise ContractError(f"step size {self.alpha} exceeds budget {self.eps}")
        if self.kind == "intermediate_pgd":
            if self.i < 1 or not 1 <= self.K_a <= GRID_MAX_KA:
                raise ContractError(f"intermediate attack needs i >= 1 and 1 <= K_a <= {GRID_MAX_KA}")
            if not 0.0 < self.lam <= 1.0:
                raise ContractError("damping must lie in (0, 1]")

    def label(self):
        if self.kind == "intermediate_pgd":
            return f"inter(i={self.i},K_a={self.K_a},lam={self.lam:g})"
        return self.kind


@dataclass
class AttackResult:
    adversarial_inputs: np.ndarray
    per_example_success: np.ndarray
    accuracy: float
    spec: AttackSpec
    failed: np.ndarray = None
    correct: np.ndarray = None
    extras: dict = field(default_factory=dict)

    @property
    def n_failed(self):
        return 0 if self.failed is None else int(self.failed.sum())


def project(x_new, x_center, eps, domain=DEFAULT_DOMAIN):
    """Clip onto the L-inf ball around ``x_center`` and then the data box."""
    out = np.clip(x_new, x_center - eps, x_center + eps)
    return np.clip(out, domain[0], domain[1])


def example_rng(seed, x):
    """Generator keyed by the seed and the example's bytes, so a batch's
    random starts do not depend on its order."""
    digest = hashlib.blake2b(np.ascontiguousarray(x, dtype=np.float64).tobytes(), digest_size=8)
    return np.random.default_rng(np.random.SeedSequence((int(seed), int.from_bytes(digest.digest(), "little"))))


def _unroll_anchor(spec: AttackSpec, N: int, K_p: int):
    if spec.kind == "intermediate_pgd":
        if spec.i > N:
            raise ContractError(f"attack state i={spec.i} exceeds N={N}")
        return spec.i, spec.K_a, spec.lam
    k = min(K_p, N)
    return N - k, k, 1.0


def attack_gradient(model: DeqModel, x, label, spec: AttackSpec, solver_cfg: SolverConfig,
                    trace: DynamicsTrace | None = None, clean_logits=None, K_p=5):
    """Gradient of the attack loss with respect to the input.

    ``trace`` supplies the anchor state (solved from ``x`` when omitted).
    ``clean_logits`` is required for the KL kind and is held constant.
    """
    if spec.kind == "trades_kl_pgd" and clean_logits is None:
        raise ContractError("trades_kl_pgd needs clean_logits")
    if spec.kind != "trades_kl_pgd" and label is None:
        raise ContractError(f"{spec.kind} needs labels")
    if trace is None:
        trace = solve(model, x, solver_cfg)
    anchor, steps, lam = _unroll_anchor(spec, trace.N, K_p)
    g = ad.ExprGraph()
    nodes = model_nodes(g, model, trainable=False)
    xn = g.leaf(x, "x")
    z = graph_unroll(g, nodes, model.nonlinearity, g.const(trace.states[anchor]), xn, steps, lam)
    logits = graph_head(g, nodes, z)
    if spec.kind == "trades_kl_pgd":
        per = ad.kl_node(g, logits, g.const(clean_logits))
    else:
        per = ad.cross_entropy_node(g, logits, label)
    out = g.sum(per) if per.value.ndim else per
    return ad.reverse_grad(g, out).grads["x"]


def safe_forward(forward: Callable, X):
    """Run ``forward`` on the batch; on divergence retry per example.

    Returns ``(trace, failed_mask)``; ``trace`` is None when any row diverged.
    """
    try:
        return forward(X), np.zeros(len(X), dtype=bool)
    except DivergenceError:
        pass
    failed = np.zeros(len(X), dtype=bool)
    for k in range(len(X)):
        try:
            forward(X[k:k + 1])
        except DivergenceError:
            failed[k] = True
    return None, failed


def _forward_fn(model, solver_cfg, forward):
    if forward is not None:
        return forward
    return lambda X: solve(model, X, solver_cfg)


def _evaluate(forward, X, y, prediction_state, failed):
    """Per-example correctness at ``prediction_state`` for the non-failed rows."""
    correct = np.zeros(len(X), dtype=bool)
    ok = ~failed
    if np.any(ok):
        trace, more_failed = safe_forward(forward, X[ok])
        if trace is None:
            idx = np.flatnonzero(ok)
            failed = failed.copy()
            failed[idx[more_failed]] = True
            ok = ~failed
            if not np.any(ok):
                return correct, failed
            trace = forward(X[ok])
        t = trace.N if prediction_state is None else prediction_state
        correct[ok] = trace.predictions(t) == y[ok]
    return correct, failed


def _accuracy(correct, failed):
    n = int((~failed).sum())
    return math.fsum(correct[~failed].astype(float)) / n if n else float("nan")


def _random_start(X, spec, gaussian_scale=None):
    if not spec.random_start or spec.eps == 0:
        return X.copy()
    noise = np.empty_like(X)
    for k in range(len(X)):
        rng = example_rng(spec.seed, X[k])
        if gaussian_scale is None:
            noise[k] = rng.uniform(-spec.eps, spec.eps, size=X.shape[1])
        else:
            noise[k] = gaussian_scale * rng.standard_normal(X.shape[1])
    return X + noise


def _pgd_loop(model, X, y, spec, solver_cfg, forward, domain, K_p, clean_logits=None,
              start_scale=None):
    X = np.asarray(X, dtype=np.float64)
    failed = np.zeros(len(X), dtype=bool)
    if spec.steps == 0:
        return X.copy(), failed
    x_adv = project(_random_start(X, spec, start_scale), X, spec.eps, domain)
    for _ in range(spec.steps):
        ok = ~failed
        trace, bad = safe_forward(forward, x_adv[ok])
        if trace is None:
            failed[np.flatnonzero(ok)[bad]] = True
            ok = ~failed
            if not np.any(ok):
                break
            trace = forward(x_adv[ok])
        grad = attack_gradient(
            model, x_adv[ok], None if y is None else y[ok], spec, solver_cfg, trace=trace,
            clean_logits=None if clean_logits is None else clean_logits[ok], K_p=K_p,
        )
        step = x_adv[ok] + spec.alpha * np.sign(grad)
        x_adv[ok] = project(step, X[ok], spec.eps, domain)
    return x_adv, failed


def pgd_attack(model: DeqModel, X, y, spec: AttackSpec, solver_cfg: SolverConfig,
               prediction_state=None, forward=None, domain=DEFAULT_DOMAIN, K_p=5) -> AttackResult:
    """Sign-gradient PGD on the cross-entropy; accuracy at ``prediction_state``.

    ``forward`` maps a batch to a ``DynamicsTrace`` and defaults to the plain
    solver; passing a defended forward pass makes the attack adaptive.
    """
    if spec.kind == "trades_kl_pgd":
        raise ContractError("use trades_inner_max for the KL attack")
    y = np.asarray(y)
    fwd = _forward_fn(model, solver_cfg, forward)
    x_adv, failed = _pgd_loop(model, X, y, spec, solver_cfg, fwd, domain, K_p)
    correct, failed = _evaluate(fwd, x_adv, y, prediction_state, failed)
    return AttackResult(
        adversarial_inputs=x_adv, per_example_success=~correct & ~failed,
        accuracy=_accuracy(correct, failed), spec=spec, failed=failed, correct=correct,
    )


def trades_inner_max(model: DeqModel, X, spec: AttackSpec, solver_cfg: SolverConfig,
                     y=None, domain=DEFAULT_DOMAIN, K_p=5, start_scale=1e-3) -> AttackResult:
    """PGD ascent on KL(p_adv || p_clean) at the final state.

    The clean distribution is computed once.  The start point is a small
    Gaussian jitter (``start_scale``) because the KL gradient vanishes at the
    clean input.
    """
    if spec.kind != "trades_kl_pgd":
        raise ContractError("trades_inner_max requires kind='trades_kl_pgd'")
    X = np.asarray(X, dtype=np.float64)
    fwd = _forward_fn(model, solver_cfg, None)
    clean_logits = fwd(X).logits[-1]
    x_adv, failed = _pgd_loop(model, X, None, spec, solver_cfg, fwd, domain, K_p,
                              clean_logits=clean_logits, start_scale=start_scale)
    kl_after = np.full(len(X), np.nan)
    ok = ~failed
    if np.any(ok):
        kl_after[ok] = ad.eval_kl(fwd(x_adv[ok]).logits[-1], clean_logits[ok])
    extras = {"kl_after": kl_after, "clean_logits": clean_logits}
    if y is not None:
        y = np.asarray(y)
        correct, failed = _evaluate(fwd, x_adv, y, None, failed)
        acc = _accuracy(correct, failed)
    else:
        correct, acc = None, float("nan")
    return AttackResult(
        adversarial_inputs=x_adv,
        per_example_success=None if correct is None else ~correct & ~failed,
        accuracy=acc, spec=spec, failed=failed, correct=correct, extras=extras,
    )


def grid_specs(base: AttackSpec, N: int):
    """All ``N x 9 x 2`` intermediate variants of ``base``."""
    return [
        replace(base, kind="intermediate_pgd", i=i, K_a=k, lam=lam)
        for i in range(1, N + 1) for k in range(1, GRID_MAX_KA + 1) for lam in GRID_LAMBDAS
    ]


@dataclass
class AttackGrid:
    results: dict

    @property
    def accuracies(self):
        return {key: r.accuracy for key, r in self.results.items()}

    @property
    def min_accuracy(self):
        return min(r.accuracy for r in self.results.values())

    @property
    def argmin(self):
        """``(i, K_a, lam)`` of the first grid cell attaining the minimum."""
        best = self.min_accuracy
        return next(key for key, r in self.results.items() if r.accuracy == best)

    @property
    def strongest(self) -> AttackResult:
        return self.results[self.argmin]

    def __len__(self):
        return len(self.results)


def run_attack_grid(model: DeqModel, X, y, base: AttackSpec, solver_cfg: SolverConfig,
                    prediction_state=None, forward=None, domain=DEFAULT_DOMAIN, K_p=5) -> AttackGrid:
    results = {}
    for spec in grid_specs(base, solver_cfg.N):
        res = pgd_attack(model, X, y, spec, solver_cfg, prediction_state=prediction_state,
                         forward=forward, domain=domain, K_p=K_p)
        results[(spec.i, spec.K_a, spec.lam)] = res
    return AttackGrid(results)
