"""Test-time entropy reduction along the neural dynamics, and early-state selection.

Every ``T_f`` solver iterations the input is moved by ``R`` projected
gradient-descent steps on the prediction entropy of ``f(z^[t+1]; x)`` with
``z^[t+1]`` frozen, and then ``z^[t+1]`` is re-solved from ``z^[<=t]`` under
the updated input.  Inputs stay within ``eps`` of the received input.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .attacks import DEFAULT_DOMAIN, AttackSpec, pgd_attack, project
from .deq import (
    DeqModel, DynamicsTrace, FixedPointSolver, SolverConfig, activate, build_trace, head_apply, solve,
)
from .errors import ContractError, DivergenceError


@dataclass(frozen=True)
class DefenseConfig:
    beta: float = 2 / 255
    R: int = 10
    T_f: int = 2
    eps: float = 8 / 255
    enabled: bool = True

    def __post_init__(self):
        # T_f > N is accepted and simply never fires.
        if not self.beta > 0 or self.R < 1 or self.T_f < 1 or not self.eps > 0:
            raise ContractError("defense needs beta > 0, R >= 1, T_f >= 1, eps > 0")


@dataclass
class DefenseTrace:
    base: DynamicsTrace
    entropy_before: list = field(default_factory=list)
    entropy_after: list = field(default_factory=list)
    intervention_steps: list = field(default_factory=list)
    input_versions: list = field(default_factory=list)
    flagged: np.ndarray | None = None
    wall_time: dict = field(default_factory=dict)

    def predictions(self, t=None):
        return self.base.predictions(t)


class InputUpdate(NamedTuple):
    x: np.ndarray
    flagged: np.ndarray


def entropy_input_grad(model: DeqModel, z_next, x):
    """Gradient of the entropy of ``h(f(z_next; x))`` w.r.t. ``x``, per row.

    Closed form: with ``p = softmax(l)`` the entropy has ``dH/dl = -p (log p + H)``,
    which is pulled back through the head, the nonlinearity and ``U``.
    Rows that overflow come back non-finite rather than raising.
    """
    z = np.asarray(z_next, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(all="ignore"):
        a = z @ model.W.T + (x @ model.U.T + model.b)
        f = activate(model.nonlinearity, a)
        logits = f @ model.V.T + model.c
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        p = np.exp(logp)
        H = -(p * logp).sum(axis=-1, keepdims=True)
        g_a = ((-p * (logp + H)) @ model.V) * _sigma_grad(model.nonlinearity, a, f)
        return g_a @ model.U


def _sigma_grad(kind, a, f):
    if kind == "tanh":
        return 1.0 - f * f
    if kind == "relu":
        return (a > 0).astype(np.float64)
    return np.ones_like(a)


def input_update_step(model: DeqModel, z_next, x_cur, x_received, beta, eps,
                      domain=DEFAULT_DOMAIN) -> InputUpdate:
    """One projected descent step on the entropy; non-finite rows keep ``x_cur``."""
    x_cur = np.asarray(x_cur, dtype=np.float64)
    grad = entropy_input_grad(model, z_next, x_cur)
    bad = ~np.all(np.isfinite(grad), axis=-1)
    x_new = project(x_cur - beta * np.where(bad[..., None], 0.0, grad), x_received, eps, domain)
    x_new = np.where(bad[..., None], x_cur, x_new)
    return InputUpdate(x_new, bad)


def entropy_reduction_solve(model: DeqModel, x_received, solver_cfg: SolverConfig,
                            defense_cfg: DefenseConfig, domain=DEFAULT_DOMAIN) -> DefenseTrace:
    x_received = np.asarray(x_received, dtype=np.float64)
    t_start = time.perf_counter()
    solver = FixedPointSolver(model, x_received, solver_cfg)
    out = DefenseTrace(base=None, input_versions=[x_received])
    flagged = np.zeros(x_received.shape[:-1], dtype=bool)
    update_time = 0.0
    x_t = x_received
    for t in range(solver_cfg.N):
        try:
            z_next = solver.advance()
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} (after {len(out.intervention_steps)} interventions)",
                                  iteration=exc.iteration) from exc
        if defense_cfg.enabled and (t + 1) % defense_cfg.T_f == 0:
            u0 = time.perf_counter()
            out.entropy_before.append(ad.eval_pred_entropy(head_apply(model, z_next)))
            x_i = x_t
            for _ in range(defense_cfg.R):
                x_i, bad = input_update_step(model, z_next, x_i, x_received, defense_cfg.beta,
                                             defense_cfg.eps, domain)
                flagged |= bad
            x_t = x_i
            solver.retract()
            solver.set_input(x_t)
            try:
                z_next = solver.advance()
            except DivergenceError as exc:
                raise DivergenceError(
                    f"non-finite state after intervention {len(out.intervention_steps) + 1}",
                    iteration=t + 1) from exc
            out.entropy_after.append(ad.eval_pred_entropy(head_apply(model, z_next)))
            out.intervention_steps.append(t + 1)
            update_time += time.perf_counter() - u0
        out.input_versions.append(x_t)
    out.base = build_trace(model, solver.states, solver.inputs)
    out.flagged = flagged
    total = time.perf_counter() - t_start
    out.wall_time = {"total": total, "input_updates": update_time, "solve": total - update_time}
    return out


def defended_forward(model: DeqModel, solver_cfg: SolverConfig, defense_cfg: DefenseConfig,
                     domain=DEFAULT_DOMAIN):
    """Batch -> ``DynamicsTrace`` with the defense in the loop."""
    def forward(X):
        return entropy_reduction_solve(model, X, solver_cfg, defense_cfg, domain).base
    return forward


def per_state_accuracy(trace: DynamicsTrace, y):
    """Accuracy of ``h(z^[t])`` for t = 1..N (index 0 of the result is t = 1)."""
    preds = np.argmax(trace.logits[1:], axis=-1)
    return (preds == np.asarray(y)[None, :]).mean(axis=1)


def early_state_select(model: DeqModel, X, y, attack: AttackSpec, solver_cfg: SolverConfig,
                       fixed_state=None, domain=DEFAULT_DOMAIN, K_p=5):
    """State with the best accuracy under the readymade attack; ties go to the later state."""
    N = solver_cfg.N
    if fixed_state is not None:
        if not 1 <= fixed_state <= N:
            raise ContractError(f"fixed_state {fixed_state} outside 1..{N}")
        return int(fixed_state)
    if len(y) == 0:
        raise ContractError("early-state selection needs a non-empty validation batch")
    res = pgd_attack(model, X, y, attack, solver_cfg, domain=domain, K_p=K_p)
    acc = per_state_accuracy(solve(model, res.adversarial_inputs, solver_cfg), y)
    best = acc.max()
    return int(np.flatnonzero(acc == best)[-1] + 1)
