"""Adversarial training: PGD-AT, TRADES and the random-intermediate-state loss.

Gradients come from the phantom path: a state from the forward trace is
frozen and at most ``K_p`` layer applications are unrolled on top of it, so
the unrolled endpoint stands for the state the loss is placed on.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, pgd_attack, trades_inner_max
from .deq import (
    PARAM_NAMES, DeqModel, SolverConfig, graph_head, graph_unroll, init_model, model_nodes,
    solve, spectral_rescale,
)
from .errors import ContractError, TrainingAborted

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "clean_acc", "robust_acc")


@dataclass(frozen=True)
class TrainConfig:
    framework: str = "pgd_at"
    random_intermediate: bool = False
    epochs: int = 10
    batch_size: int = 96
    lr0: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps_adam: float = 1e-8
    eps: float = 8 / 255
    alpha: float = 2 / 255
    attack_steps: int = 10
    trades_weight: float = 6.0
    K_p: int = 5
    seed: int = 0
    hidden_dim: int = 16
    gamma: float = 0.9
    nonlinearity: str = "tanh"
    spectral_rescale: bool = True

    def __post_init__(self):
        if self.framework not in ("pgd_at", "trades"):
            raise ContractError(f"unknown framework {self.framework!r}")
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        if self.framework == "trades" and self.trades_weight < 0:
            raise ContractError("trades_weight must be non-negative")
        if self.K_p < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("invalid K_p, batch_size or epochs")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    step = max(step, 0)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_update(params, grads, opt: OptimizerState, lr, betas=(0.9, 0.999), eps_adam=1e-8):
    """Bias-corrected Adam.  Returns new ``(params, opt)``; inputs are untouched."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r}")
    t = opt.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = b1 * opt.m[name] + (1 - b1) * g
        v = b2 * opt.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps_adam)
        m_new[name], v_new[name] = m, v
    return new_params, OptimizerState(m=m_new, v=v_new, step=t)


def _phantom_logits(g, nodes, model, trace, x_node, state_index, K_p):
    k = min(K_p, state_index)
    z = g.const(trace.states[state_index - k])
    z = graph_unroll(g, nodes, model.nonlinearity, z, x_node, k) if k else z
    return graph_head(g, nodes, z)


def framework_loss_graph(model: DeqModel, X, X_adv, y, cfg: TrainConfig, solver_cfg: SolverConfig,
                         state_index=None):
    """Phantom-path loss graph at ``state_index`` (default: the final state).

    PGD-AT: mean CE on the adversarial batch.  TRADES: mean clean CE plus
    ``trades_weight`` times mean KL(p_adv || p_clean), both ends trainable.
    """
    N = solver_cfg.N
    i = N if state_index is None else state_index
    if not 1 <= i <= N:
        raise IndexError(f"state index {i} outside 1..{N}")
    g = ad.ExprGraph()
    nodes = model_nodes(g, model)
    adv_trace = solve(model, X_adv, solver_cfg)
    logits_adv = _phantom_logits(g, nodes, model, adv_trace, g.const(X_adv), i, cfg.K_p)
    if cfg.framework == "pgd_at":
        out = ad.mean_node(g, ad.cross_entropy_node(g, logits_adv, y))
    else:
        clean_trace = solve(model, X, solver_cfg)
        logits_clean = _phantom_logits(g, nodes, model, clean_trace, g.const(X), i, cfg.K_p)
        ce = ad.mean_node(g, ad.cross_entropy_node(g, logits_clean, y))
        kl = ad.mean_node(g, ad.kl_node(g, logits_adv, logits_clean))
        out = g.add(ce, g.scale(kl, cfg.trades_weight))
    return g, out


def sample_state_index(rng, N):
    """Uniform draw from ``1..N``."""
    return int(rng.integers(1, N + 1))


def random_intermediate_loss(model, X, X_adv, y, cfg: TrainConfig, solver_cfg: SolverConfig, rng):
    """Framework loss at a uniformly drawn state; returns ``(graph, loss_node, i)``."""
    i = sample_state_index(rng, solver_cfg.N)
    g, out = framework_loss_graph(model, X, X_adv, y, cfg, solver_cfg, state_index=i)
    return g, out, i


def inner_max(model, X, y, cfg: TrainConfig, solver_cfg: SolverConfig, seed, domain):
    if cfg.eps == 0 or cfg.attack_steps == 0:
        return np.array(X, dtype=np.float64)
    alpha = min(cfg.alpha, cfg.eps)
    if cfg.framework == "pgd_at":
        spec = AttackSpec("readymade_pgd", steps=cfg.attack_steps, alpha=alpha, eps=cfg.eps, seed=seed)
        return pgd_attack(model, X, y, spec, solver_cfg, domain=domain, K_p=cfg.K_p).adversarial_inputs
    spec = AttackSpec("trades_kl_pgd", steps=cfg.attack_steps, alpha=alpha, eps=cfg.eps, seed=seed)
    return trades_inner_max(model, X, spec, solver_cfg, domain=domain, K_p=cfg.K_p).adversarial_inputs


def _apply_update(model, grads, opt, lr, cfg):
    params, opt = adam_update(model.params(), {k: grads[k] for k in PARAM_NAMES}, opt, lr,
                              cfg.betas, cfg.eps_adam)
    new = model.with_params(**params)
    if cfg.spectral_rescale:
        new = spectral_rescale(new)
    return new, opt


def train_step(model, X, y, cfg: TrainConfig, opt: OptimizerState, solver_cfg: SolverConfig, lr,
               seed=0, rng=None, domain=(-3.0, 3.0)):
    """Inner maximisation, phantom-path loss and one Adam update.

    Returns ``(model, opt, loss, state_index)``.
    """
    X_adv = inner_max(model, X, y, cfg, solver_cfg, seed, domain)
    if cfg.random_intermediate:
        if rng is None:
            raise ContractError("random_intermediate training needs an rng")
        g, out, i = random_intermediate_loss(model, X, X_adv, y, cfg, solver_cfg, rng)
    else:
        g, out = framework_loss_graph(model, X, X_adv, y, cfg, solver_cfg)
        i = solver_cfg.N
    res = ad.reverse_grad(g, out)
    loss = float(res.value)
    if not math.isfinite(loss):
        raise TrainingAborted(f"non-finite loss {loss}", loss_trace=[loss])
    model, opt = _apply_update(model, res.grads, opt, lr, cfg)
    return model, opt, loss, i


def pgd_at_step(model, X, y, cfg, opt, solver_cfg, lr, seed=0, rng=None, domain=(-3.0, 3.0)):
    if cfg.framework != "pgd_at":
        raise ContractError("pgd_at_step requires framework='pgd_at'")
    model, opt, loss, _ = train_step(model, X, y, cfg, opt, solver_cfg, lr, seed, rng, domain)
    return model, opt, loss


def trades_step(model, X, y, cfg, opt, solver_cfg, lr, seed=0, rng=None, domain=(-3.0, 3.0)):
    if cfg.framework != "trades":
        raise ContractError("trades_step requires framework='trades'")
    model, opt, loss, _ = train_step(model, X, y, cfg, opt, solver_cfg, lr, seed, rng, domain)
    return model, opt, loss


@dataclass
class TrainResult:
    model: DeqModel
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_robust_acc: float | None = None
    final_model: DeqModel | None = None


def evaluate_clean_and_readymade(model, X, y, cfg: TrainConfig, solver_cfg, domain, seed):
    clean = solve(model, X, solver_cfg).predictions() == y
    clean_acc = math.fsum(clean.astype(float)) / len(y)
    if cfg.eps == 0:
        return clean_acc, clean_acc
    spec = AttackSpec("readymade_pgd", steps=10, alpha=min(cfg.alpha, cfg.eps), eps=cfg.eps, seed=seed)
    robust = pgd_attack(model, X, y, spec, solver_cfg, domain=domain, K_p=cfg.K_p)
    return clean_acc, robust.accuracy


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in HISTORY_FIELDS[1:]])


def train_loop(dataset, cfg: TrainConfig, solver_cfg: SolverConfig | None = None,
               history_path=None, model: DeqModel | None = None) -> TrainResult:
    """Train and keep the checkpoint with the best validation robust accuracy.

    Validation uses clean accuracy and readymade PGD-10 at the final state.
    """
    solver_cfg = solver_cfg or SolverConfig()
    l, C = dataset.n_features, dataset.n_classes
    shuffle_ss, ri_ss, init_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if model is None:
        model = init_model(l, cfg.hidden_dim, C, np.random.default_rng(init_ss),
                           nonlinearity=cfg.nonlinearity, gamma=cfg.gamma)
    result = TrainResult(model=model, final_model=model)
    if cfg.epochs == 0:
        return result
    shuffle_rng = np.random.default_rng(shuffle_ss)
    ri_rng = np.random.default_rng(ri_ss)
    X_tr, y_tr = dataset.split("train")
    X_val, y_val = dataset.split("val")
    domain = dataset.domain
    n_batches = max(1, math.ceil(len(y_tr) / cfg.batch_size))
    total = cfg.epochs * n_batches
    opt = OptimizerState.zeros_like(model.params())
    step = 0
    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(y_tr))
        losses = []
        lr = cosine_lr(step, total, cfg.lr0)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr0)
            try:
                model, opt, loss, _ = train_step(
                    model, X_tr[idx], y_tr[idx], cfg, opt, solver_cfg, lr,
                    seed=cfg.seed * 1_000_003 + step, rng=ri_rng, domain=domain,
                )
            except TrainingAborted as exc:
                exc.epoch, exc.batch = epoch, b
                exc.loss_trace = losses + exc.loss_trace
                if history_path is not None:
                    write_history(history_path, result.history)
                raise
            losses.append(loss)
            step += 1
        clean_acc, robust_acc = evaluate_clean_and_readymade(
            model, X_val, y_val, cfg, solver_cfg, domain, seed=cfg.seed)
        rec = {"epoch": epoch, "lr": lr, "train_loss": math.fsum(losses) / len(losses),
               "clean_acc": clean_acc, "robust_acc": robust_acc}
        result.history.append(rec)
        log.info("epoch %d loss %.4f clean %.3f robust %.3f", epoch, rec["train_loss"], clean_acc, robust_acc)
        if history_path is not None:
            write_history(history_path, result.history)
        if robust_acc >= best:
            best = robust_acc
            result.model, result.best_epoch, result.best_robust_acc = model, epoch, robust_acc
    result.final_model = model
    return result


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
