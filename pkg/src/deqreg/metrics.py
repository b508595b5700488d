"""Diagnostics over clean/perturbed dynamics and the evaluation report."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .attacks import DEFAULT_DOMAIN, AttackSpec, pgd_attack, run_attack_grid
from .defense import DefenseConfig, defended_forward
from .deq import DeqModel, SolverConfig, layer_apply, solve
from .errors import ContractError


def _paired(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ContractError(f"paired lists needed, got lengths {a.size} and {b.size}")
    return a, b


def metric_P(clean_entropies, adv_entropies):
    """Percentage of pairs whose clean entropy is strictly below the perturbed one."""
    a, b = _paired(clean_entropies, adv_entropies)
    return 100.0 * int(np.count_nonzero(a < b)) / a.size


def metric_P_geq(clean_entropies, adv_entropies):
    """Non-strict ``metric_P``: pairs whose perturbed entropy is >= the clean one.

    ``metric_P(a, b) + metric_P_geq(b, a) == 100`` for any paired lists.
    """
    a, b = _paired(clean_entropies, adv_entropies)
    return 100.0 * int(np.count_nonzero(b >= a)) / a.size


def metric_dH(clean_entropies, adv_entropies):
    """Mean entropy difference, clean minus perturbed."""
    a, b = _paired(clean_entropies, adv_entropies)
    return math.fsum(a - b) / a.size


def dynamics_deviation(trace_clean, trace_adv):
    """``||z_adv^[t] - z^[t]|| / max(||z^[t]||, 1e-12)`` for every t (and example)."""
    if trace_clean.states.shape != trace_adv.states.shape:
        raise ContractError(
            f"trace shapes differ: {trace_clean.states.shape} vs {trace_adv.states.shape}")
    num = np.linalg.norm(trace_adv.states - trace_clean.states, axis=-1)
    den = np.maximum(np.linalg.norm(trace_clean.states, axis=-1), 1e-12)
    return num / den


def deviation_decomposition(model: DeqModel, x, x_adv, N):
    """Split the one-step state deviation under plain unrolling.

    Returns arrays over t = 0..N-1 of ``||z~[t+1] - z[t+1]||``, the term due
    to the perturbed input ``||f(z~[t]; x_adv) - f(z~[t]; x)||`` and the
    accumulated term ``||f(z~[t]; x) - f(z[t]; x)||``.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    d = model.dims[1]
    z = np.zeros(x.shape[:-1] + (d,))
    zt = np.zeros_like(z)
    lhs, pert, accum = [], [], []
    for _ in range(N):
        z_next = layer_apply(model, z, x)
        zt_next = layer_apply(model, zt, x_adv)
        f_zt_clean = layer_apply(model, zt, x)
        lhs.append(np.linalg.norm(zt_next - z_next, axis=-1))
        pert.append(np.linalg.norm(zt_next - f_zt_clean, axis=-1))
        accum.append(np.linalg.norm(f_zt_clean - z_next, axis=-1))
        z, zt = z_next, zt_next
    return np.array(lhs), np.array(pert), np.array(accum)


def nearest_rank(values, q):
    """Nearest-rank percentile (``q`` in 0..100) of a 1-D sample."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ContractError("percentile of an empty sample")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def entropy_profile(traces):
    """Per-state mean and 10/50/90th nearest-rank percentiles of entropy.

    ``traces`` is a batched ``DynamicsTrace``, a list of single-example
    traces, or an ``(N+1, B)`` entropy array.
    """
    if hasattr(traces, "entropies"):
        ent = np.asarray(traces.entropies)
    elif isinstance(traces, (list, tuple)) and traces and hasattr(traces[0], "entropies"):
        Ns = {tr.N for tr in traces}
        if len(Ns) != 1:
            raise ContractError("traces have different N")
        ent = np.stack([tr.entropies for tr in traces], axis=1)
    else:
        ent = np.asarray(traces, dtype=np.float64)
    if ent.ndim == 1:
        ent = ent[:, None]
    if ent.shape[1] == 0:
        raise ContractError("empty batch")
    return {
        "mean": [math.fsum(row) / row.size for row in ent],
        "q10": [nearest_rank(row, 10) for row in ent],
        "q50": [nearest_rank(row, 50) for row in ent],
        "q90": [nearest_rank(row, 90) for row in ent],
    }


def _mean(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(values) / values.size if values.size else float("nan")


def _mean_rows(arr):
    return [_mean(row) for row in np.asarray(arr)]


@dataclass
class EvalConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseConfig | None = None
    prediction_state: int | None = None
    entropy_state: int | None = None
    K_p: int = 5
    domain: tuple = DEFAULT_DOMAIN
    run_grid: bool = True
    defense_grid: bool = True


@dataclass
class EvalReport:
    n_examples: int
    prediction_state: int
    clean_accuracy: float
    readymade_pgd_accuracy: float
    grid_min_accuracy: float | None
    grid_argmin: dict | None
    grid: list
    per_state_clean_accuracy: list
    per_state_adv_accuracy: list
    P: float
    dH: float
    P_readymade: float
    dH_readymade: float
    entropy_profile_clean: dict
    entropy_profile_adv_grid: dict
    entropy_profile_adv_readymade: dict
    deviation_profile: list
    failed_solves: int
    defense: dict | None
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ContractError(f"unknown report fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _entropies_at(trace, t):
    return trace.entropies[trace.N if t is None else t]


def build_eval_report(model: DeqModel, X, y, cfg: EvalConfig) -> EvalReport:
    """Clean, readymade and grid evaluation plus entropy/deviation diagnostics.

    Every aggregate is order independent (exact summation), so permuting
    the batch leaves the report unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    scfg = cfg.solver
    N = scfg.N
    pstate = N if cfg.prediction_state is None else cfg.prediction_state
    notes = []

    clean = solve(model, X, scfg)
    clean_correct = clean.predictions(pstate) == y
    readymade = pgd_attack(model, X, y, replace_kind(cfg.attack, "readymade_pgd"), scfg,
                           prediction_state=pstate, domain=cfg.domain, K_p=cfg.K_p)
    failed = readymade.n_failed
    grid_rows, grid_min, argmin = [], None, None
    strongest = readymade
    if cfg.run_grid:
        grid = run_attack_grid(model, X, y, cfg.attack, scfg, prediction_state=pstate,
                               domain=cfg.domain, K_p=cfg.K_p)
        grid_rows = [{"i": i, "K_a": k, "lam": lam, "accuracy": r.accuracy}
                     for (i, k, lam), r in grid.results.items()]
        grid_min = grid.min_accuracy
        i, k, lam = grid.argmin
        argmin = {"i": i, "K_a": k, "lam": lam}
        strongest = grid.strongest
        failed += sum(r.n_failed for r in grid.results.values())
        if grid_min > readymade.accuracy:
            notes.append("table2_violation: grid minimum above readymade accuracy")

    adv_grid = solve(model, strongest.adversarial_inputs, scfg)
    adv_rm = solve(model, readymade.adversarial_inputs, scfg)
    h_clean = _entropies_at(clean, cfg.entropy_state)
    defense = None
    if cfg.defense is not None and cfg.defense.enabled:
        defense = _defense_section(model, X, y, cfg, strongest, pstate)
    return EvalReport(
        n_examples=int(len(y)),
        prediction_state=int(pstate),
        clean_accuracy=_mean(clean_correct),
        readymade_pgd_accuracy=readymade.accuracy,
        grid_min_accuracy=grid_min,
        grid_argmin=argmin,
        grid=grid_rows,
        per_state_clean_accuracy=[_mean(r) for r in (np.argmax(clean.logits[1:], -1) == y)],
        per_state_adv_accuracy=[_mean(r) for r in (np.argmax(adv_grid.logits[1:], -1) == y)],
        P=metric_P(h_clean, _entropies_at(adv_grid, cfg.entropy_state)),
        dH=metric_dH(h_clean, _entropies_at(adv_grid, cfg.entropy_state)),
        P_readymade=metric_P(h_clean, _entropies_at(adv_rm, cfg.entropy_state)),
        dH_readymade=metric_dH(h_clean, _entropies_at(adv_rm, cfg.entropy_state)),
        entropy_profile_clean=entropy_profile(clean),
        entropy_profile_adv_grid=entropy_profile(adv_grid),
        entropy_profile_adv_readymade=entropy_profile(adv_rm),
        deviation_profile=_mean_rows(dynamics_deviation(clean, adv_grid)),
        failed_solves=int(failed),
        defense=defense,
        notes=notes,
    )


def replace_kind(spec: AttackSpec, kind):
    return replace(spec, kind=kind)


def _defense_section(model, X, y, cfg: EvalConfig, strongest, pstate):
    scfg = cfg.solver
    fwd = defended_forward(model, scfg, cfg.defense, cfg.domain)
    clean_def = fwd(X)
    adv_def = fwd(strongest.adversarial_inputs)
    adv_plain = solve(model, strongest.adversarial_inputs, scfg)
    section = {
        "config": asdict(cfg.defense),
        "clean_accuracy": _mean(clean_def.predictions(pstate) == y),
        "transfer_accuracy": _mean(adv_def.predictions(pstate) == y),
        "mean_final_entropy_adv_defended": _mean(adv_def.entropies[-1]),
        "mean_final_entropy_adv_undefended": _mean(adv_plain.entropies[-1]),
        "entropy_change_profile": _mean_rows(adv_def.entropies - adv_plain.entropies),
        "grid_min_accuracy": None,
        "grid_argmin": None,
    }
    if cfg.defense_grid and cfg.run_grid:
        grid = run_attack_grid(model, X, y, cfg.attack, scfg, prediction_state=pstate,
                               forward=fwd, domain=cfg.domain, K_p=cfg.K_p)
        i, k, lam = grid.argmin
        section["grid_min_accuracy"] = grid.min_accuracy
        section["grid_argmin"] = {"i": i, "K_a": k, "lam": lam}
    return section
