"""Stage orchestration: data, training, attacks, defense and reporting."""
from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .attacks import pgd_attack, run_attack_grid
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, _parse_state, dump_config, load_config
from .data import Dataset, gen_dataset, load_csv_dataset
from .defense import defended_forward, early_state_select, entropy_reduction_solve
from .deq import solve
from .errors import ConfigError
from .metrics import EvalConfig, build_eval_report
from .report import emit_report
from .training import train_loop, write_history

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.deqr"


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "csv":
        return load_csv_dataset(ds.csv_path, seed=cfg.seed)
    C = ds.classes if ds.kind == "gaussian_blobs" else None
    return gen_dataset(ds.kind, ds.n, ds.noise, C=C, seed=cfg.seed, radius=ds.radius, dim=ds.dim)


def write_dataset(ds: Dataset, out: Path):
    with open(out / "dataset.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"x{j}" for j in range(ds.n_features)])
        for label, row in zip(ds.labels, ds.features):
            w.writerow([int(label)] + [repr(float(v)) for v in row])
    meta = {"provenance": ds.provenance, "margin": ds.margin, "n_classes": ds.n_classes,
            "splits": [str(s) for s in ds.splits]}
    (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def _json_dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Experiment:
    """Holds the resolved configuration and the in-memory dataset for one run."""

    def __init__(self, cfg: ExperimentConfig, out=None):
        self.cfg = cfg
        self.out = Path(out or cfg.out)
        self.dataset = load_dataset(cfg)
        self.margin = self.dataset.margin if np.isfinite(self.dataset.margin) else None
        cfg.validate(self.margin)
        self.solver_cfg = cfg.solver_config()
        self.domain = self.dataset.domain

    @property
    def checkpoint_path(self):
        return self.out / CHECKPOINT_NAME

    def load_model(self):
        return load_checkpoint(self.checkpoint_path).model

    def prediction_state(self, model):
        ps = self.cfg.attack.prediction_state
        N = self.solver_cfg.N
        if ps == "final":
            return N
        if ps == "early":
            X, y = self.dataset.split("val")
            return early_state_select(model, X, y, self.cfg.attack_spec(self.margin),
                                      self.solver_cfg, domain=self.domain,
                                      K_p=self.cfg.attack.K_p)
        return _parse_state(ps, N, "attack.prediction_state")

    def eval_config(self, model) -> EvalConfig:
        cfg = self.cfg
        es = cfg.report.entropy_state
        return EvalConfig(
            solver=self.solver_cfg, attack=cfg.attack_spec(self.margin),
            defense=cfg.defense_config(self.margin) if cfg.defense.enabled else None,
            prediction_state=self.prediction_state(model),
            entropy_state=None if es == "final" else int(es), K_p=cfg.attack.K_p,
            domain=self.domain, run_grid=cfg.attack.grid, defense_grid=cfg.defense.adaptive_grid,
        )

    # stages -------------------------------------------------------------

    def stage_gen_data(self):
        write_dataset(self.dataset, self.out)

    def stage_train(self):
        tcfg = self.cfg.train_config(self.margin)
        res = train_loop(self.dataset, tcfg, self.solver_cfg, history_path=self.out / "history.csv")
        write_history(self.out / "history.csv", res.history)
        best = {"epoch": res.best_epoch, "robust_acc": res.best_robust_acc}
        snapshot = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(tcfg).items()}
        save_checkpoint(self.checkpoint_path, Checkpoint(res.model, snapshot, best))

    def stage_attack(self):
        model = self.load_model()
        X, y = self.dataset.split("test")
        spec = self.cfg.attack_spec(self.margin)
        pstate = self.prediction_state(model)
        rm = pgd_attack(model, X, y, spec, self.solver_cfg, prediction_state=pstate,
                        domain=self.domain, K_p=self.cfg.attack.K_p)
        out = {"prediction_state": pstate, "readymade_pgd_accuracy": rm.accuracy, "grid": []}
        if self.cfg.attack.grid:
            grid = run_attack_grid(model, X, y, spec, self.solver_cfg, prediction_state=pstate,
                                   domain=self.domain, K_p=self.cfg.attack.K_p)
            out["grid"] = [{"i": i, "K_a": k, "lam": lam, "accuracy": a}
                           for (i, k, lam), a in grid.accuracies.items()]
            out["grid_min_accuracy"] = grid.min_accuracy
            out["grid_argmin"] = list(grid.argmin)
        _json_dump(self.out / "attack.json", out)

    def stage_defend(self):
        model = self.load_model()
        X, y = self.dataset.split("test")
        dcfg = replace(self.cfg.defense_config(self.margin), enabled=True)
        spec = self.cfg.attack_spec(self.margin)
        pstate = self.prediction_state(model)
        rm = pgd_attack(model, X, y, spec, self.solver_cfg, prediction_state=pstate,
                        domain=self.domain, K_p=self.cfg.attack.K_p)
        dtr = entropy_reduction_solve(model, rm.adversarial_inputs, self.solver_cfg, dcfg, self.domain)
        plain = solve(model, rm.adversarial_inputs, self.solver_cfg)
        out = {
            "prediction_state": pstate,
            "readymade_transfer_accuracy": float(np.mean(dtr.predictions(pstate) == y)),
            "readymade_undefended_accuracy": rm.accuracy,
            "mean_final_entropy_defended": float(np.mean(dtr.base.entropies[-1])),
            "mean_final_entropy_undefended": float(np.mean(plain.entropies[-1])),
            "intervention_steps": dtr.intervention_steps,
            "flagged": int(np.count_nonzero(dtr.flagged)),
        }
        if self.cfg.attack.grid and self.cfg.defense.adaptive_grid:
            fwd = defended_forward(model, self.solver_cfg, dcfg, self.domain)
            grid = run_attack_grid(model, X, y, spec, self.solver_cfg, prediction_state=pstate,
                                   forward=fwd, domain=self.domain, K_p=self.cfg.attack.K_p)
            out["grid_min_accuracy"] = grid.min_accuracy
            out["grid_argmin"] = list(grid.argmin)
        _json_dump(self.out / "defense.json", out)

    def stage_report(self):
        model = self.load_model()
        X, y = self.dataset.split("test")
        report = build_eval_report(model, X, y, self.eval_config(model))
        emit_report(report, self.out)

    def run_stage(self, name):
        getattr(self, "stage_" + name.replace("-", "_"))()


def run_experiment(config, out=None, seed=None, stages=None) -> int:
    """Run the configured stages; returns a process exit status.

    On failure the artifacts written so far stay in place and the traceback
    goes to ``error.log`` in the output directory.
    """
    try:
        cfg = load_config(config) if isinstance(config, (str, Path)) else config
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if stages is not None:
            cfg = replace(cfg, stages=tuple(stages))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        cfg.validate()
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    out_dir = Path(cfg.out)
    try:
        exp = Experiment(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    if not cfg.stages:
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(dump_config(cfg))
    current = None
    try:
        for current in cfg.stages:
            log.info("stage %s", current)
            exp.run_stage(current)
    except Exception as exc:  # noqa: BLE001 - every stage failure maps to an exit status
        (out_dir / "error.log").write_text(
            f"stage {current} failed: {exc}\n\n{traceback.format_exc()}")
        log.error("stage %s failed: %s", current, exc)
        return 1
    return 0
