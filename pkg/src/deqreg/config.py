"""Experiment configuration in INI form.

Every key has a default, so an empty file is a valid configuration.

On generated datasets the perturbation budget used for training, attacks
and the defense is ``[attack] eps_margin_fraction`` (default 0.25) times the
dataset's class margin, and every step size is ``alpha_ratio`` times that
budget.  The absolute ``eps``/``alpha``/``beta`` values (8/255 and 2/255 by
default) apply to CSV data, or everywhere when ``eps_margin_fraction`` is
left empty.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .attacks import AttackSpec
from .defense import DefenseConfig
from .deq import SolverConfig
from .errors import ConfigError, ContractError
from .training import TrainConfig

STAGES = ("gen-data", "train", "attack", "defend", "report")


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "gaussian_blobs"
    n: int = 600
    noise: float = 0.3
    classes: int = 3
    dim: int = 2
    radius: float = 1.5
    csv_path: str = ""


@dataclass(frozen=True)
class SolverSection:
    N: int = 8
    method: str = "anderson"
    damping: float = 1.0
    anderson_depth: int = 5
    anderson_mix: float = 1.0
    tol: float = 0.0


@dataclass(frozen=True)
class TrainingSection:
    framework: str = "pgd_at"
    random_intermediate: bool = False
    epochs: int = 10
    batch_size: int = 96
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    eps: float = 8 / 255
    alpha: float = 2 / 255
    attack_steps: int = 10
    trades_weight: float = 6.0
    K_p: int = 5
    hidden_dim: int = 16
    gamma: float = 0.9
    nonlinearity: str = "tanh"
    spectral_rescale: bool = True


@dataclass(frozen=True)
class AttackSection:
    eps: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True
    seed: int = 0
    K_p: int = 5
    eps_margin_fraction: float | None = 0.25
    alpha_ratio: float = 0.25
    grid: bool = True
    # "final", "early" (selected on the validation split) or a state index
    prediction_state: str = "final"


@dataclass(frozen=True)
class DefenseSection:
    enabled: bool = False
    beta: float = 2 / 255
    R: int = 10
    T_f: int = 2
    eps: float = 8 / 255
    adaptive_grid: bool = True


@dataclass(frozen=True)
class ReportSection:
    entropy_state: str = "final"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    stages: tuple = ("gen-data", "train", "report")
    dataset: DatasetSection = field(default_factory=DatasetSection)
    solver: SolverSection = field(default_factory=SolverSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    report: ReportSection = field(default_factory=ReportSection)

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(N=s.N, method=s.method, damping=s.damping,
                            anderson_depth=s.anderson_depth, anderson_mix=s.anderson_mix, tol=s.tol)

    def budgets(self, margin=None):
        """``(train_eps, train_alpha, attack_eps, attack_alpha, defense_eps, defense_beta)``."""
        a, t, d = self.attack, self.training, self.defense
        if a.eps_margin_fraction is None or self.dataset.kind == "csv":
            return t.eps, t.alpha, a.eps, a.alpha, d.eps, d.beta
        if margin is None or not margin > 0:
            raise ConfigError("eps_margin_fraction needs a dataset with a positive class margin")
        eps = a.eps_margin_fraction * margin
        step = a.alpha_ratio * eps
        return eps, step, eps, step, eps, step

    @property
    def uses_margin(self):
        return self.attack.eps_margin_fraction is not None and self.dataset.kind != "csv"

    def train_config(self, margin=None) -> TrainConfig:
        t = self.training
        eps, alpha = self.budgets(margin)[:2]
        return TrainConfig(
            framework=t.framework, random_intermediate=t.random_intermediate, epochs=t.epochs,
            batch_size=t.batch_size, lr0=t.lr0, betas=(t.beta1, t.beta2), eps_adam=t.eps_adam,
            eps=eps, alpha=alpha, attack_steps=t.attack_steps, trades_weight=t.trades_weight,
            K_p=t.K_p, seed=self.seed, hidden_dim=t.hidden_dim, gamma=t.gamma,
            nonlinearity=t.nonlinearity, spectral_rescale=t.spectral_rescale,
        )

    def attack_spec(self, margin=None) -> AttackSpec:
        a = self.attack
        eps, alpha = self.budgets(margin)[2:4]
        return AttackSpec("readymade_pgd", steps=a.steps, alpha=alpha, eps=eps,
                          random_start=a.random_start, seed=a.seed)

    def defense_config(self, margin=None) -> DefenseConfig:
        d = self.defense
        eps, beta = self.budgets(margin)[4:6]
        return DefenseConfig(beta=beta, R=d.R, T_f=d.T_f, eps=eps, enabled=d.enabled)

    def validate(self, margin=None):
        """Build every derived record once so bad values fail before compute."""
        for st in self.stages:
            if st not in STAGES:
                raise ConfigError(f"unknown stage {st!r}; expected one of {STAGES}")
        ps = self.attack.prediction_state
        if ps not in ("final", "early"):
            _parse_state(ps, self.solver.N, "attack.prediction_state")
        if self.report.entropy_state != "final":
            _parse_state(self.report.entropy_state, self.solver.N, "report.entropy_state")
        if self.dataset.kind not in ("gaussian_blobs", "two_moons", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "csv" and not self.dataset.csv_path:
            raise ConfigError("dataset kind 'csv' needs dataset.csv_path")
        if self.attack.eps_margin_fraction is not None and not self.attack.eps_margin_fraction > 0:
            raise ConfigError("attack.eps_margin_fraction must be positive")
        try:
            self.solver_config()
            if not self.uses_margin or margin is not None:
                self.train_config(margin)
                self.attack_spec(margin)
                if self.defense.enabled:
                    self.defense_config(margin)
        except ContractError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return self


def _parse_state(text, N, where):
    try:
        t = int(text)
    except ValueError:
        raise ConfigError(f"{where}: expected 'final' or an integer, got {text!r}") from None
    if not 0 <= t <= N:
        raise ConfigError(f"{where}: state {t} outside 0..{N}")
    return t


def _convert(raw, default, where):
    if where in _OPTIONAL and raw.strip() == "":
        return None
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return _parse_float(raw)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _parse_float(raw):
    raw = raw.strip()
    if "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


# keys whose empty value means "unset"
_OPTIONAL = {"attack.eps_margin_fraction"}

_SECTIONS = {
    "dataset": DatasetSection, "solver": SolverSection, "training": TrainingSection,
    "attack": AttackSection, "defense": DefenseSection, "report": ReportSection,
}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    unknown = set(cp.sections()) - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    top = {}
    if cp.has_section("experiment"):
        base = ExperimentConfig()
        for key, raw in cp.items("experiment"):
            if key not in ("seed", "out", "stages"):
                raise ConfigError(f"unknown key experiment.{key}")
            top[key] = _convert(raw, getattr(base, key), f"experiment.{key}")
    for name, cls in _SECTIONS.items():
        if not cp.has_section(name):
            continue
        defaults = cls()
        known = {f.name for f in fields(cls)}
        vals = {}
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            vals[key] = _convert(raw, getattr(defaults, key), f"{name}.{key}")
        top[name] = replace(defaults, **vals)
    return ExperimentConfig(**top)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config(text)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize with every key written out explicitly."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = {"seed": _format(cfg.seed), "out": cfg.out, "stages": _format(cfg.stages)}
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
