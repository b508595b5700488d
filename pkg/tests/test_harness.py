import csv
import hashlib
import json
import socket
import struct
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deqreg.checkpoint import (
    FORMAT_VERSION, MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint,
)
from deqreg.cli import main
from deqreg.config import ExperimentConfig, dump_config, load_config, parse_config
from deqreg.data import DOMAIN, gen_dataset, load_csv_dataset
from deqreg.deq import init_model
from deqreg.errors import (
    BadMagicError, CheckpointError, ConfigError, ContractError, TruncatedCheckpointError,
    VersionMismatchError,
)
from deqreg.metrics import EvalReport
from deqreg.pipeline import run_experiment
from deqreg.report import read_csv_report

REPO = Path(__file__).resolve().parents[1]

FAST = """
[experiment]
seed = 3
stages = gen-data, train, attack, defend, report

[dataset]
kind = gaussian_blobs
n = 120
noise = 0.2

[solver]
N = 4

[training]
epochs = 1
batch_size = 64

[attack]
steps = 2
grid = false

[defense]
enabled = true
R = 2
adaptive_grid = false
"""


# -- datasets --------------------------------------------------------------

@pytest.mark.parametrize("kind", ["gaussian_blobs", "two_moons"])
def test_dataset_is_deterministic(kind):
    a, b = gen_dataset(kind, 200, 0.1, seed=4), gen_dataset(kind, 200, 0.1, seed=4)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes() and np.array_equal(a.splits, b.splits)
    assert a.provenance == {"generator": kind, "seed": 4, "n": 200, "noise": 0.1, "dim": 2}


@settings(max_examples=25)
@given(st.sampled_from(["gaussian_blobs", "two_moons"]), st.integers(30, 300), st.floats(0, 0.5),
       st.integers(0, 1000), st.integers(2, 5))
def test_dataset_invariants(kind, n, noise, seed, dim):
    ds = gen_dataset(kind, n, noise, seed=seed, dim=dim)
    assert np.all(ds.labels < ds.n_classes) and np.all(ds.labels >= 0)
    assert np.all(ds.features >= DOMAIN[0]) and np.all(ds.features <= DOMAIN[1])
    sizes = [len(ds.split(s)[1]) for s in ("train", "val", "test")]
    assert sum(sizes) == n and min(sizes) > 0


def test_noiseless_blobs_sit_on_their_centres():
    ds = gen_dataset("gaussian_blobs", 90, 0.0, C=3, seed=0)
    angles = 2 * np.pi * np.arange(3) / 3
    centres = 1.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    np.testing.assert_allclose(ds.features, centres[ds.labels], atol=1e-15)
    nearest = np.argmin(((ds.features[:, None] - centres[None]) ** 2).sum(-1), axis=1)
    assert np.all(nearest == ds.labels)


def test_moons_are_separable_by_nearest_neighbour():
    ds = gen_dataset("two_moons", 1000, 0.1, seed=0)
    Xtr, ytr = ds.split("train")
    Xte, yte = ds.split("test")
    nn = np.argmin(((Xte[:, None] - Xtr[None]) ** 2).sum(-1), axis=1)
    assert np.mean(ytr[nn] == yte) >= 0.99


def test_dataset_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        gen_dataset("spirals", 100, 0.1)
    with pytest.raises(ContractError):
        gen_dataset("gaussian_blobs", 20, 0.1, C=3)


def test_csv_dataset_ingestion(tmp_path):
    path = tmp_path / "d.csv"
    rows = [[i % 2, 0.1 * i, -0.1 * i] for i in range(20)]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    ds = load_csv_dataset(path)
    assert ds.n_classes == 2 and ds.n_features == 2 and len(ds.labels) == 20
    np.testing.assert_array_equal(ds.features[3], [0.1 * 3, -0.1 * 3])


# -- checkpoints -----------------------------------------------------------

def checkpoint(seed=0):
    model = init_model(3, 5, 4, np.random.default_rng(seed), nonlinearity="relu", gamma=0.8)
    return Checkpoint(model, {"framework": "trades", "lr0": 1e-3}, {"epoch": 3, "robust_acc": 0.5})


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    ck = checkpoint()
    path = save_checkpoint(tmp_path / "m.deqr", ck)
    back = load_checkpoint(path)
    for name, p in ck.model.params().items():
        assert getattr(back.model, name).tobytes() == p.tobytes()
    assert back.model.nonlinearity == "relu" and back.model.gamma == 0.8
    assert back.train_config == ck.train_config and back.best == ck.best


def test_checkpoint_layout_is_little_endian():
    buf = encode_checkpoint(checkpoint())
    assert buf[:4] == MAGIC
    assert struct.unpack("<I", buf[4:8])[0] == FORMAT_VERSION
    assert struct.unpack("<III", buf[8:20]) == (3, 5, 4)


def test_truncated_checkpoint_is_reported(tmp_path):
    buf = encode_checkpoint(checkpoint())
    (tmp_path / "t.deqr").write_bytes(buf[:-1])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(tmp_path / "t.deqr")
    for cut in (5, 30, 100, len(buf) // 2):
        with pytest.raises(TruncatedCheckpointError):
            decode_checkpoint(buf[:cut])
    with pytest.raises(TruncatedCheckpointError):
        decode_checkpoint(buf + b"\0")


def test_version_mismatch_names_both_versions():
    buf = bytearray(encode_checkpoint(checkpoint()))
    buf[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    with pytest.raises(VersionMismatchError, match=f"{FORMAT_VERSION + 1}.*{FORMAT_VERSION}"):
        decode_checkpoint(bytes(buf))


def test_bad_magic_is_distinct():
    buf = encode_checkpoint(checkpoint())
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + buf[4:])
    assert issubclass(BadMagicError, CheckpointError)


# -- configuration ---------------------------------------------------------

def test_empty_config_is_all_defaults():
    assert parse_config("") == ExperimentConfig()


def test_config_dump_parse_roundtrip():
    cfg = parse_config(FAST)
    assert cfg.training.epochs == 1 and cfg.solver.N == 4 and cfg.defense.enabled
    assert parse_config(dump_config(cfg)) == cfg


def test_config_fraction_and_optional_values():
    cfg = parse_config("[training]\neps = 8/255\n[attack]\neps_margin_fraction =\n")
    assert cfg.training.eps == 8 / 255 and cfg.attack.eps_margin_fraction is None
    assert cfg.train_config().eps == 8 / 255


def test_margin_fraction_sets_every_budget():
    cfg = parse_config("[attack]\neps_margin_fraction = 0.5\nalpha_ratio = 0.25\n[defense]\nenabled = true\n")
    assert cfg.train_config(0.4).eps == 0.2 and cfg.train_config(0.4).alpha == 0.05
    assert cfg.attack_spec(0.4).eps == 0.2 and cfg.defense_config(0.4).beta == 0.05
    with pytest.raises(ConfigError):
        cfg.train_config(None)
    csv_cfg = replace(cfg, dataset=replace(cfg.dataset, kind="csv", csv_path="x.csv"))
    assert csv_cfg.attack_spec(None).eps == 8 / 255


@pytest.mark.parametrize("text", [
    "[nonsense]\na = 1\n", "[training]\nepochz = 3\n", "[experiment]\nfoo = 1\n",
    "[solver]\nN = eight\n", "[experiment]\nstages = train, dance\n", "[attack]\nprediction_state = 99\n",
    "[training]\nlr0 = 0\n", "[dataset]\nkind = csv\n", "not an ini file",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text).validate(0.5)


def test_shipped_configs_parse():
    for path in sorted((REPO / "configs").glob("*.ini")):
        load_config(path).validate(1.0)
    default = load_config(REPO / "configs" / "default.ini")
    assert default == ExperimentConfig()
    assert default.training.lr0 == 1e-3 and default.training.trades_weight == 6.0
    assert default.training.K_p == 5 and default.attack.steps == 10
    assert default.defense.beta == 2 / 255 and default.defense.R == 10 and default.defense.T_f == 2


# -- pipeline --------------------------------------------------------------

def write_cfg(tmp_path, text=FAST):
    path = tmp_path / "exp.ini"
    path.write_text(text)
    return path


def tree_digest(root, skip=("config.ini",)):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_no_stages_writes_nothing(tmp_path):
    out = tmp_path / "out"
    assert run_experiment(write_cfg(tmp_path), out=out, stages=[]) == 0
    assert not out.exists()


def test_bad_config_exits_with_usage_status(tmp_path):
    assert run_experiment(write_cfg(tmp_path, "[solver]\nN = 0\n"), out=tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_pipeline_artifacts_and_determinism(tmp_path, monkeypatch):
    def no_network(*a, **k):
        raise AssertionError("network access attempted")
    monkeypatch.setattr(socket, "socket", no_network)
    monkeypatch.chdir(tmp_path)
    cfg = write_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_experiment(cfg, out=a) == 0
    assert run_experiment(cfg, out=b) == 0
    names = {p.name for p in a.iterdir()}
    assert {"config.ini", "dataset.csv", "dataset.json", "model.deqr", "history.csv", "attack.json",
            "defense.json", "report.json", "report.csv", "entropy_profile.tsv",
            "deviation_profile.tsv", "grid_heatmap.tsv"} <= names
    assert "error.log" not in names
    assert tree_digest(a) == tree_digest(b)
    first = (a / "report.json").read_bytes()
    assert run_experiment(cfg, out=a, stages=["report"]) == 0
    assert (a / "report.json").read_bytes() == first
    assert load_config(a / "config.ini").out == str(a)

    report = EvalReport.from_json(first.decode())
    assert report.grid == [] and report.grid_min_accuracy is None
    assert report.defense is not None and report.defense["grid_min_accuracy"] is None
    rows = read_csv_report(a / "report.csv")
    assert rows[("clean_accuracy", "none")] == report.clean_accuracy
    assert rows[("dH", "readymade_pgd")] == report.dH_readymade
    for t, v in enumerate(report.deviation_profile):
        assert rows[(f"rel_deviation[{t}]", "grid_strongest")] == v
    for name in ("entropy_profile.tsv", "deviation_profile.tsv", "grid_heatmap.tsv", "history.csv"):
        text = (a / name).read_text().splitlines()
        assert text[0][0].isalpha()
        for line in text[1:]:
            for cell in line.replace("\t", ",").split(","):
                float(cell)


def test_disabled_defense_gives_null_section(tmp_path):
    text = FAST.replace("enabled = true", "enabled = false").replace(
        "stages = gen-data, train, attack, defend, report", "stages = train, report")
    out = tmp_path / "o"
    assert run_experiment(write_cfg(tmp_path, text), out=out) == 0
    data = json.loads((out / "report.json").read_text())
    assert "defense" in data and data["defense"] is None


def test_stage_failure_leaves_error_log(tmp_path):
    out = tmp_path / "o"
    status = run_experiment(write_cfg(tmp_path), out=out, stages=["gen-data", "attack"])
    assert status == 1
    assert (out / "dataset.csv").exists()
    assert "stage attack failed" in (out / "error.log").read_text()


def test_grid_heatmap_has_144_rows(tmp_path):
    text = FAST.replace("grid = false", "grid = true").replace("[solver]\nN = 4", "[solver]\nN = 8")
    text = text.replace("stages = gen-data, train, attack, defend, report", "stages = train, report")
    text = text.replace("n = 120", "n = 60")
    out = tmp_path / "o"
    assert run_experiment(write_cfg(tmp_path, text), out=out) == 0
    lines = (out / "grid_heatmap.tsv").read_text().splitlines()
    assert lines[0] == "i\tK_a\tlambda\taccuracy" and len(lines) == 145


def test_full_blobs_pipeline_fits_time_budget(tmp_path):
    text = "[experiment]\nstages = gen-data, train, attack, report\n[dataset]\nn = 600\n"
    start = time.perf_counter()
    assert run_experiment(write_cfg(tmp_path, text), out=tmp_path / "o") == 0
    assert time.perf_counter() - start < 300


# -- command line ----------------------------------------------------------

def test_cli_run_and_stage_commands(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--stage", "gen-data",
                 "--stage", "train"]) == 0
    assert (out / "model.deqr").exists() and not (out / "report.json").exists()
    assert main(["report", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert (out / "report.json").exists()
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 2


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--n", "3", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("PASS") and "max_rel_error" in out


def test_cli_rejects_unknown_command():
    with pytest.raises(SystemExit):
        main(["dance"])
