"""Writing an ``EvalReport`` to disk: JSON, a flat CSV and plot-data tables.

CSV schema: ``metric,attack,value`` with one row per (metric, attack-spec)
pair.  Floats are written with ``repr`` so they reload exactly.  TSV files
carry a header row and use a dot decimal separator regardless of locale.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .metrics import EvalReport

CSV_HEADER = ("metric", "attack", "value")
ENTROPY_COLUMNS = ("t", "mean_clean", "mean_adv", "q10", "q50", "q90")
DEVIATION_COLUMNS = ("t", "mean_rel_diff")
GRID_COLUMNS = ("i", "K_a", "lambda", "accuracy")


def _num(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def grid_label(row):
    return f"intermediate_pgd(i={row['i']},K_a={row['K_a']},lam={row['lam']!r})"


def csv_rows(report: EvalReport):
    """Flat ``(metric, attack, value)`` rows covering every scalar in the report."""
    rows = [
        ("n_examples", "none", report.n_examples),
        ("prediction_state", "none", report.prediction_state),
        ("clean_accuracy", "none", report.clean_accuracy),
        ("accuracy", "readymade_pgd", report.readymade_pgd_accuracy),
        ("grid_min_accuracy", "grid", report.grid_min_accuracy),
        ("P", "grid_strongest", report.P),
        ("dH", "grid_strongest", report.dH),
        ("P", "readymade_pgd", report.P_readymade),
        ("dH", "readymade_pgd", report.dH_readymade),
        ("failed_solves", "all", report.failed_solves),
    ]
    for row in report.grid:
        rows.append(("accuracy", grid_label(row), row["accuracy"]))
    for t, acc in enumerate(report.per_state_clean_accuracy, start=1):
        rows.append((f"state_accuracy[{t}]", "none", acc))
    for t, acc in enumerate(report.per_state_adv_accuracy, start=1):
        rows.append((f"state_accuracy[{t}]", "grid_strongest", acc))
    for t, dev in enumerate(report.deviation_profile):
        rows.append((f"rel_deviation[{t}]", "grid_strongest", dev))
    if report.defense is not None:
        for key, val in sorted(report.defense.items()):
            if isinstance(val, (int, float)) and not isinstance(val, bool):
                rows.append((f"defense.{key}", "grid_strongest", val))
    return rows


def read_csv_report(path):
    """``{(metric, attack): value}`` from a CSV written by ``emit_report``."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for metric, attack, value in reader:
            out[(metric, attack)] = None if value == "" else float(value)
    return out


def _write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def _entropy_rows(clean, adv):
    return [(t, clean["mean"][t], adv["mean"][t], adv["q10"][t], adv["q50"][t], adv["q90"][t])
            for t in range(len(clean["mean"]))]


def emit_report(report: EvalReport, out_dir):
    """Write all report files into ``out_dir``; returns the written paths by name."""
    out = Path(out_dir)
    paths = {
        "json": out / "report.json",
        "csv": out / "report.csv",
        "entropy_profile": out / "entropy_profile.tsv",
        "entropy_profile_readymade": out / "entropy_profile_readymade.tsv",
        "deviation_profile": out / "deviation_profile.tsv",
        "grid_heatmap": out / "grid_heatmap.tsv",
    }
    current = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        current = paths["json"]
        current.write_text(report.to_json() + "\n")
        current = paths["csv"]
        with open(current, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for metric, attack, value in csv_rows(report):
                w.writerow([metric, attack, _num(value)])
        current = paths["entropy_profile"]
        _write_tsv(current, ENTROPY_COLUMNS,
                   _entropy_rows(report.entropy_profile_clean, report.entropy_profile_adv_grid))
        current = paths["entropy_profile_readymade"]
        _write_tsv(current, ENTROPY_COLUMNS,
                   _entropy_rows(report.entropy_profile_clean, report.entropy_profile_adv_readymade))
        current = paths["deviation_profile"]
        _write_tsv(current, DEVIATION_COLUMNS, list(enumerate(report.deviation_profile)))
        current = paths["grid_heatmap"]
        _write_tsv(current, GRID_COLUMNS,
                   [(r["i"], r["K_a"], r["lam"], r["accuracy"]) for r in report.grid])
    except OSError as exc:
        raise OSError(f"failed writing {current or out}: {exc}") from exc
    return paths


def load_json_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
