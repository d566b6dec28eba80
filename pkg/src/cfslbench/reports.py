"""Run reports: accuracy statistics, persistence, summaries, and charts.

A report stores raw per-task accuracies per seed plus derived statistics.
The derived numbers are always recomputable from the raw lists: per-seed
mean/std over tasks, overall mean as the mean of seed means, and overall
std as the population std across seed means.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1


class ReportError(RuntimeError):
    """A report file cannot be parsed or is structurally invalid."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class ReportVersionError(ReportError):
    """The report was written by a newer schema."""


@dataclass
class SeedOutcome:
    seed: int
    per_task_accuracies: list[float]
    mean: float
    std: float
    ensemble_accuracy: float | None = None


@dataclass
class RunReport:
    config: dict
    per_seed: list[SeedOutcome]
    overall_mean: float
    overall_std: float
    wall_time_seconds: float
    dataset_fingerprint: str
    ensemble_accuracy: float | None = None
    budget_flags: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    complete: bool = True
    schema_version: int = SCHEMA_VERSION


def seed_statistics(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and population std of per-task accuracies within one seed."""
    arr = np.asarray(accuracies, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def overall_statistics(per_seed: Sequence[SeedOutcome]) -> tuple[float, float]:
    """Mean of seed means and the population std across seed means."""
    means = np.array([s.mean for s in per_seed], dtype=np.float64)
    return float(means.mean()), float(means.std())


def make_seed_outcome(
    seed: int, accuracies: Sequence[float], ensemble_accuracy: float | None = None
) -> SeedOutcome:
    for a in accuracies:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"accuracy {a} outside [0, 1]")
    mean, std = seed_statistics(accuracies)
    return SeedOutcome(
        seed=seed,
        per_task_accuracies=[float(a) for a in accuracies],
        mean=mean,
        std=std,
        ensemble_accuracy=ensemble_accuracy,
    )


def make_report(
    config: dict,
    per_seed: list[SeedOutcome],
    wall_time_seconds: float,
    dataset_fingerprint: str,
    budget_flags: list[str] | None = None,
    failures: list[dict] | None = None,
) -> RunReport:
    if per_seed:
        overall_mean, overall_std = overall_statistics(per_seed)
    else:
        overall_mean = overall_std = float("nan")
    ens = [s.ensemble_accuracy for s in per_seed if s.ensemble_accuracy is not None]
    return RunReport(
        config=config,
        per_seed=per_seed,
        overall_mean=overall_mean,
        overall_std=overall_std,
        wall_time_seconds=wall_time_seconds,
        dataset_fingerprint=dataset_fingerprint,
        ensemble_accuracy=float(np.mean(ens)) if ens else None,
        budget_flags=list(budget_flags or []),
        failures=list(failures or []),
        complete=not failures,
    )


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _canonical_dumps(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"


def persist_report(report: RunReport, path) -> None:
    payload = asdict(report)
    Path(path).write_text(_canonical_dumps(payload))


def load_report(path) -> RunReport:
    text = Path(path).read_text()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(
            f"cannot parse report {path}: {exc.msg} at offset {exc.pos}", offset=exc.pos
        ) from exc
    if not isinstance(payload, dict):
        raise ReportError(f"report {path} is not an object")
    version = payload.get("schema_version")
    if not isinstance(version, int):
        raise ReportError(f"report {path} lacks an integer schema_version")
    if version > SCHEMA_VERSION:
        raise ReportVersionError(
            f"report {path} has schema_version {version}, newer than supported "
            f"({SCHEMA_VERSION})"
        )
    try:
        per_seed = [SeedOutcome(**entry) for entry in payload["per_seed"]]
        return RunReport(
            config=payload["config"],
            per_seed=per_seed,
            overall_mean=payload["overall_mean"],
            overall_std=payload["overall_std"],
            wall_time_seconds=payload["wall_time_seconds"],
            dataset_fingerprint=payload["dataset_fingerprint"],
            ensemble_accuracy=payload.get("ensemble_accuracy"),
            budget_flags=payload.get("budget_flags", []),
            failures=payload.get("failures", []),
            complete=payload.get("complete", True),
            schema_version=version,
        )
    except (KeyError, TypeError) as exc:
        raise ReportError(f"report {path} is missing fields: {exc}") from exc


# -- presentation -----------------------------------------------------------


def config_label(config: dict) -> str:
    """Short row label: the preset name if known, else the stream shape."""
    if config.get("preset"):
        return str(config["preset"])
    exp = config.get("experiment", {})
    return (
        f"nss={exp.get('nss')},cci={exp.get('cci')},"
        f"n_way={exp.get('n_way')},k_shot={exp.get('k_shot')}"
    )


def model_label(config: dict) -> str:
    kind = config.get("learner", {}).get("kind", "learner")
    return f"{kind}+replay" if config.get("replay") else kind


def _count_tag(config: dict) -> str:
    exp = config.get("experiment", {})
    n = config.get("counts", {}).get("label_count", "?")
    return f"NI={n}" if exp.get("mode") == "instance" else f"NC={n}"


def format_summary_line(report: RunReport) -> str:
    """One human-readable line in the style of the result tables.

    Accuracies are percentages with two decimals, mean over seeds with the
    population std across seed means.
    """
    cfg = report.config
    n_seeds = len(report.per_seed)
    n_tasks = cfg.get("experiment", {}).get("num_tasks", "?")
    line = (
        f"{config_label(cfg)} {model_label(cfg)} {_count_tag(cfg)}: "
        f"{100.0 * report.overall_mean:.2f} ± {100.0 * report.overall_std:.2f} "
        f"({n_seeds} seeds, {n_tasks} tasks)"
    )
    if report.ensemble_accuracy is not None:
        line += f" | ensemble {100.0 * report.ensemble_accuracy:.2f}"
    if not report.complete:
        line += " [partial]"
    return line


def comparison_table(reports: Sequence[RunReport]) -> str:
    """Fixed-width table: one row per stream config, one column per model."""
    if not reports:
        raise ValueError("comparison_table needs at least one report")
    rows = sorted({config_label(r.config) for r in reports})
    cols = sorted({model_label(r.config) for r in reports})
    cells: dict[tuple[str, str], str] = {}
    for r in reports:
        key = (config_label(r.config), model_label(r.config))
        cells[key] = f"{100.0 * r.overall_mean:.2f} ± {100.0 * r.overall_std:.2f}"
    name_w = max(len(x) for x in rows + ["config"])
    col_w = max([len(c) for c in cols] + [len(v) for v in cells.values()])
    header = "config".ljust(name_w) + "".join(f"  {c.rjust(col_w)}" for c in cols)
    lines = [header, "-" * len(header)]
    for row in rows:
        cells_txt = "".join(
            f"  {cells.get((row, c), '-').rjust(col_w)}" for c in cols
        )
        lines.append(row.ljust(name_w) + cells_txt)
    return "\n".join(lines)


def summary_rows(reports: Sequence[RunReport]) -> list[dict]:
    rows = []
    for r in reports:
        rows.append(
            {
                "config": config_label(r.config),
                "model": model_label(r.config),
                "mean": r.overall_mean,
                "std": r.overall_std,
                "seeds": len(r.per_seed),
                "num_tasks": r.config.get("experiment", {}).get("num_tasks"),
                "ensemble_accuracy": r.ensemble_accuracy,
                "complete": r.complete,
            }
        )
    rows.sort(key=lambda row: (row["config"], row["model"]))
    return rows


def write_summary_json(reports: Sequence[RunReport], path) -> None:
    """Machine-readable summary; same inputs produce identical bytes."""
    payload = {"schema_version": SCHEMA_VERSION, "rows": summary_rows(reports)}
    Path(path).write_text(_canonical_dumps(payload))


def render_bar_chart(reports: Sequence[RunReport], path) -> None:
    """Grouped bar chart of mean accuracy with 1-std error bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not reports:
        raise ValueError("render_bar_chart needs at least one report")
    rows = sorted({config_label(r.config) for r in reports})
    models = sorted({model_label(r.config) for r in reports})
    stats: dict[tuple[str, str], tuple[float, float]] = {}
    for r in reports:
        stats[(config_label(r.config), model_label(r.config))] = (
            100.0 * r.overall_mean,
            100.0 * r.overall_std,
        )
    x = np.arange(len(rows))
    width = 0.8 / len(models)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.8 * len(rows)), 4.0))
    for mi, model in enumerate(models):
        means = [stats.get((row, model), (np.nan, 0.0))[0] for row in rows]
        errs = [stats.get((row, model), (np.nan, 0.0))[1] for row in rows]
        ax.bar(x + (mi - (len(models) - 1) / 2) * width, means, width,
               yerr=errs, capsize=3, label=model)
    ax.set_xticks(x)
    ax.set_xticklabels(rows, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_leaderboard(rows: Sequence[dict], path) -> None:
    payload = {"schema_version": SCHEMA_VERSION, "rows": list(rows)}
    Path(path).write_text(_canonical_dumps(payload))


def load_leaderboard(path) -> list[dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(
            f"cannot parse leaderboard {path}: {exc.msg} at offset {exc.pos}",
            offset=exc.pos,
        ) from exc
    if payload.get("schema_version", 0) > SCHEMA_VERSION:
        raise ReportVersionError(f"leaderboard {path} has a newer schema")
    return payload["rows"]
