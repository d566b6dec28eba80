"""Command-line front end: dataset preparation, runs, sweeps, and reports.

Runs are driven by a declarative config file (YAML or JSON) with sections
dataset / experiment / learner / replay / pretrain / ensemble / output.
Validation collects every violation before exiting so a config can be fixed
in one pass. Exit status is 0 only when all requested work completed.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import yaml

from .datasets import (
    ClassDataset,
    DatasetError,
    SplitSpec,
    export_image_folder,
    load_image_folder,
    split_background_eval,
    synth_generate,
)
from .episodes import CLASSIFICATION, ExperimentConfig
from .harness import SweepSpec, run_experiment, sweep
from .models import CONVNET, PROTONET, LearnerSpec, PretrainConfig
from .presets import (
    FINE_TUNE_STEPS,
    PresetError,
    learner_preset,
    preset,
    replay_preset,
)
from .replay import ReplayConfig
from .reports import (
    ReportError,
    comparison_table,
    format_summary_line,
    load_report,
    persist_report,
    render_bar_chart,
    write_leaderboard,
    write_summary_json,
)

_SECTION_KEYS = {
    "dataset": {"path", "synthetic", "split"},
    "experiment": {"preset", "nss", "cci", "n_way", "k_shot", "mode", "num_tasks", "seeds"},
    "learner": {"kind", "filters", "stages", "lr", "fine_tune_steps", "output_dim"},
    "replay": {"enabled", "b", "k"},
    "pretrain": {
        "epochs", "iterations", "batch_size", "episode_way", "episode_queries",
        "lr", "val_fraction", "val_every", "val_episodes", "keep_top", "seed",
    },
    "ensemble": {"size"},
    "output": {"directory"},
}
_SYNTH_KEYS = {"classes", "samples", "image_size", "seed"}
_SPLIT_KEYS = {"fraction", "seed"}
_EXPLICIT_EXP_KEYS = {"nss", "cci", "n_way", "k_shot", "mode"}


def _load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError([f"cannot read config {path}: {exc}"]) from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigFileError([f"cannot parse config {path}: {exc}"]) from exc
    if not isinstance(cfg, dict):
        raise ConfigFileError([f"config {path} must be a mapping of sections"])
    return cfg


class ConfigFileError(ValueError):
    """Carries every violation found in a config file."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


def _check_keys(section: str, mapping: dict, allowed: set, violations: list[str]) -> None:
    for key in mapping:
        if key not in allowed:
            violations.append(
                f"{section}: unknown key {key!r} (allowed: {sorted(allowed)})"
            )


def _resolve_run_config(cfg: dict) -> dict:
    """Turn a parsed config mapping into constructed objects.

    Raises ConfigFileError listing every violation found.
    """
    v: list[str] = []
    for key in cfg:
        if key not in _SECTION_KEYS:
            v.append(f"unknown section {key!r} (allowed: {sorted(_SECTION_KEYS)})")
    for required in ("dataset", "experiment", "output"):
        if required not in cfg:
            v.append(f"missing required section {required!r}")

    dataset = cfg.get("dataset", {}) or {}
    if isinstance(dataset, dict):
        _check_keys("dataset", dataset, _SECTION_KEYS["dataset"], v)
        has_path = "path" in dataset
        has_synth = "synthetic" in dataset
        if has_path == has_synth:
            v.append("dataset: exactly one of 'path' or 'synthetic' is required")
        synth = dataset.get("synthetic") or {}
        if has_synth and isinstance(synth, dict):
            _check_keys("dataset.synthetic", synth, _SYNTH_KEYS, v)
        split = dataset.get("split") or {}
        if isinstance(split, dict):
            _check_keys("dataset.split", split, _SPLIT_KEYS, v)
        else:
            v.append("dataset.split: must be a mapping with 'fraction'/'seed'")
    else:
        v.append("dataset: must be a mapping")
        dataset, synth, split = {}, {}, {}

    experiment = cfg.get("experiment", {}) or {}
    preset_name = None
    exp = None
    if isinstance(experiment, dict):
        _check_keys("experiment", experiment, _SECTION_KEYS["experiment"], v)
        preset_name = experiment.get("preset")
        explicit = _EXPLICIT_EXP_KEYS & experiment.keys()
        if preset_name and explicit:
            v.append(
                "experiment: 'preset' and explicit stream fields are mutually "
                f"exclusive (got both preset and {sorted(explicit)})"
            )
        elif preset_name:
            try:
                exp = preset(str(preset_name))
            except PresetError as exc:
                v.append(f"experiment: {exc}")
        else:
            missing = {"nss", "cci", "n_way", "k_shot"} - experiment.keys()
            if missing:
                v.append(f"experiment: missing fields {sorted(missing)} (or use a preset)")
            else:
                try:
                    exp = ExperimentConfig(
                        nss=experiment["nss"],
                        cci=experiment["cci"],
                        n_way=experiment["n_way"],
                        k_shot=experiment["k_shot"],
                        mode=experiment.get("mode", CLASSIFICATION),
                    )
                except (TypeError, ValueError) as exc:
                    v.append(f"experiment: {exc}")
        if exp is not None:
            overrides = {}
            if "num_tasks" in experiment:
                overrides["num_tasks"] = experiment["num_tasks"]
            if "seeds" in experiment:
                overrides["seeds"] = tuple(experiment["seeds"])
            if overrides:
                try:
                    exp = replace(exp, **overrides)
                except (TypeError, ValueError) as exc:
                    v.append(f"experiment: {exc}")
    else:
        v.append("experiment: must be a mapping")

    learner_cfg = cfg.get("learner", {}) or {}
    learner = None
    if isinstance(learner_cfg, dict):
        _check_keys("learner", learner_cfg, _SECTION_KEYS["learner"], v)
        kind = learner_cfg.get("kind", CONVNET)
        if kind not in (CONVNET, PROTONET):
            v.append(f"learner: kind must be '{CONVNET}' or '{PROTONET}', got {kind!r}")
        else:
            try:
                if preset_name:
                    learner = learner_preset(str(preset_name), kind=kind)
                else:
                    learner = LearnerSpec(kind=kind)
                fields = {k: learner_cfg[k] for k in learner_cfg if k != "kind"}
                if fields:
                    learner = replace(learner, **fields)
            except (TypeError, ValueError, PresetError) as exc:
                v.append(f"learner: {exc}")
    else:
        v.append("learner: must be a mapping")

    replay_cfg = cfg.get("replay", {}) or {}
    replay = None
    if isinstance(replay_cfg, dict):
        _check_keys("replay", replay_cfg, _SECTION_KEYS["replay"], v)
        if replay_cfg.get("enabled", False):
            base = None
            if preset_name:
                try:
                    base = replay_preset(str(preset_name))
                except PresetError as exc:
                    v.append(f"replay: {exc}")
            try:
                b = replay_cfg.get("b", base.b if base else None)
                k = replay_cfg.get("k", base.k if base else None)
                if b is None or k is None:
                    v.append("replay: 'b' and 'k' are required when no preset supplies them")
                else:
                    replay = ReplayConfig(b=b, k=k)
            except (TypeError, ValueError) as exc:
                v.append(f"replay: {exc}")
    else:
        v.append("replay: must be a mapping")

    pretrain = None
    if "pretrain" in cfg:
        pretrain_cfg = cfg.get("pretrain") or {}
        if isinstance(pretrain_cfg, dict):
            _check_keys("pretrain", pretrain_cfg, _SECTION_KEYS["pretrain"], v)
            try:
                pretrain = PretrainConfig(**pretrain_cfg)
            except (TypeError, ValueError) as exc:
                v.append(f"pretrain: {exc}")
        else:
            v.append("pretrain: must be a mapping")

    ensemble_size = 0
    if "ensemble" in cfg:
        ens = cfg.get("ensemble") or {}
        if isinstance(ens, dict):
            _check_keys("ensemble", ens, _SECTION_KEYS["ensemble"], v)
            size = ens.get("size", 0)
            if not isinstance(size, int) or size < 1:
                v.append("ensemble: size must be a positive integer")
            else:
                ensemble_size = size
            if pretrain is None:
                v.append("ensemble: requires a pretrain section (checkpoints come from pretraining)")
        else:
            v.append("ensemble: must be a mapping")

    output = cfg.get("output", {}) or {}
    out_dir = None
    if isinstance(output, dict):
        _check_keys("output", output, _SECTION_KEYS["output"], v)
        out_dir = output.get("directory")
        if not out_dir:
            v.append("output: 'directory' is required")
    else:
        v.append("output: must be a mapping")

    if exp is not None and replay is not None and exp.nss < 2:
        v.append("replay requires NSS > 1 (nothing earlier to replay with a single support set)")

    if v:
        raise ConfigFileError(v)

    reference_steps = None
    if preset_name and learner is not None and learner.kind == CONVNET:
        reference_steps = FINE_TUNE_STEPS.get(str(preset_name))

    return {
        "dataset": dataset,
        "exp": exp,
        "learner": learner,
        "replay": replay,
        "pretrain": pretrain,
        "ensemble_size": ensemble_size,
        "out_dir": Path(out_dir),
        "preset_name": str(preset_name) if preset_name else None,
        "reference_steps": reference_steps,
    }


def _load_dataset(dataset_cfg: dict) -> ClassDataset:
    if "path" in dataset_cfg:
        return load_image_folder(dataset_cfg["path"])
    synth = dataset_cfg.get("synthetic") or {}
    return synth_generate(
        n_classes=synth.get("classes", 30),
        samples_per_class=synth.get("samples", 20),
        image_size=synth.get("image_size", 28),
        seed=synth.get("seed", 0),
    )


def _split_spec(dataset_cfg: dict) -> SplitSpec:
    split = dataset_cfg.get("split") or {}
    return SplitSpec(
        background_fraction=split.get("fraction", 0.8),
        seed=split.get("seed", 0),
    )


def _canonical(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# -- subcommands -------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    params: dict[str, str] = {}
    for item in args.params:
        if "=" not in item:
            print(f"prepare: expected KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, _, value = item.partition("=")
        params[key] = value
    def from_params(key, flag_value, cast):
        return flag_value if flag_value is not None else (
            cast(params[key]) if key in params else None
        )

    out = from_params("out", args.out, str)
    seed = from_params("seed", args.seed, int) or 0
    fraction = from_params("split", args.split, float)
    if fraction is None:
        fraction = 0.8
    if out is None:
        print("prepare: --out is required", file=sys.stderr)
        return 2

    try:
        if args.synthetic:
            classes = from_params("classes", args.classes, int) or 30
            samples = from_params("samples", args.samples, int) or 20
            image_size = from_params("image_size", args.image_size, int) or 28
            data = synth_generate(classes, samples, image_size=image_size, seed=seed)
            source = {
                "synthetic": {
                    "classes": classes, "samples": samples,
                    "image_size": image_size, "seed": seed,
                }
            }
        elif args.root:
            data = load_image_folder(args.root)
            source = {"root": str(args.root)}
        else:
            print("prepare: pass --synthetic or --root PATH", file=sys.stderr)
            return 2
        spec = SplitSpec(background_fraction=fraction, seed=seed)
        background, evaluation = split_background_eval(data, spec)
    except (DatasetError, ValueError) as exc:
        print(f"prepare: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        export_image_folder(data, out_dir / "images")
    manifest = {
        "schema_version": 1,
        "source": source,
        "dataset": {
            "fingerprint": data.fingerprint(),
            "num_classes": data.num_classes,
            "image_size": data.image_size,
        },
        "split": {
            "fraction": fraction,
            "seed": seed,
            "background_classes": list(background.class_ids),
            "eval_classes": list(evaluation.class_ids),
        },
    }
    (out_dir / "manifest.json").write_text(_canonical(manifest))
    print(f"prepared {data.num_classes} classes -> {out_dir / 'manifest.json'}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _load_config_file(args.config)
        resolved = _resolve_run_config(cfg)
    except ConfigFileError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 2

    try:
        data = _load_dataset(resolved["dataset"])
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 1

    report = run_experiment(
        data,
        resolved["exp"],
        resolved["learner"],
        resolved["replay"],
        split=_split_spec(resolved["dataset"]) if resolved["pretrain"] else None,
        pretrain=resolved["pretrain"],
        ensemble_size=resolved["ensemble_size"],
        preset_name=resolved["preset_name"],
        reference_fine_tune_steps=resolved["reference_steps"],
    )

    out_dir = resolved["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    persist_report(report, out_dir / "report.json")
    summary = format_summary_line(report)
    (out_dir / "summary.txt").write_text(summary + "\n")
    (out_dir / "resolved_config.json").write_text(_canonical(report.config))
    print(summary)
    for failure in report.failures:
        print(
            f"seed {failure['seed']} failed: {failure['error']}: {failure['message']}",
            file=sys.stderr,
        )
    return 0 if report.complete else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        cfg = _load_config_file(args.config)
        resolved = _resolve_run_config(cfg)
        grid_cfg = _load_config_file(args.grid)
    except ConfigFileError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 2

    violations = []
    for key in grid_cfg:
        if key not in {"grid", "budget", "num_tasks", "allow_subsample", "seed"}:
            violations.append(f"grid file: unknown key {key!r}")
    if "grid" not in grid_cfg:
        violations.append("grid file: missing 'grid' mapping")
    if violations:
        for violation in violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 2

    try:
        spec = SweepSpec(
            grid=grid_cfg["grid"],
            budget=grid_cfg.get("budget"),
            num_tasks=grid_cfg.get("num_tasks"),
            allow_subsample=grid_cfg.get("allow_subsample", False),
            seed=grid_cfg.get("seed", 0),
        )
        data = _load_dataset(resolved["dataset"])
        best, leaderboard = sweep(
            spec,
            data,
            resolved["exp"],
            resolved["learner"],
            resolved["replay"],
            split=_split_spec(resolved["dataset"]) if resolved["pretrain"] else None,
            pretrain=resolved["pretrain"],
        )
    except (DatasetError, ValueError) as exc:
        print(f"sweep error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"sweep error: {exc}", file=sys.stderr)
        return 1

    out_dir = resolved["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_leaderboard(leaderboard, out_dir / "leaderboard.json")
    best_config = {
        "dataset": resolved["dataset"],
        "experiment": dict(best["experiment"]),
        "learner": dict(best["learner"]),
        "replay": (
            {"enabled": True, **best["replay"]} if best["replay"] else {"enabled": False}
        ),
        "output": {"directory": str(out_dir / "best_run")},
    }
    if resolved["pretrain"] is not None:
        best_config["pretrain"] = asdict(resolved["pretrain"])
    (out_dir / "best_config.yaml").write_text(
        yaml.safe_dump(best_config, sort_keys=True)
    )
    ok_rows = [r for r in leaderboard if r["status"] == "ok"]
    print(
        f"sweep finished: {len(ok_rows)}/{len(leaderboard)} runs ok; "
        f"best {best['params']} mean {100.0 * best['mean']:.2f}"
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = []
    bad = []
    for path in args.reports:
        try:
            reports.append(load_report(path))
        except ReportError as exc:
            bad.append(f"{path}: {exc}")
    if bad:
        for line in bad:
            print(f"report error: {line}", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = comparison_table(reports)
    (out_dir / "table.txt").write_text(table + "\n")
    write_summary_json(reports, out_dir / "summary.json")
    render_bar_chart(reports, out_dir / "chart.png")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfslbench",
        description="Continual few-shot learning benchmark runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    prepare = sub.add_parser("prepare", help="ingest or synthesize a dataset and write its split manifest")
    prepare.add_argument("params", nargs="*", metavar="KEY=VALUE",
                         help="classes=, samples=, image_size=, seed=, split=, out=")
    prepare.add_argument("--synthetic", action="store_true", help="generate a synthetic stroke dataset")
    prepare.add_argument("--root", help="image folder root (class-per-directory)")
    prepare.add_argument("--classes", type=int)
    prepare.add_argument("--samples", type=int)
    prepare.add_argument("--image-size", type=int, dest="image_size")
    prepare.add_argument("--split", type=float, help="background class fraction")
    prepare.add_argument("--seed", type=int)
    prepare.add_argument("--out", help="output directory")

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("config")

    sw = sub.add_parser("sweep", help="grid-search hyperparameters")
    sw.add_argument("config", help="base run config")
    sw.add_argument("grid", help="grid file: grid/budget/num_tasks/allow_subsample/seed")

    rep = sub.add_parser("report", help="render tables and charts from run reports")
    rep.add_argument("reports", nargs="+")
    rep.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "prepare": cmd_prepare,
        "run": cmd_run,
        "sweep": cmd_sweep,
        "report": cmd_report,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
