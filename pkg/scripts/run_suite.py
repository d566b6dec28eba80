#!/usr/bin/env python3
"""Run a family of presets end to end and roll the results up.

Default budgets are the presets' own (100 tasks, full seed lists, tuned
models), which takes hours on CPU. --quick shrinks everything to a
desk-scale smoke run; reduced budgets are flagged inside each report.

Examples:
    python3 scripts/run_suite.py scaling --quick --out runs/scaling
    python3 scripts/run_suite.py instance --quick --learner protonet \\
        --pretrain-epochs 1 --out runs/instance
    python3 scripts/run_suite.py replication --root data/images --out runs/rep
"""
import argparse
import sys
from dataclasses import replace
from pathlib import Path

from cfslbench.datasets import SplitSpec, load_image_folder, synth_generate
from cfslbench.harness import run_experiment
from cfslbench.models import PretrainConfig
from cfslbench.presets import (
    FINE_TUNE_STEPS,
    learner_preset,
    preset,
    replay_preset,
)
from cfslbench.reports import (
    comparison_table,
    format_summary_line,
    persist_report,
    render_bar_chart,
    write_summary_json,
)

FAMILIES = {
    "scaling": ["baseline1", "baseline2", "wide1", "wide2", "deep1", "deep2"],
    "replication": [f"replication{i}" for i in range(1, 11)],
    "instance": [f"instance_exp{i}" for i in range(1, 6)],
}

# Synthetic pool sizes that satisfy the largest preset of each family.
_SYNTH_DEFAULTS = {
    "scaling": (210, 5),       # wide2/deep2 draw 200 classes per task
    "replication": (60, 6),    # replication9/10 draw 50, k_shot=2 needs 5+1
    "instance": (10, 22),      # one class per task, 20 distinct exemplars
}


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("family", choices=sorted(FAMILIES),
                        help="preset family to run")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--learner", choices=["convnet", "protonet"],
                        default="convnet")
    parser.add_argument("--no-replay", action="store_true",
                        help="drop the replay buffer even where the preset has one")
    parser.add_argument("--root", help="image folder root; default is synthetic")
    parser.add_argument("--quick", action="store_true",
                        help="desk-scale budgets: 20 tasks, 3 seeds, small convnet")
    parser.add_argument("--num-tasks", type=int, help="override tasks per run")
    parser.add_argument("--seeds", type=int, help="override the number of seeds")
    parser.add_argument("--pretrain-epochs", type=int, default=0,
                        help="pretrain on a background split for this many epochs")
    parser.add_argument("--pretrain-iterations", type=int, default=50)
    parser.add_argument("--background-fraction", type=float, default=0.8)
    parser.add_argument("--synth-seed", type=int, default=0)
    return parser.parse_args(argv)


def _dataset(args):
    if args.root:
        return load_image_folder(args.root)
    classes, samples = _SYNTH_DEFAULTS[args.family]
    return synth_generate(classes, samples, image_size=20, seed=args.synth_seed)


def main(argv=None) -> int:
    args = parse_args(argv)
    data = _dataset(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    pretrain = None
    split = None
    if args.pretrain_epochs > 0:
        pretrain = PretrainConfig(
            epochs=args.pretrain_epochs, iterations=args.pretrain_iterations
        )
        split = SplitSpec(background_fraction=args.background_fraction)

    reports = []
    for name in FAMILIES[args.family]:
        exp = preset(name)
        learner = learner_preset(name, kind=args.learner)
        # Replay piggybacks on fine-tuning, so it only applies to the convnet.
        replay = None
        if args.learner == "convnet" and not args.no_replay:
            replay = replay_preset(name)
        reference = FINE_TUNE_STEPS.get(name) if args.learner == "convnet" else None

        if args.quick:
            exp = replace(exp, num_tasks=20, seeds=tuple(range(3)))
            if args.learner == "convnet":
                learner = replace(learner, filters=16, stages=2, fine_tune_steps=40)
        if args.num_tasks:
            exp = replace(exp, num_tasks=args.num_tasks)
        if args.seeds:
            exp = replace(exp, seeds=tuple(range(args.seeds)))

        report = run_experiment(
            data, exp, learner, replay,
            split=split, pretrain=pretrain,
            preset_name=name, reference_fine_tune_steps=reference,
        )
        tag = f"{name}_{args.learner}" + ("" if replay is None else "_replay")
        run_dir = out_dir / tag
        run_dir.mkdir(exist_ok=True)
        persist_report(report, run_dir / "report.json")
        print(format_summary_line(report), flush=True)
        for failure in report.failures:
            print(f"  seed {failure['seed']} failed: {failure['message']}",
                  file=sys.stderr)
        reports.append(report)

    table = comparison_table(reports)
    (out_dir / "table.txt").write_text(table + "\n")
    write_summary_json(reports, out_dir / "summary.json")
    render_bar_chart(reports, out_dir / "chart.png")
    print()
    print(table)
    return 0 if all(r.complete for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
