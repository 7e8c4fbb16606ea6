"""Command line interface.

Subcommands: gen, train-source, adapt, eval, diagnose, report. Global
flags: --config, --seed, --out-dir. Exit codes: 0 success, 2 config
error, 3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import os
import sys

from ..numerics import derive_seed, load_checkpoint, save_checkpoint
from ..synth import DomainShift, build_corpus
from .config import ConfigError, ExperimentConfig, describe_keys, load_config
from .divergence import DivergenceReport, divergence_report
from .metrics import evaluate_checkpoint
from .report import collect_metrics_csvs, summarize, write_metrics_csv
from .train import TrainingDiverged, run_adaptation, train_source, write_lines

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevadapt",
        description="Synthetic multi-view BEV detection with teacher-student domain adaptation.",
        epilog="Run 'bevadapt keys' to list every config key with its default.",
    )
    parser.add_argument("--config", default=None, help="path to a key=value config file")
    parser.add_argument("--seed", type=int, default=0, help="root seed for the whole pipeline")
    parser.add_argument("--out-dir", default="runs", help="directory for checkpoints and CSVs")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("keys", help="print all config keys with defaults")
    sub.add_parser("gen", help="generate the source/target/eval corpora named in the config")
    sub.add_parser("train-source", help="pretrain on the labeled source corpus")
    p_adapt = sub.add_parser("adapt", help="adapt a source checkpoint to the target corpus")
    p_adapt.add_argument("--checkpoint", default=None, help="source checkpoint (default: out-dir/source.ckpt)")
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against a sealed-label corpus")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--corpus", default=None, help="corpus path (default: corpus.eval)")
    p_eval.add_argument("--run-name", default="eval", help="row name in the metrics CSV")
    p_diag = sub.add_parser("diagnose", help="inter-domain divergence for a checkpoint")
    p_diag.add_argument("--checkpoint", required=True)
    sub.add_parser("report", help="bundle metrics CSVs in out-dir into a summary")
    return parser


def _cmd_gen(config: ExperimentConfig, seed: int, out_dir: str) -> int:
    v = config.values
    spec = config.scene_spec()
    jobs = [
        (v["corpus.source"], DomainShift(kind="none"), v["scene.n_scenes"], True, "source"),
        (v["corpus.target"], config.domain_shift(), v["scene.n_scenes"], False, "target"),
        (v["corpus.eval"], config.domain_shift(), v["scene.n_eval_scenes"], False, "eval"),
    ]
    for path, shift, n, labeled, role in jobs:
        full = path if os.path.isabs(path) else os.path.join(out_dir, path)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        build_corpus(spec, shift, n, derive_seed(seed, "corpus", role), full, labeled=labeled)
        print(f"wrote {role} corpus: {full} ({n} scenes, shift={shift.kind})")
    return EXIT_OK


def _resolve_corpus(config_path: str, out_dir: str) -> str:
    if os.path.isabs(config_path) or os.path.exists(config_path):
        return config_path
    return os.path.join(out_dir, config_path)


def _cmd_train_source(config: ExperimentConfig, seed: int, out_dir: str) -> int:
    corpus = _resolve_corpus(config["corpus.source"], out_dir)
    dims = config.model_dims()
    try:
        params, logs = train_source(
            corpus,
            dims,
            config["train.epochs"],
            config["train.lr"],
            derive_seed(seed, "train_source"),
            batch_size=config["train.batch_size"],
            depth_weight=config["train.depth_weight"],
            lidar_sub_prob=config["train.lidar_sub_prob"],
        )
    except TrainingDiverged as diverged:
        save_checkpoint(diverged.checkpoint, os.path.join(out_dir, "source.ckpt"))
        write_lines(diverged.logs, os.path.join(out_dir, "train_source.csv"))
        print(f"training diverged: {diverged}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(params, os.path.join(out_dir, "source.ckpt"))
    write_lines(logs, os.path.join(out_dir, "train_source.csv"))
    print(f"wrote {os.path.join(out_dir, 'source.ckpt')}")
    return EXIT_OK


def _cmd_adapt(config: ExperimentConfig, seed: int, out_dir: str, checkpoint: str | None) -> int:
    ckpt_path = checkpoint or os.path.join(out_dir, "source.ckpt")
    source_params = load_checkpoint(ckpt_path)
    result = run_adaptation(
        _resolve_corpus(config["corpus.source"], out_dir),
        _resolve_corpus(config["corpus.target"], out_dir),
        source_params,
        config.adapt_config(seed=derive_seed(seed, "adapt")),
        epochs=config["adapt.epochs"],
        batch_size=config["adapt.batch_size"],
    )
    save_checkpoint(result.student, os.path.join(out_dir, "student.ckpt"))
    save_checkpoint(result.teacher, os.path.join(out_dir, "teacher.ckpt"))
    write_lines(result.logs, os.path.join(out_dir, "adapt_log.csv"))
    print(f"wrote {os.path.join(out_dir, 'student.ckpt')} and teacher.ckpt")
    return EXIT_OK


def _cmd_eval(config: ExperimentConfig, out_dir: str, checkpoint: str, corpus: str | None, run_name: str) -> int:
    params = load_checkpoint(checkpoint)
    corpus_path = _resolve_corpus(corpus or config["corpus.eval"], out_dir)
    report = evaluate_checkpoint(
        params,
        corpus_path,
        config.model_dims(),
        match_radius=config["eval.match_radius"],
        occ_threshold=config["eval.occ_threshold"],
        occ_floor=config["eval.occ_floor"],
    )
    path = write_metrics_csv(run_name, report, out_dir)
    print(
        f"{run_name}: map={report.simplified_map:.4f} "
        f"translation={report.mean_translation_error:.4f} "
        f"matches={report.n_matches} scenes={report.n_eval_scenes}"
    )
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_diagnose(config: ExperimentConfig, seed: int, out_dir: str, checkpoint: str) -> int:
    params = load_checkpoint(checkpoint)
    report = divergence_report(
        params,
        _resolve_corpus(config["corpus.source"], out_dir),
        _resolve_corpus(config["corpus.target"], out_dir),
        config.model_dims(),
        space=config["divergence.space"],
        bins=config["divergence.bins"],
        probe_steps=config["divergence.probe_steps"],
        probe_lr=config["divergence.probe_lr"],
        seed=derive_seed(seed, "divergence"),
    )
    path = os.path.join(out_dir, "divergence.csv")
    write_lines([DivergenceReport.CSV_HEADER, report.csv_row()], path)
    print(f"{report.space}: js={report.js:.6f} h_proxy={report.h_proxy:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_report(out_dir: str) -> int:
    lines = collect_metrics_csvs(out_dir)
    bundle = os.path.join(out_dir, "metrics_bundle.csv")
    write_lines(lines, bundle)
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append(
            {
                "run": cells[0],
                "map": f"{float(cells[1]):.4f}",
                "translation": f"{float(cells[2]):.4f}",
                "matches": cells[4],
                "scenes": cells[3],
            }
        )
    rows.sort(key=lambda r: r["run"])
    from .report import format_table

    text = format_table(rows, ["run", "map", "translation", "matches", "scenes"]) + "\n"
    summary = os.path.join(out_dir, "summary.txt")
    write_lines(text.splitlines(), summary)
    print(text, end="")
    print(f"wrote {bundle} and {summary}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "keys":
        print(describe_keys())
        return EXIT_OK
    try:
        config = load_config(args.config)
        os.makedirs(args.out_dir, exist_ok=True)
        if args.command == "gen":
            return _cmd_gen(config, args.seed, args.out_dir)
        if args.command == "train-source":
            return _cmd_train_source(config, args.seed, args.out_dir)
        if args.command == "adapt":
            return _cmd_adapt(config, args.seed, args.out_dir, args.checkpoint)
        if args.command == "eval":
            return _cmd_eval(config, args.out_dir, args.checkpoint, args.corpus, args.run_name)
        if args.command == "diagnose":
            return _cmd_diagnose(config, args.seed, args.out_dir, args.checkpoint)
        if args.command == "report":
            return _cmd_report(args.out_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"config error: missing file: {err}", file=sys.stderr)
        return EXIT_CONFIG
    parser.error(f"unhandled command {args.command!r}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
