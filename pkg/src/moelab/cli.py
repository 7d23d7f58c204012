"""Command-line workflow: corpus to teacher to injected student to plots.

Every subcommand reads one YAML run config (all settings optional, desk
defaults apply), honors dotted --set overrides, and writes its artifacts
plus a manifest entry under the output directory. Exit codes: 2 invalid
config or input, 3 missing input artifact, 4 numerical failure.

Checkpoints flow between subcommands through well-known file names;
corpora are regenerated from the config instead of being read back,
which is cheap here and keeps every command a pure function of the
config and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    aggregate_by,
    correlate,
    read_records_csv,
    record_rollouts,
    write_correlation_csv,
    write_records_csv,
)
from .checkpoint import load_model, save_model
from .corpus import generate_corpus
from .errors import (
    ConfigError,
    InputError,
    MissingArtifactError,
    MoelabError,
    NumericalError,
)
from .flops import speedup_table, write_speedup_csv
from .injection import diagnose_mismatch, inject
from .plots import emit_plots
from .runconfig import RunConfig, load_run_config, write_manifest
from .training import adapt, evaluate, train_teacher, write_training_log

TEACHER_CKPT = "teacher.ckpt"
INJECTED_CKPT = "student_injected.ckpt"
FINAL_CKPT = "student_final.ckpt"
RECORDS_CSV = "records.csv"
DEFAULT_LENGTHS = tuple(range(1024, 8193, 1024))

SUBCOMMANDS = ("gen-data", "train-teacher", "inject", "adapt", "evaluate",
               "flops", "analyze", "plots")


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, hint):
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `moelab {hint}` first")
    return path


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _eval_payload(metrics):
    return dataclasses.asdict(metrics)


def cmd_gen_data(cfg: RunConfig):
    out = _out(cfg)
    corpus = generate_corpus(cfg.corpus_spec())
    npz = out / "corpus.npz"
    np.savez_compressed(npz, tokens=corpus.tokens, tags=corpus.tags,
                        gen_entropy=corpus.gen_entropy)
    stats = out / "corpus_stats.json"
    _write_json(stats, {
        "num_sequences": int(corpus.tokens.shape[0]),
        "seq_len": int(corpus.tokens.shape[1]),
        "patterns": [list(p) for p in corpus.patterns],
        "unigram_cross_entropy": corpus.unigram_cross_entropy(),
        "natural_unigram_entropy": corpus.tag_unigram_entropy(0),
        "structured_unigram_entropy": corpus.tag_unigram_entropy(1),
    })
    write_manifest(out, "gen-data", cfg, [npz.name, stats.name])
    return 0


def cmd_train_teacher(cfg: RunConfig):
    out = _out(cfg)
    corpus = generate_corpus(cfg.corpus_spec())
    teacher, rows = train_teacher(cfg.model, corpus, cfg.teacher_config())
    ckpt = out / TEACHER_CKPT
    save_model(teacher, ckpt)
    log = out / "teacher_log.csv"
    write_training_log(rows, log)
    (_, _), (held, held_tags) = corpus.split()
    metrics = evaluate(teacher, held, tags=held_tags)
    report = out / "teacher_eval.json"
    _write_json(report, {
        "teacher": _eval_payload(metrics),
        "unigram_cross_entropy": corpus.unigram_cross_entropy(),
    })
    write_manifest(out, "train-teacher", cfg,
                   [ckpt.name, log.name, report.name])
    return 0


def cmd_inject(cfg: RunConfig):
    out = _out(cfg)
    teacher = load_model(_require(out / TEACHER_CKPT, "train-teacher"))
    student = inject(teacher, cfg.injection_spec())
    ckpt = out / INJECTED_CKPT
    save_model(student, ckpt)
    corpus = generate_corpus(cfg.corpus_spec())
    _, (held, _) = corpus.split()
    report = diagnose_mismatch(teacher, student, held[:16])
    report_path = out / "injection_report.csv"
    report.to_csv(report_path)
    write_manifest(out, "inject", cfg, [ckpt.name, report_path.name])
    return 0


def cmd_adapt(cfg: RunConfig):
    out = _out(cfg)
    teacher = load_model(_require(out / TEACHER_CKPT, "train-teacher"))
    corpus = generate_corpus(cfg.corpus_spec())
    student, rows, summary = adapt(teacher, corpus, cfg.adapt_config(),
                                   out_dir=out)
    ckpt = out / FINAL_CKPT
    save_model(student, ckpt)
    log = out / "training_log.csv"
    write_training_log(rows, log)
    (_, _), (held, held_tags) = corpus.split()
    metrics = evaluate(student, held, tags=held_tags)
    summary_path = out / "adapt_summary.json"
    _write_json(summary_path, {
        "stages": summary["stages"],
        "floor_events": summary["floor_events"],
        "stage_checkpoints": [Path(p).name for p in summary["checkpoints"]],
        "student": _eval_payload(metrics),
    })
    artifacts = [ckpt.name, log.name, summary_path.name]
    artifacts += [Path(p).name for p in summary["checkpoints"]]
    write_manifest(out, "adapt", cfg, artifacts)
    return 0


def cmd_evaluate(cfg: RunConfig):
    out = _out(cfg)
    corpus = generate_corpus(cfg.corpus_spec())
    (_, _), (held, held_tags) = corpus.split()
    payload = {}
    for name, fname in (("teacher", TEACHER_CKPT),
                        ("student_injected", INJECTED_CKPT),
                        ("student_final", FINAL_CKPT)):
        path = out / fname
        if not path.exists():
            continue
        model = load_model(path)
        payload[name] = _eval_payload(evaluate(model, held, tags=held_tags))
        if model.config.is_augmented:
            masked = evaluate(model, held, tags=held_tags, variant="masked")
            payload[f"{name}_masked"] = _eval_payload(masked)
    if not payload:
        raise MissingArtifactError(
            f"no checkpoints under {out}; run train-teacher / adapt first"
        )
    report = out / "evaluation.json"
    _write_json(report, payload)
    write_manifest(out, "evaluate", cfg, [report.name])
    return 0


def cmd_flops(cfg: RunConfig):
    out = _out(cfg)
    rows = speedup_table(cfg.flops, DEFAULT_LENGTHS, [cfg.flops.r_ze])
    path = out / "speedup.csv"
    write_speedup_csv(rows, path)
    write_manifest(out, "flops", cfg, [path.name])
    return 0


def cmd_analyze(cfg: RunConfig):
    out = _out(cfg)
    teacher = load_model(_require(out / TEACHER_CKPT, "train-teacher"))
    student = load_model(_require(out / FINAL_CKPT, "adapt"))
    corpus = generate_corpus(cfg.corpus_spec())
    _, (held, _) = corpus.split()
    ana = cfg.analyze
    if ana.num_rollouts > held.shape[0]:
        raise ConfigError(
            f"analyze.num_rollouts {ana.num_rollouts} exceeds the "
            f"{held.shape[0]} held-out sequences"
        )
    prompts = held[: ana.num_rollouts, : ana.prompt_len]
    records = record_rollouts(
        student, teacher, prompts, ana.gen_len,
        temperature=ana.temperature, seed=cfg.analyze_seed(),
        position_tags=corpus.spec.position_tags(),
    )
    rec_path = out / RECORDS_CSV
    write_records_csv(records, rec_path)
    artifacts = [rec_path.name]
    summary = {"num_records": len(records)}
    for x_field in ("entropy", "delta_logp"):
        result = correlate(records, x_field, num_bins=ana.num_bins)
        corr_path = out / f"corr_{x_field}.csv"
        write_correlation_csv(result, corr_path)
        artifacts.append(corr_path.name)
        summary[f"spearman_{x_field}"] = result.spearman
        summary[f"degenerate_{x_field}"] = result.degenerate
    summary["by_span_tag"] = {
        str(k): v for k, v in aggregate_by(records, "span_tag").items()
    }
    summary["by_layer"] = {
        str(k): v for k, v in aggregate_by(records, "layer").items()
    }
    sum_path = out / "analysis_summary.json"
    _write_json(sum_path, summary)
    artifacts.append(sum_path.name)
    write_manifest(out, "analyze", cfg, artifacts)
    return 0


def cmd_plots(cfg: RunConfig):
    out = _out(cfg)
    rec_path = out / RECORDS_CSV
    if not rec_path.exists():
        raise MissingArtifactError(
            f"missing analysis inputs: {rec_path}; run `moelab analyze` first"
        )
    records = read_records_csv(rec_path)
    paths = emit_plots(records, out, chunk_size=cfg.analyze.chunk_size)
    write_manifest(out, "plots", cfg, [p.name for p in paths])
    return 0


DISPATCH = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "inject": cmd_inject,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "flops": cmd_flops,
    "analyze": cmd_analyze,
    "plots": cmd_plots,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Desk-scale dynamic mixture-of-experts laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the synthetic corpus",
        "train-teacher": "pretrain the static teacher model",
        "inject": "add zero candidates to the teacher and diagnose mismatch",
        "adapt": "run the distillation stage schedule",
        "evaluate": "held-out metrics for all existing checkpoints",
        "flops": "emit the analytic speedup table",
        "analyze": "token-level routing records and correlations",
        "plots": "render figures from the analysis records",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", default=None, help="YAML run config path")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="dotted-path config override, repeatable")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="global seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.set, args.seed, args.out)
        return DISPATCH[args.command](cfg)
    except FileNotFoundError as exc:
        # covers both MissingArtifactError and an absent --config path
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except MoelabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
