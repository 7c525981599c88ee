"""Experiment harness CLI.

Subcommands: gen-data, train-base, unlearn, eval, forgetting-matrix,
ablate, report. A single JSON config drives every command; ``--set
section.key=value`` flags override file values. Exit codes: 0 success,
1 usage/config error, 2 runtime failure.

The output root comes from --out, the config, or the UNLEARNLAB_OUTPUT
environment variable. Every command copies the exact config it ran with
into its output directory; wall-clock timing goes to a ``timing.json``
sidecar so that report bytes depend only on config + seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from unlearnlab.config import (ExperimentConfig, apply_overrides, config_hash,
                               load_config, write_provenance)
from unlearnlab.data import (build_benchmark, build_vocab, category_counts,
                             load_dataset, make_roster, retarget, save_dataset,
                             similar_pairs)
from unlearnlab.errors import ConfigError, InputError, UnlearnLabError
from unlearnlab.metrics import (ablation_markdown, ablation_table,
                                ablation_to_csv, evaluate_decisions,
                                forgetting_matrix, markdown_table,
                                matrix_config, matrix_to_csv, metrics_report,
                                save_decisions, write_metrics_csv)
from unlearnlab.model import (load_checkpoint, save_checkpoint, train_base,
                              verify_labels)
from unlearnlab.unlearn import RUNNERS, build_task

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

CORPORA = (("train", 0), ("eval", 1), ("heldout", 2))


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _write_timing(root: Path, command: str, seconds: float):
    """Wall time lives in a sidecar, outside artifact directories, so that
    identical config+seed reproduces byte-identical artifacts."""
    tdir = root / "timing"
    tdir.mkdir(parents=True, exist_ok=True)
    with open(tdir / f"{command}.json", "w", encoding="utf-8") as fh:
        json.dump({"wall_time_s": seconds}, fh)
        fh.write("\n")


def _load_experiment(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.set)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg, cfg.resolve_output_dir()


def _corpora(cfg: ExperimentConfig):
    roster = make_roster(cfg.data.n_identities, cfg.data.n_similar_pairs,
                         cfg.data.seed)
    return roster, {name: build_benchmark(roster, cfg.data, seed_offset=off)
                    for name, off in CORPORA}


def _dataset(cfg, root: Path, name: str):
    path = root / "data" / name
    if path.is_dir():
        return load_dataset(path)
    roster = make_roster(cfg.data.n_identities, cfg.data.n_similar_pairs,
                         cfg.data.seed)
    offset = dict(CORPORA)[name]
    return build_benchmark(roster, cfg.data, seed_offset=offset)


def _base_checkpoint(root: Path):
    path = root / "base" / "checkpoint.npz"
    if not path.is_file():
        raise ConfigError(f"base checkpoint not found: {path} "
                          "(run train-base first)")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    cfg, root = _load_experiment(args)
    t0 = time.perf_counter()
    roster, corpora = _corpora(cfg)
    out = root / "data"
    for name, ds in corpora.items():
        save_dataset(ds, out / name)
    manifest = {
        "roster": [{"id": s.id, "name": list(s.name)} for s in roster],
        "similar_pairs": [list(p) for p in similar_pairs(roster)],
        "corpora": {name: category_counts(ds)
                    for name, ds in corpora.items()},
        "config_hash": config_hash(cfg),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_provenance(cfg, out)
    _write_timing(root, "gen-data", time.perf_counter() - t0)
    print(f"wrote {len(corpora)} corpora under {out}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg, root = _load_experiment(args)
    t0 = time.perf_counter()
    roster = make_roster(cfg.data.n_identities, cfg.data.n_similar_pairs,
                         cfg.data.seed)
    vocab = build_vocab(roster)
    train_ds = _dataset(cfg, root, "train")
    # Early stopping is judged on the training benchmark itself; the
    # evaluation corpus never influences a training decision.
    state, log = train_base(train_ds, train_ds, vocab, cfg.base_train,
                            cfg.geometry)
    _, verify_report = verify_labels(train_ds, state)
    out = root / "base"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "checkpoint.npz")
    with open(out / "train_log.json", "w", encoding="utf-8") as fh:
        json.dump(log, fh, indent=2, sort_keys=True)
    with open(out / "verify_report.json", "w", encoding="utf-8") as fh:
        json.dump(verify_report, fh, indent=2, sort_keys=True)
    write_provenance(cfg, out)
    _write_timing(root, "train-base", time.perf_counter() - t0)
    print(f"base checkpoint: single recall {log['single_recall'][-1]:.3f}, "
          f"group recall {log['group_recall'][-1]:.3f}, "
          f"label rejection {verify_report['rejection_rate']:.1%}")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg, root = _load_experiment(args)
    if args.method not in RUNNERS:
        raise ConfigError(f"unknown method '{args.method}' "
                          f"(choose from {', '.join(sorted(RUNNERS))})")
    t0 = time.perf_counter()
    base = _base_checkpoint(root)
    train_ds = _dataset(cfg, root, "train")
    target = cfg.data.target_id if args.target is None else args.target
    if not any(s.id == target for s in train_ds.roster):
        raise ConfigError(f"invalid target id {target}")
    if target != train_ds.target_id:
        train_ds = retarget(train_ds, target)
    task = build_task(train_ds, base.vocab, target, base.geometry.out_slots)
    state, log = RUNNERS[args.method](task, cfg.unlearn, base)
    out = root / "unlearn" / args.method
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "checkpoint.npz")
    with open(out / "log.json", "w", encoding="utf-8") as fh:
        json.dump({"method": args.method, "target_id": target, "steps": log},
                  fh, indent=2, sort_keys=True, default=float)
    write_provenance(cfg, out)
    _write_timing(root, "unlearn", time.perf_counter() - t0)
    print(f"unlearned target {target} with {args.method}: "
          f"checkpoint at {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, root = _load_experiment(args)
    t0 = time.perf_counter()
    ckpt = Path(args.checkpoint) if args.checkpoint else \
        root / "unlearn" / args.method / "checkpoint.npz"
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    state = load_checkpoint(ckpt)
    eval_ds = _dataset(cfg, root, args.dataset)
    heldout = _dataset(cfg, root, "heldout")
    target = cfg.data.target_id if args.target is None else args.target
    spec = next((s for s in eval_ds.roster if s.id == target), None)
    if spec is None:
        raise ConfigError(f"invalid target id {target}")
    decisions = evaluate_decisions(state, eval_ds)
    report = metrics_report(state, eval_ds, heldout, spec, args.method,
                            decisions=decisions)
    out = root / "eval" / args.method
    out.mkdir(parents=True, exist_ok=True)
    save_decisions(decisions, out / "decisions.csv")
    write_metrics_csv([report], out / "metrics.csv")
    (out / "metrics.md").write_text(markdown_table([report]),
                                    encoding="utf-8")
    write_provenance(cfg, out)
    _write_timing(root, "eval", time.perf_counter() - t0)
    print(markdown_table([report]), end="")
    return EXIT_OK


def _emit_gnuplot_heatmap(out: Path, mat, roster):
    data = out / "matrix.dat"
    with open(data, "w", encoding="utf-8") as fh:
        for i in range(mat.shape[0]):
            fh.write(" ".join("nan" if not np.isfinite(v) else f"{v:.4f}"
                              for v in mat[i]) + "\n")
    labels = ", ".join(f'"{s.full_name}" {i}' for i, s in enumerate(roster))
    script = (
        "set terminal pngcairo size 640,560\n"
        "set output 'matrix.png'\n"
        "set title 'Collateral forgetting'\n"
        f"set xtics ({labels}) rotate by -45\n"
        f"set ytics ({labels})\n"
        "set cbrange [0:1]\n"
        "plot 'matrix.dat' matrix with image notitle\n")
    (out / "matrix.gnuplot").write_text(script, encoding="utf-8")


def cmd_forgetting_matrix(args) -> int:
    cfg, root = _load_experiment(args)
    t0 = time.perf_counter()
    base = _base_checkpoint(root)
    train_ds = _dataset(cfg, root, "train")
    eval_ds = _dataset(cfg, root, "eval")
    mcfg = matrix_config(seed=cfg.seed)
    mat, valid = forgetting_matrix(base, train_ds, eval_ds, mcfg,
                                   jobs=args.jobs)
    out = root / "matrix"
    out.mkdir(parents=True, exist_ok=True)
    matrix_to_csv(mat, train_ds.roster, out / "forgetting_matrix.csv")
    if args.emit_gnuplot:
        _emit_gnuplot_heatmap(out, mat, train_ds.roster)
    write_provenance(cfg, out)
    _write_timing(root, "forgetting-matrix", time.perf_counter() - t0)
    bad = int((~valid).sum())
    print(f"matrix written to {out / 'forgetting_matrix.csv'}"
          + (f" ({bad} invalid rows)" if bad else ""))
    return EXIT_RUNTIME if bad else EXIT_OK


def cmd_ablate(args) -> int:
    cfg, root = _load_experiment(args)
    t0 = time.perf_counter()
    base = _base_checkpoint(root)
    train_ds = _dataset(cfg, root, "train")
    eval_ds = _dataset(cfg, root, "eval")
    rows = ablation_table(base, train_ds, eval_ds, cfg.unlearn,
                          target_id=cfg.data.target_id)
    out = root / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    ablation_to_csv(rows, out / "ablation.csv")
    (out / "ablation.md").write_text(ablation_markdown(rows),
                                     encoding="utf-8")
    write_provenance(cfg, out)
    _write_timing(root, "ablate", time.perf_counter() - t0)
    print(ablation_markdown(rows), end="")
    return EXIT_OK


def _emit_gnuplot_bars(out: Path, rows):
    data = out / "methods.dat"
    with open(data, "w", encoding="utf-8") as fh:
        fh.write("# method tfa ntra grf_f1\n")
        for r in rows:
            fh.write(f"{r['method']} {r['tfa']} {r['ntra']} {r['grf_f1']}\n")
    script = (
        "set terminal pngcairo size 640,480\n"
        "set output 'methods.png'\n"
        "set style data histogram\n"
        "set style histogram clustered\n"
        "set style fill solid border -1\n"
        "set yrange [0:100]\n"
        "plot 'methods.dat' using 2:xtic(1) title 'TFA', "
        "'' using 3 title 'NTRA', '' using 4 title 'GRF-F1'\n")
    (out / "methods.gnuplot").write_text(script, encoding="utf-8")


def cmd_report(args) -> int:
    cfg, root = _load_experiment(args)
    t0 = time.perf_counter()
    methods = []
    for mdir in sorted((root / "eval").glob("*/metrics.csv")) \
            if (root / "eval").is_dir() else []:
        with open(mdir, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                methods.append({k: (v if k in ("method",) else float(v))
                                for k, v in rec.items()})
    ablation = []
    apath = root / "ablate" / "ablation.csv"
    if apath.is_file():
        with open(apath, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                ablation.append({k: (v if k == "variant" else float(v))
                                 for k, v in rec.items()})
    if not methods and not ablation:
        raise ConfigError(f"nothing to report under {root} "
                          "(run eval or ablate first)")
    doc = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "methods": methods,
        "ablation": ablation,
    }
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_report.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = ["# Run report", "", f"config hash: `{doc['config_hash']}`",
             f"seed: {cfg.seed}", ""]
    if methods:
        lines += ["## Methods", "",
                  "| Method | TFA (%) | NTRA (%) | GRF-F1 (%) | Efficacy | "
                  "Generality | Perplexity |", "|---" * 7 + "|"]
        for r in methods:
            lines.append(
                f"| {r['method']} | {r['tfa']:.2f} | {r['ntra']:.2f} | "
                f"{r['grf_f1']:.2f} | {r['efficacy']:.4f} | "
                f"{r['generality']:.4f} | {r['perplexity']:.4f} |")
        lines.append("")
    if ablation:
        lines += ["## Ablation", "", ablation_markdown(ablation).rstrip(), ""]
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.emit_gnuplot and methods:
        _emit_gnuplot_bars(out, methods)
    write_provenance(cfg, out)
    _write_timing(root, "report", time.perf_counter() - t0)
    print(f"report written to {out / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unlearnlab",
                     description="Desk-scale visual concept unlearning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config value (kebab-case accepted)")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker thread cap for parallel stages")

    common(sub.add_parser("gen-data", help="render the benchmark corpora"))
    common(sub.add_parser("train-base", help="train the base recognizer"))

    p = sub.add_parser("unlearn", help="run an unlearning method")
    common(p)
    p.add_argument("--method", required=True,
                   help="one of: " + ", ".join(sorted(RUNNERS)))
    p.add_argument("--target", type=int, default=None,
                   help="target concept id (default: config)")

    p = sub.add_parser("eval", help="score a checkpoint on the benchmark")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint "
                   "(default: unlearn/<method>/checkpoint.npz)")
    p.add_argument("--method", default="auvic",
                   help="method label for the report row")
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--dataset", default="eval",
                   choices=[name for name, _ in CORPORA])

    p = sub.add_parser("forgetting-matrix",
                       help="pairwise collateral-forgetting grid")
    common(p)
    p.add_argument("--emit-gnuplot", action="store_true")

    common(sub.add_parser("ablate", help="component ablation grid"))

    p = sub.add_parser("report", help="aggregate results into one report")
    common(p)
    p.add_argument("--emit-gnuplot", action="store_true")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "unlearn": cmd_unlearn,
    "eval": cmd_eval,
    "forgetting-matrix": cmd_forgetting_matrix,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, InputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UnlearnLabError as e:
        print(f"failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001 - stable exit-code contract
        import traceback
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
