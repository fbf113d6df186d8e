"""Command line entry point: train, eval, visualize, bench, synth-gen.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
Outputs go under ``--out`` or, by default, under ``$ATAML_OUTPUT_ROOT``
(``./runs`` when unset).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (
    HashMismatch,
    build_corpus,
    dump_json,
    episode_records,
    evaluate,
    load_params,
    result_rows,
    run_bench,
    sample_test_episodes,
    setup,
    train,
    traces_for,
)
from .metrics import RESULT_COLUMNS, write_results_csv
from .report import format_table, load_traces, render_attention_html, write_traces
from .tasks import CorpusError, write_jsonl

log = logging.getLogger("ataml")

OUTPUT_ROOT_ENV = "ATAML_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _stamp(cfg: ExperimentConfig) -> str:
    now = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    return f"created {now} config {cfg.config_hash()} seed {cfg.seed}"


def _prepare_dir(path: Path, force: bool, resume: bool = False) -> Path:
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "episodes.way": getattr(args, "ways", None),
        "episodes.shot": getattr(args, "shots", None),
        "meta.algorithm": getattr(args, "algorithm", None),
        "meta.iterations": getattr(args, "iterations", None),
    }
    overrides.update(extra or {})
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- verbs


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else _output_root() / f"train-{cfg.config_hash()}-s{cfg.seed}"
    _prepare_dir(out, args.force, args.resume)
    s = setup(cfg)
    dump_json(out / "config.json", {"config_hash": cfg.config_hash(), "seed": cfg.seed, "config": cfg.model_dump(mode="json")})
    dump_json(out / "split.json", s.split.to_json())
    dump_json(out / "mini_corpus.json", s.mini.manifest())
    outcome = train(s, out, resume=args.resume)
    lg = outcome.log
    print(
        f"trained {cfg.meta.algorithm} for {len(lg.rows)} logged iterations in {outcome.seconds:.1f}s; "
        f"best validation {lg.best_metric:.4f} at iteration {lg.best_iteration}; checkpoint {outcome.checkpoint}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    extra = {"episodes.test_episodes": args.episodes}
    cfg = _load(args, extra)
    s = setup(cfg)
    try:
        params, ck = load_params(s, Path(args.checkpoint), force=args.force)
    except HashMismatch as exc:
        raise UsageError(f"{exc} (use --force to evaluate anyway)") from exc
    out = Path(args.out) if args.out else _output_root() / f"eval-{cfg.config_hash()}-s{cfg.seed}-{cfg.episodes.way}w{cfg.episodes.shot}s"
    _prepare_dir(out, args.force)
    n = cfg.episodes.test_episodes
    episodes = sample_test_episodes(s, n, args.partition) if n else []
    results = evaluate(s, params, n, args.partition)
    rows = result_rows(cfg, results) if results else []
    write_results_csv(out / "results.csv", rows, _stamp(cfg))
    dump_json(out / "episodes.json", {"config_hash": cfg.config_hash(), "seed": cfg.seed, "test_steps": cfg.meta.test_steps, "episodes": episode_records(results)})
    write_traces(out / "traces.jsonl", traces_for(s, episodes, results))
    if rows:
        print(format_table(rows, RESULT_COLUMNS), end="")
    else:
        print("no episodes evaluated")
    print(f"wrote {out / 'results.csv'}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    path = Path(args.traces)
    if not path.exists():
        raise UsageError(f"trace file {path} does not exist")
    traces = load_traces(path)
    if args.limit is not None:
        traces = traces[: args.limit]
    out = Path(args.out)
    out.write_text(render_attention_html(traces, title=args.title), encoding="utf-8")
    print(f"wrote {out} ({len(traces)} documents)")
    return EXIT_OK


def cmd_bench(args) -> int:
    extra = {"bench.ways": args.ways and list(args.ways), "bench.shots": args.shots and list(args.shots)}
    cfg = load_config(args.config, {"seed": args.seed, **extra})
    out = Path(args.out) if args.out else _output_root() / f"bench-{cfg.config_hash()}-s{cfg.seed}"
    _prepare_dir(out, args.force)
    t0 = time.perf_counter()

    def progress(cell):
        acc = cell.rows[0]
        print(
            f"{cell.variant.name:22s} {cell.cfg.episodes.way}-way {cell.cfg.episodes.shot}-shot  "
            f"{acc['metric']} {100 * acc['mean']:.1f} +/- {100 * acc['ci95']:.1f}  "
            f"(train {cell.train_seconds:.0f}s, eval {cell.eval_seconds:.0f}s)",
            flush=True,
        )

    cells = run_bench(cfg, progress)
    rows = [r for c in cells for r in c.rows]
    write_results_csv(out / "results.csv", rows, _stamp(cfg))
    (out / "table.txt").write_text(format_table(rows, RESULT_COLUMNS), encoding="utf-8")
    total = time.perf_counter() - t0
    print(format_table(rows, RESULT_COLUMNS), end="")
    print(f"bench finished in {total:.0f}s; wrote {out / 'results.csv'}")
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    cfg = load_config(args.config, {"corpus.kind": "synth", "corpus.multi_label": args.multi_label or None})
    corpus, split, _ = build_corpus(cfg)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists (use --force to overwrite)")
    write_jsonl(corpus, out)
    dump_json(out.with_suffix(".split.json"), split.to_json())
    print(f"wrote {len(corpus.documents)} documents to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ataml", description="Few-shot text classification with MAML and ATAML.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, episodes=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite outputs / ignore hash mismatch")
        if episodes:
            sp.add_argument("--ways", type=int)
            sp.add_argument("--shots", type=int)

    t = sub.add_parser("train", help="meta-train a model")
    common(t)
    t.add_argument("--algorithm", choices=["maml", "ataml", "pretrain", "random"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt in the output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="meta-test a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)
    e.add_argument("--partition", choices=["test", "val"], default="test", help="meta-split partition to sample from")
    e.add_argument("--algorithm", choices=["maml", "ataml", "pretrain", "random"])
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="render attention traces to HTML")
    v.add_argument("--traces", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--title", default="Attention report")
    v.add_argument("--limit", type=int)
    v.set_defaults(func=cmd_visualize)

    b = sub.add_parser("bench", help="run the comparison grid")
    common(b, episodes=False)
    b.add_argument("--ways", type=int, nargs="+")
    b.add_argument("--shots", type=int, nargs="+")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("synth-gen", help="write a synthetic phrase corpus as JSONL")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--multi-label", action="store_true")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_synth_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, HashMismatch, CorpusError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
