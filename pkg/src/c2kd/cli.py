"""Command-line entry point: ``c2kd <subcommand> --config ... --out ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import is_sweep, load_json, parse_experiment, parse_sweep
from .data import Batch, generate_synthetic, load_corpus
from .errors import C2KDError, ConfigError
from .experiment import (
    MANIFEST,
    StageRunner,
    Workspace,
    evaluate_students,
    load_teachers,
    prepare_data,
    prepare_teachers,
    run_experiment,
    run_sweep,
    train_students,
)
from .kernel import grad_check
from .model import init_model
from .train import batch_loss, batch_loss_and_grads
from .verify import run_checks

log = logging.getLogger("c2kd")


def _seeds(text: str | None) -> list[int] | None:
    if not text:
        return None
    return [int(s) for s in text.split(",") if s.strip()]


def _load_config(path: str):
    doc = load_json(path)
    base = Path(path).parent
    if is_sweep(doc):
        return "sweep", parse_sweep(doc, base)
    return "experiment", parse_experiment(doc, base)


def _experiment(path: str):
    kind, cfg = _load_config(path)
    if kind != "experiment":
        raise ConfigError("expected a single experiment config, got a sweep", path)
    return cfg


def _print_report(report, method: str, setting: str, fmt: str) -> None:
    if fmt == "csv":
        sys.stdout.write(report.to_csv(method, setting))
    else:
        print(report.to_table(method, setting))


def _existing_stages(out: Path) -> dict:
    p = out / MANIFEST
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8")).get("stages", {})
    return {}


def _staged(args, stage_names: list[str]):
    cfg = _experiment(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = StageRunner(out)
    runner.stages.update({k: v for k, v in _existing_stages(out).items()})
    for s in stage_names:
        runner.stages.pop(s, None)
    return cfg, out, Workspace(out, out), runner


def cmd_gen_data(args) -> int:
    cfg, out, ws, runner = _staged(args, ["data"])
    corpus, split = runner.run("data", prepare_data, cfg, ws)
    runner.finish()
    print(f"corpus: {len(corpus)} records, languages {','.join(corpus.languages)}; "
          f"split {len(split.train)}/{len(split.val)}/{len(split.test)}")
    return 0


def cmd_train_teachers(args) -> int:
    cfg, out, ws, runner = _staged(args, ["data", "teachers"])
    corpus, split = runner.run("data", prepare_data, cfg, ws)
    ens = runner.run("teachers", prepare_teachers, cfg, ws, corpus, split)
    runner.finish()
    print(f"trained {len(ens) if ens else 0} teachers into {ws.teacher_dir()}")
    return 0


def cmd_train_student(args) -> int:
    cfg, out, ws, runner = _staged(args, ["data", "students"])
    seeds = _seeds(args.seeds) or cfg.seeds
    corpus, split = runner.run("data", prepare_data, cfg, ws)
    teachers = runner.run("teachers-load", load_teachers, cfg, ws)
    runner.stages.pop("teachers-load")
    runner.run("students", train_students, cfg, ws, corpus, split, teachers, seeds, args.jobs)
    runner.finish()
    print(f"trained students for seeds {seeds}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, out, ws, runner = _staged(args, ["data", "evaluate"])
    seeds = _seeds(args.seeds) or cfg.seeds
    corpus, split = runner.run("data", prepare_data, cfg, ws)
    report = runner.run("evaluate", evaluate_students, cfg, ws, corpus, split, seeds)
    runner.finish()
    _print_report(report, cfg.method, "TT" if cfg.student.setting == "translate-train" else "ZS", args.format)
    return 0


def cmd_run(args) -> int:
    cfg = _experiment(args.config)
    manifest, report = run_experiment(cfg, args.out, _seeds(args.seeds), args.jobs)
    _print_report(report, cfg.method, "TT" if cfg.student.setting == "translate-train" else "ZS", args.format)
    return 0 if manifest["complete"] else 1


def cmd_sweep(args) -> int:
    kind, cells = _load_config(args.config)
    if kind != "sweep":
        raise ConfigError("sweep needs a config with 'base' and 'cells'", args.config)
    manifest, reports = run_sweep(cells, args.out, _seeds(args.seeds), args.jobs)
    if args.format == "csv":
        sys.stdout.write((Path(args.out) / "sweep.csv").read_text(encoding="utf-8"))
    else:
        for cell in cells:
            st = cell.config.student.setting
            print(reports[cell.name].to_table(cell.name, "TT" if st == "translate-train" else "ZS"))
    return 0 if manifest["complete"] else 1


def cmd_grad_check(args) -> int:
    cfg = _experiment(args.config)
    if cfg.corpus_path is not None:
        corpus = load_corpus(cfg.corpus_path)
    else:
        corpus = generate_synthetic(replace(cfg.synthetic, n_records=max(args.batch, 2)))
    student_cfg = cfg.student_for_seed(cfg.seeds[0])
    model = init_model(student_cfg.model_config(corpus), student_cfg.seed)
    ids = corpus.ids[: args.batch]
    langs = student_cfg.training_languages
    recs = [corpus[i] for i in ids]
    batch = Batch(ids, [r.frames for r in recs], {l: [r.captions[l] for r in recs] for l in set(langs) | {"en"}})
    rng = np.random.default_rng(student_cfg.seed)
    teacher = None if student_cfg.alpha == 1.0 else rng.uniform(-1, 1, (len(ids), len(ids)))

    def loss_fn(_):
        lb, grads = batch_loss_and_grads(model, batch, langs, teacher, student_cfg)
        return lb.total, grads

    def value_fn(_):
        return batch_loss(model, batch, langs, teacher, student_cfg).total

    err = grad_check(model, loss_fn, args.step, value_fn)
    ok = err < args.tolerance
    print(f"grad-check: {model.num_parameters()} parameters, max relative error {err:.3e} "
          f"({'PASS' if ok else 'FAIL'} at tolerance {args.tolerance:g})")
    return 0 if ok else 1


def cmd_verify(args) -> int:
    results = run_checks(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:22s} {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2kd", description="Cross-lingual cross-modal distillation lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out=True, seeds=False, jobs=False, fmt=False, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", required=True)
        if out:
            p.add_argument("--out", required=True)
        if seeds:
            p.add_argument("--seeds", help="comma-separated seed list (overrides the config)")
        if jobs:
            p.add_argument("--jobs", type=int, default=1)
        if fmt:
            p.add_argument("--format", choices=("csv", "table"), default="table")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "generate or load the corpus and write the split")
    add("train-teachers", cmd_train_teachers, "train and freeze the teacher ensemble")
    add("train-student", cmd_train_student, "train students (one per seed)", seeds=True, jobs=True)
    add("evaluate", cmd_evaluate, "evaluate trained students", seeds=True, fmt=True)
    add("run", cmd_run, "full pipeline: data, teachers, students, evaluation", seeds=True, jobs=True, fmt=True)
    add("sweep", cmd_sweep, "run every cell of a sweep file", seeds=True, jobs=True, fmt=True)
    g = add("grad-check", cmd_grad_check, "finite-difference check of the student objective", out=False)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    v = add("verify", cmd_verify, "run the invariant suite", out=False, config=False)
    v.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (C2KDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
