"""Experiment runner: data → teachers → students → evaluation, with a hashed manifest."""

from __future__ import annotations

import concurrent.futures as cf
import hashlib
import json
import logging
import multiprocessing
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig, SweepCell
from .data import Corpus, Split, generate_synthetic, load_corpus, make_split, save_corpus
from .distill import PoolerKind, TeacherEnsemble
from .errors import C2KDError, StageError
from .evaluation import RetrievalReport, evaluate_retrieval, write_rows_csv
from .model import load_checkpoint, save_checkpoint
from .train import train_student, train_teachers

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STAGES = ("data", "teachers", "students", "evaluate")


def max_workers(requested: int) -> int:
    cap = os.environ.get("C2KD_THREADS")
    n = max(1, requested)
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, stages: dict[str, str]) -> dict:
    """Hash every file under ``out`` (except the manifest) and record stage status."""
    artifacts = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            artifacts.append({"path": p.relative_to(out).as_posix(), "bytes": p.stat().st_size, "sha256": sha256_file(p)})
    manifest = {
        "schema_version": 1,
        "complete": bool(stages) and all(v == "ok" for v in stages.values()),
        "stages": stages,
        "artifacts": artifacts,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def verify_manifest(out: Path) -> list[str]:
    """Artifacts whose content no longer matches the manifest (empty list = all good)."""
    manifest = json.loads((Path(out) / MANIFEST).read_text(encoding="utf-8"))
    bad = []
    for art in manifest["artifacts"]:
        p = Path(out) / art["path"]
        if not p.is_file() or sha256_file(p) != art["sha256"]:
            bad.append(art["path"])
    return bad


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Workspace:
    """Resolved on-disk locations for one experiment."""

    out: Path
    shared: Path

    @property
    def corpus(self) -> Path:
        return self.shared / "corpus.c2kc"

    @property
    def split(self) -> Path:
        return self.shared / "split.json"

    def teacher_dir(self, key: str = "") -> Path:
        return self.shared / (f"teachers_{key}" if key else "teachers")

    def student(self, seed: int) -> Path:
        return self.out / "students" / f"seed_{seed}.c2km"

    def loss_csv(self, seed: int) -> Path:
        return self.out / "students" / f"seed_{seed}_loss.csv"


def prepare_data(cfg: ExperimentConfig, ws: Workspace) -> tuple[Corpus, Split]:
    ws.shared.mkdir(parents=True, exist_ok=True)
    if cfg.corpus_path is not None:
        corpus = load_corpus(cfg.corpus_path)
    elif ws.corpus.exists():
        corpus = load_corpus(ws.corpus)
    else:
        corpus = generate_synthetic(cfg.synthetic)
        save_corpus(corpus, ws.corpus)
    s = cfg.split
    split = make_split(corpus, s["train"], s["val"], s["test"], s["seed"])
    _dump_json(ws.split, {"train": list(split.train), "val": list(split.val), "test": list(split.test)})
    return corpus, split


def teacher_key(cfg: ExperimentConfig) -> str:
    doc = {"data": cfg.resolved()["data"], "split": cfg.split, "teachers": [t.to_dict() for t in cfg.teachers]}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def prepare_teachers(cfg: ExperimentConfig, ws: Workspace, corpus: Corpus, split: Split, key: str = "") -> TeacherEnsemble | None:
    if not cfg.teachers:
        return None
    tdir = ws.teacher_dir(key)
    paths = [tdir / f"teacher_{i}.c2km" for i in range(len(cfg.teachers))]
    if all(p.exists() for p in paths):
        return TeacherEnsemble([load_checkpoint(p) for p in paths], PoolerKind(cfg.teacher_pooler))
    tdir.mkdir(parents=True, exist_ok=True)
    ens = train_teachers(corpus, split, cfg.teachers, cfg.teacher_pooler)
    for p, m in zip(paths, ens.members):
        save_checkpoint(m, p)
    return ens


def load_teachers(cfg: ExperimentConfig, ws: Workspace, key: str = "") -> TeacherEnsemble | None:
    if not cfg.teachers:
        return None
    paths = [ws.teacher_dir(key) / f"teacher_{i}.c2km" for i in range(len(cfg.teachers))]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"teacher checkpoints missing (run train-teachers first): {missing}")
    return TeacherEnsemble([load_checkpoint(p) for p in paths], PoolerKind(cfg.teacher_pooler))


def _train_one(cfg: ExperimentConfig, ws: Workspace, corpus: Corpus, split: Split, teachers, seed: int) -> None:
    (ws.out / "students").mkdir(parents=True, exist_ok=True)
    result = train_student(corpus, split, teachers, cfg.student_for_seed(seed))
    save_checkpoint(result.model, ws.student(seed))
    ws.loss_csv(seed).write_text(result.history_csv(), encoding="utf-8")
    if result.validation:
        with open(ws.out / "students" / f"seed_{seed}_val.csv", "w", encoding="utf-8", newline="") as fh:
            write_rows_csv(fh, result.validation)


def _train_job(args) -> None:
    cfg, ws, corpus_path, split_doc, teacher_paths, pooler, seed = args
    corpus = load_corpus(corpus_path)
    split = Split(tuple(split_doc["train"]), tuple(split_doc["val"]), tuple(split_doc["test"]))
    teachers = None
    if teacher_paths:
        teachers = TeacherEnsemble([load_checkpoint(p) for p in teacher_paths], PoolerKind(pooler))
    _train_one(cfg, ws, corpus, split, teachers, seed)


def train_students(cfg, ws, corpus, split, teachers, seeds: Sequence[int], jobs: int = 1) -> None:
    jobs = max_workers(jobs)
    if jobs == 1 or len(seeds) == 1:
        for s in seeds:
            _train_one(cfg, ws, corpus, split, teachers, s)
        return
    run_parallel([_job_args(cfg, ws, teachers, s) for s in seeds], jobs)


def _job_args(cfg, ws, teachers, seed, key: str = ""):
    corpus_path = cfg.corpus_path or ws.corpus
    split_doc = json.loads(ws.split.read_text(encoding="utf-8"))
    tpaths = [str(ws.teacher_dir(key) / f"teacher_{i}.c2km") for i in range(len(cfg.teachers))] if teachers else []
    return (cfg, ws, str(corpus_path), split_doc, tpaths, cfg.teacher_pooler, seed)


def run_parallel(job_args: list, jobs: int) -> None:
    ctx = multiprocessing.get_context("spawn")
    with cf.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        for fut in [pool.submit(_train_job, a) for a in job_args]:
            fut.result()


def evaluate_students(cfg: ExperimentConfig, ws: Workspace, corpus: Corpus, split: Split, seeds: Sequence[int]) -> RetrievalReport:
    models = [load_checkpoint(ws.student(s)) for s in seeds]
    langs = cfg.eval_languages or list(corpus.languages)
    report = evaluate_retrieval(models, corpus, split.test, langs, cfg.ks)
    setting = "TT" if cfg.student.setting == "translate-train" else "ZS"
    (ws.out / "report.csv").write_text(report.to_csv(cfg.method, setting), encoding="utf-8")
    (ws.out / "report.txt").write_text(report.to_table(cfg.method, setting) + "\n", encoding="utf-8")
    return report


class StageRunner:
    """Runs named stages, recording failures so the manifest marks the run incomplete."""

    def __init__(self, out: Path):
        self.out = out
        self.stages: dict[str, str] = {}

    def run(self, name: str, fn, *args, **kwargs):
        try:
            result = fn(*args, **kwargs)
        except (C2KDError, OSError, ValueError) as exc:
            self.stages[name] = f"failed: {exc}"
            write_manifest(self.out, self.stages)
            raise StageError(name, exc) from exc
        self.stages[name] = "ok"
        return result

    def finish(self) -> dict:
        return write_manifest(self.out, self.stages)


def run_experiment(cfg: ExperimentConfig, out, seeds: Sequence[int] | None = None, jobs: int = 1) -> tuple[dict, RetrievalReport]:
    """Full pipeline into ``out``; returns (manifest, report)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ws = Workspace(out, out)
    seeds = list(seeds) if seeds else cfg.seeds
    _dump_json(out / "config.resolved.json", {**cfg.resolved(), "seeds": seeds})
    runner = StageRunner(out)
    corpus, split = runner.run("data", prepare_data, cfg, ws)
    teachers = runner.run("teachers", prepare_teachers, cfg, ws, corpus, split)
    runner.run("students", train_students, cfg, ws, corpus, split, teachers, seeds, jobs)
    report = runner.run("evaluate", evaluate_students, cfg, ws, corpus, split, seeds)
    return runner.finish(), report


def run_sweep(cells: Sequence[SweepCell], out, seeds: Sequence[int] | None = None, jobs: int = 1) -> tuple[dict, dict[str, RetrievalReport]]:
    """Run every cell under identical data/seeds; teachers are shared between cells with equal teacher configs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    shared = out / "shared"
    runner = StageRunner(out)
    _dump_json(out / "sweep.resolved.json", {c.name: c.config.resolved() for c in cells})

    data_cache: dict[str, tuple[Corpus, Split]] = {}
    plan = []
    for cell in cells:
        cfg = cell.config
        ws = Workspace(out / cell.name, shared)
        ws.out.mkdir(parents=True, exist_ok=True)
        dkey = json.dumps([cfg.resolved()["data"], cfg.split], sort_keys=True)
        if dkey not in data_cache:
            if data_cache:
                raise StageError("data", ValueError("all sweep cells must share one corpus and split"))
            data_cache[dkey] = runner.run("data", prepare_data, cfg, ws)
        corpus, split = data_cache[dkey]
        key = teacher_key(cfg)
        teachers = runner.run(f"teachers:{cell.name}", prepare_teachers, cfg, ws, corpus, split, key)
        cell_seeds = list(seeds) if seeds else cfg.seeds
        plan.append((cell, ws, teachers, key, cell_seeds))

    jobs = max_workers(jobs)

    def _students():
        if jobs == 1:
            for cell, ws, teachers, _, cell_seeds in plan:
                for s in cell_seeds:
                    _train_one(cell.config, ws, corpus, split, teachers, s)
        else:
            args = [_job_args(cell.config, ws, t, s, key) for cell, ws, t, key, ss in plan for s in ss]
            run_parallel(args, jobs)

    runner.run("students", _students)
    reports = {}
    rows = []
    for cell, ws, _, _, cell_seeds in plan:
        rep = runner.run(f"evaluate:{cell.name}", evaluate_students, cell.config, ws, corpus, split, cell_seeds)
        reports[cell.name] = rep
        setting = "TT" if cell.config.student.setting == "translate-train" else "ZS"
        rows += rep.rows(cell.name, setting)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        write_rows_csv(fh, rows)
    return runner.finish(), reports
