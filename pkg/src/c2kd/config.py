"""Experiment configuration: JSON schema, validation and resolution."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import jsonschema

from .data import SyntheticSpec
from .errors import ConfigError, ConfigurationError
from .train import TrainConfig

SCHEMA_VERSION = 1

_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_INT0 = {"type": "integer", "minimum": 0}
_LANGS = {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1, "uniqueItems": True}

_TRAIN_PROPS: dict[str, Any] = {
    "tau": _POS,
    "tau_prime": _POS,
    "alpha": {"type": "number", "minimum": 0, "maximum": 1},
    "pooler": {"enum": ["mean", "max", "min", "per_teacher"]},
    "batch_size": {"type": "integer", "minimum": 2},
    "lr": _POS,
    "decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "epochs": _INT0,
    "languages": _LANGS,
    "setting": {"enum": ["zero-shot", "translate-train"]},
    "objective": {"enum": ["cross_entropy", "smooth_l1", "softmax_smooth_l1"]},
    "teacher_language": {"enum": ["en", "same"]},
    "symmetric": {"type": "boolean"},
    "embed_dim": _INT1,
    "attention_layers": _INT0,
    "heads": _INT1,
    "max_tokens": _INT1,
    "max_frames": _INT1,
}

_TEACHER_PROPS = {k: v for k, v in _TRAIN_PROPS.items() if k not in ("alpha", "pooler", "objective", "teacher_language")}
_TEACHER_PROPS.update(
    count=_INT1,
    seeds={"type": "array", "items": _INT0, "minItems": 1},
    embed_dims={"type": "array", "items": _INT1, "minItems": 1},
)

_SYNTH_PROPS = {
    "n_records": _INT1,
    "concept_dim": _INT1,
    "noise": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}, "required": ["en"]},
    "text_dim": _INT1,
    "video_dim": _INT1,
    "text_len": _INT1,
    "video_len": _INT1,
    "video_noise": {"type": "number", "minimum": 0},
    "token_noise": {"type": "number", "minimum": 0},
    "language_shift": {"type": "number", "minimum": 0},
    "seed": _INT0,
}


def _obj(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


EXPERIMENT_SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "method": {"type": "string"},
        "data": {
            "type": "object",
            "oneOf": [
                _obj({"synthetic": _obj(_SYNTH_PROPS)}, ("synthetic",)),
                _obj({"path": {"type": "string", "minLength": 1}}, ("path",)),
            ],
        },
        "split": _obj({"train": _INT1, "val": _INT0, "test": _INT1, "seed": _INT0}, ("train", "test")),
        "teachers": _obj(_TEACHER_PROPS, ("count",)),
        "student": _obj(_TRAIN_PROPS),
        "eval": _obj({"languages": _LANGS, "ks": {"type": "array", "items": _INT1, "minItems": 1}}),
        "seeds": {"type": "array", "items": _INT0, "minItems": 1},
    },
    ("schema_version", "data", "split", "student"),
)

SWEEP_SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "base": {"type": "object"},
        "cells": {
            "type": "array",
            "minItems": 1,
            "items": _obj(
                {"name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"}, "student": _obj(_TRAIN_PROPS)},
                ("name",),
            ),
        },
    },
    ("schema_version", "base", "cells"),
)


def _validate(doc: Any, schema: dict, prefix: str = "") -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = prefix + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(err.message, path or "<root>")


@dataclass
class ExperimentConfig:
    method: str
    synthetic: SyntheticSpec | None
    corpus_path: Path | None
    split: dict
    teachers: list[TrainConfig]
    teacher_pooler: str
    student: TrainConfig
    seeds: list[int]
    eval_languages: list[str] | None
    ks: tuple[int, ...]
    raw: dict = field(repr=False, default_factory=dict)

    def student_for_seed(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.student.to_dict(), "seed": seed})

    def resolved(self) -> dict:
        """Snapshot with every default filled in; stable across runs."""
        doc = copy.deepcopy(self.raw)
        if self.corpus_path is not None:
            doc["data"] = {"path": str(self.corpus_path)}
        else:
            spec = {f.name: getattr(self.synthetic, f.name) for f in fields(SyntheticSpec)}
            spec["noise"] = dict(spec["noise"])
            doc["data"] = {"synthetic": spec}
        doc["teachers_resolved"] = [t.to_dict() for t in self.teachers]
        s = self.student.to_dict()
        s.pop("seed")
        doc["student"] = s
        doc["seeds"] = list(self.seeds)
        doc["eval"] = {"languages": self.eval_languages, "ks": list(self.ks)}
        return doc


def parse_experiment(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    _validate(doc, EXPERIMENT_SCHEMA)
    data = doc["data"]
    synthetic = None
    corpus_path = None
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        try:
            synthetic = SyntheticSpec(**syn)
            synthetic.validate()
        except Exception as exc:
            raise ConfigError(str(exc), "data/synthetic") from exc
        default_langs = list(synthetic.languages)
    else:
        p = Path(data["path"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        corpus_path = p.resolve()
        if not corpus_path.exists():
            raise ConfigError(f"corpus file {corpus_path} does not exist", "data/path")
        default_langs = None

    student_doc = dict(doc["student"])
    if "languages" not in student_doc and default_langs is not None:
        student_doc["languages"] = default_langs
    try:
        student = TrainConfig(**student_doc)
    except ConfigurationError as exc:
        raise ConfigError(str(exc), "student") from exc

    teachers: list[TrainConfig] = []
    tdoc = dict(doc.get("teachers", {"count": 0}))
    count = tdoc.pop("count", 0)
    seeds = tdoc.pop("seeds", [1000 + i for i in range(count)])
    dims = tdoc.pop("embed_dims", None)
    if count and len(seeds) != count:
        raise ConfigError(f"{len(seeds)} seeds for {count} teachers", "teachers/seeds")
    if dims is not None and len(dims) != count:
        raise ConfigError(f"{len(dims)} embed dims for {count} teachers", "teachers/embed_dims")
    if "languages" not in tdoc:
        tdoc["languages"] = list(student.languages)
    for i in range(count):
        t = {**tdoc, "seed": seeds[i], "alpha": 1.0}
        if dims is not None:
            t["embed_dim"] = dims[i]
        try:
            teachers.append(TrainConfig(**t))
        except ConfigurationError as exc:
            raise ConfigError(str(exc), f"teachers[{i}]") from exc
    if student.alpha < 1.0 and not teachers:
        raise ConfigError("alpha < 1 needs at least one teacher", "teachers/count")
    if student.alpha < 1.0 and student.setting == "zero-shot":
        raise ConfigError("distillation is only applicable in the translate-train setting", "student/setting")

    split = {"val": 0, "seed": 0, **doc["split"]}
    ev = doc.get("eval", {})
    return ExperimentConfig(
        method=doc.get("method", "C2KD" if student.alpha < 1 else "NCE"),
        synthetic=synthetic,
        corpus_path=corpus_path,
        split=split,
        teachers=teachers,
        teacher_pooler=student.pooler,
        student=student,
        seeds=list(doc.get("seeds", [0])),
        eval_languages=ev.get("languages"),
        ks=tuple(ev.get("ks", [1, 5, 10])),
        raw=copy.deepcopy(doc),
    )


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    return parse_experiment(load_json(path), path.parent)


@dataclass
class SweepCell:
    name: str
    config: ExperimentConfig


def parse_sweep(doc: dict, base_dir: Path | None = None) -> list[SweepCell]:
    _validate(doc, SWEEP_SCHEMA)
    cells = []
    names = set()
    for i, cell in enumerate(doc["cells"]):
        if cell["name"] in names:
            raise ConfigError(f"duplicate cell name {cell['name']!r}", f"cells/{i}/name")
        names.add(cell["name"])
        merged = copy.deepcopy(doc["base"])
        merged["student"] = {**merged.get("student", {}), **cell.get("student", {})}
        merged["method"] = cell["name"]
        try:
            cfg = parse_experiment(merged, base_dir)
        except ConfigError as exc:
            raise ConfigError(str(exc), f"cells/{i}") from exc
        cells.append(SweepCell(cell["name"], cfg))
    return cells


def is_sweep(doc: dict) -> bool:
    return isinstance(doc, dict) and "cells" in doc
