"""Frozen teacher ensembles and pooling of their similarity matrices."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .model import ModelParams, encode_texts, encode_videos
from .objectives import SimilarityMatrix, _scores


class PoolerKind(str, Enum):
    MEAN = "mean"
    MAX = "max"
    MIN = "min"
    PER_TEACHER = "per_teacher"


@dataclass
class TeacherEnsemble:
    members: list[ModelParams]
    pooler: PoolerKind = PoolerKind.MEAN

    def __post_init__(self):
        if not self.members:
            raise ParameterError("a teacher ensemble needs at least one member")
        self.pooler = PoolerKind(self.pooler)
        for m in self.members:
            if not m.frozen:
                m.freeze()

    def __len__(self) -> int:
        return len(self.members)


def teacher_scores(batch, ensemble: TeacherEnsemble, language: str = "en") -> list[SimilarityMatrix]:
    """One B×B text-video matrix per teacher, using ``language`` captions (English by default)."""
    if not ensemble.members:
        raise ParameterError("empty teacher ensemble")
    captions = batch.captions.get(language)
    if captions is None or any(c is None for c in captions):
        missing = batch.ids[0] if captions is None else batch.ids[[c is None for c in captions].index(True)]
        raise DataError(f"record {missing} has no '{language}' caption for the teachers")
    out = []
    for teacher in ensemble.members:
        t, _ = encode_texts(teacher.text, captions)
        v, _ = encode_videos(teacher.video, batch.frames)
        out.append(SimilarityMatrix(t @ v.T, language=language, ids=tuple(batch.ids)))
    return out


def pool_teacher_matrices(matrices: Sequence, kind) -> SimilarityMatrix:
    """Elementwise mean / max / min across teacher matrices."""
    kind = PoolerKind(kind)
    if kind is PoolerKind.PER_TEACHER:
        raise ParameterError("per-teacher mode does not pool; pass the matrices to the loss directly")
    if len(matrices) == 0:
        raise ParameterError("cannot pool an empty list of matrices")
    arrays = [_scores(m) for m in matrices]
    if len({a.shape for a in arrays}) != 1:
        raise DimensionError(f"teacher matrices have mismatched shapes: {[a.shape for a in arrays]}")
    stack = np.stack(arrays)
    lo = stack.min(axis=0)
    hi = stack.max(axis=0)
    if kind is PoolerKind.MIN:
        pooled = lo
    elif kind is PoolerKind.MAX:
        pooled = hi
    else:
        # sort along the teacher axis so the sum is independent of teacher order;
        # the clip only removes roundoff beyond the exact bounds
        pooled = np.clip(np.sort(stack, axis=0).sum(axis=0) / len(matrices), lo, hi)
    first = matrices[0]
    return SimilarityMatrix(pooled, language=getattr(first, "language", None), ids=getattr(first, "ids", None))


def distillation_targets(batch, ensemble: TeacherEnsemble, student_languages: Sequence[str], teacher_language: str = "en"):
    """Per student language, the teacher matrices to distill from.

    With ``teacher_language="en"`` every language shares the English teacher
    targets; with ``"same"`` each language uses teacher matrices computed on
    its own captions. Pooled ensembles give one matrix per language, the
    per-teacher mode a list of M.
    """
    cache: dict[str, list[SimilarityMatrix]] = {}
    out = []
    for lang in student_languages:
        source = lang if teacher_language == "same" else teacher_language
        if source not in cache:
            cache[source] = teacher_scores(batch, ensemble, source)
        mats = cache[source]
        if ensemble.pooler is PoolerKind.PER_TEACHER:
            out.append([m.scores for m in mats])
        else:
            out.append(pool_teacher_matrices(mats, ensemble.pooler).scores)
    return out
