"""Adam with per-epoch exponential decay, and the teacher → student pipeline."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Corpus, Split, batch_iterator
from .distill import PoolerKind, TeacherEnsemble, distillation_targets
from .errors import ConfigurationError, ParameterError, TrainingDivergenceError
from .evaluation import evaluate_model
from .model import (
    ModelConfig,
    ModelParams,
    encode_texts,
    encode_texts_backward,
    encode_videos,
    encode_videos_backward,
    init_model,
)
from .objectives import OBJECTIVES, LossBreakdown, combined_loss

log = logging.getLogger(__name__)

SETTINGS = ("zero-shot", "translate-train")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.05
    tau_prime: float = 0.1
    alpha: float = 1.0
    pooler: str = "min"
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.9
    epochs: int = 5
    languages: tuple[str, ...] = ("en",)
    setting: str = "translate-train"
    seed: int = 0
    objective: str = "cross_entropy"
    teacher_language: str = "en"
    symmetric: bool = False
    embed_dim: int = 512
    attention_layers: int = 0
    heads: int = 4
    max_tokens: int = 40
    max_frames: int = 30

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        if not (self.tau > 0 and self.tau_prime > 0):
            raise ConfigurationError("temperatures must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.setting not in SETTINGS:
            raise ConfigurationError(f"setting must be one of {SETTINGS}")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")
        if self.teacher_language not in ("en", "same"):
            raise ConfigurationError("teacher_language must be 'en' or 'same'")
        if self.pooler not in {p.value for p in PoolerKind}:
            raise ConfigurationError(f"unknown pooler {self.pooler!r}")
        if not self.languages:
            raise ConfigurationError("at least one training language is required")

    @property
    def training_languages(self) -> tuple[str, ...]:
        return ("en",) if self.setting == "zero-shot" else self.languages

    def model_config(self, corpus: Corpus) -> ModelConfig:
        return ModelConfig(
            text_dim=corpus.text_dim,
            video_dim=corpus.video_dim,
            embed_dim=self.embed_dim,
            attention_layers=self.attention_layers,
            heads=self.heads,
            max_tokens=self.max_tokens,
            max_frames=self.max_frames,
        )

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["languages"] = list(self.languages)
        return d


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params, grads, state: OptimizerState, lr_t: float) -> OptimizerState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if lr_t <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr_t}")
    named = params.named_parameters() if hasattr(params, "named_parameters") else params
    if getattr(params, "frozen", False):
        raise ParameterError("refusing to update a frozen model")
    for name in named:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDivergenceError(f"non-finite gradient for {name}", parameter=name)
    state.step += 1
    bc1 = 1.0 - BETA1 ** state.step
    bc2 = 1.0 - BETA2 ** state.step
    for name, p in named.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return state


def _forward(model: ModelParams, batch, languages: Sequence[str], teacher_targets, cfg: TrainConfig, with_grads: bool):
    video, v_cache = encode_videos(model.video, batch.frames)
    b = len(batch)
    all_caps = [c for lang in languages for c in batch.captions[lang]]
    text, t_cache = encode_texts(model.text, all_caps)
    mats = [text[i * b : (i + 1) * b] @ video.T for i in range(len(languages))]
    alpha = cfg.alpha if teacher_targets is not None else 1.0
    lb = combined_loss(
        mats, teacher_targets, cfg.tau, cfg.tau_prime, alpha,
        languages=list(languages), objective=cfg.objective, symmetric=cfg.symmetric, with_grads=with_grads,
    )
    return lb, text, video, t_cache, v_cache


def batch_loss(model: ModelParams, batch, languages: Sequence[str], teacher_targets, cfg: TrainConfig) -> LossBreakdown:
    """Forward-only version of :func:`batch_loss_and_grads`."""
    return _forward(model, batch, languages, teacher_targets, cfg, False)[0]


def batch_loss_and_grads(
    model: ModelParams,
    batch,
    languages: Sequence[str],
    teacher_targets,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Balanced contrastive + distillation objective for one batch and its gradient w.r.t. every model weight."""
    lb, text, video, t_cache, v_cache = _forward(model, batch, languages, teacher_targets, cfg, True)
    b = len(batch)
    g_text = np.empty_like(text)
    g_video = np.zeros_like(video)
    for i, g in enumerate(lb.score_grads):
        t_i = text[i * b : (i + 1) * b]
        g_text[i * b : (i + 1) * b] = g @ video
        g_video += g.T @ t_i
    lb.score_grads = None
    grads = encode_texts_backward(model.text, g_text, t_cache)
    grads.update(encode_videos_backward(model.video, g_video, v_cache))
    return lb, grads


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: LossBreakdown


@dataclass
class TrainResult:
    model: ModelParams
    history: list[StepRecord] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    if not history:
        return ""
    langs = list(history[0].loss.nce_per_language)
    cols = ["step", "epoch", "lr"] + [f"nce_{l}" for l in langs] + [f"c2kd_{l}" for l in langs] + ["nce", "c2kd", "total"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in history:
        lb = rec.loss
        w.writerow(
            [rec.step, rec.epoch, repr(rec.lr)]
            + [repr(lb.nce_per_language[l]) for l in langs]
            + [repr(lb.c2kd_per_language[l]) for l in langs]
            + [repr(lb.nce), repr(lb.c2kd), repr(lb.total)]
        )
    return buf.getvalue()


def _fit(
    model: ModelParams,
    corpus: Corpus,
    split: Split,
    cfg: TrainConfig,
    teachers: TeacherEnsemble | None,
    tag: str,
) -> TrainResult:
    languages = cfg.training_languages
    result = TrainResult(model)
    state = OptimizerState()
    step = 0
    for epoch in range(cfg.epochs):
        lr_t = cfg.lr_at(epoch)
        for batch in batch_iterator(corpus, split.train, cfg.batch_size, languages, cfg.seed, epoch):
            targets = None
            if teachers is not None:
                targets = distillation_targets(batch, teachers, languages, cfg.teacher_language)
            lb, grads = batch_loss_and_grads(model, batch, languages, targets, cfg)
            if not np.isfinite(lb.total):
                raise TrainingDivergenceError(f"{tag}: non-finite loss at step {step}")
            try:
                adam_step(model, grads, state, lr_t)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"{tag}: {exc}", exc.parameter) from exc
            result.history.append(StepRecord(step, epoch, lr_t, lb))
            step += 1
        if split.val:
            val = evaluate_model(model, corpus, split.val, languages, ks=(1,))
            r1 = {lang: v[1] for lang, v in val.items()}
            result.validation.append({"epoch": epoch, **r1})
            log.info("%s epoch %d val R@1 %s", tag, epoch, r1)
    return result


def train_teachers(
    corpus: Corpus,
    split: Split,
    configs: Sequence[TrainConfig],
    pooler: str = "min",
) -> TeacherEnsemble:
    """Train one NCE-only model per config, then freeze them all."""
    if len(configs) < 1:
        raise ParameterError("need at least one teacher config")
    members = []
    for i, cfg in enumerate(configs):
        cfg = replace(cfg, alpha=1.0)
        model = init_model(cfg.model_config(corpus), cfg.seed)
        try:
            _fit(model, corpus, split, cfg, None, f"teacher {i}")
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"teacher {i} diverged: {exc}", exc.parameter) from exc
        members.append(model.freeze())
    return TeacherEnsemble(members, PoolerKind(pooler))


def train_student(
    corpus: Corpus,
    split: Split,
    teachers: TeacherEnsemble | None,
    config: TrainConfig,
) -> TrainResult:
    """Train a student on the configured languages with the balanced objective.

    ``teachers`` may be None only for α=1. Teachers are evaluated even at α=1
    but carry zero weight, so the trajectory equals a teacher-free run.
    """
    if config.alpha < 1.0:
        if config.setting == "zero-shot":
            raise ConfigurationError("distillation (alpha < 1) needs the translate-train setting")
        if teachers is None:
            raise ConfigurationError("alpha < 1 requires a teacher ensemble")
    if teachers is not None and config.pooler != teachers.pooler.value:
        teachers = TeacherEnsemble(teachers.members, PoolerKind(config.pooler))
    model = init_model(config.model_config(corpus), config.seed)
    return _fit(model, corpus, split, config, teachers, f"student seed {config.seed}")
