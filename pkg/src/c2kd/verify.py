"""Fast self-checks of the core identities, runnable without pytest (``c2kd verify``)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Batch
from .distill import pool_teacher_matrices
from .evaluation import rank_videos, recall_at_k
from .kernel import grad_check, l2_normalize_rows, softmax_rows
from .model import ModelConfig, init_model
from .objectives import c2kd_loss, cross_entropy_soft, nce_loss, one_hot_targets
from .train import TrainConfig, batch_loss, batch_loss_and_grads


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _loss_equivalence(rng) -> str:
    worst = 0.0
    for _ in range(100):
        b = int(rng.choice([2, 4, 8]))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        s = rng.uniform(-1, 1, (b, b))
        worst = max(worst, abs(nce_loss(s, tau) - cross_entropy_soft(one_hot_targets(b), s, tau)))
    assert worst < 1e-9, worst
    return f"max |NCE - CE(one-hot)| = {worst:.2e}"


def _softmax_rows(rng) -> str:
    worst = 0.0
    for _ in range(200):
        x = rng.uniform(-5, 5, (3, 6))
        tau = float(10 ** rng.uniform(-3, 3))
        y = softmax_rows(x, tau)
        worst = max(worst, np.abs(y.sum(axis=1) - 1).max())
        assert np.abs(y - softmax_rows(x / tau, 1.0)).max() < 1e-12
    assert worst < 1e-12, worst
    return f"max |row sum - 1| = {worst:.2e}"


def _normalize_idempotent(rng) -> str:
    x = rng.normal(size=(20, 7))
    y = l2_normalize_rows(x)
    err = np.abs(l2_normalize_rows(y) - y).max()
    assert err < 1e-10
    return f"idempotence error {err:.2e}"


def _saturated_teacher(rng) -> str:
    t = 2 * np.eye(4) - 1
    worst = 0.0
    for _ in range(50):
        s = rng.uniform(-1, 1, (4, 4))
        worst = max(worst, abs(c2kd_loss(s, t, 0.01) - nce_loss(s, 0.01)))
    assert worst < 1e-3, worst
    return f"max gap {worst:.2e}"


def _pooler_laws(rng) -> str:
    for _ in range(200):
        m = int(rng.integers(1, 6))
        b = int(rng.integers(1, 9))
        mats = [rng.uniform(-1, 1, (b, b)) for _ in range(m)]
        pooled = {k: pool_teacher_matrices(mats, k).scores for k in ("min", "mean", "max")}
        assert np.all(pooled["min"] <= pooled["mean"]) and np.all(pooled["mean"] <= pooled["max"])
        perm = list(rng.permutation(m))
        for k in pooled:
            assert np.array_equal(pool_teacher_matrices([mats[i] for i in perm], k).scores, pooled[k])
    return "200 ensembles ok"


def _ranking_oracle(rng) -> str:
    for _ in range(200):
        n = int(rng.integers(1, 30))
        v = l2_normalize_rows(rng.normal(size=(n, 4)))
        q = v[int(rng.integers(n))] if rng.random() < 0.3 else l2_normalize_rows(rng.normal(size=(1, 4)))[0]
        scores = v @ q
        brute = sorted(range(n), key=lambda j: (-scores[j], j))
        assert list(rank_videos(q, v)) == brute
        gt = int(rng.integers(n))
        for k in (1, min(5, n), n):
            assert recall_at_k(np.array([brute]), [gt], k) == (100.0 if gt in brute[:k] else 0.0)
    return "200 instances ok"


def _grad_check_student(rng) -> str:
    cfg = ModelConfig(text_dim=5, video_dim=4, embed_dim=6, attention_layers=1, heads=2)
    model = init_model(cfg, 3)
    batch = Batch(
        ids=[0, 1, 2, 3],
        frames=[rng.normal(size=(2, 4)) for _ in range(4)],
        captions={lang: [rng.normal(size=(3, 5)) for _ in range(4)] for lang in ("en", "de")},
    )
    teacher = rng.uniform(-1, 1, (4, 4))
    tc = TrainConfig(alpha=0.5, embed_dim=6, languages=("en", "de"))

    def loss_fn(_):
        lb, grads = batch_loss_and_grads(model, batch, ["en", "de"], teacher, tc)
        return lb.total, grads

    err = grad_check(model, loss_fn, 1e-5, lambda _: batch_loss(model, batch, ["en", "de"], teacher, tc).total)
    assert err < 1e-4, err
    return f"max relative error {err:.2e}"


CHECKS: dict[str, Callable] = {
    "loss-equivalence": _loss_equivalence,
    "softmax-rows": _softmax_rows,
    "normalize-idempotent": _normalize_idempotent,
    "saturated-teacher": _saturated_teacher,
    "pooler-laws": _pooler_laws,
    "ranking-oracle": _ranking_oracle,
    "grad-check": _grad_check_student,
}


def run_checks(seed: int = 0) -> list[CheckResult]:
    results = []
    for i, (name, fn) in zip(itertools.count(), CHECKS.items()):
        rng = np.random.default_rng([seed, i])
        try:
            results.append(CheckResult(name, True, fn(rng)))
        except AssertionError as exc:
            results.append(CheckResult(name, False, f"assertion failed: {exc}"))
    return results
