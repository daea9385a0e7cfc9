"""Acceptance criteria 1-10, each printing one PASS/FAIL line (also summarized at the end of the run)."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from c2kd.cli import main
from c2kd.config import parse_experiment
from c2kd.data import SyntheticSpec, corpus_to_bytes, generate_synthetic, load_corpus, make_batch, make_split, save_corpus
from c2kd.distill import PoolerKind, TeacherEnsemble, distillation_targets, pool_teacher_matrices
from c2kd.evaluation import evaluate_retrieval, rank_matrix, rank_videos, recall_at_k
from c2kd.experiment import run_experiment, verify_manifest
from c2kd.kernel import grad_check, l2_normalize_rows
from c2kd.model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from c2kd.objectives import c2kd_loss, cross_entropy_soft, nce_loss, one_hot_targets
from c2kd.train import TrainConfig, batch_loss, batch_loss_and_grads, train_student, train_teachers

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
NON_EN = ("de", "fr", "zh")


def test_c1_loss_equivalence(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        b = int(rng.choice([2, 4, 8]))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        s = rng.uniform(-1, 1, (b, b))
        worst = max(worst, abs(nce_loss(s, tau) - cross_entropy_soft(one_hot_targets(b), s, tau)))
    dt = time.perf_counter() - t0
    criterion("C1 loss equivalence", worst < 1e-9 and dt < 1, f"max gap {worst:.1e}, {dt:.2f}s")


def test_c2_gradient_fidelity(criterion):
    rng = np.random.default_rng(2)
    corpus = generate_synthetic(SyntheticSpec(n_records=4, concept_dim=4, noise={"en": 0.1, "de": 0.5},
                                              text_dim=6, video_dim=8, text_len=3, video_len=3))
    batch = make_batch(corpus, corpus.ids, ["en", "de"])
    mcfg = ModelConfig(text_dim=6, video_dim=8, embed_dim=8, attention_layers=2, heads=4)
    teachers = [init_model(mcfg, 10 + i) for i in range(2)]
    t0 = time.perf_counter()
    errors = {}
    for kind in PoolerKind:
        student = init_model(mcfg, int(rng.integers(1000)))
        ens = TeacherEnsemble(teachers, kind)
        targets = distillation_targets(batch, ens, ["en", "de"])
        tc = TrainConfig(alpha=0.5, pooler=kind.value, tau=0.05, tau_prime=0.1, languages=("en", "de"))

        def loss_fn(_):
            lb, grads = batch_loss_and_grads(student, batch, ["en", "de"], targets, tc)
            return lb.total, grads

        def value_fn(_):
            return batch_loss(student, batch, ["en", "de"], targets, tc).total

        errors[kind.value] = grad_check(student, loss_fn, 1e-5, value_fn)
    dt = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    criterion("C2 gradient fidelity", worst < 1e-4 and dt < 10, f"{detail}; {dt:.1f}s")


def test_c3_endpoint_identity(criterion):
    corpus = generate_synthetic(SyntheticSpec(n_records=200))
    split = make_split(corpus, 160, 0, 40)
    base = dict(batch_size=8, epochs=1, lr=1e-3, embed_dim=32, languages=corpus.languages, seed=5)
    t0 = time.perf_counter()
    ens = train_teachers(corpus, split, [TrainConfig(**{**base, "seed": s}) for s in (11, 12)], "min")
    with_t = train_student(corpus, split, ens, TrainConfig(**base, alpha=1.0))
    free = train_student(corpus, split, None, TrainConfig(**base, alpha=1.0))
    dt = time.perf_counter() - t0
    steps = len(with_t.history)
    same = all(np.array_equal(a, b) for a, b in
               zip(with_t.model.named_parameters().values(), free.model.named_parameters().values()))
    same = same and [h.loss.total for h in with_t.history] == [h.loss.total for h in free.history]
    criterion("C3 endpoint identity", same and steps == 20 and dt < 30, f"{steps} steps bitwise equal={same}, {dt:.1f}s")


def test_c4_saturated_teacher(criterion):
    rng = np.random.default_rng(4)
    t = 2 * np.eye(4) - 1
    t0 = time.perf_counter()
    worst = max(abs(c2kd_loss(s, t, 0.01) - nce_loss(s, 0.01)) for s in rng.uniform(-1, 1, (200, 4, 4)))
    dt = time.perf_counter() - t0
    criterion("C4 saturated teacher", worst < 1e-3 and dt < 1, f"max gap {worst:.1e}, {dt:.2f}s")


def test_c5_pooler_laws(criterion):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    ok = True
    for _ in range(1000):
        m = int(rng.integers(1, 6))
        b = int(rng.integers(1, 9))
        mats = [rng.uniform(-1, 1, (b, b)) for _ in range(m)]
        perm = rng.permutation(m)
        pooled = {}
        for kind in ("min", "mean", "max"):
            pooled[kind] = pool_teacher_matrices(mats, kind).scores
            ok &= np.array_equal(pooled[kind], pool_teacher_matrices([mats[i] for i in perm], kind).scores)
            ok &= np.array_equal(pool_teacher_matrices(mats[:1], kind).scores, mats[0])
        ok &= bool(np.all(pooled["min"] <= pooled["mean"]) and np.all(pooled["mean"] <= pooled["max"]))
    dt = time.perf_counter() - t0
    criterion("C5 pooler laws", ok and dt < 1, f"1000 ensembles exact={ok}, {dt:.2f}s")


def test_c6_metric_oracle(criterion):
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    agree = True
    for _ in range(1000):
        n = int(rng.integers(1, 101))
        v = l2_normalize_rows(rng.normal(size=(n, 4)))
        if rng.random() < 0.2:
            v[rng.integers(n, size=n // 2)] = v[0]  # force ties
        q = l2_normalize_rows(rng.normal(size=(1, 4)))[0]
        scores = v @ q
        brute = sorted(range(n), key=lambda j: (-scores[j], j))
        agree &= list(rank_videos(q, v)) == brute
        gt = int(rng.integers(n))
        k = int(rng.integers(1, n + 1))
        agree &= recall_at_k(np.array([brute]), [gt], k) == (100.0 if gt in brute[:k] else 0.0)
    chunks = 10  # 10 × 10⁴ single-query trials over 1000 candidates
    chance = 0.0
    for _ in range(chunks):
        ranks = rank_matrix(rng.random((10_000, 1000)))
        chance += recall_at_k(ranks, rng.integers(0, 1000, 10_000), 1) / chunks
    dt = time.perf_counter() - t0
    ok = agree and abs(chance - 0.1) <= 0.05 and dt < 30
    criterion("C6 metric oracle", ok, f"oracle agree={agree}, random R@1 {chance:.3f}%, {dt:.1f}s")


# --------------------------------------------------------------------------
# directional reproduction on the synthetic corpus (criteria 7 and 8)

SEEDS = (0, 1, 2)
TRAIN = dict(tau=0.05, tau_prime=0.1, lr=1e-3, epochs=5, embed_dim=32, batch_size=32)


@pytest.fixture(scope="module")
def synthetic_setup():
    spec = SyntheticSpec(n_records=2500, concept_dim=16, noise={"en": 0.1, "de": 0.5, "fr": 0.5, "zh": 0.5},
                         text_dim=32, video_dim=32)
    corpus = generate_synthetic(spec)
    split = make_split(corpus, 2000, 0, 500)
    t0 = time.perf_counter()
    teachers = train_teachers(corpus, split, [TrainConfig(**TRAIN, languages=corpus.languages, seed=s) for s in (100, 101)], "min")
    return corpus, split, teachers, time.perf_counter() - t0


def non_english_avg(corpus, split, teachers, **kw):
    scores = []
    times = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        model = train_student(corpus, split, teachers, TrainConfig(**TRAIN, languages=corpus.languages, seed=seed, **kw)).model
        times.append(time.perf_counter() - t0)
        rep = evaluate_retrieval([model], corpus, split.test, NON_EN, ks=(1,))
        scores.append(rep.average(1))
    return np.array(scores), max(times)


def test_c7_directional_reproduction(criterion, synthetic_setup):
    corpus, split, teachers, t_teach = synthetic_setup
    nce, t_a = non_english_avg(corpus, split, teachers, alpha=1.0)
    c2kd, t_b = non_english_avg(corpus, split, teachers, alpha=0.5, pooler="min")
    wins = int((c2kd >= nce).sum())
    slowest = max(t_a, t_b, t_teach)
    ok = c2kd.mean() > nce.mean() and wins >= 2 and slowest < 300
    criterion("C7 C2KD beats NCE", ok,
              f"non-en R@1 NCE {np.round(nce, 2).tolist()} mean {nce.mean():.2f} vs "
              f"C2KD {np.round(c2kd, 2).tolist()} mean {c2kd.mean():.2f}; wins {wins}/3; slowest run {slowest:.1f}s")


def test_c8_teacher_language(criterion, synthetic_setup):
    corpus, split, teachers, _ = synthetic_setup
    t0 = time.perf_counter()
    en, _ = non_english_avg(corpus, split, teachers, alpha=0.5, pooler="min", teacher_language="en")
    same, _ = non_english_avg(corpus, split, teachers, alpha=0.5, pooler="min", teacher_language="same")
    dt = time.perf_counter() - t0
    ok = en.mean() >= same.mean() and dt < 600
    criterion("C8 English teachers", ok, f"English teacher {en.mean():.2f} vs own-language teacher {same.mean():.2f}; {dt:.1f}s")


def test_c9_objective_sweep(criterion, tmp_path):
    out = tmp_path / "sweep"
    t0 = time.perf_counter()
    code = main(["sweep", "--config", str(CONFIGS / "sweep_objectives.json"), "--out", str(out), "--format", "csv"])
    dt = time.perf_counter() - t0
    rows = (out / "sweep.csv").read_text().splitlines()
    header = rows[0].split(",")
    recs = [dict(zip(header, r.split(","))) for r in rows[1:]]
    arms = sorted({r["method"] for r in recs})
    finite = True
    for arm in arms:
        for loss_csv in (out / arm / "students").glob("*_loss.csv"):
            for line in loss_csv.read_text().splitlines()[1:]:
                finite &= all(math.isfinite(float(x)) for x in line.split(","))
    means = {r["method"]: float(r["avg"]) for r in recs if r["metric"] == "R@1" and r["stat"] == "mean"}
    expected = ["cross-entropy", "no-distill", "smooth-l1", "softmax-smooth-l1"]
    ok = code == 0 and arms == expected and finite and dt < 600
    best = max(means, key=means.get)
    criterion("C9 objective sweep", ok,
              f"arms {arms}, finite={finite}, avg R@1 " + ", ".join(f"{k} {v:.1f}" for k, v in means.items())
              + f" (best: {best}, not gating); {dt:.1f}s")


def test_c10_determinism_and_serialization(criterion, tmp_path):
    doc = json.loads((CONFIGS / "c2kd_synthetic.json").read_text())
    doc["data"]["synthetic"]["n_records"] = 300
    doc["split"] = {"train": 200, "val": 20, "test": 80, "seed": 0}
    doc["teachers"]["epochs"] = doc["student"]["epochs"] = 1
    doc["seeds"] = [0, 1]
    cfg = parse_experiment(doc)
    t0 = time.perf_counter()
    m1, _ = run_experiment(cfg, tmp_path / "r1")
    m2, _ = run_experiment(cfg, tmp_path / "r2")
    same_manifest = m1 == m2 and m1["complete"] and not verify_manifest(tmp_path / "r1")

    corpus_path = tmp_path / "r1" / "corpus.c2kc"
    save_corpus(load_corpus(corpus_path), tmp_path / "again.c2kc")
    corpus_rt = corpus_path.read_bytes() == (tmp_path / "again.c2kc").read_bytes()
    corpus_rt &= corpus_to_bytes(generate_synthetic(cfg.synthetic)) == corpus_path.read_bytes()
    ckpt = tmp_path / "r1" / "students" / "seed_0.c2km"
    save_checkpoint(load_checkpoint(ckpt), tmp_path / "again.c2km")
    ckpt_rt = ckpt.read_bytes() == (tmp_path / "again.c2km").read_bytes()
    dt = time.perf_counter() - t0
    ok = same_manifest and corpus_rt and ckpt_rt and dt < 60
    criterion("C10 determinism", ok,
              f"{len(m1['artifacts'])} artifacts identical={same_manifest}, corpus rt={corpus_rt}, "
              f"checkpoint rt={ckpt_rt}; {dt:.1f}s")
