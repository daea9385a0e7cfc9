"""Text-to-video retrieval: ranking, recall@K and multi-run reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Corpus
from .errors import DataError, InputError, ParameterError
from .model import ModelParams, encode_texts, encode_videos


def rank_videos(query_emb, video_embs) -> np.ndarray:
    """Candidate indices by descending cosine similarity; ties go to the lower index."""
    v = np.asarray(video_embs, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise InputError("rank_videos needs a non-empty N×d candidate matrix")
    scores = v @ np.asarray(query_emb, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def rank_matrix(scores) -> np.ndarray:
    """Row-wise version of :func:`rank_videos` for a Q×N score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] == 0:
        raise InputError("rank_matrix needs a Q×N score matrix with N >= 1")
    return np.argsort(-s, axis=1, kind="stable")


def recall_at_k(rankings, ground_truth, k: int) -> float:
    """Percentage of queries whose ground-truth index is among the first ``k`` ranked."""
    r = np.asarray(rankings)
    if r.ndim == 1:
        r = r[None]
    gt = np.asarray(ground_truth).reshape(-1)
    n = r.shape[1]
    if k < 1 or k > n:
        raise ParameterError(f"K must lie in [1, {n}], got {k}")
    if gt.shape[0] != r.shape[0]:
        raise InputError(f"{gt.shape[0]} ground-truth indices for {r.shape[0]} queries")
    if gt.size and (gt.min() < 0 or gt.max() >= n):
        raise ParameterError("ground-truth index outside the candidate range")
    if r.shape[0] == 0:
        raise InputError("no queries to score")
    hits = (r[:, :k] == gt[:, None]).any(axis=1)
    return 100.0 * float(hits.mean())


@dataclass
class RetrievalReport:
    languages: tuple[str, ...]
    ks: tuple[int, ...]
    runs: list[dict[str, dict[int, float]]] = field(default_factory=list)

    def values(self, lang: str, k: int) -> np.ndarray:
        return np.array([run[lang][k] for run in self.runs])

    def mean(self, lang: str, k: int) -> float:
        return float(self.values(lang, k).mean())

    def std(self, lang: str, k: int) -> float:
        v = self.values(lang, k)
        return float(v.std(ddof=1)) if v.size > 1 else 0.0

    def run_average(self, run: int, k: int, languages: Sequence[str] | None = None) -> float:
        langs = languages or self.languages
        return float(np.mean([self.runs[run][lang][k] for lang in langs]))

    def average(self, k: int, languages: Sequence[str] | None = None) -> float:
        """Language-average of the cross-run means."""
        langs = languages or self.languages
        return float(np.mean([self.mean(lang, k) for lang in langs]))

    def rows(self, method: str = "", setting: str = "") -> list[dict]:
        out = []
        for k in self.ks:
            labels = [(f"run{i}", i) for i in range(len(self.runs))] + [("mean", None), ("std", None)]
            for label, idx in labels:
                row = {"method": method, "setting": setting, "metric": f"R@{k}", "stat": label}
                for lang in self.languages:
                    if idx is not None:
                        row[lang] = self.runs[idx][lang][k]
                    elif label == "mean":
                        row[lang] = self.mean(lang, k)
                    else:
                        row[lang] = self.std(lang, k)
                if idx is not None:
                    row["avg"] = self.run_average(idx, k)
                elif label == "mean":
                    row["avg"] = self.average(k)
                else:
                    row["avg"] = float(np.std([self.run_average(i, k) for i in range(len(self.runs))], ddof=1)) if len(self.runs) > 1 else 0.0
                out.append(row)
        return out

    def to_csv(self, method: str = "", setting: str = "") -> str:
        buf = io.StringIO()
        write_rows_csv(buf, self.rows(method, setting))
        return buf.getvalue()

    def to_table(self, method: str = "", setting: str = "") -> str:
        header = ["Method", "Set.", "Metric"] + list(self.languages) + ["Avg"]
        lines = [header]
        for k in self.ks:
            cells = [method, setting, f"R@{k}"]
            cells += [f"{self.mean(lang, k):.1f}" for lang in self.languages]
            cells.append(f"{self.average(k):.1f}")
            lines.append(cells)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines)


def write_rows_csv(fh, rows: list[dict]) -> None:
    if not rows:
        return
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def embed_split(model: ModelParams, corpus: Corpus, ids: Sequence[int], languages: Sequence[str], chunk: int = 256):
    """Unit video embeddings and per-language caption embeddings for ``ids``."""
    videos = []
    texts: dict[str, list[np.ndarray]] = {lang: [] for lang in languages}
    for start in range(0, len(ids), chunk):
        recs = [corpus[i] for i in ids[start : start + chunk]]
        videos.append(encode_videos(model.video, [r.frames for r in recs])[0])
        for lang in languages:
            caps = []
            for r in recs:
                if lang not in r.captions:
                    raise DataError(f"record {r.id} has no '{lang}' caption")
                caps.append(r.captions[lang])
            texts[lang].append(encode_texts(model.text, caps)[0])
    return np.concatenate(videos), {lang: np.concatenate(v) for lang, v in texts.items()}


def evaluate_model(model: ModelParams, corpus: Corpus, ids: Sequence[int], languages: Sequence[str], ks=(1, 5, 10)) -> dict[str, dict[int, float]]:
    ids = list(ids)
    if not ids:
        raise InputError("evaluation split is empty")
    ks = tuple(k for k in ks)
    video, texts = embed_split(model, corpus, ids, languages)
    gt = np.arange(len(ids))
    out = {}
    for lang in languages:
        ranks = rank_matrix(texts[lang] @ video.T)
        # with fewer candidates than K every query is a hit
        out[lang] = {k: recall_at_k(ranks, gt, min(k, len(ids))) for k in ks}
    return out


def evaluate_retrieval(models, corpus: Corpus, ids: Sequence[int], languages: Sequence[str], ks=(1, 5, 10)) -> RetrievalReport:
    """One run per model; the report aggregates them as mean ± std."""
    if isinstance(models, ModelParams):
        models = [models]
    report = RetrievalReport(tuple(languages), tuple(ks))
    for m in models:
        report.runs.append(evaluate_model(m, corpus, ids, languages, ks))
    return report
