"""Multilingual video-caption corpora: synthetic generation, binary I/O, batching.

Corpus file layout (all integers little-endian)::

    magic        4 bytes  b"C2KC"
    version      u16
    n_records    u32
    n_languages  u32
    video_dim    u32
    text_dim     u32
    languages    n_languages × (u32 byte length, UTF-8 tag)
    records      n_records × (
                    id u64,
                    n_frames u32, n_frames × video_dim f32,
                    per language in table order: n_tokens u32, n_tokens × text_dim f32
                 )

``n_tokens == 0`` marks a missing caption. Features are stored as float32 and
upcast to float64 on load; the synthetic generator rounds through float32 so
generated and reloaded corpora are bitwise identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, FormatError, ParameterError, SpecError

CORPUS_MAGIC = b"C2KC"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")

LANGUAGE_TAGS = ("en", "de", "fr", "cs", "zh", "ru", "vi", "sw", "es", "ja", "hi", "kn", "mr")


@dataclass
class CorpusRecord:
    id: int
    frames: np.ndarray
    captions: dict[str, np.ndarray]

    def __post_init__(self):
        if "en" not in self.captions:
            raise DataError(f"record {self.id} has no English caption")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"record {self.id} has an empty frame sequence")
        for lang, c in self.captions.items():
            if c.ndim != 2 or c.shape[0] < 1:
                raise DataError(f"record {self.id} has an empty '{lang}' caption")


@dataclass
class Corpus:
    records: list[CorpusRecord]
    languages: tuple[str, ...]
    video_dim: int
    text_dim: int
    _index: dict[int, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self._index = {r.id: i for i, r in enumerate(self.records)}
        if len(self._index) != len(self.records):
            raise DataError("duplicate record ids in corpus")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, record_id: int) -> CorpusRecord:
        return self.records[self._index[record_id]]

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.records]


@dataclass(frozen=True)
class SyntheticSpec:
    """Latent-concept corpus: every video and caption is a noisy view of one concept vector.

    ``noise`` maps language tag to translation-noise scale σ_l, applied to the
    concept before it is rendered into that language's token features.
    Non-English languages use mixing maps that deviate from the shared one by
    ``language_shift``.
    """

    n_records: int = 1000
    concept_dim: int = 16
    noise: Mapping[str, float] = field(default_factory=lambda: {"en": 0.1, "de": 0.5, "fr": 0.5, "zh": 0.5})
    text_dim: int = 32
    video_dim: int = 32
    text_len: int = 8
    video_len: int = 6
    video_noise: float = 0.5
    token_noise: float = 0.5
    language_shift: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_records", "concept_dim", "text_dim", "video_dim", "text_len", "video_len"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if "en" not in self.noise:
            raise SpecError("English must be one of the synthetic languages")
        if any(v < 0 for v in self.noise.values()):
            raise SpecError("noise scales must be non-negative")
        if any(self.noise["en"] > v for v in self.noise.values()):
            raise SpecError("English noise must not exceed any other language's noise")
        for name in ("video_noise", "token_noise", "language_shift"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be non-negative")

    @property
    def languages(self) -> tuple[str, ...]:
        return ("en",) + tuple(sorted(k for k in self.noise if k != "en"))


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise DataError("split partitions overlap")


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """Deterministic corpus from ``spec``; record i draws from a seed derived from (seed, i)."""
    spec.validate()
    langs = spec.languages
    maps_rng = np.random.default_rng([spec.seed, 0])
    dc = spec.concept_dim
    a_video = maps_rng.standard_normal((spec.video_dim, dc)) / np.sqrt(dc)
    a_shared = maps_rng.standard_normal((spec.text_dim, dc)) / np.sqrt(dc)
    a_text = {}
    for lang in langs:
        dev = maps_rng.standard_normal((spec.text_dim, dc)) / np.sqrt(dc)
        a_text[lang] = a_shared if lang == "en" else a_shared + spec.language_shift * dev
    records = []
    for i in range(spec.n_records):
        rng = np.random.default_rng([spec.seed, 1, i])
        z = rng.standard_normal(dc)
        frames = a_video @ z + spec.video_noise * rng.standard_normal((spec.video_len, spec.video_dim))
        captions = {}
        for lang in langs:
            concept = z + spec.noise[lang] * rng.standard_normal(dc)
            tokens = a_text[lang] @ concept + spec.token_noise * rng.standard_normal((spec.text_len, spec.text_dim))
            captions[lang] = _f32(tokens)
        records.append(CorpusRecord(id=i, frames=_f32(frames), captions=captions))
    return Corpus(records, langs, spec.video_dim, spec.text_dim)


def make_split(corpus: Corpus, n_train: int, n_val: int, n_test: int, seed: int = 0) -> Split:
    """Random disjoint split; any records beyond the three counts go to train."""
    n = len(corpus)
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test > n:
        raise ParameterError(f"split sizes {n_train}/{n_val}/{n_test} do not fit {n} records")
    order = np.random.default_rng([seed, 2]).permutation(n)
    ids = np.asarray(corpus.ids)[order]
    test = ids[:n_test]
    val = ids[n_test : n_test + n_val]
    train = ids[n_test + n_val :]
    return Split(tuple(sorted(map(int, train))), tuple(sorted(map(int, val))), tuple(sorted(map(int, test))))


# --------------------------------------------------------------------------
# serialization

def corpus_to_bytes(corpus: Corpus) -> bytes:
    tags = corpus.languages
    parts = [_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, len(corpus), len(tags), corpus.video_dim, corpus.text_dim)]
    for tag in tags:
        raw = tag.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    for r in corpus.records:
        parts.append(struct.pack("<QI", r.id, r.frames.shape[0]))
        parts.append(np.ascontiguousarray(r.frames, dtype="<f4").tobytes())
        for tag in tags:
            cap = r.captions.get(tag)
            if cap is None:
                parts.append(struct.pack("<I", 0))
            else:
                parts.append(struct.pack("<I", cap.shape[0]))
                parts.append(np.ascontiguousarray(cap, dtype="<f4").tobytes())
    return b"".join(parts)


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_to_bytes(corpus))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: struct.Struct, what: str):
        if self.pos + fmt.size > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = fmt.unpack_from(self.data, self.pos)
        self.pos += fmt.size
        return out

    def floats(self, rows: int, cols: int, what: str) -> np.ndarray:
        n = rows * cols
        if self.pos + 4 * n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        arr = np.frombuffer(self.data, dtype="<f4", count=n, offset=self.pos).astype(np.float64)
        self.pos += 4 * n
        return arr.reshape(rows, cols)

    def raw(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


_U32 = struct.Struct("<I")
_REC = struct.Struct("<QI")


def corpus_from_bytes(data: bytes) -> Corpus:
    rd = _Reader(data)
    if data[:4] != CORPUS_MAGIC:
        raise FormatError(f"bad corpus magic {data[:4]!r}", 0)
    _, version, n_records, n_langs, video_dim, text_dim = rd.unpack(_HEADER, "header")
    if version != CORPUS_VERSION:
        raise FormatError(f"unsupported corpus version {version}", 4)
    tags = []
    for _ in range(n_langs):
        (length,) = rd.unpack(_U32, "language tag length")
        at = rd.pos
        try:
            tags.append(rd.raw(length, "language tag").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("language tag is not valid UTF-8", at) from exc
    records = []
    for _ in range(n_records):
        at = rd.pos
        rid, n_frames = rd.unpack(_REC, "record header")
        frames = rd.floats(n_frames, video_dim, f"frames of record {rid}")
        captions = {}
        for tag in tags:
            (n_tok,) = rd.unpack(_U32, f"'{tag}' token count of record {rid}")
            if n_tok:
                captions[tag] = rd.floats(n_tok, text_dim, f"'{tag}' tokens of record {rid}")
        try:
            records.append(CorpusRecord(int(rid), frames, captions))
        except DataError as exc:
            raise FormatError(str(exc), at) from exc
    if rd.pos != len(data):
        raise FormatError(f"{len(data) - rd.pos} trailing bytes", rd.pos)
    return Corpus(records, tuple(tags), video_dim, text_dim)


def load_corpus(path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes())


def corpus_file_size(corpus: Corpus) -> int:
    """Byte size implied by the layout, computed from shapes alone."""
    size = _HEADER.size + sum(4 + len(t.encode("utf-8")) for t in corpus.languages)
    for r in corpus.records:
        size += 12 + 4 * r.frames.size
        for t in corpus.languages:
            cap = r.captions.get(t)
            size += 4 + (4 * cap.size if cap is not None else 0)
    return size


# --------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    ids: list[int]
    frames: list[np.ndarray]
    captions: dict[str, list[np.ndarray]]

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(corpus: Corpus, ids: Sequence[int], languages: Sequence[str]) -> Batch:
    recs = [corpus[i] for i in ids]
    captions = {}
    for lang in languages:
        caps = []
        for r in recs:
            if lang not in r.captions:
                raise DataError(f"record {r.id} has no '{lang}' caption")
            caps.append(r.captions[lang])
        captions[lang] = caps
    if "en" not in captions:
        captions["en"] = [r.captions["en"] for r in recs]
    return Batch(list(ids), [r.frames for r in recs], captions)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def batch_iterator(
    corpus: Corpus,
    ids: Sequence[int],
    batch_size: int,
    languages: Sequence[str],
    seed: int,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Shuffled full batches for one epoch; the order depends only on (seed, epoch)."""
    if batch_size < 2:
        raise ParameterError(f"batch size must be >= 2 for contrastive training, got {batch_size}")
    ids = list(ids)
    for lang in languages:
        for i in ids:
            if lang not in corpus[i].captions:
                raise DataError(f"record {i} has no '{lang}' caption")
    order = np.random.default_rng([seed, 3, epoch]).permutation(len(ids))
    for b in range(batches_per_epoch(len(ids), batch_size)):
        chunk = [ids[j] for j in order[b * batch_size : (b + 1) * batch_size]]
        yield make_batch(corpus, chunk, languages)
