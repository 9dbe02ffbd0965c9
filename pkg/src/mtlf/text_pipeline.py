"""Corpus ingestion, vocabulary, encoding, capping, and synthetic corpora.

Data files are UTF-8 JSON lines; each line holds "text" (single-sentence
tasks) or "text_a"/"text_b" (pair tasks) plus "label" (string for
classification, number for regression).  Everything here is a pure
function over immutable inputs, safe to call from parallel fold workers.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    IngestionError,
    LabelError,
    ParameterError,
    ParseError,
    RangeError,
)

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

TASK_KINDS = (
    "single_classification",
    "single_regression",
    "pair_classification",
    "pair_regression",
)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace/punctuation split; punctuation marks are tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, indent=0, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(token_to_id={k: int(v) for k, v in json.loads(text).items()})


@dataclass(frozen=True)
class RawExample:
    text_a: str
    text_b: str | None
    label: int | float


@dataclass(frozen=True)
class EncodedExample:
    token_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    label: int | float


@dataclass(frozen=True)
class DatasetManifest:
    """One JSON document describing a dataset on disk."""

    name: str
    task_kind: str
    path: str
    labels: tuple[str, ...] | None = None  # classification
    value_range: tuple[float, float] | None = None  # regression
    cap: int | None = None
    domain: str = "in_domain"

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task_kind '{self.task_kind}'")
        if self.is_classification:
            if not self.labels or len(self.labels) < 2:
                raise ConfigError(f"manifest '{self.name}' needs >=2 class labels")
        else:
            if self.value_range is None or not all(np.isfinite(self.value_range)):
                raise ConfigError(f"manifest '{self.name}' needs a finite value range")
            if self.value_range[0] >= self.value_range[1]:
                raise ConfigError(f"manifest '{self.name}' range must be increasing")
        if self.cap is not None and self.cap < 1:
            raise ConfigError(f"manifest '{self.name}' cap must be positive")
        if self.domain not in ("in_domain", "cross_domain"):
            raise ConfigError(f"manifest '{self.name}' domain tag invalid")

    @property
    def is_classification(self) -> bool:
        return self.task_kind.endswith("classification")

    @property
    def is_pair(self) -> bool:
        return self.task_kind.startswith("pair")

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetManifest":
        return cls(
            name=obj["name"],
            task_kind=obj["task_kind"],
            path=obj["path"],
            labels=tuple(obj["labels"]) if obj.get("labels") else None,
            value_range=tuple(obj["range"]) if obj.get("range") else None,
            cap=obj.get("cap"),
            domain=obj.get("domain", "in_domain"),
        )

    def to_dict(self) -> dict:
        out = {"name": self.name, "task_kind": self.task_kind, "path": self.path}
        if self.labels:
            out["labels"] = list(self.labels)
        if self.value_range:
            out["range"] = list(self.value_range)
        if self.cap is not None:
            out["cap"] = self.cap
        out["domain"] = self.domain
        return out


def build_vocab(corpus, min_freq: int = 1, max_size: int = 50_000) -> Vocab:
    """Rank tokens by (frequency desc, lexicographic asc) after the reserved ids."""
    if min_freq < 1:
        raise ParameterError("min_freq must be >= 1")
    if max_size <= len(RESERVED):
        raise ParameterError(f"max_size must exceed {len(RESERVED)}")
    counts: Counter[str] = Counter()
    seen_any = False
    for text in corpus:
        seen_any = True
        counts.update(tokenize(text))
    if not seen_any or not counts:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    table = {tok: i for i, tok in enumerate(RESERVED)}
    for tok in ranked[: max_size - len(RESERVED)]:
        table[tok] = len(table)
    return Vocab(token_to_id=table)


def encode_single(vocab: Vocab, text: str, max_len: int = 128) -> EncodedExample:
    """[CLS] tokens... [SEP], truncated to max_len, padded with [PAD]."""
    if max_len < 3:
        raise ParameterError("max_len must be >= 3 for single-sentence encoding")
    ids = [vocab.lookup(t) for t in tokenize(text)][: max_len - 2]
    seq = [CLS] + ids + [SEP]
    return _pad(seq, max_len)


def encode_pair(vocab: Vocab, text_a: str, text_b: str, max_len: int = 128) -> EncodedExample:
    """[CLS] a... [SEP] b... [SEP] with longest-first truncation, no segment ids."""
    if max_len < 5:
        raise ParameterError("max_len must be >= 5 for pair encoding")
    a = [vocab.lookup(t) for t in tokenize(text_a)]
    b = [vocab.lookup(t) for t in tokenize(text_b)]
    budget = max_len - 3
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    seq = [CLS] + a + [SEP] + b + [SEP]
    return _pad(seq, max_len)


def _pad(seq: list[int], max_len: int) -> EncodedExample:
    mask = [1] * len(seq) + [0] * (max_len - len(seq))
    ids = seq + [PAD] * (max_len - len(seq))
    return EncodedExample(token_ids=tuple(ids), attention_mask=tuple(mask), label=0)


def encode_examples(
    vocab: Vocab, examples, task_kind: str, max_len: int = 128
) -> list[EncodedExample]:
    """Encode raw examples for one task, carrying labels through."""
    pair = task_kind.startswith("pair")
    out = []
    for ex in examples:
        if pair:
            enc = encode_pair(vocab, ex.text_a, ex.text_b or "", max_len)
        else:
            enc = encode_single(vocab, ex.text_a, max_len)
        out.append(
            EncodedExample(
                token_ids=enc.token_ids, attention_mask=enc.attention_mask, label=ex.label
            )
        )
    return out


def load_dataset(manifest: DatasetManifest) -> list[RawExample]:
    """Parse and label-validate a JSONL dataset, preserving file order.

    Classification labels are mapped to class indices via the manifest's
    label list; regression labels are validated against the declared range
    and normalized to [0, 1].
    """
    path = Path(manifest.path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    label_index = (
        {lab: i for i, lab in enumerate(manifest.labels)} if manifest.is_classification else None
    )
    lo, hi = manifest.value_range if manifest.value_range else (0.0, 1.0)
    out: list[RawExample] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            if manifest.is_pair:
                if "text_a" not in obj or "text_b" not in obj:
                    raise ParseError(f"{path}:{lineno}: pair task needs text_a and text_b")
                text_a, text_b = str(obj["text_a"]), str(obj["text_b"])
            else:
                if "text" not in obj:
                    raise ParseError(f"{path}:{lineno}: single task needs a text field")
                text_a, text_b = str(obj["text"]), None
            if "label" not in obj:
                raise ParseError(f"{path}:{lineno}: missing label")
            raw_label = obj["label"]
            if manifest.is_classification:
                if str(raw_label) not in label_index:
                    raise LabelError(
                        f"{path}:{lineno}: label '{raw_label}' not in {list(manifest.labels)}"
                    )
                label: int | float = label_index[str(raw_label)]
            else:
                try:
                    value = float(raw_label)
                except (TypeError, ValueError) as e:
                    raise ParseError(f"{path}:{lineno}: non-numeric regression label") from e
                if not (lo <= value <= hi):
                    raise RangeError(
                        f"{path}:{lineno}: label {value} outside declared range [{lo}, {hi}]"
                    )
                label = (value - lo) / (hi - lo)
            out.append(RawExample(text_a=text_a, text_b=text_b, label=label))
    return out


def cap_dataset(examples: list, cap: int, rng: np.random.Generator) -> list:
    """Uniform seeded subsample of exactly ``cap`` examples, order preserved."""
    if cap < 1:
        raise ParameterError("cap must be >= 1")
    if len(examples) <= cap:
        return list(examples)
    keep = np.sort(rng.choice(len(examples), size=cap, replace=False))
    return [examples[i] for i in keep]


# -- synthetic corpora --------------------------------------------------------

POOL_SIZE = 12
FILLER_FLOOR = 30


@dataclass(frozen=True)
class SyntheticParams:
    """The generating parameters of a synthetic corpus."""

    task_kind: str
    n: int
    signal_strength: float
    sentence_len: int
    indicative_count: int
    pools: tuple[tuple[str, ...], tuple[str, ...]]
    fillers: tuple[str, ...]


def lexicon(vocab_size: int) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    """The latent lexicon shared by every synthetic task of a given vocab_size.

    Two class-indicative pools plus neutral fillers; auxiliary tasks built
    on the same pools transfer to the target task.
    """
    fillers_n = max(FILLER_FLOOR, vocab_size - 2 * POOL_SIZE)
    pool_a = tuple(f"aa{i}" for i in range(POOL_SIZE))
    pool_b = tuple(f"bb{i}" for i in range(POOL_SIZE))
    fillers = tuple(f"w{i}" for i in range(fillers_n))
    return pool_a, pool_b, fillers


def make_synthetic_corpus(
    task_kind: str,
    n: int,
    vocab_size: int = 200,
    signal_strength: float = 0.8,
    rng: np.random.Generator | None = None,
    sentence_len: int = 12,
    indicative_count: int = 3,
) -> tuple[list[RawExample], SyntheticParams]:
    """Lexically separable synthetic data over a shared latent lexicon.

    With signal_strength 1 a token-presence rule decides every label; with
    0 the labels are independent of the text.  Regression targets are
    noisy functions of indicative-token density.
    """
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task_kind '{task_kind}'")
    if n < 2:
        raise ParameterError("n must be >= 2")
    if not 0.0 <= signal_strength <= 1.0:
        raise ParameterError("signal_strength must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    pool_a, pool_b, fillers = lexicon(vocab_size)
    pools = (pool_a, pool_b)
    params = SyntheticParams(
        task_kind=task_kind,
        n=n,
        signal_strength=signal_strength,
        sentence_len=sentence_len,
        indicative_count=indicative_count,
        pools=pools,
        fillers=fillers,
    )

    def sentence(polarity: int, strength: float) -> str:
        words = list(rng.choice(fillers, size=sentence_len - indicative_count))
        source = pools[polarity] if rng.random() < strength else pools[rng.integers(2)]
        words.extend(rng.choice(source, size=indicative_count))
        rng.shuffle(words)
        return " ".join(words)

    def graded_sentence(level: float, strength: float) -> str:
        # indicative slots split between the pools according to ``level``
        words = list(rng.choice(fillers, size=sentence_len - indicative_count))
        if rng.random() < strength:
            n_b = int(round(level * indicative_count))
        else:
            n_b = int(rng.integers(indicative_count + 1))
        words.extend(rng.choice(pool_b, size=n_b))
        words.extend(rng.choice(pool_a, size=indicative_count - n_b))
        rng.shuffle(words)
        return " ".join(words)

    out: list[RawExample] = []
    for _ in range(n):
        if task_kind == "single_classification":
            y = int(rng.integers(2))
            out.append(RawExample(sentence(y, signal_strength), None, y))
        elif task_kind == "single_regression":
            level = float(rng.integers(indicative_count + 1)) / indicative_count
            value = min(1.0, max(0.0, level + float(rng.normal(scale=0.05))))
            out.append(RawExample(graded_sentence(level, signal_strength), None, value))
        elif task_kind == "pair_classification":
            # 3 classes from pool agreement: same pool, mixed, opposite
            y = int(rng.integers(3))
            pol_a = int(rng.integers(2))
            if y == 0:
                text_b = sentence(pol_a, signal_strength)
            elif y == 2:
                text_b = sentence(1 - pol_a, signal_strength)
            else:
                text_b = graded_sentence(0.5, signal_strength)
            out.append(RawExample(sentence(pol_a, signal_strength), text_b, y))
        else:  # pair_regression
            level = float(rng.integers(indicative_count + 1)) / indicative_count
            pol_a = int(rng.integers(2))
            text_a = sentence(pol_a, signal_strength)
            other = level if pol_a == 1 else 1.0 - level
            text_b = graded_sentence(other, signal_strength)
            value = min(1.0, max(0.0, level + float(rng.normal(scale=0.05))))
            out.append(RawExample(text_a, text_b, value))
    return out, params


def split_stratified(
    labels, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded stratified split; returns (kept indices, held-out indices).

    The held-out side gets round(n * fraction) items, allocated across
    classes by largest remainder so class balance is preserved.
    """
    labels = np.asarray(labels)
    n = len(labels)
    target = int(round(n * fraction))
    if target < 1 or target >= n:
        raise DataError(f"split fraction {fraction} leaves no usable partition of {n}")
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * fraction
    take = np.floor(exact).astype(int)
    remainder_order = np.argsort(-(exact - take))
    for idx in remainder_order:
        if take.sum() >= target:
            break
        take[idx] += 1
    held = []
    for cls, k in zip(classes, take):
        members = np.nonzero(labels == cls)[0]
        members = rng.permutation(members)
        held.extend(members[:k])
    held = np.sort(np.asarray(held, dtype=int))
    kept = np.setdiff1d(np.arange(n), held)
    return kept, held
