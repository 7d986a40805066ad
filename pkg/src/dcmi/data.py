"""Multi-domain datasets: ingestion, splitting, down-sampling, DRS weights, synthetic data."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import MAX_LEN, Vocab, tokenize


@dataclass(frozen=True)
class Sample:
    id: str
    text: str
    label: int
    domain: int


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    n_classes: int
    domain_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "domain_names", tuple(self.domain_names))
        for s in self.samples:
            if not 0 <= s.label < self.n_classes:
                raise ValueError(f"sample {s.id}: label {s.label} outside [0, {self.n_classes})")
            if not 0 <= s.domain < self.n_domains:
                raise ValueError(f"sample {s.id}: domain {s.domain} outside [0, {self.n_domains})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_domains(self) -> int:
        return len(self.domain_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.intp)

    @property
    def domains(self) -> np.ndarray:
        return np.array([s.domain for s in self.samples], dtype=np.intp)

    @property
    def texts(self) -> list[str]:
        return [s.text for s in self.samples]

    def counts(self) -> np.ndarray:
        """``(M, C)`` table of samples per domain and class."""
        table = np.zeros((self.n_domains, self.n_classes), dtype=np.int64)
        for s in self.samples:
            table[s.domain, s.label] += 1
        return table

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.n_classes, self.domain_names)


def tokenize_dataset(dataset: Dataset, vocab: Vocab, max_len: int = MAX_LEN) -> list[list[int]]:
    # texts with no tokens fall back to a single unknown token
    return [tokenize(s.text, vocab, max_len) or [0] for s in dataset.samples]


# ----------------------------------------------------------------------------
# JSONL ingestion


def load_jsonl(path: str | Path) -> Dataset:
    """Read ``{"text": ..., "label": int, "domain": str}`` objects, one per line."""
    domain_ids: dict[str, int] = {}
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValueError(f"line {line_no}: expected a JSON object")
            for key in ("text", "label", "domain"):
                if key not in obj:
                    raise ValueError(f"line {line_no}: missing field {key!r}")
            text, label, domain = obj["text"], obj["label"], obj["domain"]
            if not isinstance(text, str):
                raise ValueError(f"line {line_no}: field 'text' must be a string")
            if isinstance(label, bool) or not isinstance(label, int) or label < 0:
                raise ValueError(f"line {line_no}: field 'label' must be a non-negative integer")
            if not isinstance(domain, str):
                raise ValueError(f"line {line_no}: field 'domain' must be a string")
            dom = domain_ids.setdefault(domain, len(domain_ids))
            samples.append(Sample(str(len(samples)), text, label, dom))
    if not samples:
        raise ValueError(f"{path}: no samples")
    n_classes = max(2, max(s.label for s in samples) + 1)
    return Dataset(tuple(samples), n_classes, tuple(domain_ids))


# ----------------------------------------------------------------------------
# splitting and down-sampling


def _cells(dataset: Dataset) -> dict[tuple[int, int], list[int]]:
    cells: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(dataset.samples):
        cells.setdefault((s.domain, s.label), []).append(i)
    return dict(sorted(cells.items()))


def _apportion(sizes: list[int], fraction: float, target: int, capacity: list[int]) -> list[int]:
    """Largest-remainder allocation of ``target`` items across cells, capped by capacity."""
    quotas = [n * fraction for n in sizes]
    alloc = [min(int(math.floor(q)), c) for q, c in zip(quotas, capacity)]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    remaining = target - sum(alloc)
    while remaining > 0:
        progressed = False
        for i in order:
            if remaining == 0:
                break
            if alloc[i] < capacity[i]:
                alloc[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return alloc


def split(
    dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified (domain, class) train/val/test partition.

    Global val/test sizes are ``round(N * fraction)``; every non-empty cell
    keeps at least one training sample, so singleton cells land in train.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    _, f_val, f_test = fractions
    rng = np.random.default_rng(seed)
    cells = _cells(dataset)
    members = [list(rng.permutation(idx)) for idx in cells.values()]
    sizes = [len(m) for m in members]
    n = len(dataset)
    n_val = _apportion(sizes, f_val, round(n * f_val), [s - 1 for s in sizes])
    n_test = _apportion(sizes, f_test, round(n * f_test), [s - 1 - v for s, v in zip(sizes, n_val)])
    train, val, test = [], [], []
    for m, v, t in zip(members, n_val, n_test):
        val += m[:v]
        test += m[v : v + t]
        train += m[v + t :]
    return tuple(dataset.subset(sorted(part)) for part in (train, val, test))


def downsample(dataset: Dataset, factor: float, seed: int = 0, which: str = "train") -> Dataset:
    """Keep ``ceil(n / factor)`` random samples of every non-empty (domain, class) cell."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if which not in ("train", "val"):
        raise ValueError(f"which must be 'train' or 'val', got {which!r}")
    rng = np.random.default_rng([seed, 0 if which == "train" else 1])
    keep: list[int] = []
    for idx in _cells(dataset).values():
        k = max(1, math.ceil(len(idx) / factor))
        keep += list(rng.permutation(idx)[:k])
    return dataset.subset(sorted(keep))


def drs_weights(labels, epoch: int, total_epochs: int, defer_fraction: float = 0.8) -> np.ndarray:
    """Per-sample sampling weights (summing to 1) for deferred class re-sampling.

    Uniform before ``defer_fraction * total_epochs``; afterwards each sample
    is weighted by the inverse frequency of its class.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.intp)
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if labels.size == 0:
        raise ValueError("no samples")
    if epoch < defer_fraction * total_epochs:
        return np.full(labels.size, 1.0 / labels.size)
    counts = np.bincount(labels)
    w = 1.0 / counts[labels]
    return w / w.sum()


# ----------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic multi-domain sentiment-like corpus.

    Each text mixes sentiment tokens (polarity fixed per similarity group and
    flipped for inverted domains), ambiguous tokens (polarity drawn per lexical
    cluster), tokens identifying the domain, topic tokens shared by the
    cluster, and label-free noise. Clusters default to the similarity groups;
    singleton clusters give every domain its own ambiguous polarity.
    """

    counts: list[int] | None = None
    n_domains: int | None = None
    head_size: int | None = None
    exponent: float = 1.0
    positive_rate: float | list[float] = 0.5
    groups: list[list[int]] | None = None
    clusters: list[list[int]] | None = None
    inverted: list[int] = field(default_factory=list)
    n_sentiment: int = 20
    n_ambiguous: int = 0
    n_domain_tokens: int = 5
    n_cluster_tokens: int = 0
    n_noise: int = 50
    sentiment_per_sample: int = 4
    ambiguous_per_sample: int = 0
    domain_tokens_per_sample: int = 2
    cluster_tokens_per_sample: int = 0
    noise_per_sample: int = 6
    purity: float = 0.8
    seed: int = 0
    domain_names: list[str] | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown synthetic spec field(s): {', '.join(unknown)}")
        return cls(**raw)

    def domain_counts(self) -> list[int]:
        if self.counts is not None:
            return [int(c) for c in self.counts]
        if self.n_domains is None or self.head_size is None:
            raise ValueError("give either counts or n_domains + head_size")
        return [max(1, round(self.head_size * (j + 1) ** -self.exponent)) for j in range(self.n_domains)]

    def rates(self) -> list[float]:
        m = len(self.domain_counts())
        if isinstance(self.positive_rate, (int, float)):
            return [float(self.positive_rate)] * m
        return [float(r) for r in self.positive_rate]

    def group_of(self) -> list[int]:
        return _owner(self.groups, len(self.domain_counts()))

    def cluster_of(self) -> list[int]:
        return _owner(self.clusters if self.clusters is not None else self.groups, len(self.domain_counts()))

    def validate(self) -> None:
        counts = self.domain_counts()
        m = len(counts)
        if m < 1:
            raise ValueError("need at least one domain")
        if any(c < 1 for c in counts):
            raise ValueError("every domain needs at least one sample")
        rates = self.rates()
        if len(rates) != m or any(not 0 < r < 1 for r in rates):
            raise ValueError("positive_rate must lie in (0, 1) for every domain")
        if any(not 0 <= j < m for j in self.inverted):
            raise ValueError("inverted domains must be valid domain ids")
        for label, parts in (("groups", self.groups), ("clusters", self.clusters)):
            if parts is not None and sorted(j for g in parts for j in g) != list(range(m)):
                raise ValueError(f"{label} must partition the domain ids")
        pairs = [
            ("n_sentiment", "sentiment_per_sample"),
            ("n_ambiguous", "ambiguous_per_sample"),
            ("n_domain_tokens", "domain_tokens_per_sample"),
            ("n_cluster_tokens", "cluster_tokens_per_sample"),
            ("n_noise", "noise_per_sample"),
        ]
        for vocab_field, per_sample in pairs:
            if getattr(self, per_sample) > 0 and getattr(self, vocab_field) < 1:
                raise ValueError(f"{per_sample} > 0 needs {vocab_field} >= 1")
        for vocab_field in ("n_sentiment", "n_ambiguous"):
            n = getattr(self, vocab_field)
            if n and n < 2:
                raise ValueError(f"{vocab_field} must be 0 or >= 2 (both polarities)")
        if not 0.5 <= self.purity <= 1.0:
            raise ValueError("purity must lie in [0.5, 1]")
        total = (
            self.sentiment_per_sample + self.ambiguous_per_sample + self.domain_tokens_per_sample
            + self.cluster_tokens_per_sample + self.noise_per_sample
        )
        if total < 1:
            raise ValueError("samples need at least one token")
        if self.domain_names is not None and len(self.domain_names) != m:
            raise ValueError("domain_names must name every domain")


def _owner(parts: list[list[int]] | None, m: int) -> list[int]:
    owner = [0] * m
    for g, members in enumerate(parts or [list(range(m))]):
        for j in members:
            owner[j] = g
    return owner


def _balanced_polarity(n: int, rng: np.random.Generator | None) -> np.ndarray:
    pol = np.array([1] * (n // 2) + [0] * (n - n // 2))
    return pol if rng is None else rng.permutation(pol)


def polarity_maps(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Effective sentiment polarity per domain ``(M, n_sentiment)`` and ambiguous ``(M, n_ambiguous)``.

    Polarity 1 means the token signals the positive class in that domain.
    Group 0 uses a fixed layout; other groups draw theirs from the spec seed.
    """
    rng = np.random.default_rng([spec.seed, 1])
    owner = spec.group_of()
    n_groups = max(owner) + 1
    group_pol = [_balanced_polarity(spec.n_sentiment, None if g == 0 else rng) for g in range(n_groups)]
    m = len(owner)
    sent = np.array([group_pol[owner[j]] for j in range(m)]).reshape(m, spec.n_sentiment)
    for j in spec.inverted:
        sent[j] = 1 - sent[j]
    cluster = spec.cluster_of()
    cluster_pol = [_balanced_polarity(spec.n_ambiguous, rng) for _ in range(max(cluster) + 1)]
    amb = np.array([cluster_pol[cluster[j]] for j in range(m)]).reshape(m, spec.n_ambiguous)
    return sent, amb


def _draw_polar(rng, n_draw: int, polarity: np.ndarray, label: int, purity: float, prefix: str) -> list[str]:
    agree = np.flatnonzero(polarity == label)
    disagree = np.flatnonzero(polarity != label)
    out = []
    for _ in range(n_draw):
        pool = agree if rng.random() < purity else disagree
        out.append(f"{prefix}{rng.choice(pool)}")
    return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    counts = spec.domain_counts()
    rates = spec.rates()
    cluster = spec.cluster_of()
    sent_pol, amb_pol = polarity_maps(spec)
    rng = np.random.default_rng([spec.seed, 0])
    names = spec.domain_names or [f"domain{j}" for j in range(len(counts))]

    samples = []
    for j, (n, rate) in enumerate(zip(counts, rates)):
        n_pos = int(round(rate * n))
        if n >= 2:
            n_pos = min(max(n_pos, 1), n - 1)
        labels = rng.permutation(np.array([1] * n_pos + [0] * (n - n_pos)))
        for y in labels:
            y = int(y)
            toks = _draw_polar(rng, spec.sentiment_per_sample, sent_pol[j], y, spec.purity, "s")
            toks += _draw_polar(rng, spec.ambiguous_per_sample, amb_pol[j], y, spec.purity, "a")
            toks += [f"d{j}_{k}" for k in rng.integers(0, max(spec.n_domain_tokens, 1), spec.domain_tokens_per_sample)]
            toks += [f"c{cluster[j]}_{k}" for k in rng.integers(0, max(spec.n_cluster_tokens, 1), spec.cluster_tokens_per_sample)]
            toks += [f"n{k}" for k in rng.integers(0, max(spec.n_noise, 1), spec.noise_per_sample)]
            order = rng.permutation(len(toks))
            text = " ".join(toks[i] for i in order)
            samples.append(Sample(f"s{len(samples):06d}", text, y, j))
    return Dataset(tuple(samples), 2, tuple(names))
