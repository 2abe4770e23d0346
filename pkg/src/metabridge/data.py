"""Records, episodes, category splits, vocabulary and the synthetic task generator.

Label polarity throughout the package: ``1`` means the attribute value is
INCORRECT for the product, ``0`` means it is correct.  "Incorrect" is the
positive class for every metric.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .seeding import derive_seed

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
PAD_ID, CLS_ID, UNK_ID = 0, 1, 2
RESERVED = (PAD, CLS, UNK)


class DataError(ValueError):
    """Raised for malformed records, files or infeasible sampling requests."""


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class ProductRecord:
    category_id: str
    product_id: str
    profile: str
    value: str
    label: int | None = None

    def __post_init__(self):
        if not self.profile.strip():
            raise DataError(f"empty profile for product {self.product_id!r}")
        if not self.value.strip():
            raise DataError(f"empty value for product {self.product_id!r}")
        if self.label is not None and (isinstance(self.label, bool) or self.label not in (0, 1)):
            raise DataError(f"label must be 0, 1 or absent, got {self.label!r}")

    def to_json(self) -> dict:
        return {
            "category": self.category_id,
            "product_id": self.product_id,
            "profile": self.profile,
            "value": self.value,
            "label": self.label,
        }


@dataclass(frozen=True)
class Episode:
    """One category's unlabeled support set and labeled query set."""

    category_id: str
    support: tuple[ProductRecord, ...]
    query: tuple[ProductRecord, ...]

    def __post_init__(self):
        if not self.support or not self.query:
            raise DataError("support and query sets must both be non-empty")
        for r in self.support + self.query:
            if r.category_id != self.category_id:
                raise DataError(f"record {r.product_id!r} is not in category {self.category_id!r}")
        for r in self.query:
            if r.label is None:
                raise DataError(f"query record {r.product_id!r} has no label")
        overlap = {r.product_id for r in self.support} & {r.product_id for r in self.query}
        if overlap:
            raise DataError(f"support and query share products: {sorted(overlap)}")

    @property
    def query_labels(self) -> list[int]:
        return [int(r.label) for r in self.query]


@dataclass
class DatasetSplit:
    train: dict[str, list[ProductRecord]] = field(default_factory=dict)
    val: dict[str, list[ProductRecord]] = field(default_factory=dict)
    test: dict[str, list[ProductRecord]] = field(default_factory=dict)

    def __post_init__(self):
        t, v, s = set(self.train), set(self.val), set(self.test)
        if t & v or t & s or v & s:
            raise DataError("split parts must have pairwise disjoint categories")

    def part(self, name: str) -> dict[str, list[ProductRecord]]:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split part {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------- JSONL io

_REQUIRED = ("category", "profile", "value", "product_id")


def parse_record(obj: Mapping, line_no: int = 0) -> ProductRecord:
    where = f" at line {line_no}" if line_no else ""
    if not isinstance(obj, Mapping):
        raise DataError(f"expected a JSON object{where}")
    for key in _REQUIRED:
        if key not in obj:
            raise DataError(f"missing field {key}{where}")
        if not isinstance(obj[key], str):
            raise DataError(f"field {key} must be a string{where}")
    label = obj.get("label")
    if label is not None and (isinstance(label, bool) or label not in (0, 1)):
        raise DataError(f"unknown label value {label!r}{where}")
    try:
        return ProductRecord(obj["category"], obj["product_id"], obj["profile"], obj["value"],
                             None if label is None else int(label))
    except DataError as exc:
        raise DataError(f"{exc}{where}") from None


def load_jsonl(path: str | Path) -> list[ProductRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed JSON at line {i}: {exc.msg}") from None
            records.append(parse_record(obj, i))
    return records


def write_jsonl(records: Iterable[ProductRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def group_by_category(records: Iterable[ProductRecord]) -> dict[str, list[ProductRecord]]:
    groups: dict[str, list[ProductRecord]] = {}
    for r in records:
        groups.setdefault(r.category_id, []).append(r)
    return dict(sorted(groups.items()))


# ------------------------------------------------------------------ splits

def _largest_remainder(total: int, ratio: Sequence[int]) -> list[int]:
    weight = sum(ratio)
    quotas = [total * r / weight for r in ratio]
    counts = [int(np.floor(q)) for q in quotas]
    # ties on the remainder go to the earlier part
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_category(records: Iterable[ProductRecord], ratio: Sequence[int] = (3, 1, 6),
                      seed: int = 0) -> DatasetSplit:
    """Partition categories (not records) into train/val/test in ``ratio``.

    Categories are sorted, shuffled with a seeded RNG, then cut with
    largest-remainder rounding, so the result depends only on the category
    set, the ratio and the seed.
    """
    ratio = tuple(int(r) for r in ratio)
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise DataError(f"ratio components must be three positive integers, got {ratio}")
    groups = group_by_category(records)
    names = sorted(groups)
    if len(names) < len(ratio):
        raise DataError(f"need at least {len(ratio)} categories, got {len(names)}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    names = [names[i] for i in rng.permutation(len(names))]
    counts = _largest_remainder(len(names), ratio)
    # every part must receive at least one category
    for i in range(3):
        while counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    a, b = counts[0], counts[0] + counts[1]
    pick = lambda ns: {n: groups[n] for n in sorted(ns)}
    return DatasetSplit(train=pick(names[:a]), val=pick(names[a:b]), test=pick(names[b:]))


def sample_episode(part: Mapping[str, Sequence[ProductRecord]], category_id: str,
                   n_support: int, n_query: int | None, seed: int) -> Episode:
    """Draw support uniformly without replacement, then query from the remainder.

    ``n_query=None`` takes every remaining labeled record as the query set.
    """
    if n_support < 1:
        raise DataError(f"n_support must be >= 1, got {n_support}")
    if n_query is not None and n_query < 1:
        raise DataError(f"n_query must be >= 1, got {n_query}")
    if category_id not in part:
        raise DataError(f"unknown category {category_id!r}")
    records = list(part[category_id])
    labeled = sum(r.label is not None for r in records)
    need = n_support + (n_query or 1)
    if len(records) < need:
        raise DataError(f"category {category_id!r} has {len(records)} records "
                        f"({labeled} labeled), need {need}")
    rng = np.random.default_rng(derive_seed(seed, "episode", *category_id.encode("utf-8")))
    perm = rng.permutation(len(records))
    support = tuple(records[i] for i in sorted(perm[:n_support]))
    rest = [records[i] for i in perm[n_support:] if records[i].label is not None]
    if n_query is None:
        query = sorted(rest, key=lambda r: r.product_id)
    else:
        if len(rest) < n_query:
            raise DataError(f"category {category_id!r} has {len(rest)} labeled records outside "
                            f"the support set, need {n_query}")
        query = rest[:n_query]
    stripped = tuple(ProductRecord(r.category_id, r.product_id, r.profile, r.value, None)
                     for r in support)
    return Episode(category_id, stripped, tuple(query))


# ------------------------------------------------------------------- vocab

class Vocab:
    """Token to id map with ``[PAD]=0``, ``[CLS]=1``, ``[UNK]=2`` reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise DataError("vocabulary must start with [PAD], [CLS], [UNK]")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """``[CLS]`` followed by token ids, truncated to ``max_len`` keeping ``[CLS]``."""
        ids = [CLS_ID] + [self[t] for t in tokenize(text)]
        return ids[:max_len] if max_len else ids

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, t in enumerate(self.itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                tok, _, idx = line.rstrip("\n").rpartition("\t")
                if not tok or not idx.isdigit() or int(idx) != n - 1:
                    raise DataError(f"bad vocab line {n} in {path}")
                tokens.append(tok)
        return cls(tokens)


def build_vocab(records: Iterable[ProductRecord], min_freq: int = 1) -> Vocab:
    records = list(records)
    if not records:
        raise DataError("cannot build a vocabulary from zero records")
    counts = Counter()
    for r in records:
        counts.update(tokenize(r.profile))
        counts.update(tokenize(r.value))
    for t in RESERVED:
        counts.pop(t.lower(), None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


# --------------------------------------------------------------- synthetic

N_SHARED_ATTRS = 40


def _value_phrases(cat: int, vocab_size: int) -> list[list[str]]:
    n_value_tokens = max(4, vocab_size // 3)
    toks = [f"c{cat}v{j}" for j in range(n_value_tokens)]
    # pair up the tail into two-token phrases, keep the head single
    half = n_value_tokens // 2
    phrases = [[t] for t in toks[:half]]
    rest = toks[half:]
    phrases += [rest[i:i + 2] for i in range(0, len(rest), 2)]
    return phrases


def _filler(cat: int, vocab_size: int) -> list[str]:
    return [f"c{cat}w{j}" for j in range(vocab_size - max(4, vocab_size // 3))]


def shared_attribute_tokens() -> list[str]:
    """Tokens of other attributes (claims, sizes, packaging) shared by all categories."""
    return [f"attr{j}" for j in range(N_SHARED_ATTRS)]


def category_token_pool(cat: int, vocab_size: int) -> set[str]:
    """Private tokens of synthetic category number ``cat``."""
    return {t for p in _value_phrases(cat, vocab_size) for t in p} | set(_filler(cat, vocab_size))


def synthetic_rule(record: ProductRecord) -> int:
    """Ground-truth rule of the synthetic generator.

    Correct (0) iff every value token occurs in the profile and every value
    token belongs to the category's value role; shared attribute tokens in
    the value are "attribute abuse" and therefore incorrect.
    """
    profile = set(tokenize(record.profile))
    value = tokenize(record.value)
    in_profile = all(t in profile for t in value)
    right_role = all(not t.startswith("attr") for t in value)
    return 0 if in_profile and right_role else 1


def generate_synthetic(n_categories: int, products_per_category: int, vocab_size: int = 30,
                       noise_rate: float = 0.0, seed: int = 0,
                       mismatch_fraction: float = 0.2) -> list[ProductRecord]:
    """Generate labeled attribute-validation records over disjoint category vocabularies.

    Each profile holds filler words from the category's private pool, one
    valid value phrase of the category and two shared attribute tokens.
    Correct records use the profile's own value phrase.  Incorrect records
    use either one of the shared attribute tokens present in the profile
    (attribute abuse) or, with probability ``mismatch_fraction``, another
    value phrase of the same category that is absent from the profile.
    Labels are balanced 50/50 per category (odd counts round toward
    correct); ``noise_rate`` then flips each label independently.
    """
    if n_categories < 1 or products_per_category < 1:
        raise DataError("n_categories and products_per_category must be positive")
    if vocab_size < 12:
        raise DataError(f"vocab_size must be >= 12, got {vocab_size}")
    if not 0.0 <= noise_rate < 0.5:
        raise DataError(f"noise_rate must lie in [0, 0.5), got {noise_rate}")
    if not 0.0 <= mismatch_fraction <= 1.0:
        raise DataError(f"mismatch_fraction must lie in [0, 1], got {mismatch_fraction}")
    attrs = shared_attribute_tokens()
    records = []
    for c in range(n_categories):
        rng = np.random.default_rng(derive_seed(seed, "synthetic", c))
        phrases = _value_phrases(c, vocab_size)
        filler = _filler(c, vocab_size)
        n_bad = products_per_category // 2
        labels = np.array([1] * n_bad + [0] * (products_per_category - n_bad))
        rng.shuffle(labels)
        for i, lab in enumerate(labels):
            own = phrases[rng.integers(len(phrases))]
            extras = [attrs[j] for j in rng.choice(len(attrs), size=2, replace=False)]
            words = [filler[j] for j in rng.choice(len(filler), size=rng.integers(3, 8), replace=False)]
            segments = [list(own)] + [[a] for a in extras] + [[w] for w in words]
            order = rng.permutation(len(segments))
            profile = " ".join(t for k in order for t in segments[k])
            if lab == 0:
                value = own
            elif rng.random() < mismatch_fraction:
                others = [p for p in phrases if not set(p) <= set(profile.split())]
                value = others[rng.integers(len(others))]
            else:
                value = [extras[rng.integers(2)]]
            label = int(lab)
            if noise_rate and rng.random() < noise_rate:
                label = 1 - label
            records.append(ProductRecord(f"cat{c:03d}", f"cat{c:03d}-p{i:04d}", profile,
                                         " ".join(value), label))
    return records
