"""Complexity-ordered validation buckets carved out of the training set.

A sample's complexity is the length of its longest phrase.  Length classes are
kept whole and handed to buckets by where their cumulative count falls among
the K equal-size quantiles of the training set.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

from .errors import DataError
from .synth import Sample

log = logging.getLogger(__name__)


def longest_phrase_length(sample: Sample) -> int:
    if not sample.phrase_lengths:
        raise DataError(f"sample {sample.id} carries no phrase annotations")
    longest = max(sample.phrase_lengths)
    if longest < 1:
        raise DataError(f"sample {sample.id} has non-positive phrase lengths")
    return int(longest)


@dataclass(frozen=True)
class ComplexityProfile:
    counts: dict[int, int]  # S: length -> number of samples
    cumulative: dict[int, int]  # c(L) = sum of S(j) for j <= L
    total: int


def count_by_length(samples: list[Sample]) -> ComplexityProfile:
    if not samples:
        raise DataError("cannot profile an empty dataset")
    return profile_from_counts(Counter(longest_phrase_length(s) for s in samples))


def profile_from_counts(counts: dict[int, int]) -> ComplexityProfile:
    counts = {int(k): int(v) for k, v in sorted(counts.items()) if v > 0}
    if not counts:
        raise DataError("cannot profile an empty dataset")
    cumulative, running = {}, 0
    for length, n in counts.items():
        running += n
        cumulative[length] = running
    return ComplexityProfile(counts, cumulative, running)


@dataclass(frozen=True)
class ValidationPartition:
    k: int
    length_to_bucket: dict[int, int]  # 1-based bucket index
    buckets: tuple[tuple[str, ...], ...] = ()  # sample ids per bucket, filled by partition()

    def bucket_of_length(self, length: int) -> int:
        try:
            return self.length_to_bucket[length]
        except KeyError:
            raise DataError(f"no bucket holds phrase length {length}") from None

    def bucket_of(self, sample: Sample) -> int:
        return self.bucket_of_length(longest_phrase_length(sample))

    def length_range(self, i: int) -> tuple[int, int] | None:
        lengths = [L for L, b in self.length_to_bucket.items() if b == i]
        return (min(lengths), max(lengths)) if lengths else None

    def sizes(self) -> list[int]:
        return [len(b) for b in self.buckets]

    def empty_buckets(self) -> list[int]:
        return [i for i in range(1, self.k + 1) if i not in self.length_to_bucket.values()]


def assign_buckets(profile: ComplexityProfile, k: int) -> ValidationPartition:
    """Length class L goes to bucket min(K, floor((c(L) - 1) * K / |D|) + 1)."""
    if k < 1:
        raise ValueError(f"K must be at least 1, got {k}")
    total = profile.total
    mapping = {L: min(k, (c - 1) * k // total + 1) for L, c in profile.cumulative.items()}
    part = ValidationPartition(k, mapping)
    for i in part.empty_buckets():
        log.warning("validation bucket %d is empty; its meta-weight-net gets no meta updates", i)
    return part


def partition(samples: list[Sample], k: int) -> ValidationPartition:
    part = assign_buckets(count_by_length(samples), k)
    ids: list[list[str]] = [[] for _ in range(k)]
    for s in samples:
        ids[part.bucket_of(s) - 1].append(s.id)
    return ValidationPartition(k, part.length_to_bucket, tuple(tuple(b) for b in ids))
