"""Deterministic assignment of training samples to disjoint partitions.

A sample lands in partition h1 mod k, so editing one sample touches
exactly one partition: the combinatorial premise of the certificate.
Only h1 partitions; h2 is reserved for sort tiebreak and collision audit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fieldhash import HashSpec, hash_batch


def assign(h1: int, k: int) -> int:
    """Partition index for a sample with first hash component h1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(h1) % k


@dataclass(frozen=True)
class PartitionPlan:
    k: int
    assignment: np.ndarray  # (N,) partition index per sample
    member_counts: np.ndarray  # (k,)

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == i)

    def to_json(self, hash_spec_ref: str = "") -> str:
        return json.dumps({"k": self.k, "hash_spec_ref": hash_spec_ref,
                           "member_counts": self.member_counts.tolist()},
                          sort_keys=True)


def build_plan(dataset, spec: HashSpec, k: int) -> PartitionPlan:
    """Partition every sample by h1 mod k; empty partitions are recorded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    h1, _ = hash_batch(dataset.pixels, dataset.labels, spec)
    assignment = (h1 % np.uint64(k)).astype(np.int64)
    counts = np.bincount(assignment, minlength=k)
    return PartitionPlan(k=k, assignment=assignment, member_counts=counts)
