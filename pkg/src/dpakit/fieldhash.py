"""Prime-field weighted-sum hashing of labeled samples.

A hash is the dot product of a uniformly sampled weight vector with the
flattened sample (label appended as one extra coordinate), reduced mod a
prime p. Two independently sampled weight vectors give a pair (h1, h2)
whose joint collision probability for any fixed pair of distinct samples
is at most 1/p^2 (degree-1 Schwartz-Zippel bound per component).

The pair also yields a canonical total order on datasets: sort by
(h1, h2), falling back to raw content comparison only on hash collision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# Witness set proven complete for deterministic Miller-Rabin below 2^64.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)

MAX_SUPPORTED = 1 << 64

# Vectorized uint64 path is valid while (p-1) * max_value stays well below
# 2^64 with headroom to accumulate _CHUNK terms before reduction.
_CHUNK = 64
_VECTOR_P_LIMIT = 1 << 55
_VECTOR_VALUE_LIMIT = 256


class HashDimensionError(ValueError):
    """Sample dimension does not match the hash spec."""


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 2^64."""
    if n >= MAX_SUPPORTED:
        raise ValueError(f"primality check supports n < 2^64, got {n}")
    if n < 2:
        return False
    for small in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % small == 0:
            return n == small
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def first_prime_above(n: int) -> int:
    """Smallest prime strictly greater than n."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if n >= MAX_SUPPORTED:
        raise ValueError(f"n must be < 2^64, got {n}")
    candidate = n + 1
    if candidate <= 2:
        return 2
    if candidate % 2 == 0:
        if candidate == 2:
            return 2
        candidate += 1
    while not is_prime(candidate):
        candidate += 2
    return candidate


def sample_weights(seed: int, dim: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent uniform weight vectors over {0, ..., p-1}.

    Rejection sampling from PCG64 streams spawned from the seed; the two
    vectors come from independent child streams so they are independent
    but jointly reproducible.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    children = np.random.SeedSequence(seed).spawn(2)
    limit = (MAX_SUPPORTED // p) * p
    out = []
    for child in children:
        rng = np.random.Generator(np.random.PCG64(child))
        vals = np.empty(dim, dtype=np.uint64)
        filled = 0
        while filled < dim:
            draw = rng.integers(0, MAX_SUPPORTED, size=max(dim - filled, 1), dtype=np.uint64)
            draw = draw[draw < limit]
            take = min(draw.size, dim - filled)
            vals[filled:filled + take] = draw[:take]
            filled += take
        out.append(vals % np.uint64(p))
    return out[0], out[1]


@dataclass(frozen=True)
class HashSpec:
    """Field modulus, seed, and the two derived weight vectors.

    `dim` is the flattened input dimension plus one: the last coordinate
    weighs the label. Weights are always regenerated from the seed, never
    stored on disk.
    """

    prime: int
    seed: int
    dim: int
    weights_a: np.ndarray
    weights_b: np.ndarray

    @classmethod
    def create(cls, prime: int, seed: int, dim: int) -> HashSpec:
        if not is_prime(prime):
            raise ValueError(f"{prime} is not prime")
        wa, wb = sample_weights(seed, dim, prime)
        return cls(prime=prime, seed=seed, dim=dim, weights_a=wa, weights_b=wb)

    @classmethod
    def for_input_dim(cls, input_dim: int, seed: int,
                      prime: int | None = None) -> HashSpec:
        """Spec for flattened inputs of `input_dim` coordinates (+1 for label)."""
        if prime is None:
            prime = first_prime_above(1 << 48)
        return cls.create(prime, seed, input_dim + 1)

    def to_json(self) -> str:
        return json.dumps({"prime": self.prime, "seed": self.seed, "dim": self.dim},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> HashSpec:
        obj = json.loads(text)
        return cls.create(int(obj["prime"]), int(obj["seed"]), int(obj["dim"]))


@dataclass(frozen=True)
class HashPair:
    h1: int
    h2: int


def _weighted_sum_mod(values: np.ndarray, weights: np.ndarray, p: int) -> np.ndarray:
    """(values @ weights) mod p for a (N, D) batch, exact integer arithmetic."""
    n, d = values.shape
    if p < _VECTOR_P_LIMIT and (d == 0 or int(values.max(initial=0)) < _VECTOR_VALUE_LIMIT):
        acc = np.zeros(n, dtype=np.uint64)
        pu = np.uint64(p)
        vals = values.astype(np.uint64)
        w = weights.astype(np.uint64) % pu
        for start in range(0, d, _CHUNK):
            block = vals[:, start:start + _CHUNK] * w[start:start + _CHUNK]
            acc = (acc + block.sum(axis=1, dtype=np.uint64)) % pu
        return acc
    # Fallback for large moduli or out-of-range coordinates: Python ints.
    out = np.empty(n, dtype=object)
    wl = [int(x) % p for x in weights]
    for i in range(n):
        out[i] = sum(int(v) % p * w for v, w in zip(values[i], wl)) % p
    return out.astype(np.uint64)


def hash_batch(pixels: np.ndarray, labels: np.ndarray,
               spec: HashSpec) -> tuple[np.ndarray, np.ndarray]:
    """HashPair components for a whole dataset at once.

    `pixels` is (N, ...) integer-valued; each sample is flattened and the
    label appended before the weighted sum.
    """
    n = pixels.shape[0]
    flat = pixels.reshape(n, -1)
    if flat.shape[1] + 1 != spec.dim:
        raise HashDimensionError(
            f"sample dim {flat.shape[1]} + 1 != spec dim {spec.dim}")
    z = np.concatenate([flat, labels.reshape(n, 1)], axis=1)
    h1 = _weighted_sum_mod(z, spec.weights_a, spec.prime)
    h2 = _weighted_sum_mod(z, spec.weights_b, spec.prime)
    return h1, h2


def hash_labeled(x: np.ndarray, y: int, spec: HashSpec) -> HashPair:
    """Hash one labeled sample; x is the (possibly unflattened) input grid."""
    h1, h2 = hash_batch(np.asarray(x)[None, ...], np.asarray([y]), spec)
    return HashPair(int(h1[0]), int(h2[0]))


def _content_key(flat_row: np.ndarray, label: int) -> tuple[bytes, int]:
    return flat_row.astype(np.uint8).tobytes(), int(label)


def sort_by_hash(dataset, spec: HashSpec) -> np.ndarray:
    """Canonical permutation of sample indices.

    Primary key (h1, h2); the full lexicographic content comparison is
    only evaluated inside colliding hash groups, so the common case costs
    O(N(log N + D)).
    """
    h1, h2 = hash_batch(dataset.pixels, dataset.labels, spec)
    order = np.lexsort((h2, h1))
    if order.size <= 1:
        return order
    hs1, hs2 = h1[order], h2[order]
    same = (hs1[1:] == hs1[:-1]) & (hs2[1:] == hs2[:-1])
    if not same.any():
        return order
    flat = dataset.pixels.reshape(len(dataset.labels), -1)
    boundaries = np.flatnonzero(~same) + 1
    groups = np.split(order, boundaries)
    fixed = []
    for g in groups:
        if len(g) > 1:
            g = sorted(g, key=lambda i: _content_key(flat[i], dataset.labels[i]))
        fixed.extend(g)
    return np.asarray(fixed, dtype=order.dtype)


def collision_stats(dataset, spec: HashSpec, use_pair: bool = True) -> dict:
    """Count equal-hash pairs among distinct-content samples.

    Identical-content duplicates necessarily collide and are reported
    separately (`duplicate_pairs`), not as collisions. `use_pair=False`
    audits h1 alone, the mode used for small-prime statistical checks.
    """
    n = len(dataset.labels)
    h1, h2 = hash_batch(dataset.pixels, dataset.labels, spec)
    keys = np.stack([h1, h2], axis=1) if use_pair else h1.reshape(-1, 1)
    _, counts = np.unique(keys, axis=0, return_counts=True)
    equal_hash_pairs = int((counts * (counts - 1) // 2).sum())

    flat = dataset.pixels.reshape(n, -1)
    content_counts: dict[tuple[bytes, int], int] = {}
    for i in range(n):
        key = _content_key(flat[i], dataset.labels[i])
        content_counts[key] = content_counts.get(key, 0) + 1
    duplicate_pairs = sum(c * (c - 1) // 2 for c in content_counts.values())

    total_pairs = n * (n - 1) // 2
    return {
        "pairs_checked": total_pairs - duplicate_pairs,
        "collisions": equal_hash_pairs - duplicate_pairs,
        "duplicate_pairs": duplicate_pairs,
    }
