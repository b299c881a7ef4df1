"""Cluster-level treatment assignment and keyed random streams.

Streams are Philox (counter-based) generators whose key is derived from
``(master_seed, *tags)``; any consumer can recreate its stream from the key
alone, so results do not depend on execution order or worker count.
"""

from dataclasses import dataclass
import zlib

import numpy as np

from .errors import InvalidPi


def _tag_to_int(tag):
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("integer stream tags must be non-negative")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def stream(master_seed, *tags):
    """Independent generator keyed by ``(master_seed, *tags)``.

    Tags may be non-negative integers or strings.
    """
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_tag_to_int(t) for t in tags))
    return np.random.Generator(np.random.Philox(seq))


def _check_pi(pi):
    if not 0 < pi < 1:
        raise InvalidPi(f"randomization probability must lie in (0, 1), got {pi!r}")


@dataclass(frozen=True)
class AssignmentPlan:
    scheme: str  # "simple" or "stratified"
    pi: float = 0.5
    strata: tuple = None

    def __post_init__(self):
        _check_pi(self.pi)
        if self.scheme not in ("simple", "stratified"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "stratified" and self.strata is None:
            raise ValueError("stratified assignment needs stratum labels")

    def draw(self, m, rng):
        if self.scheme == "simple":
            return simple_assign(m, self.pi, rng)
        if len(self.strata) != m:
            raise ValueError("one stratum label per cluster is required")
        return stratified_assign(self.strata, self.pi, rng)


def simple_assign(m, pi, rng):
    """i.i.d. Bernoulli(pi) arm indicators for ``m`` clusters."""
    _check_pi(pi)
    if m < 1:
        raise ValueError("m must be at least 1")
    return (rng.random(m) < pi).astype(np.int64)


def stratified_assign(strata, pi, rng):
    """Within-stratum balanced assignment with a randomized remainder.

    A stratum of size n_s gets floor(pi*n_s) treated clusters plus one more with
    probability frac(pi*n_s), and the treated set is a uniform subset of that
    size. It is built by drawing the same Bernoulli(pi) indicators as
    :func:`simple_assign` and then flipping a uniformly chosen minimal set of
    clusters in each stratum; by exchangeability the result is still uniform,
    and a simple and a stratified draw from the same stream differ in as few
    clusters as possible. Strata are processed in sorted label order.
    """
    _check_pi(pi)
    labels = np.asarray(strata, dtype=object)
    out = (rng.random(labels.size) < pi).astype(np.int64)
    for label in sorted(set(labels.tolist()), key=repr):
        idx = np.flatnonzero(labels == label)
        target = pi * idx.size
        k = int(np.floor(target))
        if rng.random() < target - k:
            k += 1
        current = out[idx]
        c = int(current.sum())
        if c > k:
            pool = idx[current == 1]
            out[pool[rng.permutation(pool.size)[: c - k]]] = 0
        elif c < k:
            pool = idx[current == 0]
            out[pool[rng.permutation(pool.size)[: k - c]]] = 1
    return out
