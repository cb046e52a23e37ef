"""Per-program placeholder anonymization and the no-variables transform."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ast_corpus import DUMMY_VALUES, N_DUMMY, UNK, FlatProgram


class AnonymizeError(ValueError):
    pass


@dataclass(frozen=True)
class AnonVocabulary:
    """Dummy ids 0..2 followed by placeholders ``var1..varK`` at ids 3..K+2."""
    k: int

    @property
    def n_values(self) -> int:
        return self.k + N_DUMMY

    def name(self, vid: int) -> str:
        if vid < N_DUMMY:
            return DUMMY_VALUES[vid]
        return f"var{vid - N_DUMMY + 1}"

    def fingerprint(self) -> str:
        return f"anon-k{self.k}"


@dataclass
class AnonMap:
    """Original raw value id -> placeholder id (or UNK) for one program."""
    mapping: dict[int, int]

    def inverse(self) -> dict[int, int]:
        return {p: r for r, p in self.mapping.items() if p != UNK}


def is_dummy_raw(raw) -> np.ndarray:
    return np.asarray(raw) < N_DUMMY


def distinct_values(program: FlatProgram) -> int:
    return len(set(int(r) for r in program.raw if r >= N_DUMMY))


def select_k(corpus: Sequence[FlatProgram], coverage: float = 0.99) -> int:
    """Smallest K such that at least ``coverage`` of programs have <= K distinct values."""
    if not corpus:
        raise AnonymizeError("select_k needs a non-empty corpus")
    counts = np.sort([distinct_values(p) for p in corpus])
    need = math.ceil(coverage * len(counts) - 1e-9)
    return max(1, int(counts[max(need, 1) - 1]))


def anon_map(program: FlatProgram, k: int, rng: np.random.Generator,
             value_filter: Callable[[int], bool] | None = None) -> AnonMap:
    """First ``k`` distinct values (first-appearance order) get a random subset of placeholders."""
    if k < 1:
        raise AnonymizeError("K must be >= 1")
    order: list[int] = []
    seen = set()
    for pos, r in enumerate(program.raw):
        r = int(r)
        if r < N_DUMMY or r in seen:
            continue
        if value_filter is not None and not value_filter(int(program.types[pos])):
            continue
        seen.add(r)
        order.append(r)
    n = min(len(order), k)
    slots = rng.permutation(k)[:n] + N_DUMMY
    mapping = {r: int(s) for r, s in zip(order[:n], slots)}
    mapping.update({r: UNK for r in order[n:]})
    return AnonMap(mapping)


def anonymize(program: FlatProgram, k: int, rng_seed: int,
              value_filter: Callable[[int], bool] | None = None) -> tuple[FlatProgram, AnonMap]:
    """Replace values with per-program placeholders; ``raw`` keeps the original identities.

    ``value_filter`` receives a node-type id and restricts which positions take
    part in anonymization. Rejected non-dummy positions have no slot in the
    anonymized vocabulary and become UNK.
    """
    amap = anon_map(program, k, np.random.default_rng(rng_seed), value_filter)
    values = np.array([int(r) if r < N_DUMMY else amap.mapping.get(int(r), UNK) for r in program.raw],
                      dtype=np.int64)
    return program.with_values(values), amap


def strip_variables(program: FlatProgram) -> FlatProgram:
    """Every non-dummy value becomes UNK."""
    return program.with_values(np.where(is_dummy_raw(program.raw), program.raw, UNK))


def program_seed(global_seed: int, index: int, epoch: int = 0) -> int:
    entropy = [global_seed, index] if epoch == 0 else [global_seed, index, epoch]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def anonymize_corpus(corpus: Sequence[FlatProgram], k: int, seed: int, epoch: int = 0,
                     value_filter=None) -> tuple[list[FlatProgram], list[AnonMap]]:
    out, maps = [], []
    for i, p in enumerate(corpus):
        q, m = anonymize(p, k, program_seed(seed, i, epoch), value_filter)
        out.append(q)
        maps.append(m)
    return out, maps
