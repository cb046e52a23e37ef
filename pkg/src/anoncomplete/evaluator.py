"""Next-value accuracy with UNK-as-wrong, and max-probability ensembling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ast_corpus import N_DUMMY, UNK, FlatProgram
from .model import FingerprintMismatch, Model, predict_next
from .trainer import make_batches

CATEGORIES = ("dummy", "vocab", "oov")
# predicted placeholder that names nothing in this program
NO_RAW = -2
UNK_RAW = -1


class AlignmentError(ValueError):
    pass


@dataclass
class EvalReport:
    correct: int = 0
    total: int = 0
    by_category: dict = field(default_factory=lambda: {c: [0, 0] for c in CATEGORIES})
    fingerprints: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def category_accuracy(self, cat: str) -> float:
        c, n = self.by_category[cat]
        return c / n if n else 0.0

    def add(self, cat: str, ok: bool) -> None:
        self.total += 1
        self.correct += int(ok)
        self.by_category[cat][0] += int(ok)
        self.by_category[cat][1] += 1

    def record(self) -> str:
        return json.dumps({"accuracy": self.accuracy, "correct": self.correct, "total": self.total,
                           "by_category": self.by_category, "fingerprints": self.fingerprints},
                          sort_keys=True)

    def table(self, per_category: bool = False) -> str:
        lines = [f"{'split':<10}{'correct':>10}{'total':>10}{'accuracy':>10}",
                 f"{'all':<10}{self.correct:>10}{self.total:>10}{100 * self.accuracy:>9.2f}%"]
        if per_category:
            for cat in CATEGORIES:
                c, n = self.by_category[cat]
                lines.append(f"{cat:<10}{c:>10}{n:>10}{100 * (c / n if n else 0):>9.2f}%")
        return "\n".join(lines)


def target_category(program: FlatProgram, pos: int) -> str:
    if program.raw[pos] < N_DUMMY:
        return "dummy"
    return "oov" if program.values[pos] == UNK else "vocab"


@dataclass
class PositionPredictions:
    """Per-position top-1 prediction as a raw identity, with its probability."""
    raw: np.ndarray
    prob: np.ndarray
    from_pointer: np.ndarray


def _value_lookup(program: FlatProgram) -> dict[int, int]:
    keep = (program.values >= N_DUMMY)
    return {int(v): int(r) for v, r in zip(program.values[keep], program.raw[keep])}


def predict_positions(model: Model, programs: Sequence[FlatProgram], batch_size: int = 64,
                      values_are_raw: bool = False) -> list[PositionPredictions]:
    """Greedy next-value prediction at every position that has a successor.

    Vocabulary predictions are translated to raw identities through the
    program's own value->raw pairs (placeholders); when ``values_are_raw`` the
    value id itself is the raw id (full-data vocabularies). Predicting UNK
    yields ``UNK_RAW``, which never matches a target.
    """
    W = model.cfg.window
    V = model.cfg.n_values
    results = [None] * len(programs)
    for index in make_batches([len(p) for p in programs], W, batch_size):
        progs = [programs[i] for i in index]
        lengths = np.array([len(p) for p in progs])
        L = int(lengths.max())
        B = len(index)
        types = np.zeros((B, L), dtype=np.int64)
        values = np.full((B, L), 2, dtype=np.int64)
        parents = np.full((B, L), -1, dtype=np.int64)
        for r, p in enumerate(progs):
            types[r, :len(p)], values[r, :len(p)], parents[r, :len(p)] = p.types, p.values, p.parents
        lookups = [_value_lookup(p) for p in progs]
        raw_out = [np.full(len(p), UNK_RAW, dtype=np.int64) for p in progs]
        prob_out = [np.zeros(len(p)) for p in progs]
        ptr_out = [np.zeros(len(p), dtype=bool) for p in progs]
        carry = model.initial(B)
        for start in range(0, L, W):
            sl = slice(start, start + W)
            outs, carry = model.forward_chunk(carry, types[:, sl], values[:, sl], parents[:, sl])
            for t, out in enumerate(outs):
                i = start + t
                dist = out.distribution()
                for r, p in enumerate(progs):
                    if i >= len(p) - 1:
                        continue
                    lo = max(i + 1 - W, 0)
                    window_raw = p.raw[lo:i + 1][::-1]
                    pred = predict_next(dist[r], window_raw, V)
                    if pred.from_pointer:
                        rv = pred.value
                    elif pred.value == UNK:
                        rv = UNK_RAW
                    elif pred.value < N_DUMMY or values_are_raw:
                        rv = pred.value
                    else:
                        rv = lookups[r].get(pred.value, NO_RAW)
                    raw_out[r][i] = rv
                    prob_out[r][i] = pred.prob
                    ptr_out[r][i] = pred.from_pointer
        for r, i in enumerate(index):
            results[i] = PositionPredictions(raw_out[r], prob_out[r], ptr_out[r])
    return results


def evaluate(model: Model, programs: Sequence[FlatProgram], values_are_raw: bool = False,
             batch_size: int = 64, fingerprints: dict | None = None,
             expect_fingerprints: dict | None = None) -> EvalReport:
    if expect_fingerprints and fingerprints:
        for k, v in expect_fingerprints.items():
            if k in fingerprints and fingerprints[k] != v:
                raise FingerprintMismatch(f"{k}: model {v} != corpus {fingerprints[k]}")
    preds = predict_positions(model, programs, batch_size, values_are_raw)
    return score(programs, preds, fingerprints)


def score(programs: Sequence[FlatProgram], preds: Sequence[PositionPredictions],
          fingerprints: dict | None = None) -> EvalReport:
    report = EvalReport(fingerprints=dict(fingerprints or {}))
    for p, pr in zip(programs, preds):
        for i in range(len(p) - 1):
            ok = pr.raw[i] >= 0 and pr.raw[i] == p.raw[i + 1]
            report.add(target_category(p, i + 1), bool(ok))
    return report


def merge_predictions(a: PositionPredictions, b: PositionPredictions) -> PositionPredictions:
    """Per position, keep the prediction whose top-1 probability is higher (ties: ``a``)."""
    take_b = b.prob > a.prob
    return PositionPredictions(np.where(take_b, b.raw, a.raw), np.where(take_b, b.prob, a.prob),
                               np.where(take_b, b.from_pointer, a.from_pointer))


def ensemble_evaluate(model_a: Model, model_b: Model, corpus_a: Sequence[FlatProgram],
                      corpus_b: Sequence[FlatProgram], a_values_are_raw: bool = True,
                      b_values_are_raw: bool = False, batch_size: int = 64) -> EvalReport:
    """Ensemble a full-data model (``a``) with a model on another view (``b``).

    Both views must cover the same positions; ``b``'s predictions are mapped
    back to original values through each program's placeholder assignment
    before the comparison with ``a``'s targets.
    """
    check_aligned(corpus_a, corpus_b)
    pa = predict_positions(model_a, corpus_a, batch_size, a_values_are_raw)
    pb = predict_positions(model_b, corpus_b, batch_size, b_values_are_raw)
    return score(corpus_a, [merge_predictions(x, y) for x, y in zip(pa, pb)])


def check_aligned(corpus_a: Sequence[FlatProgram], corpus_b: Sequence[FlatProgram]) -> None:
    if len(corpus_a) != len(corpus_b):
        raise AlignmentError(f"corpora differ in size: {len(corpus_a)} vs {len(corpus_b)}")
    for i, (x, y) in enumerate(zip(corpus_a, corpus_b)):
        if len(x) != len(y) or not np.array_equal(x.types, y.types):
            raise AlignmentError(f"program {i}: views are not aligned")
