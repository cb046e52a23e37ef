import numpy as np
import pytest

from anoncomplete import anonymizer as an
from anoncomplete import ast_corpus as ac
from anoncomplete import autodiff as ad
from anoncomplete import pysource
from anoncomplete.ast_corpus import EMPTY, EOF, N_DUMMY, UNK, FlatProgram
from anoncomplete.model import Model
from anoncomplete.trainer import (BOTH, IGNORE, POINTER, VOCAB, AdamW, TrainConfig, chunk_loss,
                                  clip_grad_norm, collate, corpus_loss, learning_rate, make_batches,
                                  make_targets, model_gradient_check, parse_config, position_loss,
                                  random_program, train)

import helpers

A, B, C = 10, 11, 12


def prog(raw, values=None):
    raw = np.array(list(raw) + [EOF])
    values = raw.copy() if values is None else np.array(list(values) + [EOF])
    n = len(raw)
    return FlatProgram(np.ones(n, np.int64), values, raw, np.full(n, -1))


def test_in_vocab_and_copyable_is_both():
    t = make_targets(prog([EMPTY, A, EMPTY, EMPTY, A]))
    assert t.kind[3] == BOTH and t.vocab_id[3] == A and t.offset[3] == 3


def test_oov_copy_uses_last_occurrence():
    raw = [EMPTY, A, EMPTY, EMPTY, EMPTY, EMPTY, A, EMPTY, A]
    values = [v if v != A else UNK for v in raw]
    t = make_targets(prog(raw, values))
    # target at position 8 was seen at 6 and 1 (offsets 2 and 7)
    assert t.kind[7] == POINTER and t.offset[7] == 2


def test_oov_never_seen_is_ignored():
    t = make_targets(prog([EMPTY, EMPTY, B], [EMPTY, EMPTY, UNK]))
    assert t.kind[1] == IGNORE


def test_dummy_targets_are_vocab_only():
    t = make_targets(prog([EMPTY, EMPTY, EMPTY]))
    assert t.kind[:2].tolist() == [VOCAB, VOCAB] and t.kind[-1] == IGNORE


def test_position_loss_rules():
    assert position_loss(0.2, 0.9, IGNORE, "min") == 0.0
    assert position_loss(0.2, 0.9, BOTH, "min") == 0.2
    assert position_loss(0.2, 0.9, BOTH, "ptr_priority") == 0.9
    assert position_loss(0.9, 0.2, BOTH, "vocab_priority") == 0.9
    assert position_loss(0.9, 0.2, BOTH, "standard") == 0.9
    assert position_loss(0.9, 0.2, POINTER, "vocab_priority") == 0.2
    assert position_loss(0.9, 0.2, BOTH, "a") == 0.2
    picks = {position_loss(0.9, 0.2, BOTH, "random", np.random.default_rng(s)) for s in range(20)}
    assert picks == {0.9, 0.2}
    with pytest.raises(ValueError):
        position_loss(0.1, 0.1, BOTH, "nope")


def _pointer_batch(seed=0, n=6, length=30, k=5):
    rng = np.random.default_rng(seed)
    m = helpers.tiny_model("static", k=k, scale=0.5, dtype="float64")
    progs = [random_program(rng, length, k, m.cfg.n_types) for _ in range(n)]
    b = collate(progs, [make_targets(p, 50) for p in progs], list(range(n)), 50)
    outs, _ = m.forward_chunk(m.initial(n), b.types, b.values, b.parents)
    return outs, b


def test_step_loss_decomposes_into_position_losses():
    outs, b = _pointer_batch()
    for strategy in ("standard", "ptr_priority", "vocab_priority", "min"):
        total, count = chunk_loss(outs, b.kind, b.vocab_id, b.offset, strategy)
        expect, n = 0.0, 0
        for t, out in enumerate(outs):
            for r in range(b.kind.shape[0]):
                kind = int(b.kind[r, t])
                if kind == IGNORE:
                    continue
                v = -out.vocab_logp.data[r, b.vocab_id[r, t]]
                p = -out.ptr_logp.data[r, b.offset[r, t] - 1] if out.ptr_logp is not None and b.offset[r, t] else np.inf
                if kind in (POINTER, BOTH) and not np.isfinite(p):
                    # offset not yet reachable: the vocabulary term pays
                    kind = VOCAB if kind == BOTH else IGNORE
                if kind == IGNORE:
                    continue
                expect += position_loss(v, p, kind, strategy)
                n += 1
        assert count == n and float(total.data) == pytest.approx(expect, rel=1e-12)


def test_min_is_pointwise_lower():
    outs, b = _pointer_batch(seed=1)
    totals = {s: float(chunk_loss(outs, b.kind, b.vocab_id, b.offset, s)[0].data)
              for s in ("ptr_priority", "vocab_priority", "min")}
    assert (b.kind == BOTH).any()
    assert totals["min"] <= totals["ptr_priority"] and totals["min"] <= totals["vocab_priority"]


def test_adamw_single_step():
    p = ad.param(np.array([1.0]))
    p.grad = np.array([1.0])
    AdamW({"p": p}, lr=0.001, weight_decay=0.01).step()
    expected = 1 - 0.001 * 0.01 * 1 - 0.001 * (1 / (1 + 1e-8))
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert p.data[0] == pytest.approx(0.99899, abs=1e-8)


def test_adamw_zero_gradient_only_decays():
    p = ad.param(np.array([2.0, -3.0]))
    opt = AdamW({"p": p}, lr=0.01, weight_decay=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.allclose(p.data, np.array([2.0, -3.0]) * (1 - 0.01 * 0.1), atol=1e-15)


def test_learning_rate_schedule():
    assert [learning_rate(1e-3, 0.6, e) for e in range(3)] == pytest.approx([1e-3, 6e-4, 3.6e-4])


def test_clip_grad_norm():
    a, b = ad.param(np.zeros(2)), ad.param(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()) == pytest.approx(1.0)


def test_make_batches_groups_by_chunk_count():
    lengths = [10, 60, 20, 120, 55, 3]
    batches = make_batches(lengths, 50, 2, np.random.default_rng(0))
    assert sorted(i for b in batches for i in b) == list(range(6))
    for b in batches:
        assert len({-(-lengths[i] // 50) for i in b}) == 1 and len(b) <= 2


def test_collate_pads_with_ignore():
    progs = [prog([EMPTY, A]), prog([EMPTY])]
    b = collate(progs, [make_targets(p) for p in progs], [0, 1], 50)
    assert b.types.shape == (2, 3) and b.kind[1, 1:].tolist() == [IGNORE, IGNORE]


def test_parse_config():
    cfg = parse_config("mode = static  # comment\nstrategy = c\nepochs=3\npointer = false\n")
    assert cfg.mode == "static" and cfg.strategy == "min" and cfg.epochs == 3 and cfg.pointer is False
    with pytest.raises(ValueError):
        parse_config("bogus = 1")
    with pytest.raises(ValueError):
        parse_config("strategy = e")


@pytest.mark.parametrize("mode", ["dynamic", "static", "no_vars", "dynamic_full_data"])
def test_full_model_gradient(mode):
    worst, per = model_gradient_check(mode, seed=0, length=7)
    assert worst < 1e-4, per


def test_gradient_with_min_strategy():
    worst, _ = model_gradient_check("static", seed=2, length=7, strategy="min")
    assert worst < 1e-4


def _toy():
    lines = pysource.desk_corpus(10, seed=1, max_nodes=49)
    trees = [ac.flatten(ac.parse_ast_line(l)) for l in lines]
    vocab = ac.build_vocabulary(trees, 100)
    progs = [vocab.encode(t) for t in trees]
    k = an.select_k(progs)
    return vocab, k, an.anonymize_corpus(progs, k, 0)[0]


def test_toy_corpus_training_loss_decreases():
    vocab, k, data = _toy()
    cfg = TrainConfig(mode="dynamic", epochs=1, batch_size=1)
    m = Model(cfg.model_config(vocab.n_types, k + N_DUMMY), seed=0)
    losses = [corpus_loss(m, data)]
    train(m, data, cfg, on_batch=lambda b, l: losses.append(corpus_loss(m, data)))
    steps = np.diff(losses)
    assert len(steps) == 10 and (steps < 0).mean() >= 0.8


def test_training_is_deterministic():
    vocab, k, data = _toy()
    runs = []
    for _ in range(2):
        cfg = TrainConfig(mode="static", epochs=1, batch_size=4, strategy="random")
        m = Model(cfg.model_config(vocab.n_types, k + N_DUMMY), seed=0)
        metrics = train(m, data, cfg)
        runs.append((metrics[0].loss, {n: p.data.copy() for n, p in m.params.items()}))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])


def test_nonfinite_training_raises():
    from anoncomplete.trainer import TrainingError
    vocab, k, data = _toy()
    cfg = TrainConfig(mode="static", epochs=1, batch_size=4)
    m = Model(cfg.model_config(vocab.n_types, k + N_DUMMY), seed=0)
    m.params["head_w"].data[...] = np.nan
    with pytest.raises(TrainingError, match="parameter norms"):
        train(m, data, cfg)
