import numpy as np
import pytest

from anoncomplete import autodiff as ad
from anoncomplete.ast_corpus import EMPTY, EOF, N_DUMMY, UNK, FlatProgram
from anoncomplete.model import (FingerprintMismatch, Model, ModelConfig, ModelError, load_checkpoint,
                                parameter_count, predict_next, save_checkpoint)
from anoncomplete.trainer import random_program

import helpers

MODES = ["no_vars", "static", "dynamic", "dynamic_full_data"]


def prog(types, values, parents):
    values = np.array(values)
    return FlatProgram(np.array(types), values, values.copy(), np.array(parents))


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(mode="static", n_types=3, n_values=5, attention=False, pointer=True)
    with pytest.raises(ModelError):
        ModelConfig(mode="bogus", n_types=3, n_values=5)
    assert ModelConfig(mode="no_vars", n_types=3, n_values=50).n_values == N_DUMMY


def test_value_out_of_range():
    m = helpers.tiny_model("static", k=2)
    with pytest.raises(ModelError):
        m.step(m.initial(1), [1], [5], [-1])


def test_init_ranges():
    m = Model(ModelConfig(mode="dynamic", n_types=4, n_values=8))
    for name, p in m.params.items():
        if name in ("h_init", "c_init", "dyn_init_h", "dyn_init_c"):
            assert np.all(p.data == 0), name
        else:
            assert np.abs(p.data).max() <= 0.05 and np.abs(p.data).max() > 0, name


@pytest.mark.parametrize("mode", MODES)
def test_parameter_count_matches_tensors(mode):
    m = helpers.tiny_model(mode)
    assert sum(parameter_count(m.cfg).values()) == m.n_parameters()


def test_first_token_placeholder_logits_uniform():
    m = helpers.tiny_model("dynamic", k=6, scale=0.5)
    out = m.step(m.initial(1), [2], [EMPTY], [-1])
    placeholder = out.logits.data[0, N_DUMMY:]
    assert np.all(placeholder == placeholder[0])
    p = np.exp(out.vocab_logp.data[0, N_DUMMY:])
    assert np.allclose(p, p[0])


def test_processing_var1_updates_only_its_slot():
    m = helpers.tiny_model("dynamic", k=4, scale=0.5)
    carry = m.initial(1)
    init = carry.bank.h[0, 1].copy()
    m.step(carry, [2], [N_DUMMY], [-1])
    assert not np.array_equal(carry.bank.h[0, 0], init)
    assert np.array_equal(carry.bank.h[0, 1], init)


def test_isolation_fuzz_small():
    violations, checked, placeholder_steps = helpers.isolation_fuzz(200)
    assert not violations and placeholder_steps > 50


def test_equivariance_small():
    assert max(helpers.equivariance_errors(10)) < 1e-5


def test_static_witness_exists():
    assert helpers.static_witness() is not None


def test_oracle_matches_all_modes():
    for mode in MODES:
        assert max(helpers.oracle_differences(5, mode=mode, length=12)) < 1e-12, mode


@pytest.mark.parametrize("mode", MODES)
def test_distribution_sums_to_one(mode):
    m = helpers.tiny_model(mode, scale=0.5, window=5)
    p = random_program(np.random.default_rng(1), 20, 6, m.cfg.n_types)
    if mode == "no_vars":
        p = p.with_values(np.where(p.values < N_DUMMY, p.values, UNK))
    d = helpers.distributions(m, p)
    assert np.allclose(d.sum(1), 1, atol=1e-6) and np.all(d >= 0)


def test_length_one_chunk():
    m = helpers.tiny_model("dynamic")
    outs, _ = m.forward_chunk(m.initial(1), [[0]], [[EOF]], [[-1]])
    assert len(outs) == 1 and abs(outs[0].distribution().sum() - 1) < 1e-6


def test_first_position_context_is_zero_and_pointer_empty():
    m = helpers.tiny_model("dynamic")
    out = m.step(m.initial(1), [2], [EMPTY], [-1])
    assert out.scores is None and out.ptr_logp is None
    d = out.distribution()[0]
    assert np.all(d[m.cfg.n_values:] == 0)


@pytest.mark.parametrize("mode", ["dynamic", "static"])
def test_chunk_split_equivalence(mode):
    m = helpers.tiny_model(mode, scale=0.5, window=50, dtype="float64")
    p = random_program(np.random.default_rng(3), 60, 6, m.cfg.n_types)
    whole = helpers.distributions(m, p, chunk=60)
    split = helpers.distributions(m, p, chunk=50)
    assert np.abs(whole - split).max() < 1e-12


def test_window_limits_attention():
    m = helpers.tiny_model("static", window=4)
    carry = m.initial(1)
    for t in range(7):
        out = m.step(carry, [2], [EMPTY], [-1])
    assert out.scores.shape == (1, 4) and len(carry.state.mem) == 4


def test_predict_next_switcher_one():
    d = np.array([0.1, 0.5, 0.4, 0.0, 0.0])
    assert not predict_next(d, [7, 8], 3).from_pointer


def test_predict_next_pointer_copies_window_value():
    var3 = N_DUMMY + 2
    d = np.array([0.1, 0.1, 0.1, 0.2, 0.5])
    pred = predict_next(d, [4, var3], 3)
    assert pred.from_pointer and pred.value == var3 and pred.offset == 2


def test_predict_next_tie_goes_to_vocabulary():
    d = np.array([0.1, 0.4, 0.1, 0.4])
    pred = predict_next(d, [9], 3)
    assert not pred.from_pointer and pred.value == 1


@pytest.mark.parametrize("mode", MODES)
def test_checkpoint_roundtrip_bit_exact(tmp_path, mode):
    m = helpers.tiny_model(mode, scale=0.3)
    save_checkpoint(tmp_path / "m.anm", m, {"vocab": "v1"}, {"epoch": 3})
    back, header = load_checkpoint(tmp_path / "m.anm", {"vocab": "v1"})
    assert back.cfg == m.cfg and header["extra"]["epoch"] == 3
    for k, p in m.params.items():
        assert np.array_equal(p.data, back.params[k].data) and p.data.dtype == back.params[k].data.dtype
    p = random_program(np.random.default_rng(0), 12, 6, m.cfg.n_types)
    if mode == "no_vars":
        p = p.with_values(np.where(p.values < N_DUMMY, p.values, UNK))
    assert np.array_equal(helpers.distributions(m, p), helpers.distributions(back, p))


def test_checkpoint_fingerprint_mismatch(tmp_path):
    m = helpers.tiny_model("static")
    save_checkpoint(tmp_path / "m.anm", m, {"vocab": "v1"})
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(tmp_path / "m.anm", {"vocab": "v2"})


def test_parent_beyond_window_uses_its_hidden_state():
    m = helpers.tiny_model("static", window=3, scale=0.5, dtype="float64")
    carry = m.initial(1)
    hs = []
    for t in range(6):
        m.step(carry, [2], [EMPTY], [t - 1])
        hs.append(carry.state.h.data[0].copy())
    # a token whose parent is position 0 sees h_0 although it left the window
    a = m.step(carry, [3], [EMPTY], [0])
    assert np.array_equal(carry.state.hist[0, 0], hs[0])
    assert a.logits.shape == (1, m.cfg.n_values)


def test_dynamic_gradients_reach_initial_embedding():
    m = helpers.tiny_model("dynamic", scale=0.3, dtype="float64")
    with ad.Tape() as tape:
        carry = m.initial(1)
        outs, _ = m.forward_chunk(carry, [[2, 2]], [[N_DUMMY, N_DUMMY + 1]], [[-1, 0]])
        loss = ad.sum_(ad.pick(outs[1].vocab_logp, [N_DUMMY + 1]))
    tape.backward(loss)
    assert m.params["dyn_init_h"].grad is not None and np.abs(m.params["dyn_init_h"].grad).sum() > 0
