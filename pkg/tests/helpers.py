"""Property checks shared by the unit and acceptance suites."""
import numpy as np

from anoncomplete.anonymizer import strip_variables
from anoncomplete.ast_corpus import N_DUMMY, FlatProgram
from anoncomplete.model import Model, ModelConfig
from anoncomplete.trainer import random_program

import model_oracle


def tiny_model(mode="dynamic", k=6, n_types=7, window=50, seed=0, dtype="float32", scale=None,
               dims=(4, 5, 6), attention=True, pointer=True):
    n_values = N_DUMMY if mode == "no_vars" else N_DUMMY + k
    cfg = ModelConfig(mode=mode, n_types=n_types, n_values=n_values, type_dim=dims[0], value_dim=dims[1],
                      hidden_dim=dims[2], window=window, dtype=dtype, attention=attention, pointer=pointer)
    model = Model(cfg, seed=seed)
    if scale is not None:
        rng = np.random.default_rng(seed + 1000)
        for p in model.params.values():
            p.data[...] = rng.uniform(-scale, scale, p.shape)
    return model


def distributions(model, program: FlatProgram, chunk=None):
    """Merged distribution at every position of one program, run chunk by chunk."""
    chunk = chunk or model.cfg.window
    carry = model.initial(1)
    out = []
    for s in range(0, len(program), chunk):
        sl = slice(s, s + chunk)
        outs, carry = model.forward_chunk(carry, program.types[None, sl], program.values[None, sl],
                                          program.parents[None, sl])
        out.extend(o.distribution()[0] for o in outs)
    return np.array(out)


def relabel(program: FlatProgram, perm) -> FlatProgram:
    """Apply a permutation of placeholder indices (0-based) to the values."""
    v = program.values
    new = np.where(v >= N_DUMMY, np.asarray(perm)[np.maximum(v - N_DUMMY, 0)] + N_DUMMY, v)
    return program.with_values(new)


def permuted_expectation(dist, perm):
    """Distribution expected after relabeling: placeholder j moves to perm[j]."""
    out = dist.copy()
    k = len(perm)
    out[:, N_DUMMY + np.asarray(perm)] = dist[:, N_DUMMY:N_DUMMY + k]
    return out


def equivariance_errors(n_pairs=100, seed=0, k=8):
    rng = np.random.default_rng(seed)
    errors = []
    for i in range(n_pairs):
        model = tiny_model("dynamic", k=k, seed=i % 5, scale=0.5)
        prog = random_program(rng, int(rng.integers(5, 80)), k, model.cfg.n_types)
        perm = rng.permutation(k)
        a = distributions(model, prog)
        b = distributions(model, relabel(prog, perm))
        errors.append(float(np.abs(b - permuted_expectation(a, perm)).max()))
    return errors


def static_witness(max_tries=200, seed=0, k=8):
    """First (program, permutation) where relabeling moves some argmax in static mode."""
    rng = np.random.default_rng(seed)
    for i in range(max_tries):
        model = tiny_model("static", k=k, seed=i, scale=1.0)
        prog = random_program(rng, 20, k, model.cfg.n_types)
        perm = rng.permutation(k)
        a = permuted_expectation(distributions(model, prog), perm)
        b = distributions(model, relabel(prog, perm))
        if (a.argmax(1) != b.argmax(1)).any():
            return prog, perm, int((a.argmax(1) != b.argmax(1)).sum())
    return None


def isolation_fuzz(n_steps=1000, seed=0, k=6, batch=4):
    """Step-by-step bank diffs. Returns (violations, steps checked, placeholder steps)."""
    rng = np.random.default_rng(seed)
    violations, checked, placeholder_steps = [], 0, 0
    while checked < n_steps:
        model = tiny_model("dynamic", k=k, seed=int(rng.integers(1 << 30)), scale=0.5)
        progs = [random_program(rng, 40, k, model.cfg.n_types) for _ in range(batch)]
        carry = model.initial(batch)
        dummy_before = model.params["dummy_emb"].data.copy()
        for t in range(40):
            before_h, before_c = carry.bank.h.copy(), carry.bank.c.copy()
            values = np.array([p.values[t] for p in progs])
            model.step(carry, np.array([p.types[t] for p in progs]), values,
                       np.array([p.parents[t] for p in progs]))
            for r in range(batch):
                changed = np.flatnonzero((carry.bank.h[r] != before_h[r]).any(1)
                                         | (carry.bank.c[r] != before_c[r]).any(1))
                expect = [values[r] - N_DUMMY] if values[r] >= N_DUMMY else []
                placeholder_steps += bool(expect)
                if changed.tolist() != expect:
                    violations.append((checked, r, values[r], changed.tolist()))
                checked += 1
            if not np.array_equal(model.params["dummy_emb"].data, dummy_before):
                violations.append((checked, "dummy embeddings changed"))
    return violations, checked, placeholder_steps


def oracle_differences(n_programs=20, seed=0, mode="dynamic", length=3, k=4):
    """Max abs difference between step() and the straight-line oracle per program."""
    rng = np.random.default_rng(seed)
    diffs = []
    for i in range(n_programs):
        model = tiny_model(mode, k=k, n_types=5, seed=i, scale=0.5, dtype="float64", dims=(2, 3, 3))
        prog = random_program(rng, length, k, 5, leaf_fraction=0.9)
        if mode == "no_vars":
            prog = strip_variables(prog)
        carry = model.initial(1)
        got = [model.step(carry, prog.types[t:t + 1], prog.values[t:t + 1], prog.parents[t:t + 1])
               for t in range(length)]
        want = model_oracle.run({n: p.data for n, p in model.params.items()}, mode, model.cfg.n_slots,
                                prog.types, prog.values, prog.parents, model.cfg.window)
        worst = 0.0
        for g, w in zip(got, want):
            d = g.distribution()[0]
            worst = max(worst, np.abs(d[:len(w["dist"])] - w["dist"]).max(), np.abs(d[len(w["dist"]):]).max(),
                        np.abs(g.logits.data[0] - w["logits"]).max())
            if w["scores"] is not None:
                worst = max(worst, np.abs(g.scores.data[0] - w["scores"]).max(),
                            abs(g.switcher[0] - w["switcher"]))
        if want[-1]["table"] is not None:
            worst = max(worst, np.abs(carry.bank.h[0] - want[-1]["table"]).max())
        diffs.append(float(worst))
    return diffs
