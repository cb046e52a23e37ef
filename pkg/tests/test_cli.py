import json

import pytest

from anoncomplete import ast_corpus as ac
from anoncomplete.cli import SEED_ENV, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(path, **items):
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Corpus, three cache views and two trained tiny models shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["build-corpus", "--out", str(d / "c.json"), "--n", "40", "--max-nodes", "80", "--seed", "3"]) == 0
    assert main(["preprocess", str(d / "c.json"), "--out", str(d / "full.anc"), "--max-values", "200"]) == 0
    assert main(["anonymize", str(d / "full.anc"), "--out", str(d / "anon.anc"), "--seed", "0"]) == 0
    assert main(["strip", str(d / "full.anc"), "--out", str(d / "strip.anc")]) == 0
    dims = dict(epochs=1, batch_size=16, type_dim=4, value_dim=6, hidden_dim=8, heldout_fraction=0.25)
    for name, mode, corpus in (("dyn", "dynamic", "anon.anc"), ("full", "static", "full.anc"),
                               ("nov", "no_vars", "strip.anc")):
        cfg = write_config(d / f"{name}.cfg", mode=mode, corpus=d / corpus, out_dir=d / f"run_{name}", **dims)
        assert main(["train", "--config", str(cfg)]) == 0
    return d


def test_param_report_full_scale_ordering(capsys):
    code, out, _ = run(capsys, "param-report", "--full-scale")
    totals = json.loads(out.strip().splitlines()[-1])["totals"]
    assert code == 0
    assert totals["dynamic"] < totals["static"] and totals["dynamic"] < totals["no_vars"]


def test_param_report_from_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "s.cfg", mode="static", k=10, type_dim=2, value_dim=3, hidden_dim=4)
    code, out, _ = run(capsys, "param-report", "--config", cfg, "--n-types", 5)
    assert code == 0 and "out_w" in out
    auto = write_config(tmp_path / "a.cfg", mode="static")
    assert run(capsys, "param-report", "--config", auto)[0] == 2


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--mode", "static", "--seed", "1")
    assert code == 0 and "max relative error" in out


def test_bad_input_exit_codes(tmp_path, capsys):
    assert run(capsys, "eval", "--model", tmp_path / "nope.anm", "--corpus", tmp_path / "nope.anc")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("not json\n")
    assert run(capsys, "preprocess", bad, "--out", tmp_path / "x.anc")[0] == 2
    assert run(capsys, "no-such-command")[0] == 2


def test_caches_have_views_and_manifests(pipeline):
    d = pipeline
    views = {name: ac.read_cache(d / f"{name}.anc").header["view"] for name in ("full", "anon", "strip")}
    assert views == {"full": "full", "anon": "anon", "strip": "strip"}
    for name in ("c.json", "full.anc", "anon.anc", "strip.anc"):
        assert json.loads((d / f"{name}.manifest.json").read_text())["command"]
    manifest = json.loads((d / "run_dyn" / "manifest.json").read_text())
    assert manifest["seeds"]["seed"] == 0 and manifest["outputs"]
    lines = (d / "run_dyn" / "metrics.jsonl").read_text().splitlines()
    assert {json.loads(l)["split"] for l in lines} == {"train", "heldout"}


def test_preprocess_is_bit_identical(pipeline, tmp_path):
    d = pipeline
    main(["preprocess", str(d / "c.json"), "--out", str(tmp_path / "again.anc"), "--vocab", str(d / "full.anc.vocab.tsv")])
    assert (tmp_path / "again.anc").read_bytes() == (d / "full.anc").read_bytes()
    main(["anonymize", str(tmp_path / "again.anc"), "--out", str(tmp_path / "anon.anc"), "--seed", "0"])
    assert (tmp_path / "anon.anc").read_bytes() == (d / "anon.anc").read_bytes()


def test_seed_from_environment(pipeline, tmp_path, monkeypatch):
    d = pipeline
    monkeypatch.setenv(SEED_ENV, "0")
    assert main(["anonymize", str(d / "full.anc"), "--out", str(tmp_path / "env.anc")]) == 0
    assert (tmp_path / "env.anc").read_bytes() == (d / "anon.anc").read_bytes()
    monkeypatch.setenv(SEED_ENV, "zero")
    assert main(["anonymize", str(d / "full.anc"), "--out", str(tmp_path / "bad.anc")]) == 2


def test_eval_prints_table_and_record(pipeline, capsys):
    d = pipeline
    code, out, _ = run(capsys, "eval", "--model", d / "run_dyn" / "epoch1.anm", "--corpus", d / "anon.anc",
                       "--per-category")
    record = json.loads(out.strip().splitlines()[-1])
    assert code == 0 and 0 <= record["accuracy"] <= 1 and record["total"] > 0


def test_eval_on_wrong_view_is_fingerprint_error(pipeline, capsys):
    d = pipeline
    assert run(capsys, "eval", "--model", d / "run_dyn" / "epoch1.anm", "--corpus", d / "full.anc")[0] == 3
    assert run(capsys, "eval", "--model", d / "run_full" / "epoch1.anm", "--corpus", d / "anon.anc")[0] == 3


def test_train_rejects_mismatched_view(pipeline, tmp_path, capsys):
    cfg = write_config(tmp_path / "x.cfg", mode="dynamic", corpus=pipeline / "full.anc", out_dir=tmp_path / "r")
    assert run(capsys, "train", "--config", cfg)[0] == 3


def test_ensemble_eval(pipeline, capsys):
    d = pipeline
    for b, corpus in (("dyn", "anon.anc"), ("nov", "strip.anc")):
        code, out, _ = run(capsys, "ensemble-eval", "--model-a", d / "run_full" / "epoch1.anm",
                           "--model-b", d / f"run_{b}" / "epoch1.anm",
                           "--corpus-full", d / "full.anc", "--corpus-anon", d / corpus)
        assert code == 0 and out.startswith("model-a alone")
        assert 0 <= json.loads(out.strip().splitlines()[-1])["accuracy"] <= 1


def test_complete_prints_only_leaf_positions(pipeline, tmp_path, capsys):
    d = pipeline
    line = (d / "c.json").read_text().splitlines()[0]
    (tmp_path / "p.json").write_text(line + "\n")
    vocab = ac.Vocabulary.load(d / "full.anc.vocab.tsv")
    program = vocab.encode(ac.flatten(ac.parse_ast_line(line)))
    for model in ("run_dyn", "run_full", "run_nov"):
        code, out, _ = run(capsys, "complete", "--model", d / model / "epoch1.anm", "--prefix", tmp_path / "p.json",
                           "--vocab", d / "full.anc.vocab.tsv", "--n", 5, "--cut", 5, "--seed", 0)
        rows = [r.split("\t") for r in out.strip().splitlines()]
        assert code == 0 and 0 < len(rows) <= 5
        for pos, type_name, _, source, prob in rows:
            assert program.raw[int(pos)] != ac.EMPTY
            assert type_name == vocab.type_names[program.types[int(pos)]]
            assert source == "vocab" or source.startswith("copy-")
            assert 0 <= float(prob) <= 1


def test_complete_bad_cut(pipeline, tmp_path, capsys):
    d = pipeline
    (tmp_path / "p.json").write_text((d / "c.json").read_text().splitlines()[0] + "\n")
    assert run(capsys, "complete", "--model", d / "run_full" / "epoch1.anm", "--prefix", tmp_path / "p.json",
               "--vocab", d / "full.anc.vocab.tsv", "--cut", 0)[0] == 2
