"""Command-line entry point: preprocess, anonymize, train, eval, complete, diagnostics."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import anonymizer as an
from . import ast_corpus as ac
from . import autodiff as ad
from .evaluator import AlignmentError, ensemble_evaluate, evaluate
from .model import (FingerprintMismatch, ModelConfig, ModelError, load_checkpoint, parameter_count,
                    predict_next)
from .trainer import TrainingError, load_config, model_gradient_check, train

log = logging.getLogger("anoncomplete")

EXIT_OK, EXIT_BAD_INPUT, EXIT_FINGERPRINT, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "ANONCOMPLETE_SEED"
# model mode -> data view it consumes
MODE_VIEWS = {"no_vars": ("strip",), "static": ("anon", "full"), "dynamic": ("anon",),
              "dynamic_full_data": ("full",)}


class BadInput(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    outputs: list
    seconds: float = 0.0
    code_version: str = __version__
    argv: list = field(default_factory=lambda: sys.argv[1:])

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise BadInput(f"{SEED_ENV}={env!r} is not an integer")


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise BadInput(f"no such file: {path}")
    return p


def _read_cache(path) -> ac.CorpusCache:
    try:
        return ac.read_cache(_need_file(path))
    except (ac.CorpusError, ValueError, KeyError) as e:
        raise BadInput(str(e))


def _cache_fingerprints(header: dict) -> dict:
    fp = {"vocab": header.get("vocab"), "view": header.get("view")}
    if header.get("view") == "anon":
        fp["k"] = header.get("k")
    return fp


def _manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


# ----------------------------------------------------------------- data commands

def cmd_build_corpus(args) -> int:
    from . import pysource
    seed = _seed(args)
    lines = pysource.desk_corpus(args.n, seed=seed, min_nodes=args.min_nodes, max_nodes=args.max_nodes)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    RunManifest("build-corpus", {"n": args.n, "min_nodes": args.min_nodes, "max_nodes": args.max_nodes},
                {"seed": seed}, {}, [args.out]).write(_manifest_path(args.out))
    print(f"wrote {len(lines)} programs to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    t0 = time.time()
    src = _need_file(args.corpus)
    parsed = ac.parse_ast_file(src)
    if not parsed.programs:
        raise BadInput(f"{src}: no valid programs ({parsed.n_errors} rejected)")
    try:
        trees = [ac.flatten(nodes) for nodes in parsed.programs]
    except ac.CorpusError as e:
        raise BadInput(str(e))
    if args.vocab:
        vocab = ac.Vocabulary.load(_need_file(args.vocab))
        vocab_path = args.vocab
    else:
        vocab = ac.build_vocabulary(trees, args.max_values)
        vocab_path = args.vocab_out or str(args.out) + ".vocab.tsv"
        vocab.save(vocab_path)
    programs = [vocab.encode(t) for t in trees]
    header = {"view": "full", "vocab": vocab.fingerprint(), "n_types": vocab.n_types,
              "n_values": vocab.n_values, "source": _file_digest(src)}
    ac.write_cache(args.out, programs, header)
    RunManifest("preprocess", {"max_values": args.max_values, "vocab": vocab_path}, {},
                {"corpus": header["source"]}, [args.out, vocab_path], time.time() - t0
                ).write(_manifest_path(args.out))
    print(f"{len(programs)} programs ({parsed.n_errors} rejected), {vocab.n_types} types, "
          f"{vocab.n_values} values -> {args.out}")
    return EXIT_OK


def _value_filter(args, header):
    if not args.value_filter:
        return None
    if not args.vocab:
        raise BadInput("--value-filter needs --vocab to resolve type names")
    vocab = ac.Vocabulary.load(_need_file(args.vocab))
    if vocab.fingerprint() != header.get("vocab"):
        raise FingerprintMismatch(f"vocab {vocab.fingerprint()} != cache {header.get('vocab')}")
    allowed = {vocab.type_id(s.strip()) for s in args.value_filter.split(",") if s.strip()}
    return lambda type_id: type_id in allowed


def cmd_anonymize(args) -> int:
    t0 = time.time()
    cache = _read_cache(args.cache)
    if cache.header.get("view") != "full":
        raise BadInput(f"{args.cache}: expected a full-data cache, got view {cache.header.get('view')!r}")
    if args.mode == "strip":
        return _write_stripped(args, cache, t0)
    seed = _seed(args)
    if args.k == "auto":
        k = an.select_k(cache.programs, args.coverage)
    else:
        try:
            k = int(args.k)
        except ValueError:
            raise BadInput(f"--k must be 'auto' or an integer, got {args.k!r}")
        if k < 1:
            raise BadInput("--k must be >= 1")
    programs, maps = an.anonymize_corpus(cache.programs, k, seed, value_filter=_value_filter(args, cache.header))
    header = dict(cache.header, view="anon", k=k, seed=seed, n_values=k + ac.N_DUMMY)
    header.pop("n_programs", None)
    ac.write_cache(args.out, programs, header)
    maps_path = str(args.out) + ".maps.json"
    Path(maps_path).write_text(json.dumps([{str(r): p for r, p in m.mapping.items()} for m in maps]))
    RunManifest("anonymize", {"k": k, "coverage": args.coverage, "value_filter": args.value_filter},
                {"seed": seed}, {"cache": _file_digest(args.cache), "vocab": cache.header.get("vocab")},
                [args.out, maps_path], time.time() - t0).write(_manifest_path(args.out))
    n_unk = sum(int(((p.values == ac.UNK) & (p.raw >= ac.N_DUMMY)).sum()) for p in programs)
    print(f"K={k}: {len(programs)} programs, {n_unk} positions beyond K -> {args.out}")
    return EXIT_OK


def _write_stripped(args, cache, t0) -> int:
    programs = [an.strip_variables(p) for p in cache.programs]
    header = dict(cache.header, view="strip", n_values=ac.N_DUMMY)
    header.pop("n_programs", None)
    ac.write_cache(args.out, programs, header)
    RunManifest("strip", {}, {}, {"cache": _file_digest(args.cache), "vocab": cache.header.get("vocab")},
                [args.out], time.time() - t0).write(_manifest_path(args.out))
    print(f"{len(programs)} programs without variable values -> {args.out}")
    return EXIT_OK


def cmd_strip(args) -> int:
    args.mode = "strip"
    return cmd_anonymize(args)


# ----------------------------------------------------------------- training and evaluation

def _check_view(mode: str, header: dict, what: str) -> None:
    if header.get("view") not in MODE_VIEWS[mode]:
        raise FingerprintMismatch(f"{what}: mode {mode} needs a {'/'.join(MODE_VIEWS[mode])} cache, "
                                  f"got {header.get('view')!r}")


def cmd_train(args) -> int:
    t0 = time.time()
    try:
        cfg = load_config(_need_file(args.config))
    except ValueError as e:
        raise BadInput(str(e))
    if args.seed is not None or os.environ.get(SEED_ENV) is not None:
        cfg = replace(cfg, seed=_seed(args))
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if not cfg.corpus:
        raise BadInput("config has no corpus")
    cache = _read_cache(cfg.corpus)
    _check_view(cfg.mode, cache.header, cfg.corpus)
    if cache.header.get("view") == "anon" and cfg.k != "auto" and int(cfg.k) != cache.header["k"]:
        raise FingerprintMismatch(f"config K={cfg.k} but cache was anonymized with K={cache.header['k']}")
    programs = cache.programs
    n_held = int(round(len(programs) * cfg.heldout_fraction))
    train_set, heldout = programs[:len(programs) - n_held], programs[len(programs) - n_held:]
    if not train_set:
        raise BadInput("no training programs after the held-out split")
    try:
        mcfg = cfg.model_config(cache.header["n_types"], cache.header["n_values"])
    except ModelError as e:
        raise BadInput(str(e))
    from .model import Model
    model = Model(mcfg, seed=cfg.seed)
    fingerprints = _cache_fingerprints(cache.header)
    reanon = None
    if cfg.reanonymize_each_epoch and cache.header.get("view") == "anon":
        k, seed = cache.header["k"], cache.header["seed"]
        reanon = lambda epoch: an.anonymize_corpus(train_set, k, seed, epoch=epoch)[0]
    raw = cache.header.get("view") == "full"
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_file = out / "metrics.jsonl"
    if metrics_file.exists():
        metrics_file.unlink()
    train(model, train_set, cfg, heldout=heldout, out_dir=out, fingerprints=fingerprints,
          evaluate=lambda m, h: evaluate(m, h, values_are_raw=raw).accuracy, reanonymize=reanon)
    RunManifest("train", asdict(cfg), {"seed": cfg.seed},
                {"corpus": _file_digest(cfg.corpus), **fingerprints},
                sorted(str(p) for p in out.glob("epoch*.anm")) + [str(metrics_file)],
                time.time() - t0).write(out / "manifest.json")
    print(metrics_file.read_text(), end="")
    return EXIT_OK


def _load_model_for(path, header, what):
    model, mheader = load_checkpoint(_need_file(path), expect_fingerprints=_cache_fingerprints(header))
    _check_view(model.cfg.mode, header, what)
    return model


def cmd_eval(args) -> int:
    cache = _read_cache(args.corpus)
    model = _load_model_for(args.model, cache.header, args.corpus)
    report = evaluate(model, cache.programs, values_are_raw=cache.header.get("view") == "full",
                      batch_size=args.batch_size, fingerprints=_cache_fingerprints(cache.header))
    print(report.table(args.per_category))
    print(report.record())
    return EXIT_OK


def cmd_ensemble_eval(args) -> int:
    full = _read_cache(args.corpus_full)
    other = _read_cache(args.corpus_anon)
    if full.header.get("view") != "full":
        raise BadInput(f"{args.corpus_full}: --corpus-full must be a full-data cache")
    if full.header.get("vocab") != other.header.get("vocab"):
        raise FingerprintMismatch("the two corpora were built with different vocabularies")
    model_a = _load_model_for(args.model_a, full.header, args.corpus_full)
    model_b = _load_model_for(args.model_b, other.header, args.corpus_anon)
    try:
        report = ensemble_evaluate(model_a, model_b, full.programs, other.programs,
                                   b_values_are_raw=other.header.get("view") == "full",
                                   batch_size=args.batch_size)
    except AlignmentError as e:
        raise BadInput(str(e))
    alone = evaluate(model_a, full.programs, values_are_raw=True, batch_size=args.batch_size)
    print(f"model-a alone: {100 * alone.accuracy:.2f}%")
    print(report.table(args.per_category))
    print(report.record())
    return EXIT_OK


# ----------------------------------------------------------------- completion

def _value_string(vocab: ac.Vocabulary, raw: int) -> str:
    if raw < 0:
        return "<UNK>" if raw == -1 else "<unassigned>"
    if raw < ac.N_DUMMY:
        return ac.DUMMY_VALUES[raw]
    i = raw - ac.N_DUMMY
    return vocab.value_names[i] if i < len(vocab.value_names) else "<unseen>"


def cmd_complete(args) -> int:
    vocab = ac.Vocabulary.load(_need_file(args.vocab))
    lines = [l for l in _need_file(args.prefix).read_text(encoding="utf-8").splitlines() if l.strip()]
    if not lines:
        raise BadInput(f"{args.prefix}: empty")
    try:
        program = vocab.encode(ac.flatten(ac.parse_ast_line(lines[0])))
    except ac.CorpusError as e:
        raise BadInput(str(e))
    model, header = load_checkpoint(_need_file(args.model), expect_fingerprints={"vocab": vocab.fingerprint()})
    view = header["fingerprints"].get("view", "full")
    inverse = {}
    if view == "anon":
        program, amap = an.anonymize(program, header["fingerprints"]["k"], _seed(args))
        inverse = amap.inverse()
    elif view == "strip":
        program = an.strip_variables(program)
    T = len(program)
    cut = args.cut if args.cut is not None else T // 2
    if not 1 <= cut < T - 1:
        raise BadInput(f"--cut must be in [1, {T - 2}] for a program of {T} tokens")

    def to_raw(vid: int) -> int:
        if vid == ac.UNK:
            return -1
        if vid < ac.N_DUMMY or view == "full":
            return vid
        return inverse.get(vid, -2)

    V, W = model.cfg.n_values, model.cfg.window
    carry = model.initial(1)
    fed_vals, fed_raw = [], []
    printed = 0
    for i in range(T - 1):
        if i < cut:
            v, r = int(program.values[i]), int(program.raw[i])
        else:
            v, r = fed_vals[i], fed_raw[i]
        out = model.step(carry, program.types[i:i + 1], np.array([v]), program.parents[i:i + 1])
        if i < cut:
            fed_vals.append(v)
            fed_raw.append(r)
        j = i + 1
        if j < cut or j >= T - 1:
            continue
        if program.values[j] == ac.EMPTY and program.raw[j] == ac.EMPTY:
            # structural node: its value is known to be empty
            fed_vals.append(ac.EMPTY)
            fed_raw.append(ac.EMPTY)
            continue
        if printed >= args.n:
            break
        lo = max(j - W, 0)
        pred = predict_next(out.distribution()[0], list(range(j - 1, lo - 1, -1)), V)
        if pred.from_pointer:
            v, r, src = fed_vals[pred.value], fed_raw[pred.value], f"copy-{pred.offset}"
        else:
            v, r, src = pred.value, to_raw(pred.value), "vocab"
        fed_vals.append(v)
        fed_raw.append(r)
        name = vocab.type_names[int(program.types[j])] if program.types[j] < vocab.n_types else "?"
        shown = _value_string(vocab, r)
        if view == "anon" and not pred.from_pointer and v >= ac.N_DUMMY:
            shown = f"var{v - ac.N_DUMMY + 1}={shown}"
        print(f"{j}\t{name}\t{shown}\t{src}\t{pred.prob:.4f}")
        printed += 1
    if printed < args.n:
        print(f"program ended after {printed} completions", file=sys.stderr)
    return EXIT_OK


# ----------------------------------------------------------------- diagnostics

def cmd_gradcheck(args) -> int:
    if args.dims != "tiny":
        raise BadInput("only --dims tiny is supported")
    t0 = time.time()
    worst, per = model_gradient_check(args.mode, seed=_seed(args), strategy=args.strategy)
    for name, err in per.items():
        print(f"{name:<12}{err:.3e}")
    print(f"max relative error {worst:.3e} ({time.time() - t0:.1f}s)")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


# full-scale sizes of the anonymized-data models and the full-data one
FULL_SCALE_DIMS = {
    "no_vars": dict(type_dim=300, value_dim=1200, hidden_dim=1500, n_values=ac.N_DUMMY),
    "static": dict(type_dim=300, value_dim=1200, hidden_dim=1500, n_values=500 + ac.N_DUMMY),
    "dynamic": dict(type_dim=300, value_dim=500, hidden_dim=1500, n_values=500 + ac.N_DUMMY),
    "full-data static": dict(type_dim=300, value_dim=1200, hidden_dim=1500, n_values=50000 + ac.N_DUMMY),
}


def param_table(cfg: ModelConfig) -> tuple[list[str], int]:
    counts = parameter_count(cfg)
    rows = [f"  {name:<12}{n:>14,}" for name, n in counts.items()]
    return rows, sum(counts.values())


def cmd_param_report(args) -> int:
    if args.full_scale:
        configs = {label: ModelConfig(mode=label.split()[-1], n_types=args.n_types, **dims)
                   for label, dims in FULL_SCALE_DIMS.items()}
    else:
        try:
            cfg = load_config(_need_file(args.config))
        except ValueError as e:
            raise BadInput(str(e))
        if cfg.mode == "no_vars":
            n_values = ac.N_DUMMY
        elif args.n_values is not None:
            n_values = args.n_values
        elif cfg.k != "auto":
            n_values = int(cfg.k) + ac.N_DUMMY
        else:
            raise BadInput("K is 'auto' in the config: pass --n-values")
        try:
            configs = {cfg.mode: cfg.model_config(args.n_types, n_values)}
        except ModelError as e:
            raise BadInput(str(e))
    totals = {}
    for label, mcfg in configs.items():
        rows, total = param_table(mcfg)
        totals[label] = total
        print(f"{label} (types={mcfg.n_types}, values={mcfg.n_values}, dims={mcfg.type_dim}/"
              f"{mcfg.value_dim}/{mcfg.hidden_dim})")
        print("\n".join(rows))
        print(f"  {'total':<12}{total:>14,}  ({total / 1e6:.2f}M)")
    print(json.dumps({"totals": totals}, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anoncomplete", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, default=1, help="parallelism (only 1 is deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-corpus", help="sample function ASTs from the local Python stdlib")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--min-nodes", type=int, default=20)
    s.add_argument("--max-nodes", type=int, default=250)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_build_corpus)

    s = sub.add_parser("preprocess", help="parse, flatten and encode a JSON-lines AST corpus")
    s.add_argument("corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--max-values", type=int, default=50000)
    s.add_argument("--vocab", help="reuse an existing vocabulary instead of building one")
    s.add_argument("--vocab-out")
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("anonymize", help="replace values with per-program placeholders")
    s.add_argument("cache")
    s.add_argument("--out", required=True)
    s.add_argument("--k", default="auto")
    s.add_argument("--coverage", type=float, default=0.99)
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=("anonymize", "strip"), default="anonymize")
    s.add_argument("--value-filter", help="comma-separated node types whose values are anonymized")
    s.add_argument("--vocab")
    s.set_defaults(fn=cmd_anonymize)

    s = sub.add_parser("strip", help="drop every variable value (no-vars view)")
    s.add_argument("cache")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_strip)

    s = sub.add_parser("train")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train)

    for name, fn in (("eval", cmd_eval), ("ensemble-eval", cmd_ensemble_eval)):
        s = sub.add_parser(name)
        if name == "eval":
            s.add_argument("--model", required=True)
            s.add_argument("--corpus", required=True)
        else:
            s.add_argument("--model-a", required=True, help="full-data model")
            s.add_argument("--model-b", required=True, help="anonymized or no-vars model")
            s.add_argument("--corpus-full", required=True)
            s.add_argument("--corpus-anon", required=True)
        s.add_argument("--per-category", action="store_true")
        s.add_argument("--batch-size", type=int, default=64)
        s.set_defaults(fn=fn)

    s = sub.add_parser("complete", help="greedy value completion after a cut point")
    s.add_argument("--model", required=True)
    s.add_argument("--prefix", required=True, help="file whose first line is one AST")
    s.add_argument("--vocab", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--cut", type=int, help="number of tokens given to the model (default: half)")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_complete)

    s = sub.add_parser("gradcheck")
    s.add_argument("--dims", default="tiny")
    s.add_argument("--mode", default="dynamic", choices=("no_vars", "static", "dynamic", "dynamic_full_data"))
    s.add_argument("--strategy", default="standard")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("param-report")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--full-scale", action="store_true", help="the four full-scale configurations")
    s.add_argument("--n-types", type=int, default=330)
    s.add_argument("--n-values", type=int)
    s.set_defaults(fn=cmd_param_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_BAD_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers != 1:
        log.warning("--workers %d: running single-worker; parallel runs are not bit-reproducible", args.workers)
    try:
        return args.fn(args)
    except FingerprintMismatch as e:
        print(f"fingerprint mismatch: {e}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (TrainingError, ad.NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BadInput, ac.CorpusError, ModelError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
