"""Small-scale experiment harness: one corpus, three data views, many runs.

A run is keyed by the hash of the training-relevant source files plus its
configuration, so repeated invocations with unchanged code reuse results.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import anonymizer as an
from . import ast_corpus as ac
from . import pysource
from .evaluator import PositionPredictions, predict_positions, score
from .model import Model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

SOURCE_FILES = ("ast_corpus.py", "pysource.py", "anonymizer.py", "autodiff.py", "model.py",
                "trainer.py", "evaluator.py", "desk.py")
VIEWS = ("full", "anon", "strip")


@dataclass
class DeskData:
    vocab: ac.Vocabulary
    k: int
    train: dict
    heldout: dict

    def n_values(self, view: str) -> int:
        return {"full": self.vocab.n_values, "anon": self.k + ac.N_DUMMY, "strip": ac.N_DUMMY}[view]


def prepare(n_programs: int = 3000, seed: int = 0, max_values: int = 1000,
            heldout_fraction: float = 0.1, coverage: float = 0.99) -> DeskData:
    """Sample functions, split, build the train-only vocabulary and the three views."""
    lines = pysource.desk_corpus(n_programs, seed=seed)
    trees = [ac.flatten(ac.parse_ast_line(line)) for line in lines]
    n_train = n_programs - int(round(n_programs * heldout_fraction))
    vocab = ac.build_vocabulary(trees[:n_train], max_values, extra=trees[n_train:])
    progs = [vocab.encode(t) for t in trees]
    k = an.select_k(progs[:n_train], coverage)
    anon, _ = an.anonymize_corpus(progs, k, seed=seed)
    strip = [an.strip_variables(p) for p in progs]
    views = {"full": progs, "anon": anon, "strip": strip}
    return DeskData(vocab, k, {v: views[v][:n_train] for v in VIEWS},
                    {v: views[v][n_train:] for v in VIEWS})


def code_hash() -> str:
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in SOURCE_FILES:
        h.update((here / name).read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunResult:
    name: str
    accuracy: float
    metrics: list
    seconds: float
    predictions: list


def _save_predictions(path: Path, preds: list[PositionPredictions]) -> None:
    rows = [{"raw": p.raw.tolist(), "prob": p.prob.tolist(), "ptr": p.from_pointer.tolist()} for p in preds]
    path.write_text(json.dumps(rows))


def _load_predictions(path: Path) -> list[PositionPredictions]:
    import numpy as np
    return [PositionPredictions(np.array(r["raw"], dtype=np.int64), np.array(r["prob"]),
                                np.array(r["ptr"], dtype=bool)) for r in json.loads(path.read_text())]


def run(data: DeskData, name: str, view: str, cfg: TrainConfig, cache_dir=None) -> RunResult:
    """Train on ``view``, score the held-out split; reuse a cached result when keys match."""
    key = hashlib.sha256(json.dumps({"code": code_hash(), "cfg": asdict(cfg), "view": view,
                                     "k": data.k, "vocab": data.vocab.fingerprint(),
                                     "n": len(data.train[view])}, sort_keys=True).encode()).hexdigest()[:16]
    rdir = Path(cache_dir) / f"{name}-{key}" if cache_dir else None
    if rdir and (rdir / "result.json").exists():
        res = json.loads((rdir / "result.json").read_text())
        log.info("%s: cached accuracy %.4f", name, res["accuracy"])
        return RunResult(name, res["accuracy"], res["metrics"], res["seconds"],
                         _load_predictions(rdir / "predictions.json"))
    t0 = time.time()
    model = Model(cfg.model_config(data.vocab.n_types, data.n_values(view)), seed=cfg.seed)
    metrics = train(model, data.train[view], cfg)
    raw = view == "full"
    preds = predict_positions(model, data.heldout[view], values_are_raw=raw)
    report = score(data.heldout[view], preds)
    seconds = time.time() - t0
    log.info("%s: accuracy %.4f in %.0fs", name, report.accuracy, seconds)
    if rdir:
        rdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(rdir / "model.anm", model, {"vocab": data.vocab.fingerprint(), "view": view})
        _save_predictions(rdir / "predictions.json", preds)
        (rdir / "result.json").write_text(json.dumps({
            "name": name, "view": view, "config": asdict(cfg), "accuracy": report.accuracy,
            "report": json.loads(report.record()), "metrics": [json.loads(m.record()) for m in metrics],
            "seconds": seconds}, indent=1))
    return RunResult(name, report.accuracy, [json.loads(m.record()) for m in metrics], seconds, preds)


# name -> (view, overrides on the base config)
ORDERING_RUNS = {
    "dyn_att": ("anon", dict(mode="dynamic", pointer=False)),
    "static_att": ("anon", dict(mode="static", pointer=False)),
    "novars_att": ("strip", dict(mode="no_vars", pointer=False)),
    "novars_ptr": ("strip", dict(mode="no_vars")),
    "static_ptr": ("anon", dict(mode="static")),
    "dyn_ptr": ("anon", dict(mode="dynamic")),
    "static_ptr_a": ("anon", dict(mode="static", strategy="ptr_priority")),
    "static_ptr_c": ("anon", dict(mode="static", strategy="min")),
    "static_ptr_d": ("anon", dict(mode="static", strategy="random")),
    "full_ptr": ("full", dict(mode="static")),
}


def run_all(data: DeskData, base: TrainConfig, names=None, cache_dir=None) -> dict[str, RunResult]:
    out = {}
    for name in names or ORDERING_RUNS:
        view, over = ORDERING_RUNS[name]
        out[name] = run(data, name, view, replace(base, **over), cache_dir)
    return out


def load_model(rdir) -> Model:
    return load_checkpoint(Path(rdir) / "model.anm")[0]
