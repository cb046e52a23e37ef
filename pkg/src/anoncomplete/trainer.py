"""Targets, loss strategies, AdamW and the chunked training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .ast_corpus import EOF, N_DUMMY, UNK, FlatProgram, pointer_offsets
from .autodiff import Tensor
from .model import Model, ModelConfig, StepOutput, save_checkpoint

log = logging.getLogger(__name__)

IGNORE, VOCAB, POINTER, BOTH = 0, 1, 2, 3
STRATEGIES = ("standard", "ptr_priority", "vocab_priority", "min", "random")
# letters used for the loss variants elsewhere in the literature
STRATEGY_ALIASES = {"a": "ptr_priority", "b": "vocab_priority", "c": "min", "d": "random"}


class TrainingError(RuntimeError):
    pass


@dataclass
class TargetSpec:
    """Per-position target: kind plus the vocabulary id and/or copy offset."""
    kind: np.ndarray
    vocab_id: np.ndarray
    offset: np.ndarray

    def __len__(self):
        return len(self.kind)


def make_targets(program: FlatProgram, window: int = 50) -> TargetSpec:
    """Vocab for in-vocabulary targets, Pointer for copyable UNK targets, Ignore otherwise.

    A non-dummy in-vocabulary target that is also copyable is marked Both; the
    loss strategy decides which term it pays. Copyability compares raw values,
    so UNK-mapped names are only matched with themselves.
    """
    n = len(program)
    kind = np.zeros(n, dtype=np.int64)
    vocab_id = np.zeros(n, dtype=np.int64)
    offset = pointer_offsets(program.raw, window)
    nxt = program.values[1:]
    in_vocab = nxt != UNK
    copyable = offset[:-1] > 0
    dummy = program.raw[1:] < N_DUMMY
    k = np.where(in_vocab, VOCAB, np.where(copyable, POINTER, IGNORE))
    k = np.where(in_vocab & copyable & ~dummy, BOTH, k)
    kind[:-1] = k
    vocab_id[:-1] = np.where(in_vocab, nxt, 0)
    offset = np.where((kind == POINTER) | (kind == BOTH), offset, 0)
    return TargetSpec(kind, vocab_id, offset)


def loss_masks(kind: np.ndarray, strategy: str, rng: np.random.Generator | None = None,
               pointer_available: bool = True):
    """Which term each position pays: (vocab, pointer, min-of-both) boolean masks."""
    strategy = STRATEGY_ALIASES.get(strategy, strategy)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown loss strategy {strategy!r}")
    vocab = kind == VOCAB
    ptr = kind == POINTER
    both = kind == BOTH
    use_min = np.zeros_like(vocab)
    if not pointer_available:
        return vocab | both, np.zeros_like(vocab), use_min
    if strategy in ("standard", "vocab_priority"):
        vocab = vocab | both
    elif strategy == "ptr_priority":
        ptr = ptr | both
    elif strategy == "min":
        use_min = both
    else:
        if rng is None:
            raise ValueError("the random strategy needs an rng")
        coin = rng.random(len(kind)) < 0.5
        ptr = ptr | (both & coin)
        vocab = vocab | (both & ~coin)
    return vocab, ptr, use_min


def position_loss(vocab_nll: float, ptr_nll: float, kind: int, strategy: str,
                  rng: np.random.Generator | None = None) -> float:
    """Scalar form of the per-position rule; mirrors ``step_loss``."""
    v, p, m = loss_masks(np.array([kind]), strategy, rng)
    if v[0]:
        return vocab_nll
    if p[0]:
        return ptr_nll
    if m[0]:
        return min(vocab_nll, ptr_nll)
    return 0.0


def step_loss(out: StepOutput, kind, vocab_id, offset, strategy: str,
              rng: np.random.Generator | None = None) -> tuple[Tensor | None, int]:
    """Summed NLL over one step's batch and the number of contributing positions."""
    has_ptr = out.ptr_logp is not None
    vmask, pmask, mmask = loss_masks(kind, strategy, rng, pointer_available=has_ptr)
    if has_ptr:
        n = out.ptr_logp.shape[1]
        # offsets beyond the available window cannot be paid by the pointer
        reachable = offset <= n
        vmask = vmask | (mmask & ~reachable)
        mmask = mmask & reachable
        pmask = pmask & reachable
    count = int(vmask.sum() + pmask.sum() + mmask.sum())
    if count == 0:
        return None, 0
    dtype = out.vocab_logp.dtype
    nll_v = ad.scale(ad.pick(out.vocab_logp, vocab_id), -1.0)
    total = ad.sum_(ad.mul(nll_v, vmask.astype(dtype)))
    if has_ptr and (pmask.any() or mmask.any()):
        idx = np.clip(offset - 1, 0, out.ptr_logp.shape[1] - 1)
        nll_p = ad.scale(ad.pick(out.ptr_logp, idx), -1.0)
        total = ad.add(total, ad.sum_(ad.mul(nll_p, pmask.astype(dtype))))
        if mmask.any():
            total = ad.add(total, ad.sum_(ad.mul(ad.minimum(nll_v, nll_p), mmask.astype(dtype))))
    return total, count


def chunk_loss(outs: Sequence[StepOutput], kind, vocab_id, offset, strategy: str,
               rng: np.random.Generator | None = None) -> tuple[Tensor | None, int]:
    """Sum of per-position NLL over a (B, L) chunk, plus the position count."""
    total, count = None, 0
    for t, out in enumerate(outs):
        l, c = step_loss(out, kind[:, t], vocab_id[:, t], offset[:, t], strategy, rng)
        if l is None:
            continue
        total = l if total is None else ad.add(total, l)
        count += c
    return total, count


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float
    weight_decay: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr, weight_decay, tuple(betas), eps)
        for k, p in params.items():
            self.state.m[k] = np.zeros_like(p.data)
            self.state.v[k] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def step(self) -> None:
        s = self.state
        s.step += 1
        b1, b2 = s.betas
        c1 = 1 - b1 ** s.step
        c2 = 1 - b2 ** s.step
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data *= (1 - s.lr * s.weight_decay)
            m, v = s.m[k], s.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)).astype(p.data.dtype)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def learning_rate(lr0: float, decay: float, epoch: int) -> float:
    return lr0 * decay ** epoch


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    programs: list[int]
    types: np.ndarray
    values: np.ndarray
    parents: np.ndarray
    kind: np.ndarray
    vocab_id: np.ndarray
    offset: np.ndarray
    lengths: np.ndarray


def n_chunks(length: int, window: int) -> int:
    return -(-length // window)


def make_batches(lengths: Sequence[int], window: int, batch_size: int,
                 rng: np.random.Generator | None = None) -> list[list[int]]:
    """Group program indices by chunk count, then split into batches of <= batch_size.

    With an rng, both the order inside buckets and the batch order are shuffled.
    """
    buckets: dict[int, list[int]] = {}
    for i, n in enumerate(lengths):
        buckets.setdefault(n_chunks(n, window), []).append(i)
    batches = []
    for key in sorted(buckets):
        idx = buckets[key]
        if rng is not None:
            idx = list(rng.permutation(idx))
        batches += [list(map(int, idx[j:j + batch_size])) for j in range(0, len(idx), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def collate(programs: Sequence[FlatProgram], targets: Sequence[TargetSpec], index: list[int],
            window: int) -> Batch:
    lengths = np.array([len(programs[i]) for i in index])
    L = int(lengths.max())
    B = len(index)
    types = np.zeros((B, L), dtype=np.int64)  # EOF type id
    values = np.full((B, L), EOF, dtype=np.int64)
    parents = np.full((B, L), -1, dtype=np.int64)
    kind = np.zeros((B, L), dtype=np.int64)
    vocab_id = np.zeros((B, L), dtype=np.int64)
    offset = np.zeros((B, L), dtype=np.int64)
    for r, i in enumerate(index):
        p, t, n = programs[i], targets[i], lengths[r]
        types[r, :n], values[r, :n], parents[r, :n] = p.types, p.values, p.parents
        kind[r, :n], vocab_id[r, :n], offset[r, :n] = t.kind, t.vocab_id, t.offset
    return Batch(list(index), types, values, parents, kind, vocab_id, offset, lengths)


# ----------------------------------------------------------------- config

@dataclass
class TrainConfig:
    mode: str = "dynamic"
    type_dim: int = 32
    value_dim: int = 64
    hidden_dim: int = 128
    k: str = "auto"
    coverage: float = 0.99
    window: int = 50
    attention: bool = True
    pointer: bool = True
    strategy: str = "standard"
    lr: float = 1e-3
    decay: float = 0.6
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    clip_norm: float = 5.0
    heldout_fraction: float = 0.1
    reanonymize_each_epoch: bool = False
    corpus: str = ""
    out_dir: str = "runs/default"

    def model_config(self, n_types: int, n_values: int) -> ModelConfig:
        return ModelConfig(mode=self.mode, n_types=n_types, n_values=n_values, type_dim=self.type_dim,
                           value_dim=self.value_dim, hidden_dim=self.hidden_dim, window=self.window,
                           attention=self.attention, pointer=self.pointer)


def _coerce(kind, text: str):
    if kind in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment."""
    cfg = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(types[key], value))
    cfg.strategy = STRATEGY_ALIASES.get(cfg.strategy, cfg.strategy)
    if cfg.strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {cfg.strategy!r}")
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# ----------------------------------------------------------------- loop

@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float | None = None
    lr: float | None = None
    seconds: float | None = None

    def record(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None}, sort_keys=True)


def train_batch(model: Model, opt: AdamW, batch: Batch, strategy: str, clip_norm: float,
                rng: np.random.Generator) -> tuple[float, int]:
    """One pass over a batch, one optimizer step per chunk. Returns (summed NLL, positions)."""
    W = model.cfg.window
    carry = None
    loss_sum, count_sum = 0.0, 0
    for start in range(0, batch.types.shape[1], W):
        sl = slice(start, start + W)
        with ad.Tape() as tape:
            if carry is None:
                carry = model.initial(len(batch.programs))
            outs, nxt = model.forward_chunk(carry, batch.types[:, sl], batch.values[:, sl], batch.parents[:, sl])
            total, count = chunk_loss(outs, batch.kind[:, sl], batch.vocab_id[:, sl], batch.offset[:, sl],
                                      strategy, rng)
            if total is not None:
                loss = ad.scale(total, 1.0 / count)
                if not np.isfinite(loss.data):
                    raise TrainingError("non-finite loss")
                tape.backward(loss)
        carry = nxt
        if total is None:
            model.zero_grad()
            continue
        clip_grad_norm(model.params, clip_norm)
        opt.step()
        model.zero_grad()
        loss_sum += float(total.data)
        count_sum += count
    return loss_sum, count_sum


def corpus_loss(model: Model, programs: Sequence[FlatProgram], strategy: str = "standard",
                batch_size: int = 64, seed: int = 0) -> float:
    """Mean per-position NLL over ``programs`` without touching the parameters."""
    W = model.cfg.window
    rng = np.random.default_rng(seed)
    targets = [make_targets(p, W) for p in programs]
    total, count = 0.0, 0
    for index in make_batches([len(p) for p in programs], W, batch_size):
        batch = collate(programs, targets, index, W)
        carry = model.initial(len(index))
        for start in range(0, batch.types.shape[1], W):
            sl = slice(start, start + W)
            outs, carry = model.forward_chunk(carry, batch.types[:, sl], batch.values[:, sl], batch.parents[:, sl])
            l, c = chunk_loss(outs, batch.kind[:, sl], batch.vocab_id[:, sl], batch.offset[:, sl], strategy, rng)
            if l is not None:
                total += float(l.data)
                count += c
    return total / max(count, 1)


def train(model: Model, programs: Sequence[FlatProgram], cfg: TrainConfig,
          heldout: Sequence[FlatProgram] = (), out_dir=None,
          evaluate: Callable | None = None, fingerprints: dict | None = None,
          reanonymize: Callable[[int], Sequence[FlatProgram]] | None = None,
          on_batch: Callable[[int, float], None] | None = None) -> list[EpochMetrics]:
    """Fixed-epoch training with per-epoch lr decay.

    ``evaluate(model, heldout)`` returns an accuracy; ``reanonymize(epoch)``
    returns a fresh view of ``programs`` for that epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    targets = [make_targets(p, cfg.window) for p in programs]
    metrics: list[EpochMetrics] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        t0 = time.time()
        opt.lr = learning_rate(cfg.lr, cfg.decay, epoch)
        if reanonymize is not None and epoch > 0:
            programs = reanonymize(epoch)
            targets = [make_targets(p, cfg.window) for p in programs]
        loss_sum, count_sum = 0.0, 0
        for bi, index in enumerate(make_batches([len(p) for p in programs], cfg.window, cfg.batch_size, rng)):
            batch = collate(programs, targets, index, cfg.window)
            try:
                l, c = train_batch(model, opt, batch, cfg.strategy, cfg.clip_norm, rng)
            except (TrainingError, ad.NonFiniteError) as e:
                norms = {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()}
                raise TrainingError(f"epoch {epoch} batch {bi}: {e}; parameter norms {norms}") from e
            loss_sum += l
            count_sum += c
            if on_batch is not None and c:
                on_batch(bi, l / c)
        m = EpochMetrics(epoch + 1, "train", loss_sum / max(count_sum, 1), lr=opt.lr,
                         seconds=round(time.time() - t0, 3))
        metrics.append(m)
        log.info(m.record())
        if heldout and evaluate is not None:
            hm = EpochMetrics(epoch + 1, "heldout", float("nan"), accuracy=evaluate(model, heldout))
            hm.loss = None
            metrics.append(hm)
            log.info(hm.record())
        if out:
            save_checkpoint(out / f"epoch{epoch + 1}.anm", model, fingerprints,
                            extra={"epoch": epoch + 1, "strategy": cfg.strategy})
            with open(out / "metrics.jsonl", "a") as f:
                for mm in metrics[-2 if heldout and evaluate else -1:]:
                    f.write(mm.record() + "\n")
    return metrics


# ----------------------------------------------------------------- diagnostics

def random_program(rng: np.random.Generator, length: int, k: int, n_types: int,
                   leaf_fraction: float = 0.6) -> FlatProgram:
    """Random well-formed token stream (parents precede children, trailing EOF)."""
    types = rng.integers(2, n_types, length)
    types[-1] = 0
    raw = rng.integers(N_DUMMY, N_DUMMY + k + 2, length)
    raw[rng.random(length) >= leaf_fraction] = 0
    raw[-1] = EOF
    values = np.where(raw < N_DUMMY + k, raw, UNK)
    parents = np.array([-1] + [int(rng.integers(0, i)) for i in range(1, length)])
    parents[-1] = -1
    return FlatProgram(types, values, raw, parents)


TINY_DIMS = dict(type_dim=3, value_dim=4, hidden_dim=5)


def model_gradient_check(mode: str = "dynamic", seed: int = 0, length: int = 9, batch: int = 2,
                         k: int = 5, n_types: int = 6, strategy: str = "standard",
                         eps: float = 1e-5, max_coords: int | None = None) -> tuple[float, dict]:
    """Central differences against the tape on a single-chunk mean loss in float64.

    The window covers the whole program so no truncation separates the two
    gradients. Returns the overall max relative error and the per-tensor ones.
    """
    rng = np.random.default_rng(seed)
    window = length + 1
    n_values = N_DUMMY if mode == "no_vars" else N_DUMMY + k
    cfg = ModelConfig(mode=mode, n_types=n_types, n_values=n_values, window=window,
                      dtype="float64", **TINY_DIMS)
    model = Model(cfg, seed=seed)
    for p in model.params.values():
        p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    progs = [random_program(rng, length - int(rng.integers(0, 3)) if i else length, k, n_types)
             for i in range(batch)]
    if mode == "no_vars":
        progs = [p.with_values(np.where(p.raw < N_DUMMY, p.raw, UNK)) for p in progs]
    b = collate(progs, [make_targets(p, window) for p in progs], list(range(batch)), window)

    def loss():
        outs, _ = model.forward_chunk(model.initial(batch), b.types, b.values, b.parents)
        total, count = chunk_loss(outs, b.kind, b.vocab_id, b.offset, strategy)
        return ad.scale(total, 1.0 / count)

    per = {name: ad.grad_check(loss, [p], eps=eps, max_coords=max_coords, seed=seed)
           for name, p in model.params.items()}
    return max(per.values()), per
