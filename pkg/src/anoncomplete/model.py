"""Attentional pointer LSTM over (node type, node value) streams.

Four value-embedding regimes share one recurrent backbone:

``no_vars``
    values are only the three dummies; variables arrive as UNK.
``static``
    a trainable lookup table per value id (also used for the full-data
    standard model, where ids are real names).
``dynamic``
    per-program placeholder embeddings held in a :class:`DynamicEmbeddingBank`;
    every slot starts from one shared trainable state and is advanced by its
    own LSTM each time its placeholder is read.
``dynamic_full_data``
    same as ``dynamic`` but each slot starts from a trainable per-value
    embedding.

Everything is batched over programs that advance in lockstep, so all items of
a batch sit at the same absolute position.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ast_corpus import EOF, N_DUMMY
from .autodiff import Tensor

MODES = ("no_vars", "static", "dynamic", "dynamic_full_data")
CHECKPOINT_MAGIC = b"ANM1"


class ModelError(ValueError):
    pass


class FingerprintMismatch(ModelError):
    pass


@dataclass
class ModelConfig:
    mode: str = "dynamic"
    n_types: int = 2
    n_values: int = N_DUMMY
    type_dim: int = 32
    value_dim: int = 64
    hidden_dim: int = 128
    window: int = 50
    attention: bool = True
    pointer: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.pointer and not self.attention:
            raise ModelError("pointer requires attention")
        if self.window < 1:
            raise ModelError("window must be >= 1")
        if min(self.type_dim, self.value_dim, self.hidden_dim, self.n_types) < 1:
            raise ModelError("dimensions must be >= 1")
        if self.mode == "no_vars":
            self.n_values = N_DUMMY
        if self.n_values < N_DUMMY:
            raise ModelError("value vocabulary must include the dummy ids")

    @property
    def dynamic(self) -> bool:
        return self.mode in ("dynamic", "dynamic_full_data")

    @property
    def n_slots(self) -> int:
        return self.n_values - N_DUMMY

    @property
    def head_dim(self) -> int:
        # dynamic logits are dot products with embeddings, so the head must match them
        return self.value_dim if self.dynamic else self.hidden_dim


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, D, E = cfg.hidden_dim, cfg.value_dim, cfg.type_dim
    shapes: dict[str, tuple[int, ...]] = {"type_emb": (cfg.n_types, E)}
    if cfg.dynamic:
        shapes["dummy_emb"] = (N_DUMMY, D)
        shapes["dyn_init_h"] = (cfg.n_slots, D) if cfg.mode == "dynamic_full_data" else (D,)
        shapes["dyn_init_c"] = (D,)
        shapes["dyn_w"] = (H + E + D, 4 * D)
        shapes["dyn_b"] = (4 * D,)
    else:
        shapes["value_emb"] = (cfg.n_values, D)
    shapes["main_w"] = (D + E + H, 4 * H)
    shapes["main_b"] = (4 * H,)
    shapes["h_init"] = (H,)
    shapes["c_init"] = (H,)
    if cfg.attention:
        shapes["att_wk"] = (H, H)
        shapes["att_bk"] = (H,)
        shapes["att_wq"] = (H, H)
        shapes["att_v"] = (H, 1)
    n_in = H * (3 if cfg.attention else 2)
    shapes["head_w"] = (n_in, cfg.head_dim)
    shapes["head_b"] = (cfg.head_dim,)
    if not cfg.dynamic:
        shapes["out_w"] = (H, cfg.n_values)
        shapes["out_b"] = (cfg.n_values,)
    if cfg.pointer:
        shapes["sw_w"] = (cfg.head_dim, 1)
        shapes["sw_b"] = (1,)
    return shapes


# trainable initial states start at zero; everything else is uniform
ZERO_INIT = {"h_init", "c_init", "dyn_init_c"}


def parameter_count(cfg: ModelConfig) -> dict[str, int]:
    return {k: int(np.prod(s)) for k, s in parameter_shapes(cfg).items()}


class DynamicEmbeddingBank:
    """Per-program (h, c) slots for placeholders ``var1..varK``.

    Slots are numpy arrays updated in place. Under a tape every write stores
    the overwritten rows and its backward step restores them, so reads and
    logits see exactly the slot values they saw going forward when the tape
    is replayed in reverse. Gradients for slot values live in ``_gh``/``_gc``
    during backward; whatever is left at the start of the chunk flows to the
    initial-state parameters for slots that were never written.
    """

    def __init__(self, h: np.ndarray, c: np.ndarray, written: np.ndarray,
                 init_h: Tensor, init_c: Tensor):
        self.h, self.c, self.written = h, c, written
        self.init_h, self.init_c = init_h, init_c
        self._gh: np.ndarray | None = None
        self._gc: np.ndarray | None = None

    @classmethod
    def fresh(cls, batch: int, n_slots: int, init_h: Tensor, init_c: Tensor) -> "DynamicEmbeddingBank":
        d = init_c.shape[0]
        h = np.broadcast_to(init_h.data, (batch, n_slots, d)).copy()
        c = np.broadcast_to(init_c.data, (batch, n_slots, d)).copy()
        return cls(h, c, np.zeros((batch, n_slots), dtype=bool), init_h, init_c)

    def copy(self) -> "DynamicEmbeddingBank":
        return DynamicEmbeddingBank(self.h.copy(), self.c.copy(), self.written.copy(),
                                    self.init_h, self.init_c)

    @property
    def batch(self) -> int:
        return self.h.shape[0]

    def _grads(self):
        if self._gh is None:
            self._gh = np.zeros_like(self.h)
            self._gc = np.zeros_like(self.c)
        return self._gh, self._gc

    def attach(self) -> None:
        """Register the sink for chunk-start slot gradients; call before any read."""
        tape = ad.active_tape()
        if tape is None:
            return
        fresh = ~self.written
        per_value = self.init_h.data.ndim == 2

        def flush():
            gh, gc = self._gh, self._gc
            self._gh = self._gc = None
            if gh is None:
                return
            m = fresh[:, :, None]
            if self.init_h.requires_grad:
                ad.accumulate(self.init_h, (gh * m).sum(axis=0) if per_value else (gh * m).sum(axis=(0, 1)))
            if self.init_c.requires_grad:
                ad.accumulate(self.init_c, (gc * m).sum(axis=(0, 1)))

        tape.record(flush)

    def read(self, slots: np.ndarray) -> tuple[Tensor, Tensor]:
        rows = np.arange(self.batch)
        tape = ad.active_tape()
        h = Tensor(self.h[rows, slots], requires_grad=tape is not None)
        c = Tensor(self.c[rows, slots], requires_grad=tape is not None)
        if tape is not None:
            def back():
                gh, gc = self._grads()
                if h.grad is not None:
                    gh[rows, slots] += h.grad
                if c.grad is not None:
                    gc[rows, slots] += c.grad

            tape.record(back)
        return h, c

    def write(self, slots: np.ndarray, h_new: Tensor, c_new: Tensor, mask: np.ndarray) -> None:
        rows = np.arange(self.batch)
        sel_r, sel_s = rows[mask], slots[mask]
        old_h = self.h[rows, slots].copy()
        old_c = self.c[rows, slots].copy()
        old_w = self.written[rows, slots].copy()
        self.h[sel_r, sel_s] = h_new.data[mask]
        self.c[sel_r, sel_s] = c_new.data[mask]
        self.written[sel_r, sel_s] = True
        tape = ad.active_tape()
        if tape is None:
            return
        m = mask[:, None]

        def back():
            gh, gc = self._grads()
            g_h = gh[rows, slots] * m
            g_c = gc[rows, slots] * m
            gh[sel_r, sel_s] = 0
            gc[sel_r, sel_s] = 0
            self.h[rows, slots] = old_h
            self.c[rows, slots] = old_c
            self.written[rows, slots] = old_w
            if h_new.requires_grad:
                ad.accumulate(h_new, g_h)
            if c_new.requires_grad:
                ad.accumulate(c_new, g_c)

        tape.record(back)

    def logits(self, hhat: Tensor) -> Tensor:
        """Dot product of every slot's current embedding with ``hhat``: (B, K)."""
        out = Tensor(np.einsum("bkd,bd->bk", self.h, hhat.data))
        ad.check_finite(out.data, "bank logits")
        tape = ad.active_tape()
        if tape is not None:
            out.requires_grad = True

            def back():
                g = out.grad
                if g is None:
                    return
                gh, _ = self._grads()
                gh += g[:, :, None] * hhat.data[:, None, :]
                if hhat.requires_grad:
                    ad.accumulate(hhat, np.einsum("bk,bkd->bd", g, self.h))

            tape.record(back)
        return out


class StepState:
    """Main-LSTM state, attention memory and parent-hidden history for a batch."""

    def __init__(self, h: Tensor, c: Tensor, hidden: int, dtype):
        self.h, self.c = h, c
        batch = h.shape[0]
        self.mem: list[Tensor] = []    # hidden states of the previous <= window positions
        self.keys: list[Tensor] = []   # their attention-key projections
        self.hist = np.zeros((batch, 64, hidden), dtype=dtype)
        self.pos = 0
        self.chunk_start = 0
        self.chunk_steps: list[Tensor] = []

    @property
    def batch(self) -> int:
        return self.h.shape[0]

    def record_hidden(self, h: Tensor) -> None:
        if self.pos >= self.hist.shape[1]:
            grown = np.zeros((self.batch, 2 * self.hist.shape[1], self.hist.shape[2]), self.hist.dtype)
            grown[:, :self.pos] = self.hist[:, :self.pos]
            self.hist = grown
        self.hist[:, self.pos] = h.data
        self.chunk_steps.append(h)

    def parent_hidden(self, parents: np.ndarray) -> Tensor:
        rows = np.arange(self.batch)
        fallback = np.where((parents >= 0)[:, None], self.hist[rows, np.maximum(parents, 0)], 0)
        local = np.where(parents >= self.chunk_start, parents - self.chunk_start, -1)
        return ad.gather_steps(self.chunk_steps, local, fallback.astype(self.hist.dtype))

    def detached(self) -> "StepState":
        """Copy with every tensor cut from the tape; starts a new chunk."""
        new = StepState.__new__(StepState)
        new.h = Tensor(self.h.data.copy())
        new.c = Tensor(self.c.data.copy())
        new.mem = [Tensor(t.data) for t in self.mem]
        new.keys = [Tensor(t.data) for t in self.keys]
        new.hist = self.hist.copy()
        new.pos = self.pos
        new.chunk_start = self.pos
        new.chunk_steps = []
        return new


@dataclass
class StepOutput:
    vocab_logp: Tensor          # (B, V) log of s * w
    ptr_logp: Tensor | None     # (B, n) log of (1 - s) * l over offsets 1..n
    logits: Tensor              # (B, V) value logits y
    scores: Tensor | None       # (B, n) attention scores l (pre-softmax)
    switcher: np.ndarray | None  # (B,) s
    window: int

    def distribution(self) -> np.ndarray:
        """Merged distribution (B, V + window); absent pointer slots carry zero mass."""
        b, v = self.vocab_logp.shape
        out = np.zeros((b, v + self.window), dtype=np.float64)
        out[:, :v] = np.exp(self.vocab_logp.data)
        if self.ptr_logp is not None:
            n = self.ptr_logp.shape[1]
            out[:, v:v + n] = np.exp(self.ptr_logp.data)
        return out


@dataclass
class Carry:
    state: StepState
    bank: DynamicEmbeddingBank | None = None


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        if params is None:
            params = self.init_params(cfg, seed)
        self.params = params
        for k, shape in parameter_shapes(cfg).items():
            if k not in params or params[k].shape != shape:
                raise ModelError(f"parameter {k!r} missing or misshaped (want {shape})")
        self.p = params

    @staticmethod
    def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype)
        out = {}
        for name, shape in parameter_shapes(cfg).items():
            if name in ZERO_INIT or (name == "dyn_init_h" and len(shape) == 1):
                data = np.zeros(shape, dtype=dtype)
            else:
                data = rng.uniform(-0.05, 0.05, size=shape).astype(dtype)
            out[name] = ad.param(data, name=name)
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------- state

    def initial(self, batch: int) -> Carry:
        """Fresh program state. Call inside the tape so ``h_init`` gets gradients."""
        h = ad.broadcast_rows(self.p["h_init"], batch)
        c = ad.broadcast_rows(self.p["c_init"], batch)
        state = StepState(h, c, self.cfg.hidden_dim, self.dtype)
        bank = None
        if self.cfg.dynamic:
            bank = DynamicEmbeddingBank.fresh(batch, self.cfg.n_slots, self.p["dyn_init_h"], self.p["dyn_init_c"])
        return Carry(state, bank)

    # ------------------------------------------------------------- forward

    def step(self, carry: Carry, types, values, parents) -> StepOutput:
        """Consume one token per batch item and predict the next value.

        Mutates ``carry`` in place (state advances one position, the bank
        updates the slot of each item's current placeholder).
        """
        cfg, p = self.cfg, self.p
        state, bank = carry.state, carry.bank
        types = np.asarray(types, dtype=np.int64)
        values = np.asarray(values, dtype=np.int64)
        parents = np.asarray(parents, dtype=np.int64)
        if values.min() < 0 or values.max() >= cfg.n_values:
            raise ModelError(f"value id out of range [0, {cfg.n_values})")
        batch = len(types)

        e_type = ad.embedding(p["type_emb"], types)
        h_prev, c_prev = state.h, state.c
        if cfg.dynamic:
            is_dummy = values < N_DUMMY
            slots = np.where(is_dummy, 0, values - N_DUMMY)
            slot_h, slot_c = bank.read(slots)
            e_dummy = ad.embedding(p["dummy_emb"], np.minimum(values, EOF))
            e_value = ad.where(is_dummy[:, None], e_dummy, slot_h)
        else:
            e_value = ad.embedding(p["value_emb"], values)

        h, c = ad.lstm_cell(ad.concat([e_value, e_type]), h_prev, c_prev, p["main_w"], p["main_b"])
        if cfg.dynamic:
            new_h, new_c = ad.lstm_cell(ad.concat([h_prev, e_type]), slot_h, slot_c, p["dyn_w"], p["dyn_b"])
            bank.write(slots, new_h, new_c, ~is_dummy)

        parts = [h]
        scores = None
        n_mem = len(state.mem)
        if cfg.attention:
            if n_mem == 0:
                ctx = Tensor(np.zeros((batch, cfg.hidden_dim), dtype=self.dtype))
            else:
                keys = ad.stack(state.keys[::-1], axis=1)          # offset 1 first
                q = ad.matmul(h, p["att_wq"])
                e = ad.tanh(ad.add(keys, ad.reshape(q, (batch, 1, cfg.hidden_dim))))
                scores = ad.reshape(ad.matmul(e, p["att_v"]), (batch, n_mem))
                alpha = ad.softmax(scores)
                ctx = ad.weighted_sum(alpha, ad.stack(state.mem[::-1], axis=1))
            parts.append(ctx)
        parts.append(state.parent_hidden(parents))
        hhat = ad.tanh(ad.linear(ad.concat(parts), p["head_w"], p["head_b"]))

        if cfg.dynamic:
            logits = ad.concat([ad.matmul(hhat, ad.transpose(p["dummy_emb"])), bank.logits(hhat)])
        else:
            logits = ad.linear(hhat, p["out_w"], p["out_b"])

        ptr_logp = switcher = None
        if cfg.pointer and n_mem > 0:
            z = ad.linear(hhat, p["sw_w"], p["sw_b"])
            vocab_logp = ad.add(ad.log_softmax(logits), ad.log_sigmoid(z))
            ptr_logp = ad.add(ad.log_softmax(scores), ad.log_sigmoid(ad.scale(z, -1.0)))
            switcher = 1.0 / (1.0 + np.exp(-z.data[:, 0].astype(np.float64)))
        else:
            vocab_logp = ad.log_softmax(logits)

        # advance
        if cfg.attention:
            state.mem.append(h)
            state.keys.append(ad.linear(h, p["att_wk"], p["att_bk"]))
            if len(state.mem) > cfg.window:
                state.mem.pop(0)
                state.keys.pop(0)
        state.record_hidden(h)
        state.h, state.c = h, c
        state.pos += 1
        return StepOutput(vocab_logp, ptr_logp, logits, scores, switcher, cfg.window)

    def forward_chunk(self, carry: Carry, types, values, parents) -> tuple[list[StepOutput], Carry]:
        """Run ``step`` over (B, L) id arrays; returns outputs and a detached carry.

        The input carry is advanced in place; the returned carry is a copy
        that no tape references, ready for the next chunk.
        """
        types, values, parents = (np.atleast_2d(np.asarray(a)) for a in (types, values, parents))
        if carry.bank is not None:
            carry.bank.attach()
        outs = [self.step(carry, types[:, t], values[:, t], parents[:, t]) for t in range(types.shape[1])]
        nxt = Carry(carry.state.detached(), carry.bank.copy() if carry.bank is not None else None)
        return outs, nxt


# ----------------------------------------------------------------- prediction

@dataclass
class Prediction:
    from_pointer: bool
    value: int          # vocab id, or the window value when copied
    offset: int = 0     # copy offset (1..window) when from_pointer
    prob: float = 0.0


def predict_next(distribution: np.ndarray, window_values, n_values: int) -> Prediction:
    """Argmax of the merged distribution; ties go to the lowest index (vocabulary first)."""
    j = int(np.argmax(distribution))
    prob = float(distribution[j])
    if j < n_values:
        return Prediction(False, j, 0, prob)
    k = j - n_values + 1
    return Prediction(True, int(window_values[k - 1]), k, prob)


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: Model, fingerprints: dict | None = None, extra: dict | None = None) -> None:
    header = {"config": asdict(model.cfg), "fingerprints": fingerprints or {}, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, expect_fingerprints: dict | None = None) -> tuple[Model, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    off = 8 + hlen
    header = json.loads(data[8:off])
    if expect_fingerprints:
        have = header.get("fingerprints", {})
        for k, v in expect_fingerprints.items():
            if k in have and have[k] != v:
                raise FingerprintMismatch(f"{path}: {k} fingerprint {have[k]} != expected {v}")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        name = data[off + 4:off + 4 + nlen].decode("utf-8")
        off += 4 + nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
        params[name] = ad.param(arr, name=name)
    cfg = ModelConfig(**header["config"])
    cfg.dtype = "float32"
    return Model(cfg, params), header


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:12]
