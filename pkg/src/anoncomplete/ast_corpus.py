"""AST ingestion, depth-first flattening, vocabularies, chunking and corpus caches.

Input files hold one program per line: a JSON array of nodes, each an object
with ``type``, optional ``value`` and optional ``children`` (indices into the
same array). Root is node 0.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EMPTY, UNK, EOF = 0, 1, 2
N_DUMMY = 3
DUMMY_VALUES = ("<EMPTY>", "<UNK>", "<EOF>")
EOF_TYPE = "<EOF>"
UNK_TYPE = "<UNK_TYPE>"
RESERVED_TYPES = (EOF_TYPE, UNK_TYPE)
DEFAULT_WINDOW = 50

# raw identities of strings unknown to a vocabulary live above this offset
UNSEEN_RAW_BASE = 1 << 40

CACHE_MAGIC = b"ANC1"


class CorpusError(ValueError):
    pass


@dataclass
class AstNode:
    type_name: str
    value: str | None = None
    children: list[int] = field(default_factory=list)


@dataclass
class ParseResult:
    programs: list[list[AstNode]]
    errors: list[tuple[int, str]]

    @property
    def n_errors(self) -> int:
        return len(self.errors)


def parse_ast_line(line: str) -> list[AstNode]:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusError(f"invalid JSON: {e}") from None
    if not isinstance(raw, list) or not raw:
        raise CorpusError("expected a non-empty array of nodes")
    nodes = []
    for i, obj in enumerate(raw):
        # some serializers terminate the array with a bare 0
        if obj == 0 and i == len(raw) - 1:
            break
        if not isinstance(obj, dict) or not isinstance(obj.get("type"), str):
            raise CorpusError(f"node {i}: missing string 'type'")
        value = obj.get("value")
        children = obj.get("children", [])
        if value is not None and not isinstance(value, str):
            value = str(value)
        if not isinstance(children, list) or not all(isinstance(c, int) for c in children):
            raise CorpusError(f"node {i}: 'children' must be a list of integers")
        if value is not None and children:
            raise CorpusError(f"node {i}: non-leaf node carries a value")
        nodes.append(AstNode(obj["type"], value, list(children)))
    validate_tree(nodes)
    return nodes


def validate_tree(nodes: Sequence[AstNode]) -> None:
    """Reject anything that is not a tree rooted at node 0."""
    n = len(nodes)
    seen_parent = [False] * n
    for i, node in enumerate(nodes):
        for c in node.children:
            if not 0 <= c < n:
                raise CorpusError(f"node {i}: child index {c} out of bounds")
            if c == 0 or seen_parent[c]:
                raise CorpusError(f"node {c}: reachable twice (cycle or shared child)")
            seen_parent[c] = True


def parse_ast_file(path) -> ParseResult:
    programs, errors = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                programs.append(parse_ast_line(line))
            except CorpusError as e:
                errors.append((lineno, str(e)))
    for lineno, msg in errors[:10]:
        log.warning("%s:%d: rejected record: %s", path, lineno, msg)
    return ParseResult(programs, errors)


# ----------------------------------------------------------------- flattening

@dataclass
class FlatTree:
    """String-level depth-first token stream; ``parents[i] == -1`` for root and EOF."""
    type_names: list[str]
    value_names: list[str]
    parents: list[int]

    def __len__(self):
        return len(self.type_names)


def flatten(nodes: Sequence[AstNode]) -> FlatTree:
    """Preorder traversal (node, then children left to right) plus a trailing EOF."""
    types, values, parents = [], [], []
    visited = [False] * len(nodes)
    stack = [(0, -1)]
    while stack:
        idx, parent_pos = stack.pop()
        if visited[idx]:
            raise CorpusError(f"cycle detected at node {idx}")
        visited[idx] = True
        node = nodes[idx]
        pos = len(types)
        types.append(node.type_name)
        if node.children:
            values.append(DUMMY_VALUES[EMPTY])
        else:
            values.append(DUMMY_VALUES[EMPTY] if node.value is None else node.value)
        parents.append(parent_pos)
        for c in reversed(node.children):
            stack.append((c, pos))
    types.append(EOF_TYPE)
    values.append(DUMMY_VALUES[EOF])
    parents.append(-1)
    return FlatTree(types, values, parents)


@dataclass
class FlatProgram:
    """Id-level token stream.

    ``values`` are ids in the model's value vocabulary. ``raw`` identifies the
    original string behind each position (never collapsed to UNK), which is
    what copy targets and correctness checks compare.
    """
    types: np.ndarray
    values: np.ndarray
    raw: np.ndarray
    parents: np.ndarray

    def __len__(self):
        return len(self.types)

    @property
    def length(self) -> int:
        return len(self.types)

    def with_values(self, values) -> "FlatProgram":
        return FlatProgram(self.types, np.asarray(values, dtype=np.int64), self.raw, self.parents)


def child_counts(parents: Sequence[int]) -> list[int]:
    counts = [0] * len(parents)
    for p in parents:
        if p >= 0:
            counts[p] += 1
    return counts


# ----------------------------------------------------------------- vocabulary

def _unseen_raw(s: str) -> int:
    digest = hashlib.blake2b(s.encode("utf-8"), digest_size=5).digest()
    return UNSEEN_RAW_BASE + int.from_bytes(digest, "little")


class Vocabulary:
    """Node-type and node-value maps with reserved dummy ids.

    ``value_names`` holds every non-dummy string seen at build time, sorted by
    frequency (ties by first occurrence). Only the first ``max_values`` of them
    get their own value id; the rest resolve to UNK but keep a distinct raw id.
    """

    def __init__(self, type_names: Sequence[str], value_names: Sequence[str],
                 value_counts: Sequence[int], max_values: int):
        self.type_names = list(type_names)
        self.value_names = list(value_names)
        self.value_counts = list(value_counts)
        # zero-count (held-out only) strings never take a slot
        self.max_values = min(max_values, sum(1 for c in self.value_counts if c > 0))
        self._type_index = {s: i for i, s in enumerate(self.type_names)}
        self._value_index = {s: i for i, s in enumerate(self.value_names)}

    @property
    def n_types(self) -> int:
        return len(self.type_names)

    @property
    def n_values(self) -> int:
        """Size of the value vocabulary the model predicts over."""
        return N_DUMMY + self.max_values

    def type_id(self, s: str) -> int:
        return self._type_index.get(s, self._type_index[UNK_TYPE])

    def raw_id(self, s: str) -> int:
        if s in DUMMY_VALUES:
            return DUMMY_VALUES.index(s)
        i = self._value_index.get(s)
        return _unseen_raw(s) if i is None else N_DUMMY + i

    def value_id(self, s: str) -> int:
        return self.resolve(self.raw_id(s))

    def resolve(self, raw: int) -> int:
        return raw if raw < self.n_values else UNK

    def value_name(self, vid: int) -> str:
        if vid < N_DUMMY:
            return DUMMY_VALUES[vid]
        return self.value_names[vid - N_DUMMY]

    def encode(self, tree: FlatTree) -> FlatProgram:
        raw = np.array([self.raw_id(s) for s in tree.value_names], dtype=np.int64)
        values = np.where(raw < self.n_values, raw, UNK)
        types = np.array([self.type_id(s) for s in tree.type_names], dtype=np.int64)
        return FlatProgram(types, values, raw, np.array(tree.parents, dtype=np.int64))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in self.type_names:
            h.update(b"T" + s.encode("utf-8") + b"\0")
        h.update(f"M{self.max_values}".encode())
        for s in self.value_names[:self.max_values]:
            h.update(b"V" + s.encode("utf-8") + b"\0")
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        """Plain text: ``id<TAB>string<TAB>count`` per line, escaped strings."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# node_types {len(self.type_names)}\n")
            for i, s in enumerate(self.type_names):
                f.write(f"{i}\t{_escape(s)}\t0\n")
            f.write(f"# node_values {len(self.value_names)} max_values={self.max_values}\n")
            for i, s in enumerate(DUMMY_VALUES):
                f.write(f"{i}\t{_escape(s)}\t0\n")
            for i, (s, c) in enumerate(zip(self.value_names, self.value_counts)):
                f.write(f"{i + N_DUMMY}\t{_escape(s)}\t{c}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        types, values, counts, max_values, section = [], [], [], 0, None
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if line.startswith("# node_types"):
                    section = "t"
                    continue
                if line.startswith("# node_values"):
                    section = "v"
                    max_values = int(line.rsplit("max_values=", 1)[1])
                    continue
                i, s, c = line.split("\t")
                if section == "t":
                    types.append(_unescape(s))
                elif int(i) >= N_DUMMY:
                    values.append(_unescape(s))
                    counts.append(int(c))
        return cls(types, values, counts, max_values)


def _escape(s: str) -> str:
    return s.encode("unicode_escape").decode("ascii")


def _unescape(s: str) -> str:
    return s.encode("ascii").decode("unicode_escape")


def count_values(corpus: Iterable[FlatTree]) -> tuple[Counter, dict[str, int], list[str]]:
    """Partial counts for one shard: value counts, first-seen rank, types in order."""
    counts: Counter = Counter()
    first: dict[str, int] = {}
    types: dict[str, None] = {}
    for tree in corpus:
        for t in tree.type_names:
            types.setdefault(t)
        for v in tree.value_names:
            if v in DUMMY_VALUES:
                continue
            counts[v] += 1
            first.setdefault(v, len(first))
    return counts, first, list(types)


def build_vocabulary(corpus: Sequence[FlatTree], max_values: int,
                     extra: Sequence[FlatTree] = ()) -> Vocabulary:
    """Full type map plus the ``max_values`` most frequent values of ``corpus``.

    Ties break by first occurrence. Strings that only occur in ``extra`` (e.g.
    a held-out split) get raw ids with count 0 but never a vocabulary slot.
    """
    if not corpus:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    if max_values < 0:
        raise CorpusError("max_values must be >= 0")
    counts, first, types = count_values(corpus)
    _, extra_first, extra_types = count_values(extra)
    ordered = sorted(counts, key=lambda s: (-counts[s], first[s]))
    tail = [s for s in sorted(extra_first, key=extra_first.get) if s not in counts]
    type_names = list(RESERVED_TYPES)
    for t in types + extra_types:
        if t not in type_names:
            type_names.append(t)
    return Vocabulary(type_names, ordered + tail, [counts[s] for s in ordered] + [0] * len(tail),
                      max_values)


# ----------------------------------------------------------------- chunking

def pointer_offsets(raw: np.ndarray, window: int) -> np.ndarray:
    """Copy offsets for the target of every position.

    The target of position ``i`` is token ``t = i + 1``. Its offset is ``t - p``
    for the last earlier position ``p`` with ``max(1, t - window) <= p <= i``
    holding the same raw value, or 0 when there is none. Position 0 is never a
    copy source (it has no preceding state to key on). The last position has no
    target and always gets 0.
    """
    n = len(raw)
    out = np.zeros(n, dtype=np.int64)
    last: dict[int, int] = {}
    for t in range(1, n):
        if t - 1 >= 1:
            last[int(raw[t - 1])] = t - 1
        p = last.get(int(raw[t]))
        if p is not None and p >= t - window:
            out[t - 1] = t - p
    return out


@dataclass
class Chunk:
    program: int
    start: int
    types: np.ndarray
    values: np.ndarray
    parents: np.ndarray
    targets: np.ndarray          # next value id, -1 where there is no next token
    pointer_targets: np.ndarray  # copy offset 1..window, 0 when not copyable
    carry: bool

    def __len__(self):
        return len(self.types)


def chunk(program: FlatProgram, window: int = DEFAULT_WINDOW, index: int = 0) -> list[Chunk]:
    if window < 1:
        raise CorpusError("window must be >= 1")
    n = len(program)
    targets = np.full(n, -1, dtype=np.int64)
    targets[:-1] = program.values[1:]
    offsets = pointer_offsets(program.raw, window)
    chunks = []
    for start in range(0, n, window):
        sl = slice(start, min(start + window, n))
        chunks.append(Chunk(index, start, program.types[sl], program.values[sl], program.parents[sl],
                            targets[sl], offsets[sl], carry=start > 0))
    return chunks


# ----------------------------------------------------------------- binary cache

@dataclass
class CorpusCache:
    programs: list[FlatProgram]
    header: dict


def write_cache(path, programs: Sequence[FlatProgram], header: dict) -> None:
    header = dict(header, n_programs=len(programs))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in programs:
            f.write(struct.pack("<I", len(p)))
            f.write(p.types.astype("<u4").tobytes())
            f.write(p.values.astype("<u4").tobytes())
            f.write(p.raw.astype("<u8").tobytes())
            f.write(p.parents.astype("<i4").tobytes())


def read_cache(path) -> CorpusCache:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise CorpusError(f"{path}: not a corpus cache (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    off = 8 + hlen
    header = json.loads(data[8:off].decode("utf-8"))
    programs = []
    for _ in range(header["n_programs"]):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = []
        for dt, width in (("<u4", 4), ("<u4", 4), ("<u8", 8), ("<i4", 4)):
            arrays.append(np.frombuffer(data, dtype=dt, count=n, offset=off).astype(np.int64))
            off += n * width
        programs.append(FlatProgram(*arrays))
    if off != len(data):
        raise CorpusError(f"{path}: trailing bytes after {header['n_programs']} programs")
    return CorpusCache(programs, header)
