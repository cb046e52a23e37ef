"""Convert Python source into the line-per-program JSON node-array format.

The layout follows the style of the public Python150k serialization: leaf
nodes carry identifier/literal values, structural nodes carry none, and
statement lists sit under wrapper nodes (``body``, ``orelse``, ...). Unlike
that dataset, names attached to structural nodes (function names, attribute
names) become separate leaf children so that only leaves hold values.

``desk_corpus`` samples function-level programs from the interpreter's own
standard library, which gives a reproducible corpus without downloads.
"""
from __future__ import annotations

import ast
import hashlib
import json
import sysconfig
from pathlib import Path

import numpy as np

WRAPPED_LISTS = {"body", "orelse", "finalbody", "handlers", "decorator_list"}
CTX_NODES = (ast.Name, ast.Attribute, ast.Subscript, ast.Starred, ast.List, ast.Tuple)
OP_NODES = {ast.BinOp: "op", ast.UnaryOp: "op", ast.BoolOp: "op", ast.AugAssign: "op"}


def _type_name(node: ast.AST) -> str:
    name = type(node).__name__
    if isinstance(node, CTX_NODES):
        name += type(node.ctx).__name__
    field = OP_NODES.get(type(node))
    if field:
        name += type(getattr(node, field)).__name__
    if isinstance(node, ast.Compare):
        name += "".join(type(op).__name__ for op in node.ops)
    return name


def _constant(node: ast.Constant) -> dict:
    v = node.value
    if isinstance(v, str):
        return {"type": "Str", "value": v}
    if isinstance(v, bytes):
        return {"type": "Bytes", "value": repr(v)}
    if v is None or isinstance(v, bool):
        return {"type": "NameConstant", "value": repr(v)}
    if v is Ellipsis:
        return {"type": "Ellipsis"}
    return {"type": "Num", "value": repr(v)}


def to_nodes(tree: ast.AST) -> list[dict]:
    nodes: list[dict] = []

    def emit(obj: dict) -> int:
        nodes.append(obj)
        return len(nodes) - 1

    def visit(node: ast.AST) -> int:
        if isinstance(node, ast.Name):
            return emit({"type": _type_name(node), "value": node.id})
        if isinstance(node, ast.Constant):
            return emit(_constant(node))
        if isinstance(node, ast.arg) and node.annotation is None:
            return emit({"type": "NameParam", "value": node.arg})
        idx = emit({"type": _type_name(node)})
        children = []
        for fname, value in ast.iter_fields(node):
            if isinstance(value, ast.AST):
                if isinstance(value, (ast.expr_context, ast.operator, ast.unaryop, ast.boolop, ast.cmpop)):
                    continue
                children.append(visit(value))
            elif isinstance(value, str):
                if fname == "arg":
                    children.append(emit({"type": "NameParam", "value": value}))
                elif fname != "type_comment":
                    children.append(emit({"type": fname, "value": value}))
            elif isinstance(value, list) and value:
                if isinstance(value[0], ast.cmpop):
                    continue
                if fname in WRAPPED_LISTS:
                    w = emit({"type": fname})
                    children.append(w)
                    nodes[w]["children"] = [visit(v) for v in value if isinstance(v, ast.AST)]
                else:
                    for v in value:
                        if isinstance(v, ast.AST):
                            children.append(visit(v))
                        elif isinstance(v, str):
                            children.append(emit({"type": fname, "value": v}))
        if children:
            nodes[idx]["children"] = children
        return idx

    visit(tree)
    return nodes


def _strip_docstring(fn: ast.AST) -> None:
    body = getattr(fn, "body", None)
    if body and isinstance(body[0], ast.Expr) and isinstance(body[0].value, ast.Constant) \
            and isinstance(body[0].value.value, str) and len(body) > 1:
        del body[0]


def functions_from_source(source: str) -> list[ast.AST]:
    """Top-level functions and methods (nested functions stay inside their parent)."""
    tree = ast.parse(source)
    out = []

    def walk(node, inside_fn):
        for child in ast.iter_child_nodes(node):
            is_fn = isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef))
            if is_fn and not inside_fn:
                out.append(child)
            walk(child, inside_fn or is_fn)

    walk(tree, False)
    return out


def stdlib_files() -> list[Path]:
    root = Path(sysconfig.get_paths()["stdlib"])
    skip = {"test", "tests", "site-packages", "dist-packages", "idle_test", "__pycache__"}
    return sorted(p for p in root.rglob("*.py") if not skip & set(p.relative_to(root).parts))


def desk_corpus(n_programs: int, seed: int = 0, min_nodes: int = 20, max_nodes: int = 250,
                files=None) -> list[str]:
    """Sample ``n_programs`` distinct function ASTs as JSON lines."""
    lines, seen = [], set()
    for path in files if files is not None else stdlib_files():
        try:
            fns = functions_from_source(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for fn in fns:
            _strip_docstring(fn)
            nodes = to_nodes(fn)
            if not min_nodes <= len(nodes) <= max_nodes:
                continue
            line = json.dumps(nodes, ensure_ascii=False)
            key = hashlib.sha1(line.encode("utf-8")).digest()
            if key in seen:
                continue
            seen.add(key)
            lines.append(line)
    if len(lines) < n_programs:
        raise ValueError(f"only {len(lines)} candidate functions, asked for {n_programs}")
    order = np.random.default_rng(seed).permutation(len(lines))[:n_programs]
    return [lines[i] for i in order]
