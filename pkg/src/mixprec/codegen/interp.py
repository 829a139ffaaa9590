"""A small C-subset interpreter for element-wise kernel bodies.

Enough of C to execute the generated ReLU kernels on the host: typed
declarations, assignments, if/else, casts, ``min``/``max`` and the usual
integer operators. Integer arithmetic is evaluated unbounded and wrapped
to the target width at casts and typed stores; division truncates toward
zero and right shifts are arithmetic.
"""

from __future__ import annotations

import re

import numpy as np

from .builder import KernelProgram

# (bits, signed) for integer types, None for float types
BASE_TYPES = {
    "uint8_t": (8, False),
    "int8_t": (8, True),
    "uint16_t": (16, False),
    "int16_t": (16, True),
    "uint32_t": (32, False),
    "int32_t": (32, True),
    "uint64_t": (64, False),
    "int64_t": (64, True),
    "uint_tp": (32, False),
    "float": None,
    "half": None,
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*f?|\d+)|(?P<id>[A-Za-z_]\w*)|(?P<op>>>|<<|>=|<=|==|!=|&&|\|\||[-+*/%<>=?:()\[\]{};,!]))"
)


class InterpError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise InterpError(f"cannot tokenize near {text[pos:pos + 20]!r}")
        out.append(m.group(m.lastgroup))
        pos = m.end()
    return out


class TypeTable:
    def __init__(self, aliases: dict[str, str]):
        self.aliases = aliases

    def resolve(self, name: str):
        seen = set()
        while name in self.aliases:
            if name in seen:
                raise InterpError(f"cyclic type alias {name}")
            seen.add(name)
            name = self.aliases[name]
        if name not in BASE_TYPES:
            raise InterpError(f"unknown type {name}")
        return name

    def is_type(self, name: str) -> bool:
        return name in self.aliases or name in BASE_TYPES

    def convert(self, value, name: str):
        base = self.resolve(name)
        info = BASE_TYPES[base]
        if info is None:
            v = np.float32(value)
            return np.float32(np.float16(v)) if base == "half" else v
        bits, signed = info
        v = int(value)
        v &= (1 << bits) - 1
        if signed and v >= 1 << (bits - 1):
            v -= 1 << bits
        return v


# --- parser: produces nested tuples --------------------------------------


class _Parser:
    def __init__(self, tokens, types: TypeTable):
        self.toks = tokens
        self.i = 0
        self.types = types

    def peek(self, k=0):
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def take(self, expect=None):
        tok = self.peek()
        if tok is None or (expect is not None and tok != expect):
            raise InterpError(f"expected {expect!r}, got {tok!r}")
        self.i += 1
        return tok

    # statements
    def block(self):
        self.take("{")
        stmts = []
        while self.peek() != "}":
            stmts.append(self.statement())
        self.take("}")
        return ("block", stmts)

    def statement(self):
        tok = self.peek()
        if tok == "{":
            return self.block()
        if tok == "if":
            self.take("if")
            self.take("(")
            cond = self.expr()
            self.take(")")
            then = self.statement()
            other = None
            if self.peek() == "else":
                self.take("else")
                other = self.statement()
            return ("if", cond, then, other)
        if self.types.is_type(tok) and self.peek(1) not in ("(", ")"):
            ctype = self.take()
            name = self.take()
            self.take("=")
            value = self.expr()
            self.take(";")
            return ("decl", ctype, name, value)
        target = self.postfix()
        self.take("=")
        value = self.expr()
        self.take(";")
        return ("assign", target, value)

    # expressions, lowest precedence first
    def expr(self):
        cond = self.binary(0)
        if self.peek() == "?":
            self.take("?")
            a = self.expr()
            self.take(":")
            b = self.expr()
            return ("?:", cond, a, b)
        return cond

    _LEVELS = [("||",), ("&&",), ("==", "!="), ("<", ">", "<=", ">="), ("<<", ">>"), ("+", "-"), ("*", "/", "%")]

    def binary(self, level):
        if level == len(self._LEVELS):
            return self.unary()
        left = self.binary(level + 1)
        while self.peek() in self._LEVELS[level]:
            op = self.take()
            left = ("bin", op, left, self.binary(level + 1))
        return left

    def unary(self):
        tok = self.peek()
        if tok in ("-", "!", "+"):
            self.take()
            return ("un", tok, self.unary())
        if tok == "(" and self.types.is_type(self.peek(1)) and self.peek(2) == ")":
            self.take("(")
            ctype = self.take()
            self.take(")")
            return ("cast", ctype, self.unary())
        return self.postfix()

    def postfix(self):
        node = self.primary()
        while self.peek() in ("(", "["):
            if self.take() == "(":
                args = []
                while self.peek() != ")":
                    args.append(self.expr())
                    if self.peek() == ",":
                        self.take(",")
                self.take(")")
                node = ("call", node, args)
            else:
                idx = self.expr()
                self.take("]")
                node = ("index", node, idx)
        return node

    def primary(self):
        tok = self.take()
        if tok == "(":
            e = self.expr()
            self.take(")")
            return e
        if tok[0].isdigit():
            if "." in tok:
                return ("const", float(tok.rstrip("f")))
            return ("const", int(tok))
        return ("var", tok)


# --- evaluation ------------------------------------------------------------


def _cdiv(a, b):
    if isinstance(a, int) and isinstance(b, int):
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q
    return a / b


_BINOPS = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _cdiv,
    "%": lambda a, b: a - _cdiv(a, b) * b,
    "<<": lambda a, b: int(a) << int(b),
    ">>": lambda a, b: int(a) >> int(b),
    "<": lambda a, b: int(a < b),
    ">": lambda a, b: int(a > b),
    "<=": lambda a, b: int(a <= b),
    ">=": lambda a, b: int(a >= b),
    "==": lambda a, b: int(a == b),
    "!=": lambda a, b: int(a != b),
    "&&": lambda a, b: int(bool(a) and bool(b)),
    "||": lambda a, b: int(bool(a) or bool(b)),
}


class Interpreter:
    def __init__(self, types: TypeTable, arrays: dict, array_types: dict, scalars: dict, scalar_types: dict):
        self.types = types
        self.arrays = arrays
        self.array_types = array_types
        self.vars = dict(scalars)
        self.var_types = dict(scalar_types)

    def run(self, node):
        kind = node[0]
        if kind == "block":
            saved = dict(self.vars), dict(self.var_types)
            for s in node[1]:
                self.run(s)
            # block-local declarations go out of scope; assignments persist
            for name in list(self.vars):
                if name not in saved[0]:
                    del self.vars[name]
                    del self.var_types[name]
        elif kind == "if":
            if self.eval(node[1]):
                self.run(node[2])
            elif node[3] is not None:
                self.run(node[3])
        elif kind == "decl":
            _, ctype, name, value = node
            self.vars[name] = self.types.convert(self.eval(value), ctype)
            self.var_types[name] = ctype
        elif kind == "assign":
            target, value = node[1], node[2]
            v = self.eval(value)
            if target[0] == "var":
                self.vars[target[1]] = self.types.convert(v, self.var_types[target[1]])
            elif target[0] == "index":
                arr = target[1][1]
                idx = int(self.eval(target[2]))
                self.arrays[arr][idx] = self.types.convert(v, self.array_types[arr])
            else:
                raise InterpError("bad assignment target")
        else:
            raise InterpError(f"unknown statement {kind}")

    def eval(self, node):
        kind = node[0]
        if kind == "const":
            return node[1]
        if kind == "var":
            if node[1] not in self.vars:
                raise InterpError(f"undefined name {node[1]}")
            return self.vars[node[1]]
        if kind == "index":
            arr = self.arrays[node[1][1]]
            v = arr[int(self.eval(node[2]))]
            return float(v) if isinstance(v, (float, np.floating)) else int(v)
        if kind == "cast":
            return self.types.convert(self.eval(node[2]), node[1])
        if kind == "un":
            v = self.eval(node[2])
            return -v if node[1] == "-" else (int(not v) if node[1] == "!" else v)
        if kind == "bin":
            return _BINOPS[node[1]](self.eval(node[2]), self.eval(node[3]))
        if kind == "?:":
            return self.eval(node[2]) if self.eval(node[1]) else self.eval(node[3])
        if kind == "call":
            fn = node[1][1]
            args = [self.eval(a) for a in node[2]]
            if fn == "max":
                return max(args)
            if fn == "min":
                return min(args)
            raise InterpError(f"unknown function {fn}")
        raise InterpError(f"unknown expression {kind}")


_DEFINE = re.compile(r"^\s*#define\s+(\w+)\s+(\w+)\s*$", re.M)
_LOOP = re.compile(r"for\s*\(\s*\w+\s+(\w+)\s*=[^;]*;\s*\w+\s*<\s*\((\w+)\)\s*;[^{]*\{")


def loop_body(source: str) -> str:
    """Text of the grid-stride loop block, braces included."""
    m = _LOOP.search(source)
    if not m:
        raise InterpError("no grid-stride loop found")
    start = m.end() - 1
    depth = 0
    for j in range(start, len(source)):
        if source[j] == "{":
            depth += 1
        elif source[j] == "}":
            depth -= 1
            if depth == 0:
                return source[start : j + 1]
    raise InterpError("unbalanced braces in kernel")


def run_elementwise(program: KernelProgram, inputs: np.ndarray, scalars: dict) -> np.ndarray:
    """Execute the kernel loop for every index of ``inputs``.

    ``scalars`` supplies the value arguments by name; pointer arguments
    named ``in`` and ``out`` are bound to the input and a fresh output.
    """
    # setup typedefs only restate the standard widths in BASE_TYPES
    types = TypeTable(dict(_DEFINE.findall(program.source)))

    body = _Parser(tokenize(loop_body(program.source)), types).block()
    arg_types = {a.name: a.ctype for a in program.args}
    inputs = np.asarray(inputs).reshape(-1)
    in_vals = [v.item() for v in inputs]
    out_vals = [0] * len(in_vals)
    values = {}
    for a in program.args:
        if a.is_pointer:
            continue
        if a.name == "n":
            values["n"] = len(in_vals)
            continue
        if a.name not in scalars:
            raise InterpError(f"missing kernel argument {a.name}")
        values[a.name] = types.convert(scalars[a.name], a.ctype)
    interp = Interpreter(
        types,
        {"in": in_vals, "out": out_vals},
        {"in": arg_types["in"], "out": arg_types["out"]},
        values,
        {k: arg_types[k] for k in values},
    )
    for index in range(len(in_vals)):
        interp.vars["index"] = index
        interp.var_types["index"] = "uint_tp"
        interp.run(body)
    return np.array(out_vals)
