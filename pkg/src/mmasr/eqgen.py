"""Random arithmetic identities and their spoken-word renderings.

Every equation is a true identity over small integers: the generator builds
the left-hand side first and writes its exact value on the right.  Literals
stay in 0..20 so the spoken lexicon is tiny.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

MAX_LITERAL = 20
OPERATORS = ("add", "sub", "frac", "pow", "log")

NUMBER_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
    "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
)
OPERATOR_WORDS = {
    "add": ("plus",),
    "sub": ("minus",),
    "frac": ("over",),
    "pow": ("to", "the"),
    "log": ("log", "of"),
}
EQUALS_WORD = "equals"
OPERATOR_SYMBOLS = {"add": "+", "sub": "-", "frac": "/", "pow": "^"}

# Sorted, duplicate-free word list shared by every modality encoder.
LEXICON: tuple[str, ...] = tuple(sorted(
    set(NUMBER_WORDS) | {w for ws in OPERATOR_WORDS.values() for w in ws} | {EQUALS_WORD}
))


@dataclass(frozen=True)
class Lit:
    value: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Log:
    """Base-2 logarithm of its argument."""

    arg: "Node"


Node = Union[Lit, BinOp, Log]


@dataclass(frozen=True)
class Eq:
    lhs: Node
    rhs: Node


@dataclass(frozen=True)
class Equation:
    ast: Eq
    text: str
    spoken: str

    @property
    def words(self) -> list[str]:
        return self.spoken.split(" ")


@dataclass(frozen=True)
class EquationTriple:
    equations: tuple[Equation, Equation, Equation]
    spoken_indices: tuple[int, int]
    seed: int

    def __post_init__(self):
        if len(self.equations) != 3:
            raise ValueError("a triple holds exactly 3 equations")
        a, b = self.spoken_indices
        if a == b or not {a, b} <= {0, 1, 2}:
            raise ValueError(f"bad spoken_indices {self.spoken_indices}")

    @property
    def spoken_equations(self) -> list[Equation]:
        return [self.equations[i] for i in self.spoken_indices]

    @property
    def transcript(self) -> str:
        return " ".join(e.spoken for e in self.spoken_equations)


def derive_seed(*keys) -> int:
    """Stable 64-bit seed from an arbitrary key path (ints, strings, floats)."""
    h = hashlib.blake2b(repr(keys).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def evaluate(node: Node) -> Fraction:
    if isinstance(node, Lit):
        return Fraction(node.value)
    if isinstance(node, Log):
        v = evaluate(node.arg)
        n = v.numerator
        if v.denominator != 1 or n < 1 or n & (n - 1):
            raise ValueError(f"log of {v} is not an integer")
        return Fraction(n.bit_length() - 1)
    a, b = evaluate(node.left), evaluate(node.right)
    if node.op == "add":
        return a + b
    if node.op == "sub":
        return a - b
    if node.op == "frac":
        return a / b
    if node.op == "pow":
        if b.denominator != 1:
            raise ValueError("non-integer exponent")
        return a ** int(b)
    raise ValueError(f"unknown operator {node.op!r}")


def count_operators(node: Node) -> int:
    if isinstance(node, Lit):
        return 0
    if isinstance(node, Log):
        return 1 + count_operators(node.arg)
    if isinstance(node, Eq):
        return count_operators(node.lhs) + count_operators(node.rhs)
    return 1 + count_operators(node.left) + count_operators(node.right)


def operators_in(node) -> set[str]:
    if isinstance(node, Lit):
        return set()
    if isinstance(node, Eq):
        return operators_in(node.lhs) | operators_in(node.rhs)
    if isinstance(node, Log):
        return {"log"} | operators_in(node.arg)
    return {node.op} | operators_in(node.left) | operators_in(node.right)


def number_word(n: int) -> str:
    if not isinstance(n, int) or not 0 <= n <= MAX_LITERAL:
        raise ValueError(f"literal {n!r} outside 0..{MAX_LITERAL}")
    return NUMBER_WORDS[n]


def _words(node: Node) -> list[str]:
    if isinstance(node, Lit):
        return [number_word(node.value)]
    if isinstance(node, Log):
        return list(OPERATOR_WORDS["log"]) + _words(node.arg)
    return _words(node.left) + list(OPERATOR_WORDS[node.op]) + _words(node.right)


def verbalize(ast: Eq) -> str:
    """Spoken form, e.g. ``3 + 5 = 8`` -> ``three plus five equals eight``."""
    return " ".join(_words(ast.lhs) + [EQUALS_WORD] + _words(ast.rhs))


def _symbolic(node: Node, parent: str | None = None) -> str:
    if isinstance(node, Lit):
        return str(node.value)
    if isinstance(node, Log):
        return f"log {_symbolic(node.arg, 'log')}"
    s = f"{_symbolic(node.left, node.op)} {OPERATOR_SYMBOLS[node.op]} {_symbolic(node.right, node.op)}"
    # pow and log bind tighter than everything, so only add/sub/frac need brackets
    if parent is not None and node.op in ("add", "sub", "frac"):
        s = f"({s})"
    return s


def render(ast: Eq) -> str:
    return f"{_symbolic(ast.lhs)} = {_symbolic(ast.rhs)}"


def make_equation(lhs: Node) -> Equation:
    """Close ``lhs`` into a true equation whose right side is its value."""
    value = evaluate(lhs)
    if value.denominator != 1:
        raise ValueError(f"{_symbolic(lhs)} is not an integer")
    ast = Eq(lhs, Lit(int(value)))
    return Equation(ast=ast, text=render(ast), spoken=verbalize(ast))


def _pow_leaf(rng: random.Random) -> BinOp:
    pairs = [(b, e) for e in (2, 3, 4) for b in range(1, MAX_LITERAL + 1) if b ** e <= MAX_LITERAL]
    b, e = rng.choice(pairs)
    return BinOp("pow", Lit(b), Lit(e))


def _log_leaf(rng: random.Random) -> Log:
    return Log(Lit(rng.choice([1, 2, 4, 8, 16])))


def _binary_leaf(op: str, rng: random.Random) -> BinOp:
    if op == "add":
        a = rng.randint(0, MAX_LITERAL)
        return BinOp(op, Lit(a), Lit(rng.randint(0, MAX_LITERAL - a)))
    if op == "sub":
        a = rng.randint(0, MAX_LITERAL)
        return BinOp(op, Lit(a), Lit(rng.randint(0, a)))
    b = rng.randint(1, 10)
    q = rng.randint(0, MAX_LITERAL // b)
    return BinOp(op, Lit(b * q), Lit(b))


def _leaf_op(op: str, rng: random.Random) -> Node:
    if op == "pow":
        return _pow_leaf(rng)
    if op == "log":
        return _log_leaf(rng)
    return _binary_leaf(op, rng)


def _wrap(op: str, sub: Node, rng: random.Random) -> Node | None:
    """Combine ``sub`` with one fresh literal under ``op``; None if impossible."""
    v = int(evaluate(sub))
    left_side = rng.random() < 0.5
    if op == "add":
        lit = Lit(rng.randint(0, MAX_LITERAL - v))
        return BinOp(op, sub, lit) if left_side else BinOp(op, lit, sub)
    if op == "sub":
        if left_side:
            return BinOp(op, sub, Lit(rng.randint(0, v)))
        return BinOp(op, Lit(rng.randint(v, MAX_LITERAL)), sub)
    if op == "frac":
        if left_side:
            divisors = [d for d in range(1, 11) if v % d == 0]
            return BinOp(op, sub, Lit(rng.choice(divisors)))
        if v == 0:
            return None
        return BinOp(op, Lit(v * rng.randint(0, MAX_LITERAL // v)), sub)
    return None


def generate_lhs(rng: random.Random, depth_limit: int) -> Node:
    if depth_limit < 1:
        raise ValueError("depth_limit must be >= 1")
    op = rng.choice(OPERATORS)
    node = _leaf_op(op, rng)
    # each extra level wraps the current tree in one more operator
    for _ in range(depth_limit - 1):
        if rng.random() < 0.5:
            break
        wrapped = _wrap(rng.choice(("add", "sub", "frac")), node, rng)
        if wrapped is not None:
            node = wrapped
    return node


def generate_equation(rng_seed: int, depth_limit: int = 2) -> Equation:
    rng = random.Random(rng_seed)
    return make_equation(generate_lhs(rng, depth_limit))


PERMUTATIONS = ((0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1))


def generate_triple(rng_seed: int, depth_limit: int = 2) -> EquationTriple:
    rng = random.Random(derive_seed(rng_seed, "triple"))
    equations = tuple(generate_equation(derive_seed(rng_seed, "eq", i), depth_limit) for i in range(3))
    spoken = PERMUTATIONS[rng.randrange(6)]
    return EquationTriple(equations=equations, spoken_indices=spoken, seed=rng_seed)
