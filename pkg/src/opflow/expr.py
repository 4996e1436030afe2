"""Placeholder substitution and the boolean expression language.

Conditions follow a render-then-parse pipeline: ``{{path}}`` placeholders are
substituted with literal values first, then the resulting text is parsed and
evaluated.  Values are injected as quoted strings unless their text already
reads as a number or bool literal.

Grammar (whitespace insignificant)::

    expr := or
    or   := and ("||" and)*
    and  := not ("&&" not)*
    not  := "!" not | cmp
    cmp  := term (("==" | "!=" | "<" | "<=" | ">" | ">=") term)?
    term := number | quoted-string | "true" | "false" | "(" expr ")"

There is no arithmetic.  Evaluation is strict (both operands of ``&&`` and
``||`` are evaluated), logical operators require bool operands, ordered
comparison requires numeric operands, and ``==``/``!=`` across different
operand kinds yield False/True rather than an error.  Numeric equality is
exact when both operands are integer literals, binary floating point
otherwise.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

from .errors import ExpressionParseError, ExpressionTypeError, UnboundPlaceholder
from .model import ParameterValue

# ---------------------------------------------------------------------------
# Placeholders

# Paths inside {{...}}: dotted identifier segments, hyphens allowed in names.
PATH_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*$")

Scope = Mapping[str, Union[ParameterValue, str]]


def _scope_text(scope: Scope, path: str) -> str:
    value = scope[path]
    if isinstance(value, ParameterValue):
        return value.text
    return value


def _scan(text: str, scope: Scope, substitute) -> str:
    """Shared single-pass placeholder scanner.

    At each ``{{`` the nearest following ``}}`` delimits a candidate path.
    Candidates that do not look like a path (after stripping spaces) are not
    placeholders: the brace is emitted and scanning resumes one character
    later, which is what makes ``{{{x}}}`` mean "literal brace around
    ``{{x}}``".  Candidates that do look like a path must be bound.
    """
    out: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        if text[i] == "{" and i + 1 < n and text[i + 1] == "{":
            end = text.find("}}", i + 2)
            if end != -1:
                path = text[i + 2 : end].strip()
                if PATH_RE.match(path):
                    if path not in scope:
                        raise UnboundPlaceholder(path)
                    out.append(substitute(_scope_text(scope, path)))
                    i = end + 2
                    continue
        out.append(text[i])
        i += 1
    return "".join(out)


def render_placeholders(text: str, scope: Scope) -> str:
    """Replace each ``{{path}}`` with the bound value's text, single-pass.

    Substituted content is never re-expanded.  Raises UnboundPlaceholder for
    a path-shaped placeholder with no binding.
    """
    return _scan(text, scope, lambda value: value)


def iter_placeholder_paths(text: str) -> list[str]:
    """All path-shaped ``{{...}}`` occurrences, in order, without resolving."""
    paths: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        if text[i] == "{" and i + 1 < n and text[i + 1] == "{":
            end = text.find("}}", i + 2)
            if end != -1:
                path = text[i + 2 : end].strip()
                if PATH_RE.match(path):
                    paths.append(path)
                    i = end + 2
                    continue
        i += 1
    return paths


_NUMBER_RE = re.compile(r"-?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?")
_INT_TEXT_RE = re.compile(r"^-?[0-9]+$")


def _inject_literal(value: str) -> str:
    if _NUMBER_RE.fullmatch(value) or value in ("true", "false"):
        return value
    escaped = value.replace("\\", "\\\\").replace("'", "\\'")
    return f"'{escaped}'"


def render_condition(text: str, scope: Scope) -> str:
    """Substitute placeholders as expression literals (quoting non-numerics)."""
    return _scan(text, scope, _inject_literal)


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    """A numeric literal; the source text is kept for exact int comparison."""

    text: str

    @property
    def is_int(self) -> bool:
        return _INT_TEXT_RE.match(self.text) is not None

    @property
    def value(self):
        return int(self.text) if self.is_int else float(self.text)


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class Bool:
    value: bool


@dataclass(frozen=True)
class Cmp:
    op: str  # one of == != < <= > >=
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Not:
    operand: "Expr"


Expr = Union[Num, Str, Bool, Cmp, And, Or, Not]

_CMP_OPS = ("==", "!=", "<=", ">=", "<", ">")


# ---------------------------------------------------------------------------
# Tokenizer


@dataclass(frozen=True)
class _Token:
    kind: str  # op, number, string, bool, lparen, rparen, eof
    value: str
    pos: int  # character position in the source text


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def _parse_error(text: str, pos: int, message: str) -> ExpressionParseError:
    return ExpressionParseError(message, _byte_offset(text, pos))


_STRING_ESCAPES = {"\\": "\\", "'": "'", '"': '"', "n": "\n", "t": "\t"}


def _tokenize(text: str) -> Iterator[_Token]:
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            i += 1
            continue
        two = text[i : i + 2]
        if two in ("==", "!=", "<=", ">=", "&&", "||"):
            yield _Token("op", two, i)
            i += 2
            continue
        if ch in "<>!":
            yield _Token("op", ch, i)
            i += 1
            continue
        if ch == "(":
            yield _Token("lparen", ch, i)
            i += 1
            continue
        if ch == ")":
            yield _Token("rparen", ch, i)
            i += 1
            continue
        if ch in "'\"":
            quote = ch
            j = i + 1
            out: list[str] = []
            while j < n:
                c = text[j]
                if c == "\\":
                    if j + 1 >= n:
                        raise _parse_error(text, j, "dangling backslash in string")
                    esc = text[j + 1]
                    out.append(_STRING_ESCAPES.get(esc, esc))
                    j += 2
                    continue
                if c == quote:
                    break
                out.append(c)
                j += 1
            else:
                raise _parse_error(text, i, "unterminated string literal")
            yield _Token("string", "".join(out), i)
            i = j + 1
            continue
        match = _NUMBER_RE.match(text, i)
        if match and (ch.isdigit() or ch in ".-"):
            yield _Token("number", match.group(0), i)
            i = match.end()
            continue
        word = re.match(r"[A-Za-z_][A-Za-z0-9_]*", text[i:])
        if word:
            if word.group(0) in ("true", "false"):
                yield _Token("bool", word.group(0), i)
                i += len(word.group(0))
                continue
            raise _parse_error(text, i, f"unexpected identifier {word.group(0)!r}")
        raise _parse_error(text, i, f"unexpected character {ch!r}")
    yield _Token("eof", "", n)


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.tokens = list(_tokenize(text))
        self.index = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        token = self.current
        self.index += 1
        return token

    def fail(self, message: str) -> ExpressionParseError:
        return _parse_error(self.text, self.current.pos, message)

    def parse(self) -> Expr:
        expr = self.parse_or()
        if self.current.kind != "eof":
            raise self.fail(f"unexpected trailing input {self.current.value!r}")
        return expr

    def parse_or(self) -> Expr:
        left = self.parse_and()
        while self.current.kind == "op" and self.current.value == "||":
            self.advance()
            left = Or(left, self.parse_and())
        return left

    def parse_and(self) -> Expr:
        left = self.parse_not()
        while self.current.kind == "op" and self.current.value == "&&":
            self.advance()
            left = And(left, self.parse_not())
        return left

    def parse_not(self) -> Expr:
        if self.current.kind == "op" and self.current.value == "!":
            self.advance()
            return Not(self.parse_not())
        return self.parse_cmp()

    def parse_cmp(self) -> Expr:
        left = self.parse_term()
        if self.current.kind == "op" and self.current.value in _CMP_OPS:
            op = self.advance().value
            right = self.parse_term()
            return Cmp(op, left, right)
        return left

    def parse_term(self) -> Expr:
        token = self.current
        if token.kind == "number":
            self.advance()
            return Num(token.value)
        if token.kind == "string":
            self.advance()
            return Str(token.value)
        if token.kind == "bool":
            self.advance()
            return Bool(token.value == "true")
        if token.kind == "lparen":
            self.advance()
            inner = self.parse_or()
            if self.current.kind != "rparen":
                raise self.fail("expected ')'")
            self.advance()
            return inner
        raise self.fail(
            f"expected a literal or '(', got {token.value!r}"
            if token.kind != "eof"
            else "unexpected end of expression"
        )


def parse_expression(text: str) -> Expr:
    """Parse condition text into an AST; raises ExpressionParseError."""
    if not text.strip():
        raise ExpressionParseError("empty expression", 0)
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printing (used by tests and diagnostics; fully parenthesized)


def print_expression(expr: Expr) -> str:
    if isinstance(expr, Num):
        return expr.text
    if isinstance(expr, Str):
        escaped = expr.value.replace("\\", "\\\\").replace("'", "\\'")
        return f"'{escaped}'"
    if isinstance(expr, Bool):
        return "true" if expr.value else "false"
    if isinstance(expr, Cmp):
        return f"({print_expression(expr.left)} {expr.op} {print_expression(expr.right)})"
    if isinstance(expr, And):
        return f"({print_expression(expr.left)} && {print_expression(expr.right)})"
    if isinstance(expr, Or):
        return f"({print_expression(expr.left)} || {print_expression(expr.right)})"
    if isinstance(expr, Not):
        # outer parens keep the text reparseable in any operand position
        return f"(!{print_expression(expr.operand)})"
    raise TypeError(f"not an Expr: {expr!r}")


# ---------------------------------------------------------------------------
# Evaluation


def _kind(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, (int, float)):
        return "num"
    return "str"


def _num_equal(a, b) -> bool:
    # exact when both came from integer literals, float domain otherwise
    if isinstance(a, int) and isinstance(b, int):
        return a == b
    return float(a) == float(b)


def _evaluate(expr: Expr):
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Str):
        return expr.value
    if isinstance(expr, Bool):
        return expr.value
    if isinstance(expr, Not):
        operand = _evaluate(expr.operand)
        if _kind(operand) != "bool":
            raise ExpressionTypeError("'!' requires a bool operand")
        return not operand
    if isinstance(expr, (And, Or)):
        left = _evaluate(expr.left)
        right = _evaluate(expr.right)
        if _kind(left) != "bool" or _kind(right) != "bool":
            op = "&&" if isinstance(expr, And) else "||"
            raise ExpressionTypeError(f"{op!r} requires bool operands")
        return (left and right) if isinstance(expr, And) else (left or right)
    if isinstance(expr, Cmp):
        left = _evaluate(expr.left)
        right = _evaluate(expr.right)
        lk, rk = _kind(left), _kind(right)
        if expr.op in ("==", "!="):
            if lk != rk:
                equal = False
            elif lk == "num":
                equal = _num_equal(left, right)
            else:
                equal = left == right
            return equal if expr.op == "==" else not equal
        if lk != "num" or rk != "num":
            raise ExpressionTypeError(
                f"ordered comparison {expr.op!r} requires numeric operands"
            )
        if isinstance(left, int) and isinstance(right, int):
            a, b = left, right
        else:
            a, b = float(left), float(right)
        if expr.op == "<":
            return a < b
        if expr.op == "<=":
            return a <= b
        if expr.op == ">":
            return a > b
        return a >= b
    raise TypeError(f"not an Expr: {expr!r}")


def eval_expression(expr: Expr) -> bool:
    """Evaluate an AST to a bool; raises ExpressionTypeError when ill-typed."""
    result = _evaluate(expr)
    if _kind(result) != "bool":
        raise ExpressionTypeError("condition must evaluate to a bool")
    return result


def evaluate_condition(text: str, scope: Scope) -> bool:
    """Render placeholders into ``text``, then parse and evaluate it."""
    return eval_expression(parse_expression(render_condition(text, scope)))
