"""Mini program language used for exec-accuracy scoring.

Grammar:
    program := 'return' expr
    expr    := term (('+'|'-') term)*
    term    := factor ('*' factor)*
    factor  := integer | identifier | '(' expr ')'

Integer arithmetic is exact (python ints). `extract_program` scans free
text for the first 'return' keyword and parses greedily from there, so a
generation may carry trailing junk after a complete program and still
count as conformant.
"""

from __future__ import annotations

from dataclasses import dataclass

from skillmerge.errors import SkillMergeError


class MiniLangError(SkillMergeError):
    """Unparseable program or failed evaluation (e.g. unbound name)."""


# AST nodes
@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Name:
    ident: str


@dataclass(frozen=True)
class BinOp:
    op: str  # '+', '-', '*'
    left: "Expr"
    right: "Expr"


Expr = Num | Name | BinOp


@dataclass(frozen=True)
class Token:
    kind: str  # 'int', 'ident', 'op', 'lparen', 'rparen', 'return'
    text: str


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    while i < len(text):
        c = text[i]
        if c in " \t\r\n":
            i += 1
        elif c.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            tokens.append(Token("int", text[i:j]))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            tokens.append(Token("return" if word == "return" else "ident", word))
            i = j
        elif c in "+-*":
            tokens.append(Token("op", c))
            i += 1
        elif c == "(":
            tokens.append(Token("lparen", c))
            i += 1
        elif c == ")":
            tokens.append(Token("rparen", c))
            i += 1
        else:
            raise MiniLangError(f"unexpected character {c!r} at position {i}")
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, kind: str) -> Token:
        tok = self.peek()
        if tok is None or tok.kind != kind:
            got = f"{tok.kind} {tok.text!r}" if tok else "end of input"
            raise MiniLangError(f"expected {kind}, got {got}")
        self.pos += 1
        return tok

    def expr(self) -> Expr:
        node = self.term()
        while (tok := self.peek()) is not None and tok.kind == "op" and tok.text in "+-":
            self.pos += 1
            node = BinOp(tok.text, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while (tok := self.peek()) is not None and tok.kind == "op" and tok.text == "*":
            self.pos += 1
            node = BinOp("*", node, self.factor())
        return node

    def factor(self) -> Expr:
        tok = self.peek()
        if tok is None:
            raise MiniLangError("unexpected end of input")
        if tok.kind == "int":
            self.pos += 1
            return Num(int(tok.text))
        if tok.kind == "ident":
            self.pos += 1
            return Name(tok.text)
        if tok.kind == "lparen":
            self.pos += 1
            node = self.expr()
            self.take("rparen")
            return node
        raise MiniLangError(f"unexpected token {tok.text!r}")


def parse_expr(text: str) -> Expr:
    """Parse a bare expression; trailing tokens are an error."""
    parser = _Parser(tokenize(text))
    node = parser.expr()
    if parser.peek() is not None:
        raise MiniLangError(f"trailing input after expression: {parser.peek().text!r}")
    return node


def parse_program(text: str) -> Expr:
    """Parse 'return expr'; trailing tokens are an error."""
    parser = _Parser(tokenize(text))
    parser.take("return")
    node = parser.expr()
    if parser.peek() is not None:
        raise MiniLangError(f"trailing input after program: {parser.peek().text!r}")
    return node


def evaluate(node: Expr, env: dict[str, int] | None = None) -> int:
    env = env or {}
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        if node.ident not in env:
            raise MiniLangError(f"unbound identifier {node.ident!r}")
        return int(env[node.ident])
    left = evaluate(node.left, env)
    right = evaluate(node.right, env)
    return left + right if node.op == "+" else left - right if node.op == "-" else left * right


def evaluate_program(node: Expr, env: dict[str, int] | None = None) -> int:
    return evaluate(node, env)


def extract_program(text: str) -> Expr | None:
    """Find a 'return' keyword in free text and greedily parse the
    expression after it; returns None when no complete program is present.

    Greedy means the longest expression the grammar allows; anything after
    it (another line, commentary, '=...') is ignored.
    """
    idx = text.find("return")
    while idx != -1:
        before_ok = idx == 0 or not (text[idx - 1].isalnum() or text[idx - 1] == "_")
        end = idx + len("return")
        after_ok = end >= len(text) or not (text[end].isalnum() or text[end] == "_")
        if before_ok and after_ok:
            parser = _Parser(tokenize_lenient(text[end:]))
            try:
                return parser.expr()
            except MiniLangError:
                pass
        idx = text.find("return", idx + 1)
    return None


def tokenize_lenient(text: str) -> list[Token]:
    """Like tokenize() but unknown characters end the token stream instead
    of raising; used when scanning model generations."""
    tokens: list[Token] = []
    i = 0
    while i < len(text):
        c = text[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            tokens.append(Token("int", text[i:j]))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            tokens.append(Token("return" if word == "return" else "ident", word))
            i = j
        elif c in "+-*":
            tokens.append(Token("op", c))
            i += 1
        elif c == "(":
            tokens.append(Token("lparen", c))
            i += 1
        elif c == ")":
            tokens.append(Token("rparen", c))
            i += 1
        else:
            break
    return tokens
