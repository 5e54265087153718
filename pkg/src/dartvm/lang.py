"""DartScript: the deterministic workload language.

Hand-written lexer and recursive-descent parser. Newlines (or ';')
terminate statements; inside parentheses, list/map literals and argument
lists the parser skips newlines so literals may span lines. Functions are
declared with `fn` at top level only and are registered at load time.
The full grammar lives in docs/language.md.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import ParseError

KEYWORDS = {"let", "set", "push", "del", "call", "repeat", "fn", "true", "false",
            "rand", "blob", "len"}


# --- AST -------------------------------------------------------------------

@dataclass
class Block:
    block_id: int
    statements: list = field(default_factory=list)
    is_loop: bool = False


@dataclass
class Let:
    name: str
    expr: object


@dataclass
class SetIndex:
    name: str
    index: object
    value: object


@dataclass
class Push:
    name: str
    value: object


@dataclass
class DelKey:
    name: str
    key: object


@dataclass
class DelVar:
    name: str


@dataclass
class CallStmt:
    name: str
    args: list


@dataclass
class Repeat:
    count: object
    body: Block


@dataclass
class Function:
    name: str
    params: list[str]
    body: Block


@dataclass
class IntLit:
    value: int


@dataclass
class FloatLit:
    value: float


@dataclass
class BoolLit:
    value: bool


@dataclass
class StrLit:
    value: str


@dataclass
class NameRef:
    name: str


@dataclass
class ListLit:
    items: list


@dataclass
class MapLit:
    entries: list  # (key, expr) pairs in source order


@dataclass
class BlobExpr:
    size: object
    tag: object


@dataclass
class RandExpr:
    pass


@dataclass
class BinOp:
    op: str
    left: object
    right: object


@dataclass
class IndexExpr:
    target: object
    index: object


@dataclass
class LenExpr:
    target: object


@dataclass
class CallExpr:
    name: str
    args: list


@dataclass
class Program:
    functions: dict[str, Function]
    main: Block
    blocks: dict[int, Block]
    source: str
    source_digest: bytes

    def summary(self, stmt) -> str:
        return type(stmt).__name__


def canonical_source(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def source_digest(text: str) -> bytes:
    return hashlib.blake2b(canonical_source(text).encode("utf-8"), digest_size=16).digest()


# --- Lexer -----------------------------------------------------------------

_PUNCT = {"(", ")", "[", "]", "{", "}", ",", ":", ";", "=", "+", "-", "*", "/"}


@dataclass
class Token:
    kind: str  # name kw int float str punct newline eof
    value: object
    line: int
    col: int


def _lex(src: str) -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(src)

    def err(msg):
        raise ParseError(line, col, msg)

    while i < n:
        c = src[i]
        if c == "\n":
            toks.append(Token("newline", None, line, col))
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t":
            i += 1
            col += 1
            continue
        if c == "#":
            while i < n and src[i] != "\n":
                i += 1
            continue
        start_line, start_col = line, col
        if c.isdigit():
            j = i
            while j < n and src[j].isdigit():
                j += 1
            is_float = False
            if j < n and src[j] == "." and j + 1 < n and src[j + 1].isdigit():
                is_float = True
                j += 1
                while j < n and src[j].isdigit():
                    j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    is_float = True
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            text = src[i:j]
            if is_float:
                toks.append(Token("float", float(text), start_line, start_col))
            else:
                toks.append(Token("int", int(text), start_line, start_col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            word = src[i:j]
            kind = "kw" if word in KEYWORDS else "name"
            toks.append(Token(kind, word, start_line, start_col))
            col += j - i
            i = j
            continue
        if c == '"':
            j = i + 1
            out = []
            while True:
                if j >= n:
                    err("unterminated string literal")
                ch = src[j]
                if ch == '"':
                    break
                if ch == "\n":
                    err("unterminated string literal")
                if ch == "\\":
                    if j + 1 >= n:
                        err("unterminated escape")
                    esc = src[j + 1]
                    mapped = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc)
                    if mapped is None:
                        err(f"unknown escape \\{esc}")
                    out.append(mapped)
                    j += 2
                    continue
                out.append(ch)
                j += 1
            toks.append(Token("str", "".join(out), start_line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        if c in _PUNCT:
            toks.append(Token("punct", c, start_line, start_col))
            i += 1
            col += 1
            continue
        err(f"unexpected character {c!r}")
    toks.append(Token("eof", None, line, col))
    return toks


# --- Parser ----------------------------------------------------------------

class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _lex(src)
        self.pos = 0
        self.next_block_id = 0
        self.blocks: dict[int, Block] = {}
        self.functions: dict[str, Function] = {}

    def _new_block(self, is_loop=False) -> Block:
        block = Block(self.next_block_id, [], is_loop)
        self.next_block_id += 1
        self.blocks[block.block_id] = block
        return block

    @property
    def cur(self) -> Token:
        return self.toks[self.pos]

    def _advance(self) -> Token:
        tok = self.toks[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def _err(self, msg, tok=None):
        tok = tok or self.cur
        raise ParseError(tok.line, tok.col, msg)

    def _skip_newlines(self):
        while self.cur.kind == "newline" or (self.cur.kind == "punct" and self.cur.value == ";"):
            self._advance()

    def _skip_inline_newlines(self):
        # inside brackets/parens only
        while self.cur.kind == "newline":
            self._advance()

    def _expect_punct(self, ch) -> Token:
        if self.cur.kind == "punct" and self.cur.value == ch:
            return self._advance()
        self._err(f"expected {ch!r}, found {self._describe(self.cur)}")

    def _expect_name(self) -> str:
        if self.cur.kind == "name":
            return self._advance().value
        self._err(f"expected a name, found {self._describe(self.cur)}")

    @staticmethod
    def _describe(tok: Token) -> str:
        if tok.kind == "eof":
            return "end of input"
        if tok.kind == "newline":
            return "end of line"
        return repr(tok.value)

    def _end_statement(self):
        if self.cur.kind in ("newline", "eof"):
            self._skip_newlines()
            return
        if self.cur.kind == "punct" and self.cur.value in (";", "}"):
            self._skip_newlines()
            return
        self._err(f"expected end of statement, found {self._describe(self.cur)}")

    # -- grammar --

    def parse_program(self) -> Program:
        main = self._new_block()
        self._skip_newlines()
        while self.cur.kind != "eof":
            if self.cur.kind == "kw" and self.cur.value == "fn":
                self._parse_fndef()
            else:
                main.statements.append(self._parse_statement(top_level=True))
            self._skip_newlines()
        return Program(self.functions, main, self.blocks, self.src, source_digest(self.src))

    def _parse_fndef(self):
        tok = self._advance()  # fn
        name = self._expect_name()
        if name in self.functions:
            self._err(f"function {name!r} already defined", tok)
        self._expect_punct("(")
        params: list[str] = []
        self._skip_inline_newlines()
        if not (self.cur.kind == "punct" and self.cur.value == ")"):
            while True:
                params.append(self._expect_name())
                self._skip_inline_newlines()
                if self.cur.kind == "punct" and self.cur.value == ",":
                    self._advance()
                    self._skip_inline_newlines()
                    continue
                break
        self._expect_punct(")")
        if len(set(params)) != len(params):
            self._err(f"duplicate parameter in function {name!r}", tok)
        body = self._parse_block()
        self.functions[name] = Function(name, params, body)

    def _parse_block(self, is_loop=False) -> Block:
        self._expect_punct("{")
        block = self._new_block(is_loop)
        self._skip_newlines()
        while not (self.cur.kind == "punct" and self.cur.value == "}"):
            if self.cur.kind == "eof":
                self._err("unterminated block")
            block.statements.append(self._parse_statement(top_level=False))
            self._skip_newlines()
        self._advance()  # }
        return block

    def _parse_statement(self, top_level: bool):
        tok = self.cur
        if tok.kind == "kw":
            if tok.value == "let":
                self._advance()
                name = self._expect_name()
                self._expect_punct("=")
                expr = self._parse_expr()
                self._end_statement()
                return Let(name, expr)
            if tok.value == "set":
                self._advance()
                name = self._expect_name()
                self._expect_punct("[")
                self._skip_inline_newlines()
                index = self._parse_expr()
                self._skip_inline_newlines()
                self._expect_punct("]")
                self._expect_punct("=")
                value = self._parse_expr()
                self._end_statement()
                return SetIndex(name, index, value)
            if tok.value == "push":
                self._advance()
                name = self._expect_name()
                value = self._parse_expr()
                self._end_statement()
                return Push(name, value)
            if tok.value == "del":
                self._advance()
                name = self._expect_name()
                if self.cur.kind == "punct" and self.cur.value == "[":
                    self._advance()
                    self._skip_inline_newlines()
                    key = self._parse_expr()
                    self._skip_inline_newlines()
                    self._expect_punct("]")
                    self._end_statement()
                    return DelKey(name, key)
                self._end_statement()
                return DelVar(name)
            if tok.value == "call":
                self._advance()
                name = self._expect_name()
                self._expect_punct("(")
                args = self._parse_args(")")
                self._end_statement()
                return CallStmt(name, args)
            if tok.value == "repeat":
                self._advance()
                count = self._parse_expr()
                body = self._parse_block(is_loop=True)
                self._end_statement()
                return Repeat(count, body)
            if tok.value == "fn":
                self._err("function definitions are only allowed at top level")
        self._err(f"expected a statement, found {self._describe(tok)}")

    def _parse_args(self, closing: str) -> list:
        args = []
        self._skip_inline_newlines()
        if self.cur.kind == "punct" and self.cur.value == closing:
            self._advance()
            return args
        while True:
            args.append(self._parse_expr())
            self._skip_inline_newlines()
            if self.cur.kind == "punct" and self.cur.value == ",":
                self._advance()
                self._skip_inline_newlines()
                continue
            break
        self._expect_punct(closing)
        return args

    def _parse_expr(self):
        left = self._parse_term()
        while self.cur.kind == "punct" and self.cur.value in ("+", "-"):
            op = self._advance().value
            self._skip_inline_newlines()
            left = BinOp(op, left, self._parse_term())
        return left

    def _parse_term(self):
        left = self._parse_postfix()
        while self.cur.kind == "punct" and self.cur.value in ("*", "/"):
            op = self._advance().value
            self._skip_inline_newlines()
            left = BinOp(op, left, self._parse_postfix())
        return left

    def _parse_postfix(self):
        expr = self._parse_primary()
        while self.cur.kind == "punct" and self.cur.value == "[":
            self._advance()
            self._skip_inline_newlines()
            index = self._parse_expr()
            self._skip_inline_newlines()
            self._expect_punct("]")
            expr = IndexExpr(expr, index)
        return expr

    def _parse_primary(self):
        tok = self.cur
        if tok.kind == "int":
            self._advance()
            return IntLit(tok.value)
        if tok.kind == "float":
            self._advance()
            return FloatLit(tok.value)
        if tok.kind == "str":
            self._advance()
            return StrLit(tok.value)
        if tok.kind == "kw":
            if tok.value in ("true", "false"):
                self._advance()
                return BoolLit(tok.value == "true")
            if tok.value == "rand":
                self._advance()
                self._expect_punct("(")
                self._skip_inline_newlines()
                self._expect_punct(")")
                return RandExpr()
            if tok.value == "blob":
                self._advance()
                self._expect_punct("(")
                args = self._parse_args(")")
                if len(args) != 2:
                    self._err("blob(size, tag) takes exactly two arguments", tok)
                return BlobExpr(args[0], args[1])
            if tok.value == "len":
                self._advance()
                self._expect_punct("(")
                args = self._parse_args(")")
                if len(args) != 1:
                    self._err("len(x) takes exactly one argument", tok)
                return LenExpr(args[0])
            self._err(f"unexpected keyword {tok.value!r} in expression")
        if tok.kind == "name":
            self._advance()
            if self.cur.kind == "punct" and self.cur.value == "(":
                self._advance()
                args = self._parse_args(")")
                return CallExpr(tok.value, args)
            return NameRef(tok.value)
        if tok.kind == "punct":
            if tok.value == "-":
                self._advance()
                nxt = self.cur
                if nxt.kind == "int":
                    self._advance()
                    return IntLit(-nxt.value)
                if nxt.kind == "float":
                    self._advance()
                    return FloatLit(-nxt.value)
                self._err("'-' is only allowed before a numeric literal")
            if tok.value == "(":
                self._advance()
                self._skip_inline_newlines()
                expr = self._parse_expr()
                self._skip_inline_newlines()
                self._expect_punct(")")
                return expr
            if tok.value == "[":
                self._advance()
                items = self._parse_args("]")
                return ListLit(items)
            if tok.value == "{":
                self._advance()
                entries = []
                self._skip_inline_newlines()
                if not (self.cur.kind == "punct" and self.cur.value == "}"):
                    while True:
                        if self.cur.kind != "str":
                            self._err("map keys must be string literals")
                        key = self._advance().value
                        self._expect_punct(":")
                        self._skip_inline_newlines()
                        entries.append((key, self._parse_expr()))
                        self._skip_inline_newlines()
                        if self.cur.kind == "punct" and self.cur.value == ",":
                            self._advance()
                            self._skip_inline_newlines()
                            continue
                        break
                self._expect_punct("}")
                return MapLit(entries)
        self._err(f"expected an expression, found {self._describe(tok)}")


def parse(source: str) -> Program:
    """Parse DartScript source into a Program. Pure; raises ParseError."""
    return _Parser(canonical_source(source)).parse_program()
