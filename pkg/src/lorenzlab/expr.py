"""Tiny arithmetic-expression evaluator for user-defined metric coefficients.

Grammar: numbers, the variables ``x`` and ``y``, the constant ``pi``,
``+ - * / ^``, ``sin``, ``cos``, ``exp`` and parentheses.  ``^`` binds
tighter than unary minus and is right-associative.  Expressions compile to
a small closure tree so repeated evaluation is cheap.
"""

from __future__ import annotations

import math
from typing import Callable

__all__ = ["ExprError", "compile_expr"]

_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp}
_CONSTS = {"pi": math.pi}


class ExprError(ValueError):
    """Raised for syntax errors or unknown names, with the offending index."""


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.i = 0

    def error(self, msg: str) -> ExprError:
        return ExprError(f"{msg} at index {self.i} in {self.text!r}")

    def peek(self) -> str:
        while self.i < len(self.text) and self.text[self.i].isspace():
            self.i += 1
        return self.text[self.i : self.i + 1]

    def parse(self) -> Callable[[float, float], float]:
        node = self.sum()
        if self.peek():
            raise self.error(f"unexpected {self.peek()!r}")
        return node

    def sum(self):
        node = self.product()
        while True:
            ch = self.peek()
            if ch == "+":
                self.i += 1
                rhs = self.product()
                node = (lambda a, b: lambda x, y: a(x, y) + b(x, y))(node, rhs)
            elif ch == "-":
                self.i += 1
                rhs = self.product()
                node = (lambda a, b: lambda x, y: a(x, y) - b(x, y))(node, rhs)
            else:
                return node

    def product(self):
        node = self.unary()
        while True:
            ch = self.peek()
            if ch == "*":
                self.i += 1
                rhs = self.unary()
                node = (lambda a, b: lambda x, y: a(x, y) * b(x, y))(node, rhs)
            elif ch == "/":
                self.i += 1
                rhs = self.unary()
                node = (lambda a, b: lambda x, y: a(x, y) / b(x, y))(node, rhs)
            else:
                return node

    def unary(self):
        if self.peek() == "-":
            self.i += 1
            inner = self.unary()
            return lambda x, y: -inner(x, y)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == "^":
            self.i += 1
            exponent = self.unary()  # right-associative, allows 2^-x
            return (lambda a, b: lambda x, y: a(x, y) ** b(x, y))(base, exponent)
        return base

    def atom(self):
        ch = self.peek()
        if ch == "(":
            self.i += 1
            node = self.sum()
            if self.peek() != ")":
                raise self.error("missing ')'")
            self.i += 1
            return node
        if ch.isdigit() or ch == ".":
            return self.number()
        if ch.isalpha() or ch == "_":
            return self.name()
        raise self.error("expected a value" if not ch else f"unexpected {ch!r}")

    def number(self):
        start = self.i
        seen_dot = False
        while self.i < len(self.text):
            ch = self.text[self.i]
            if ch == ".":
                if seen_dot:
                    raise self.error("second '.' in number")
                seen_dot = True
            elif not ch.isdigit():
                break
            self.i += 1
        # exponent suffix like 1e-3
        if self.i < len(self.text) and self.text[self.i] in "eE":
            j = self.i + 1
            if j < len(self.text) and self.text[j] in "+-":
                j += 1
            if j < len(self.text) and self.text[j].isdigit():
                self.i = j
                while self.i < len(self.text) and self.text[self.i].isdigit():
                    self.i += 1
        value = float(self.text[start : self.i])
        return lambda x, y: value

    def name(self):
        start = self.i
        while self.i < len(self.text) and (
            self.text[self.i].isalnum() or self.text[self.i] == "_"
        ):
            self.i += 1
        word = self.text[start : self.i]
        if word == "x":
            return lambda x, y: x
        if word == "y":
            return lambda x, y: y
        if word in _CONSTS:
            value = _CONSTS[word]
            return lambda x, y: value
        if word in _FUNCS:
            if self.peek() != "(":
                raise self.error(f"{word} needs parentheses")
            self.i += 1
            arg = self.sum()
            if self.peek() != ")":
                raise self.error("missing ')'")
            self.i += 1
            fn = _FUNCS[word]
            return (lambda f, a: lambda x, y: f(a(x, y)))(fn, arg)
        raise self.error(f"unknown name {word!r}")


def compile_expr(text: str) -> Callable[[float, float], float]:
    """Compile ``text`` into a callable ``f(x, y) -> float``."""
    if not text or not text.strip():
        raise ExprError("empty expression")
    return _Parser(text).parse()
