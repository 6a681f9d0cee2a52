"""Format strings for packing values into native tuples and unpacking them.

Grammar (EBNF)::

    format = { unit } ;
    unit   = "i" | "d" | "s" | "O" | group ;
    group  = "(" , { unit } , ")" ;

``i`` is a signed 64-bit int, ``d`` a double, ``s`` a UTF-8 string and
``O`` any native object passed through by reference.  Unit indices in
error messages count leaf units left to right, starting at 0; a group is
reported at the index of its first leaf.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ArityError, FormatSyntaxError, KindError
from .native import Kind, NativeRef

LEAVES = "idsO"
_EXPECTED = {"i": "int", "d": "float", "s": "str", "O": "object"}


@dataclass(frozen=True)
class Group:
    units: tuple

    @property
    def arity(self):
        return sum(u.arity if isinstance(u, Group) else 1 for u in self.units)


@dataclass(frozen=True)
class FormatSpec:
    units: tuple
    source: str

    @property
    def arity(self):
        return sum(u.arity if isinstance(u, Group) else 1 for u in self.units)

    def leaves(self):
        out = []

        def walk(units):
            for u in units:
                if isinstance(u, Group):
                    walk(u.units)
                else:
                    out.append(u)

        walk(self.units)
        return out


def parse_format(text):
    stack = [[]]
    opened = []
    for offset, ch in enumerate(text):
        if ch in LEAVES:
            stack[-1].append(ch)
        elif ch == "(":
            stack.append([])
            opened.append(offset)
        elif ch == ")":
            if len(stack) == 1:
                raise FormatSyntaxError("unmatched ')'", offset)
            units = stack.pop()
            opened.pop()
            stack[-1].append(Group(tuple(units)))
        else:
            raise FormatSyntaxError(f"unknown format unit {ch!r}", offset)
    if opened:
        raise FormatSyntaxError("unclosed '('", len(text))
    return FormatSpec(tuple(stack[0]), text)


def as_spec(spec):
    return spec if isinstance(spec, FormatSpec) else parse_format(spec)


def _check_value(code, value, index):
    if code == "i":
        ok = isinstance(value, int) and not isinstance(value, (bool, NativeRef))
        if ok and not -(1 << 63) <= value < (1 << 63):
            # Checked up front so a failing build never leaves half-built parts behind.
            raise KindError(index, "64-bit int", "out-of-range int")
    elif code == "d":
        ok = isinstance(value, (int, float)) and not isinstance(value, (bool, NativeRef))
    elif code == "s":
        ok = isinstance(value, (str, bytes))
    else:
        ok = isinstance(value, NativeRef)
    if not ok:
        raise KindError(index, _EXPECTED[code], type(value).__name__)


def build_value(native, spec, values):
    """Pack a flat value sequence into a new native reference.

    A single top-level unit yields that object itself (no 1-tuple); several
    yield a tuple; an empty format yields None.  ``O`` values are embedded
    by reference.
    """
    spec = as_spec(spec)
    values = list(values)
    if len(values) != spec.arity:
        raise ArityError(spec.arity, len(values))
    for index, (code, value) in enumerate(zip(spec.leaves(), values)):
        _check_value(code, value, index)

    it = iter(values)

    def build(unit):
        if isinstance(unit, Group):
            return build_tuple(unit.units)
        value = next(it)
        if unit == "i":
            return native.new_int(value)
        if unit == "d":
            return native.new_float(float(value))
        if unit == "s":
            return native.new_str(value)
        native.incref(value)
        return value

    def build_tuple(units):
        parts = [build(u) for u in units]
        try:
            return native.new_tuple(parts)
        finally:
            for p in parts:
                native.decref(p)

    if not spec.units:
        native.incref(native.none)
        return native.none
    if len(spec.units) == 1:
        return build(spec.units[0])
    return build_tuple(spec.units)


def parse_args(native, spec, args):
    """Unpack a native args tuple into a flat list of Python values.

    ``O`` units yield the object with a new reference the caller owns.
    """
    spec = as_spec(spec)
    if native.kind_of(args) != Kind.TUPLE:
        raise KindError(0, "tuple", native.type_name(args))
    out = []
    index = 0

    def unpack(units, tup):
        nonlocal index
        items = native.tuple_items(tup)
        if len(items) != len(units):
            raise ArityError(len(units), len(items))
        for unit, item in zip(units, items):
            kind = native.kind_of(item)
            if isinstance(unit, Group):
                if kind != Kind.TUPLE:
                    raise KindError(index, "tuple", native.type_name(item))
                unpack(unit.units, item)
                continue
            if unit == "i":
                if kind != Kind.INT:
                    raise KindError(index, "int", native.type_name(item))
                out.append(native.int_value(item))
            elif unit == "d":
                if kind == Kind.FLOAT:
                    out.append(native.float_value(item))
                elif kind == Kind.INT:
                    out.append(float(native.int_value(item)))
                else:
                    raise KindError(index, "float", native.type_name(item))
            elif unit == "s":
                if kind != Kind.STR:
                    raise KindError(index, "str", native.type_name(item))
                out.append(native.str_value(item))
            else:
                native.incref(item)
                out.append(item)
            index += 1

    try:
        unpack(spec.units, args)
    except Exception:
        for v in out:
            if isinstance(v, NativeRef):
                native.decref(v)
        raise
    return out
