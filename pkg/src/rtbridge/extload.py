"""Extension modules: native functions and types registered from descriptors.

Descriptor files are line oriented::

    module <name>
    doc <text to end of line>
    fn <name> <format> <behavior>
    type <name> static|heap [size:<bytes>] [dict@<off>] [member:<n>@<off>[:i|:d]]
                 [getset:<n>:<getter>[:<setter>]] [method:<n>:<behavior>]
                 [init:<behavior>] [repr:<behavior>] [str:<behavior>]

``-`` stands for an empty format.  ``#`` starts a comment.  Behaviours are
looked up in ``BEHAVIORS``; a function's format must match the argument
format its behaviour declares.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

from .errors import BridgeError, CallError, ExtensionError, MarshalError
from .native import Kind, NativeFunction, NativeRef, NativeTypeObject
from .valuefmt import as_spec, build_value, parse_args


@dataclass(frozen=True)
class Behavior:
    arg_format: str
    result_format: str
    impl: object


@dataclass
class FunctionDef:
    name: str
    format: str
    behavior: str


@dataclass
class TypeDef:
    name: str
    static: bool = True
    size: int | None = None
    dict_offset: int | None = None
    members: dict = field(default_factory=dict)
    getsets: dict = field(default_factory=dict)
    methods: dict = field(default_factory=dict)
    init: str | None = None
    repr: str | None = None
    str: str | None = None
    doc: str | None = None


@dataclass
class ExtensionModuleDef:
    name: str
    doc: str | None = None
    functions: list = field(default_factory=list)
    types: list = field(default_factory=list)


class CallContext:
    """What a behaviour may touch while it runs (boundary lock held)."""

    def __init__(self, runtime, module):
        self.rt = runtime
        self.native = runtime.native
        self.module = module

    def find_type(self, name):
        return self.rt.ext.type_ref(self.module, name)


# ----------------------------------------------------------------------
# Built-in behaviours.  O results are returned as new references.
# ----------------------------------------------------------------------


def _identity(ctx, obj):
    ctx.native.incref(obj)
    return obj


def _add_ints(ctx, a, b):
    return a + b


def _make_point(ctx, x, y):
    n = ctx.native
    p = n.new_instance(ctx.find_type("Point"))
    n.member_set(p, "x", x)
    n.member_set(p, "y", y)
    return p


def _point_init(ctx, self, x, y):
    ctx.native.member_set(self, "x", x)
    ctx.native.member_set(self, "y", y)


def _point_norm(ctx, self):
    n = ctx.native
    return math.hypot(n.member_get(self, "x"), n.member_get(self, "y"))


def _point_scaled(ctx, self, k):
    n = ctx.native
    p = n.new_instance(n.type_of(self))
    n.member_set(p, "x", n.member_get(self, "x") * k)
    n.member_set(p, "y", n.member_get(self, "y") * k)
    return p


def _point_repr(ctx, self):
    n = ctx.native
    return f"{n.type_name(self)}({n.member_get(self, 'x')!r}, {n.member_get(self, 'y')!r})"


def _point_str(ctx, self):
    n = ctx.native
    return f"({n.member_get(self, 'x')!r}, {n.member_get(self, 'y')!r})"


_MOMENT_FIELDS = ("year", "month", "day", "hour", "minute", "second")


def _moment_init(ctx, self, *values):
    for name, v in zip(_MOMENT_FIELDS, values):
        ctx.native.member_set(self, name, v)


def _moment_str(ctx, self):
    y, mo, d, h, mi, s = (ctx.native.member_get(self, f) for f in _MOMENT_FIELDS)
    return f"{y:04d}-{mo:02d}-{d:02d} {h:02d}:{mi:02d}:{s:02d}"


def _moment_repr(ctx, self):
    values = ", ".join(str(ctx.native.member_get(self, f)) for f in _MOMENT_FIELDS)
    return f"{ctx.native.type_name(self)}({values})"


def _capsule_new(ctx, text):
    return ctx.native.new_capsule(text.encode("utf-8"))


def _capsule_get(ctx, cap):
    if ctx.native.kind_of(cap) != Kind.CAPSULE:
        raise TypeError("capsule_get() needs a capsule")
    return ctx.native.capsule_blob(cap).decode("utf-8")


def _wrap(ctx, obj):
    return ctx.native.new_tuple((obj,))


def _list_sum(ctx, lst):
    n = ctx.native
    if n.kind_of(lst) != Kind.LIST:
        raise TypeError("list_sum() needs a list")
    return sum(n.int_value(i) for i in n.list_items(lst))


def _list_push(ctx, lst, obj):
    n = ctx.native
    n.list_append(lst, obj)
    n.incref(n.none)
    return n.none


def _apply(ctx, fn, arg):
    """Call a managed callable from native code."""
    rt = ctx.rt
    b, m = rt.bridge, rt.managed
    fh, ah = b._to_managed(fn), b._to_managed(arg)
    args = m.new_tuple((ah,))
    for h in (fh, args):
        m.add_root(h)
    try:
        res = rt.lock.callback_to_managed(m.call_object, fh, args)
        m.add_root(res)
    finally:
        for h in (fh, args):
            m.remove_root(h)
    try:
        r = b._to_native(res)
        ctx.native.incref(r)
        return r
    finally:
        m.remove_root(res)


def _sleep_released(ctx, seconds):
    with ctx.rt.lock.allow_threads():
        time.sleep(seconds)


BEHAVIORS = {
    "identity": Behavior("O", "O", _identity),
    "add_ints": Behavior("ii", "i", _add_ints),
    "make_point": Behavior("dd", "O", _make_point),
    "point_init": Behavior("dd", "", _point_init),
    "point_norm": Behavior("", "d", _point_norm),
    "point_scaled": Behavior("d", "O", _point_scaled),
    "point_repr": Behavior("", "s", _point_repr),
    "point_str": Behavior("", "s", _point_str),
    "moment_init": Behavior("iiiiii", "", _moment_init),
    "moment_str": Behavior("", "s", _moment_str),
    "moment_repr": Behavior("", "s", _moment_repr),
    "capsule_new": Behavior("s", "O", _capsule_new),
    "capsule_get": Behavior("O", "s", _capsule_get),
    "wrap": Behavior("O", "O", _wrap),
    "list_sum": Behavior("O", "i", _list_sum),
    "list_push": Behavior("OO", "O", _list_push),
    "apply": Behavior("OO", "O", _apply),
    "sleep_released": Behavior("d", "", _sleep_released),
}


DEMO_DESCRIPTOR = """\
# Demo extension exercising every bridge path.
module demo
doc Fast implementation of the demo types.
fn identity O identity
fn add_ints ii add_ints
fn make_point dd make_point
fn capsule_new s capsule_new
fn capsule_get O capsule_get
fn wrap O wrap
fn list_sum O list_sum
fn list_push OO list_push
fn apply OO apply
fn sleep_released d sleep_released
type Point static size:24 dict@16 member:x@0:d member:y@8:d getset:norm:point_norm method:scaled:point_scaled init:point_init repr:point_repr str:point_str
type Moment static size:48 member:year@0:i member:month@8:i member:day@16:i member:hour@24:i member:minute@32:i member:second@40:i init:moment_init repr:moment_repr str:moment_str
"""


# ----------------------------------------------------------------------
# Descriptor parsing
# ----------------------------------------------------------------------


def _int(text, lineno):
    try:
        return int(text, 0)
    except ValueError:
        raise ExtensionError(f"line {lineno}: bad integer {text!r}") from None


def parse_descriptors(text):
    """Parse descriptor text into a list of ExtensionModuleDef."""
    modules = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, _, rest = line.partition(" ")
        rest = rest.strip()
        if word == "module":
            if not rest or " " in rest:
                raise ExtensionError(f"line {lineno}: module needs one name")
            current = ExtensionModuleDef(rest)
            modules.append(current)
            continue
        if current is None:
            raise ExtensionError(f"line {lineno}: {word!r} before any module record")
        if word == "doc":
            current.doc = rest
        elif word == "fn":
            parts = rest.split()
            if len(parts) != 3:
                raise ExtensionError(f"line {lineno}: fn needs <name> <format> <behavior>")
            fmt = "" if parts[1] == "-" else parts[1]
            current.functions.append(FunctionDef(parts[0], fmt, parts[2]))
        elif word == "type":
            current.types.append(_parse_type(rest.split(), lineno))
        else:
            raise ExtensionError(f"line {lineno}: unknown record {word!r}")
    return modules


def _parse_type(parts, lineno):
    if len(parts) < 2 or parts[1] not in ("static", "heap"):
        raise ExtensionError(f"line {lineno}: type needs <name> static|heap")
    td = TypeDef(parts[0], static=parts[1] == "static")
    for opt in parts[2:]:
        if opt.startswith("member:"):
            spec = opt[len("member:"):]
            name, sep, where = spec.partition("@")
            if not sep:
                raise ExtensionError(f"line {lineno}: member needs <name>@<offset>")
            off, _, code = where.partition(":")
            td.members[name] = (_int(off, lineno), code or "d")
        elif opt.startswith("getset:"):
            bits = opt.split(":")
            if len(bits) not in (3, 4):
                raise ExtensionError(f"line {lineno}: getset needs <name>:<getter>[:<setter>]")
            td.getsets[bits[1]] = (bits[2], bits[3] if len(bits) == 4 else None)
        elif opt.startswith("method:"):
            bits = opt.split(":")
            if len(bits) != 3:
                raise ExtensionError(f"line {lineno}: method needs <name>:<behavior>")
            td.methods[bits[1]] = bits[2]
        elif opt.startswith("dict@"):
            td.dict_offset = _int(opt[5:], lineno)
        elif opt.startswith("size:"):
            td.size = _int(opt[5:], lineno)
        elif opt.startswith(("init:", "repr:", "str:")):
            key, _, value = opt.partition(":")
            setattr(td, key, value)
        else:
            raise ExtensionError(f"line {lineno}: unknown type option {opt!r}")
    return td


# ----------------------------------------------------------------------
# Registry
# ----------------------------------------------------------------------


@dataclass
class _Loaded:
    definition: ExtensionModuleDef
    module_ref: NativeRef
    types: dict


class ExtensionRegistry:
    def __init__(self, runtime, behaviors=None):
        self.rt = runtime
        self.behaviors = dict(BEHAVIORS if behaviors is None else behaviors)
        self.loaded = {}
        self.imported = {}

    def _behavior(self, name, module):
        try:
            return self.behaviors[name]
        except KeyError:
            raise ExtensionError(f"{module}: unknown behavior {name!r}") from None

    def _validate(self, d):
        names = [f.name for f in d.functions] + [t.name for t in d.types]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ExtensionError(f"{d.name}: duplicate names {sorted(dupes)}")
        for f in d.functions:
            b = self._behavior(f.behavior, d.name)
            as_spec(f.format)
            if f.format != b.arg_format:
                raise ExtensionError(
                    f"{d.name}.{f.name}: format {f.format!r} does not match behavior {f.behavior!r} ({b.arg_format!r})"
                )
        for t in d.types:
            refs = [g for g, _ in t.getsets.values()] + [s for _, s in t.getsets.values() if s]
            refs += list(t.methods.values()) + [x for x in (t.init, t.repr, t.str) if x]
            for name in refs:
                self._behavior(name, d.name)

    def _function(self, name, behavior_name, module, bound):
        b = self.behaviors[behavior_name]
        native = self.rt.native
        ctx = CallContext(self.rt, module)

        def impl(*args):
            return b.impl(ctx, *args)

        return native.register_function(NativeFunction(name, b.arg_format, b.result_format, impl, bound))

    def register(self, d):
        """Allocate the native module, its functions and its types."""
        if d.name in self.loaded:
            raise ExtensionError(f"extension {d.name!r} already registered")
        self._validate(d)
        rt = self.rt
        n = rt.native
        types = {}
        with rt.lock.native():
            module = n.new_module(d.name, d.doc)
            mdict = n.module_dict(module)
            for f in d.functions:
                fid = self._function(f.name, f.behavior, d.name, bound=False)
                cf = n.new_cfunction(fid)
                n.dict_setitem_str(mdict, f.name, cf)
                n.decref(cf)
            for t in d.types:
                desc = NativeTypeObject(
                    f"{d.name}.{t.name}",
                    Kind.INSTANCE,
                    is_heap_type=not t.static,
                    basicsize=t.size if t.size is not None else 8 * (len(t.members) + (t.dict_offset is not None)),
                    dict_offset=t.dict_offset,
                    members=dict(t.members),
                    doc=t.doc,
                )
                for name, bname in t.methods.items():
                    desc.methods[name] = self._function(name, bname, d.name, bound=True)
                for name, (g, s) in t.getsets.items():
                    desc.getsets[name] = (
                        self._function(name, g, d.name, bound=True),
                        self._function(name, s, d.name, bound=True) if s else None,
                    )
                for slot in ("init", "repr", "str"):
                    bname = getattr(t, slot)
                    if bname:
                        setattr(desc, f"{slot}_fn", self._function(f"__{slot}__", bname, d.name, bound=True))
                try:
                    tref = n.new_type(desc)
                except ValueError as exc:
                    raise ExtensionError(f"{d.name}.{t.name}: {exc}") from None
                if t.static:
                    rt.bridge.register_static_type(tref)
                n.dict_setitem_str(mdict, t.name, tref)
                if not t.static:
                    n.decref(tref)
                types[t.name] = tref
        self.loaded[d.name] = _Loaded(d, module, types)

    def register_text(self, text):
        defs = parse_descriptors(text)
        for d in defs:
            self.register(d)
        return defs

    def type_ref(self, module, name):
        return self.loaded[module].types[name]

    def import_module(self, name):
        """Managed module for a registered extension; cached per name."""
        if name in self.imported:
            return self.imported[name]
        try:
            loaded = self.loaded[name]
        except KeyError:
            raise ExtensionError(f"no extension module named {name!r}") from None
        h = self.rt.bridge.to_managed(loaded.module_ref)
        self.rt.managed.add_root(h)
        self.imported[name] = h
        return h

    def unload_all(self):
        """Drop the registry's native references (test teardown)."""
        rt = self.rt
        with rt.lock.native():
            for name in list(self.loaded):
                loaded = self.loaded.pop(name)
                rt.native.decref(loaded.module_ref)
        for h in self.imported.values():
            rt.managed.remove_root(h)
        self.imported.clear()

    # ------------------------------------------------------------------
    # Invocation
    # ------------------------------------------------------------------

    def invoke(self, fn_id, self_ref, args):
        """Unpack ``args``, run the behaviour, pack the result (new reference)."""
        n = self.rt.native
        fn = n.functions[fn_id]
        try:
            values = parse_args(n, fn.arg_format, args)
        except MarshalError as exc:
            raise CallError(f"{fn.name}(): {exc}") from exc
        try:
            prefix = (self_ref,) if fn.bound else ()
            result = fn.impl(*prefix, *values)
        except BridgeError:
            raise
        except Exception as exc:
            raise CallError(f"{fn.name}(): {type(exc).__name__}: {exc}") from exc
        finally:
            for v in values:
                if isinstance(v, NativeRef):
                    n.decref(v)
        spec = as_spec(fn.result_format)
        if spec.arity == 0:
            results = []
        elif spec.arity == 1:
            results = [result]
        else:
            results = list(result)
        try:
            return build_value(n, spec, results)
        except MarshalError as exc:
            raise CallError(f"{fn.name}(): bad result: {exc}") from exc
        finally:
            for v in results:
                if isinstance(v, NativeRef):
                    n.decref(v)

    def invoke_cfunction(self, fn_ref, args):
        n = self.rt.native
        if n.kind_of(fn_ref) != Kind.CFUNCTION:
            raise CallError("not a native function")
        fn_id, self_ref = n.cfunction_info(fn_ref)
        return self.invoke(fn_id, self_ref, args)
