"""Line-oriented scenario scripts driving a bridged runtime.

One command per line, ``#`` starts a comment::

    import <module> [as <name>]
    new <list|tuple|dict|int|float|str|callable> <args...> [-> <name>]
    call <obj> <attr> <args...> [-> <name>]
    getattr <obj> <attr> -> <name>
    setattr <obj> <attr> <value>
    print [<value> ...]            one line, str() of each value joined by spaces
    repr <value>
    type <value>
    list-append <list> <value>
    native-mutate <name> <op> <args...>
    drop <name>
    gc-refresh | gc-collect | gc-drain
    threads <n> <command> [; <command> ...]
    stress-gc <trials>

Values are ints, floats, quoted strings, None/True/False, bound names, or
dotted attribute paths (``demo.Point``).  ``native-mutate`` ops act on the
native counterpart: ``append v``, ``insert i v``, ``set i v``, ``pop [i]``,
``setitem k v``, ``delitem k``, ``setattr a v``.
"""

from __future__ import annotations

import random
import re
import threading
import time
from dataclasses import dataclass, field

from .errors import BridgeError, FatalInvariantError, ScenarioError
from .managed import MKind
from .native import Kind

_TOKEN = re.compile(r'"(?:[^"\\]|\\.)*"|\'(?:[^\'\\]|\\.)*\'|;|\S+')
_INT = re.compile(r"[+-]?\d+$")
_FLOAT = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+(\.\d*)?[eE][+-]?\d+)$")
_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$")

GC_COMMANDS = {"gc-refresh", "gc-collect", "gc-drain", "stress-gc"}
COMMANDS = {
    "import", "new", "call", "getattr", "setattr", "print", "repr", "type",
    "list-append", "native-mutate", "drop", "threads",
} | GC_COMMANDS
NONDETERMINISTIC = {"lock_contentions"}
BUILTIN_CTORS = {"list", "tuple", "dict", "int", "float", "str"}


@dataclass(frozen=True)
class Literal:
    value: object


@dataclass(frozen=True)
class Ref:
    path: tuple


@dataclass
class Command:
    lineno: int
    text: str
    op: str
    args: list
    target: str | None = None
    body: list = field(default_factory=list)


@dataclass
class ScenarioConfig:
    seed: int = 0
    golden: bool = False
    poller: bool = False


@dataclass
class ScenarioReport:
    lines: list
    stats: dict
    error: str | None = None
    exit_code: int = 0
    elapsed: float = 0.0
    warnings: list = field(default_factory=list)


def _unquote(tok):
    body = tok[1:-1]
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), body)


def _value(tok, lineno, text):
    if tok[0] in "\"'":
        return Literal(_unquote(tok))
    if _INT.match(tok):
        return Literal(int(tok))
    if _FLOAT.match(tok):
        return Literal(float(tok))
    if tok in ("None", "True", "False"):
        return Literal({"None": None, "True": True, "False": False}[tok])
    if _NAME.match(tok):
        return Ref(tuple(tok.split(".")))
    raise ScenarioError(f"bad value {tok!r}", lineno, text)


def tokenize(line, lineno=None):
    tokens = _TOKEN.findall(line)
    for tok in tokens:
        if tok[0] in "\"'" and (len(tok) < 2 or tok[-1] != tok[0]):
            raise ScenarioError("unterminated string", lineno)
    return tokens


def _strip_comment(line):
    out, quote = [], None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def _parse_command(tokens, lineno, text, nested=False):
    if not tokens:
        raise ScenarioError("empty command", lineno, text)
    op, rest = tokens[0], tokens[1:]
    if op not in COMMANDS:
        raise ScenarioError(f"unknown command {op!r}", lineno, text)
    if nested and (op in GC_COMMANDS or op == "threads"):
        raise ScenarioError(f"{op} is not allowed inside threads", lineno, text)
    if op == "threads":
        cmd = Command(lineno, text, op, [])
        if not rest or not _INT.match(rest[0]) or int(rest[0]) < 1:
            raise ScenarioError("threads needs a positive count", lineno, text)
        cmd.args = [int(rest[0])]
        groups, current = [], []
        for tok in rest[1:]:
            if tok == ";":
                if current:
                    groups.append(current)
                current = []
            else:
                current.append(tok)
        if current:
            groups.append(current)
        if not groups:
            raise ScenarioError("threads needs at least one command", lineno, text)
        cmd.body = [_parse_command(g, lineno, text, nested=True) for g in groups]
        return cmd
    target = None
    if "->" in rest:
        i = rest.index("->")
        if i != len(rest) - 2 or not _NAME.match(rest[-1]) or "." in rest[-1]:
            raise ScenarioError("'->' must be followed by exactly one name", lineno, text)
        target = rest[-1]
        rest = rest[:i]
        if op not in ("new", "call", "getattr"):
            raise ScenarioError(f"{op} does not bind a result", lineno, text)
    cmd = Command(lineno, text, op, [], target)
    if op == "import":
        if len(rest) == 3 and rest[1] == "as":
            cmd.args, cmd.target = [rest[0]], rest[2]
        elif len(rest) == 1:
            cmd.args, cmd.target = [rest[0]], rest[0]
        else:
            raise ScenarioError("usage: import <module> [as <name>]", lineno, text)
        return cmd
    if op in ("drop",):
        if len(rest) != 1 or not _NAME.match(rest[0]):
            raise ScenarioError(f"usage: {op} <name>", lineno, text)
        cmd.args = [rest[0]]
        return cmd
    if op in ("gc-refresh", "gc-collect", "gc-drain"):
        if rest:
            raise ScenarioError(f"{op} takes no arguments", lineno, text)
        return cmd
    if op == "stress-gc":
        if len(rest) != 1 or not _INT.match(rest[0]):
            raise ScenarioError("usage: stress-gc <trials>", lineno, text)
        cmd.args = [int(rest[0])]
        return cmd
    if op == "new":
        if not rest:
            raise ScenarioError("usage: new <ctor> <args...>", lineno, text)
        head = rest[0]
        cmd.args = [head if head in BUILTIN_CTORS else _value(head, lineno, text)]
        cmd.args += [_value(t, lineno, text) for t in rest[1:]]
        return cmd
    if op in ("call", "getattr", "setattr", "native-mutate"):
        minimum = {"call": 2, "getattr": 2, "setattr": 3, "native-mutate": 2}[op]
        if len(rest) < minimum:
            raise ScenarioError(f"{op} needs at least {minimum} arguments", lineno, text)
        if op == "getattr" and (len(rest) != 2 or target is None):
            raise ScenarioError("usage: getattr <obj> <attr> -> <name>", lineno, text)
        if op == "setattr" and len(rest) != 3:
            raise ScenarioError("usage: setattr <obj> <attr> <value>", lineno, text)
        cmd.args = [_value(rest[0], lineno, text), rest[1]] + [_value(t, lineno, text) for t in rest[2:]]
        return cmd
    if op in ("repr", "type"):
        if len(rest) != 1:
            raise ScenarioError(f"usage: {op} <value>", lineno, text)
    if op == "list-append" and len(rest) != 2:
        raise ScenarioError("usage: list-append <list> <value>", lineno, text)
    cmd.args = [_value(t, lineno, text) for t in rest]
    return cmd


def _refs(cmd):
    out = []
    for a in cmd.args:
        if isinstance(a, Ref):
            out.append(a.path[0])
    return out


def parse_scenario(text):
    """Parse scenario text; checks that names are bound before use."""
    commands = []
    bound = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if not line:
            continue
        cmd = _parse_command(tokenize(line, lineno), lineno, line)
        _check_names(cmd, bound)
        commands.append(cmd)
    return commands


def _check_names(cmd, bound):
    if cmd.op == "threads":
        local = set(bound)
        for sub in cmd.body:
            _check_names(sub, local)
        return
    for name in _refs(cmd):
        if name not in bound:
            raise ScenarioError(f"name {name!r} is not bound", cmd.lineno, cmd.text)
    if cmd.op == "drop":
        if cmd.args[0] not in bound:
            raise ScenarioError(f"name {cmd.args[0]!r} is not bound", cmd.lineno, cmd.text)
        bound.discard(cmd.args[0])
    if cmd.target:
        bound.add(cmd.target)


class _Env:
    def __init__(self, runner, parent=None):
        self.runner = runner
        self.names = dict(parent.names) if parent else {}
        self.own = set()
        self.lines = []

    def bind(self, name, handle):
        m = self.runner.rt.managed
        old = self.names.get(name) if name in self.own else None
        m.add_root(handle)
        self.names[name] = handle
        self.own.add(name)
        if old is not None:
            m.remove_root(old)

    def drop(self, name):
        h = self.names.pop(name)
        if name in self.own:
            self.own.discard(name)
            self.runner.rt.managed.remove_root(h)

    def release(self):
        for name in list(self.own):
            self.drop(name)


class ScenarioRunner:
    def __init__(self, runtime, config=None):
        self.rt = runtime
        self.config = config or ScenarioConfig()
        self.rng = random.Random(self.config.seed)

    # -- values -----------------------------------------------------------

    def literal(self, value):
        m = self.rt.managed
        if value is None:
            return m.none
        if isinstance(value, bool):
            return m.new_bool(value)
        if isinstance(value, int):
            return m.new_int(value)
        if isinstance(value, float):
            return m.new_float(value)
        return m.new_str(value)

    def eval(self, env, arg):
        if isinstance(arg, Literal):
            return self.literal(arg.value)
        h = env.names[arg.path[0]]
        for attr in arg.path[1:]:
            h = self.rt.managed.get_attr(h, attr)
        return h

    # -- commands ---------------------------------------------------------

    def run_command(self, env, cmd):
        rt, m = self.rt, self.rt.managed
        op = cmd.op
        if op == "import":
            env.bind(cmd.target, rt.ext.import_module(cmd.args[0]))
        elif op == "new":
            ctor, values = cmd.args[0], [self.eval(env, a) for a in cmd.args[1:]]
            if isinstance(ctor, str):
                h = self._builtin_new(ctor, values, m)
            else:
                h = m.call(self.eval(env, ctor), *values)
            if cmd.target:
                env.bind(cmd.target, h)
        elif op == "call":
            obj = self.eval(env, cmd.args[0])
            fn = m.get_attr(obj, cmd.args[1])
            h = m.call(fn, *[self.eval(env, a) for a in cmd.args[2:]])
            if cmd.target:
                env.bind(cmd.target, h)
        elif op == "getattr":
            env.bind(cmd.target, m.get_attr(self.eval(env, cmd.args[0]), cmd.args[1]))
        elif op == "setattr":
            m.set_attr(self.eval(env, cmd.args[0]), cmd.args[1], self.eval(env, cmd.args[2]))
        elif op == "print":
            env.lines.append(" ".join(m.str_of(self.eval(env, a)) for a in cmd.args))
        elif op == "repr":
            env.lines.append(m.repr_of(self.eval(env, cmd.args[0])))
        elif op == "type":
            env.lines.append(m.repr_of(rt.bridge.type_of(self.eval(env, cmd.args[0]))))
        elif op == "list-append":
            lst = self.eval(env, cmd.args[0])
            if m.kind(lst) != MKind.LIST:
                raise ScenarioError("list-append needs a list", cmd.lineno, cmd.text)
            m.list_append(lst, self.eval(env, cmd.args[1]))
        elif op == "native-mutate":
            self._native_mutate(env, cmd)
        elif op == "drop":
            env.drop(cmd.args[0])
        elif op == "gc-refresh":
            with rt.lock.native():
                rt.gc.refresh()
        elif op == "gc-collect":
            rt.gc.collect()
        elif op == "gc-drain":
            rt.gc.drain()
        elif op == "threads":
            self._threads(env, cmd)
        elif op == "stress-gc":
            from .selftest import gc_safety_trials

            violations = gc_safety_trials(cmd.args[0], self.rng.randrange(1 << 30))
            env.lines.append(f"stress-gc trials={cmd.args[0]} violations={violations}")

    def _builtin_new(self, ctor, values, m):
        if ctor == "list":
            return m.new_list(values)
        if ctor == "tuple":
            return m.new_tuple(values)
        if ctor == "dict":
            if len(values) % 2:
                raise BridgeError("dict needs key/value pairs")
            return m.new_dict(zip(values[::2], values[1::2]))
        if len(values) != 1:
            raise BridgeError(f"{ctor} takes exactly one value")
        v = m.get(values[0])
        conv = {"int": int, "float": float, "str": str}[ctor]
        if ctor == "str":
            return m.new_str(m.str_of(values[0]))
        if v.kind not in (MKind.INT, MKind.FLOAT, MKind.STR):
            raise BridgeError(f"cannot convert {v.kind.value} to {ctor}")
        return {"int": m.new_int, "float": m.new_float}[ctor](conv(v.payload))

    def _native_mutate(self, env, cmd):
        rt = self.rt
        b, n, m = rt.bridge, rt.native, rt.managed
        target = self.eval(env, cmd.args[0])
        op = cmd.args[1]
        values = [self.eval(env, a) for a in cmd.args[2:]]

        def index(h):
            if m.kind(h) != MKind.INT:
                raise BridgeError("index must be an int")
            return m.value(h)

        arity = {"append": 1, "insert": 2, "set": 2, "pop": (0, 1), "setitem": 2, "delitem": 1, "setattr": 2}
        if op not in arity:
            raise ScenarioError(f"unknown native-mutate op {op!r}", cmd.lineno, cmd.text)
        want = arity[op]
        if (len(values) not in want) if isinstance(want, tuple) else len(values) != want:
            raise ScenarioError(f"native-mutate {op}: wrong number of values", cmd.lineno, cmd.text)
        with rt.lock.native():
            r = b._to_native(target)
            kind = n.kind_of(r)
            if op in ("append", "insert", "set", "pop") and kind != Kind.LIST:
                raise BridgeError(f"native-mutate {op} needs a list, got {n.type_name(r)}")
            if op in ("setitem", "delitem") and kind != Kind.DICT:
                raise BridgeError(f"native-mutate {op} needs a dict, got {n.type_name(r)}")
            if op == "append":
                n.list_append(r, b._to_native(values[0]))
            elif op == "insert":
                n.list_insert(r, index(values[0]), b._to_native(values[1]))
            elif op == "set":
                n.list_setitem(r, index(values[0]), b._to_native(values[1]))
            elif op == "pop":
                n.decref(n.list_pop(r, index(values[0]) if values else -1))
            elif op == "setitem":
                n.dict_setitem(r, b._to_native(values[0]), b._to_native(values[1]))
            elif op == "delitem":
                n.dict_delitem(r, b._to_native(values[0]))
            elif op == "setattr":
                if m.kind(values[0]) != MKind.STR:
                    raise BridgeError("attribute name must be a str")
                n.setattr(r, m.value(values[0]), b._to_native(values[1]))

    def _threads(self, env, cmd):
        count = cmd.args[0]
        envs = [_Env(self, env) for _ in range(count)]
        errors = [None] * count

        def work(i):
            try:
                for sub in cmd.body:
                    self.run_command(envs[i], sub)
            except BaseException as exc:  # reported after join
                errors[i] = exc

        threads = [threading.Thread(target=work, args=(i,)) for i in range(count)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for e in envs:
            e.release()
            env.lines.extend(e.lines)
        for exc in errors:
            if exc is not None:
                raise exc


def run_scenario(text, config=None, runtime=None):
    """Run a scenario and return its report.  Counters are deltas over the run."""
    from .runtime import Runtime

    config = config or ScenarioConfig()
    rt = runtime or Runtime(demo=True)
    if config.poller:
        rt.gc.start_poller()
    before = rt.counters()
    failures_before = len(rt.bridge.render_failures)
    runner = ScenarioRunner(rt, config)
    env = _Env(runner)
    error, code = None, 0
    start = time.perf_counter()
    try:
        commands = parse_scenario(text)
        for cmd in commands:
            try:
                runner.run_command(env, cmd)
            except ScenarioError:
                raise
            except FatalInvariantError as exc:
                error, code = f"line {cmd.lineno}: invariant violation: {exc} [{cmd.text}]", 2
                break
            except (BridgeError, ValueError, TypeError, IndexError, KeyError, OverflowError) as exc:
                error, code = f"line {cmd.lineno}: {type(exc).__name__}: {exc} [{cmd.text}]", 1
                break
    except ScenarioError as exc:
        error, code = str(exc), 1
    finally:
        if config.poller:
            rt.gc.stop_poller()
    elapsed = time.perf_counter() - start
    after = rt.counters()
    stats = {k: after.get(k, 0) - before.get(k, 0) for k in set(before) | set(after) | set(STAT_KEYS)}
    warnings = [f"render failed: {w}" for w in rt.bridge.render_failures[failures_before:]]
    return ScenarioReport(env.lines, stats, error, code, elapsed, warnings)


STAT_KEYS = (
    "conv_to_managed_init",
    "conv_to_managed_hit",
    "conv_to_native_init",
    "conv_to_native_hit",
    "lock_acquisitions",
    "native_entries",
    "native_exits",
    "gc_collections",
    "gc_reclaimed",
    "gc_enqueued",
    "gc_finalized",
    "gc_refreshes",
    "render_failures",
    "native_live",
    "managed_live",
)


def emit_stats(report, golden=False):
    """Key-sorted ``key=value`` lines; golden mode drops timing-dependent keys."""
    lines = [f"{k}={report.stats[k]}" for k in sorted(report.stats) if not (golden and k in NONDETERMINISTIC)]
    if not golden:
        lines.append(f"elapsed_ms={report.elapsed * 1000:.3f}")
    return "\n".join(lines)
