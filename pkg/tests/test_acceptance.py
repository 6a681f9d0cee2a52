"""The ten acceptance criteria, each at its stated scale and tolerance.

Every test prints one PASS/FAIL line, and the lines are repeated together
in the pytest terminal summary.
"""

import itertools
import math
import random
import subprocess
import sys
import threading
from contextlib import contextmanager
from pathlib import Path

import pytest

from conftest import ACCEPTANCE_RESULTS
from gc_workload import CombinedGraph
from oracles import lock_intervals, overlapping, reachable_from_roots
from rtbridge.bridge import Strategy
from rtbridge.cli import main
from rtbridge.managed import MKind
from rtbridge.native import NativeRuntime
from rtbridge.runtime import Runtime
from rtbridge.scenario import ScenarioConfig, run_scenario
from test_valuefmt import forests, roundtrip

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@contextmanager
def criterion(number, name):
    """Record PASS when the block completes and FAIL when it raises."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        line = f"criterion {number:2d} {name}: FAIL ({type(exc).__name__})"
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        raise
    line = f"criterion {number:2d} {name}: PASS" + (f" ({detail['info']})" if "info" in detail else "")
    ACCEPTANCE_RESULTS.append(line)
    print(line)


def settle(rt, rounds=6):
    for _ in range(rounds):
        _, col, fin = rt.gc.full_cycle()
        if col.reclaimed_count == 0 and fin == 0:
            break


# 1 ---------------------------------------------------------------------------

def _random_native(rt, rng, point):
    n = rt.native
    c = rng.randrange(9)
    if c == 0:
        return n.new_int(rng.randrange(-(1 << 40), 1 << 40))
    if c == 1:
        return n.new_float(rng.uniform(-1e9, 1e9))
    if c == 2:
        return n.new_str("".join(rng.choice("abcé中") for _ in range(rng.randrange(6))))
    if c == 3:
        return n.new_tuple([n.new_int(rng.randrange(9)) for _ in range(rng.randrange(3))])
    if c == 4:
        r = n.new_list()
        for _ in range(rng.randrange(3)):
            x = n.new_int(rng.randrange(9))
            n.list_append(r, x)
            n.decref(x)
        return r
    if c == 5:
        r = n.new_dict()
        x = n.new_str("v")
        n.dict_setitem_str(r, f"k{rng.randrange(9)}", x)
        n.decref(x)
        return r
    if c == 6:
        return n.new_slice(None, n.new_int(rng.randrange(9)), None)
    if c == 7:
        return n.new_module(f"mod{rng.randrange(1 << 30)}")
    return n.new_instance(point)


def _random_managed(rt, rng):
    m = rt.managed
    c = rng.randrange(7)
    if c == 0:
        return m.new_int(rng.randrange(-(1 << 40), 1 << 40))
    if c == 1:
        return m.new_float(rng.uniform(-1e9, 1e9))
    if c == 2:
        return m.new_str(f"s{rng.randrange(1000)}")
    if c == 3:
        return m.new_tuple([m.new_int(rng.randrange(9)) for _ in range(rng.randrange(3))])
    if c == 4:
        return m.new_list([m.new_str("x") for _ in range(rng.randrange(3))])
    if c == 5:
        return m.new_dict([(m.new_str(f"k{rng.randrange(9)}"), m.new_int(1))])
    return m.new_function(f"f{rng.randrange(9)}", lambda rt_: None)


def test_c01_lookup_roundtrip():
    with criterion(1, "lookup round-trip") as detail:
        rt = Runtime(capacity=1 << 25, demo=True)
        m, n = rt.managed, rt.native
        rng = random.Random(1)
        point = rt.ext.type_ref("demo", "Point")
        bad = 0
        count = 10_000
        for i in range(count):
            if i % 2:
                with rt.lock.native():
                    r = _random_native(rt, rng, point)
                h = rt.to_managed(r)
                m.add_root(h)
                bad += rt.to_native(h) != r or rt.to_managed(r) != h
                with rt.lock.native():
                    n.decref(r)
            else:
                h = _random_managed(rt, rng)
                m.add_root(h)
                r = rt.to_native(h)
                bad += rt.to_managed(r) != h or rt.to_native(h) != r
        with rt.lock.native():
            objs = list(n.live_objects())
            header_bad = sum(n.from_header(n.as_header(r)) != r for r in objs)
            # Every fresh allocation too, including reused blocks.
            for _ in range(count):
                r = n.new_list(wants_gc=rng.random() < 0.5) if rng.random() < 0.5 else n.new_str("x" * rng.randrange(30))
                header_bad += n.from_header(n.as_header(r)) != r
                n.decref(r)
        assert bad == 0
        assert header_bad == 0
        detail["info"] = f"{count} objects, {len(objs) + count} allocations checked"


# 2 ---------------------------------------------------------------------------

def test_c02_strategy_conformance(rt):
    with criterion(2, "strategy conformance"):
        n = rt.native
        with rt.lock.native():
            objs = {
                "dict": (n.new_dict(), Strategy.DELEGATE),
                "slice": (n.new_slice(None, None, None), Strategy.DELEGATE),
                "module": (n.new_module("m"), Strategy.DELEGATE),
                "tuple": (n.new_tuple([]), Strategy.MIRROR),
                "list": (n.new_list(), Strategy.MIRROR),
                "str": (n.new_str("s"), Strategy.MIRROR),
                "int": (n.new_int(1), Strategy.MIRROR),
                "float": (n.new_float(1.0), Strategy.MIRROR),
                "demo.Point": (n.new_instance(rt.ext.type_ref("demo", "Point")), Strategy.PEER),
                "demo.Moment": (n.new_instance(rt.ext.type_ref("demo", "Moment")), Strategy.PEER),
            }
        got = {}
        for name, (r, _) in objs.items():
            rt.to_managed(r)
            with rt.lock.native():
                got[name] = rt.bridge.strategy_of(r)
        assert got == {name: want for name, (_, want) in objs.items()}


# 3 ---------------------------------------------------------------------------

def test_c03_mirror_coherence():
    with criterion(3, "mirror coherence") as detail:
        rt = Runtime(capacity=1 << 22)
        m, n = rt.managed, rt.native
        rng = random.Random(3)
        mismatches = 0
        for _ in range(1000):
            shadow = [rng.randrange(100) for _ in range(rng.randrange(4))]
            if rng.random() < 0.5:
                h = m.new_list([m.new_int(v) for v in shadow])
                r = rt.to_native(h)
            else:
                with rt.lock.native():
                    r = n.new_list()
                    for v in shadow:
                        x = n.new_int(v)
                        n.list_append(r, x)
                        n.decref(x)
                h = rt.to_managed(r)
                with rt.lock.native():
                    n.decref(r)
            m.add_root(h)
            for _ in range(rng.randrange(5, 15)):
                v = rng.randrange(100)
                op = rng.randrange(8)
                if op == 0:
                    m.list_append(h, m.new_int(v))
                    shadow.append(v)
                elif op == 1:
                    i = rng.randrange(len(shadow) + 1)
                    m.list_insert(h, i, m.new_int(v))
                    shadow.insert(i, v)
                elif op == 2 and shadow:
                    i = rng.randrange(len(shadow))
                    m.list_setitem(h, i, m.new_int(v))
                    shadow[i] = v
                elif op == 3 and shadow:
                    i = rng.randrange(len(shadow))
                    m.list_pop(h, i)
                    shadow.pop(i)
                else:
                    with rt.lock.native():
                        if op == 4:
                            x = n.new_int(v)
                            n.list_append(r, x)
                            n.decref(x)
                            shadow.append(v)
                        elif op == 5:
                            i = rng.randrange(len(shadow) + 1)
                            x = n.new_int(v)
                            n.list_insert(r, i, x)
                            n.decref(x)
                            shadow.insert(i, v)
                        elif op == 6 and shadow:
                            i = rng.randrange(len(shadow))
                            x = n.new_int(v)
                            n.list_setitem(r, i, x)
                            n.decref(x)
                            shadow[i] = v
                        elif op == 7 and shadow:
                            i = rng.randrange(len(shadow))
                            n.decref(n.list_pop(r, i))
                            shadow.pop(i)
                with rt.lock.native():
                    native_view = [n.int_value(x) for x in n.list_items(r)]
                managed_view = [m.value(x) for x in m.list_items(h)]
                mismatches += native_view != shadow or managed_view != shadow
            m.remove_root(h)
        assert mismatches == 0
        detail["info"] = "1000 sequences"


# 4 ---------------------------------------------------------------------------

def test_c04_peer_delegation():
    with criterion(4, "peer delegation") as detail:
        rt = Runtime(capacity=1 << 22, demo=True)
        m, n = rt.managed, rt.native
        rng = random.Random(4)
        point = rt.ext.type_ref("demo", "Point")
        bad = 0
        for i in range(500):
            x, y = rng.uniform(-1e3, 1e3), rng.uniform(-1e3, 1e3)
            tag = rng.randrange(-1000, 1000)
            name = f"extra{rng.randrange(5)}"
            with rt.lock.native():
                r = n.new_instance(point)
                n.member_set(r, "x", x)
                n.member_set(r, "y", y)
                v = n.new_int(tag)
                n.setattr(r, name, v)
                n.decref(v)
            p = rt.to_managed(r)
            m.add_root(p)
            with rt.lock.native():
                n.decref(r)
            assert m.kind(p) == MKind.PEER
            bad += m.value(m.get_attr(p, "x")) != x          # member
            bad += m.value(m.get_attr(p, "y")) != y          # member
            bad += m.value(m.get_attr(p, "norm")) != math.hypot(x, y)   # getset
            bad += m.value(m.get_attr(p, name)) != tag       # instance dict
            m.remove_root(p)
        assert bad == 0
        detail["info"] = "500 fixtures, 4 attributes each"


# 5 ---------------------------------------------------------------------------

def test_c05_boundary_lock():
    with criterion(5, "boundary lock") as detail:
        rt = Runtime(capacity=1 << 22, demo=True, trace_lock=True)
        n, lock = rt.native, rt.lock
        errors = []
        entered_during_callback = threading.Event()
        in_callback = threading.Event()

        def managed_side():
            in_callback.set()
            return entered_during_callback.wait(5)

        def worker(index):
            try:
                for j in range(1000):
                    with lock.native():
                        x = n.new_int(j)
                        with lock.native():
                            n.decref(x)
                        if index == 0 and j == 500:
                            lock.callback_to_managed(managed_side)
            except Exception as exc:  # pragma: no cover - reported below
                errors.append(exc)

        def visitor():
            # Runs once thread 0 is inside its callback window.
            with lock.native():
                entered_during_callback.set()

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        assert in_callback.wait(30)
        v = threading.Thread(target=visitor)
        v.start()
        for t in threads + [v]:
            t.join()
        assert not errors
        assert entered_during_callback.is_set()
        # The visitor's entry falls inside thread 0's callback window.
        cb_out = next(e for e in lock.trace if e[3] == "callback")
        cb_back = next(e for e in lock.trace if e[3] == "callback-return")
        visits = [e for e in lock.trace if e[1] == v.ident and e[2] == "acquire"]
        assert any(cb_out[0] < e[0] < cb_back[0] for e in visits)
        intervals, balanced = lock_intervals(lock.trace)
        assert balanced
        assert lock.depth == 0 and not lock.owned()
        assert overlapping(intervals) == []
        acquires = sum(1 for e in lock.trace if e[2] == "acquire")
        assert acquires >= 8 * 1000
        detail["info"] = f"{len(intervals)} intervals, 0 overlaps"


# 6 ---------------------------------------------------------------------------

def test_c06_gc_safety():
    with criterion(6, "GC safety") as detail:
        lost = 0
        collections = 0
        for seed in range(1000):
            rt = Runtime(capacity=1 << 20, demo=True)
            g = CombinedGraph(rt, random.Random(seed)).build()
            for _ in range(3):
                g.mutate(8)
                lost += len(g.checked_collect())
                collections += 1
        assert lost == 0
        detail["info"] = f"1000 graphs, {collections} checked collections, 0 violations"


# 7 ---------------------------------------------------------------------------

def _cycle_dict_tuple(rt):
    m = rt.managed
    d = m.new_dict()
    t = m.new_tuple([d])
    rt.to_native(t)
    m.dict_set(d, m.new_str("t"), t)


def _cycle_native_pair(rt):
    n = rt.native
    with rt.lock.native():
        a, b = n.new_list(), n.new_dict()
        n.list_append(a, b)
        n.dict_setitem_str(b, "a", a)
    rt.to_managed(a)
    with rt.lock.native():
        n.decref(a)
        n.decref(b)


def _cycle_list_through_peer(rt):
    m, n = rt.managed, rt.native
    lst = m.new_list()
    with rt.lock.native():
        p = n.new_instance(rt.ext.type_ref("demo", "Point"))
        n.setattr(p, "back", rt.bridge._to_native(lst))
    m.list_append(lst, rt.to_managed(p))
    with rt.lock.native():
        n.decref(p)


def _cycle_ring(rt, size=4):
    """managed list -> native list -> managed list -> ... -> back to the start."""
    m, n = rt.managed, rt.native
    ms = [m.new_list() for _ in range(size)]
    with rt.lock.native():
        rs = [n.new_list() for _ in range(size)]
        for i, r in enumerate(rs):
            n.list_append(r, rt.bridge._to_native(ms[(i + 1) % size]))
    for h, r in zip(ms, rs):
        m.list_append(h, rt.to_managed(r))
    with rt.lock.native():
        for r in rs:
            n.decref(r)


CYCLES = {
    "managed dict / mirrored tuple": _cycle_dict_tuple,
    "exposed native list / dict": _cycle_native_pair,
    "managed list / peer instance": _cycle_list_through_peer,
    "alternating ring of four": _cycle_ring,
}


def test_c07_gc_liveness(rt):
    with criterion(7, "GC liveness") as detail:
        m, n = rt.managed, rt.native
        failed = []
        for name, build in CYCLES.items():
            base = (m.live_count, n.live_count)
            build(rt)
            grown = (m.live_count - base[0], n.live_count - base[1])
            rt.gc.full_cycle()
            if (m.live_count, n.live_count) != base or grown[1] == 0:
                failed.append((name, grown, (m.live_count - base[0], n.live_count - base[1])))
        assert failed == []
        detail["info"] = f"{len(CYCLES)} cycle shapes, one refresh + collect + drain each"


# 8 ---------------------------------------------------------------------------

def test_c08_format_roundtrip():
    with criterion(8, "format round-trip") as detail:
        n = NativeRuntime(capacity=1 << 22)
        rng = random.Random(8)
        checked = 0
        for shape in sorted(set(forests(6, 3))):
            slots = shape.count("x")
            if slots > 6:
                continue
            combos = itertools.product("idsO", repeat=slots) if slots <= 3 else (
                tuple(rng.choice("idsO") for _ in range(slots)) for _ in range(8))
            for codes in combos:
                it = iter(codes)
                roundtrip(n, "".join(next(it) if ch == "x" else ch for ch in shape), rng)
                checked += 1
        exhaustive = checked
        for _ in range(10_000):
            fmt = _random_format(rng, 3)
            roundtrip(n, fmt, rng)
            checked += 1
        detail["info"] = f"{exhaustive} exhaustive + {checked - exhaustive} random formats"


def _random_format(rng, depth):
    out = []
    for _ in range(rng.randrange(1, 7)):
        if depth and rng.random() < 0.25:
            out.append("(" + _random_format(rng, depth - 1) + ")")
        else:
            out.append(rng.choice("idsO"))
    return "".join(out)


# 9 ---------------------------------------------------------------------------

def test_c09_golden_scenario(capsys):
    with criterion(9, "golden scenario") as detail:
        golden = (SCENARIOS / "demo.golden").read_text(encoding="utf-8")
        outs = []
        for seed in (0, 1, 2):
            assert main(["run", str(SCENARIOS / "demo.scn"), "--golden", "--seed", str(seed)]) == 0
            outs.append(capsys.readouterr().out)
        proc = subprocess.run([sys.executable, "-m", "rtbridge", "run", str(SCENARIOS / "demo.scn"), "--golden"],
                              capture_output=True, check=True)
        outs.append(proc.stdout.decode("utf-8").replace("\r\n", "\n"))
        assert all(o == golden for o in outs)
        body = golden.split("--- stats")[0].splitlines()
        assert body[0] == "Fast implementation of the demo types."
        assert body[-1] == "<type 'demo.Moment'>"
        detail["info"] = f"{len(outs)} runs byte-identical to demo.golden"


# 10 --------------------------------------------------------------------------

def test_c10_leak_audit():
    with criterion(10, "leak audit") as detail:
        audited = []
        for path in sorted(SCENARIOS.glob("*.scn")):
            rt = Runtime(capacity=1 << 22, demo=True)
            report = run_scenario(path.read_text(encoding="utf-8"), ScenarioConfig(), rt)
            assert report.exit_code == 0, (path.name, report.error)
            rt.ext.unload_all()
            settle(rt)
            with rt.lock.native():
                _, reachable = reachable_from_roots(rt)
                live = rt.native.live_count
            assert live == len(reachable), (path.name, live, len(reachable))
            # Dropping the scenario's own bindings must free everything else.
            for h in list(rt.managed.roots):
                rt.managed.remove_root(h)
            settle(rt)
            with rt.lock.native():
                _, reachable = reachable_from_roots(rt)
                assert rt.native.live_count == len(reachable), (path.name, "unrooted")
                after = rt.native.live_count
            audited.append(f"{path.stem} {live}->{after}")
        detail["info"] = "live == reachable for " + ", ".join(audited)
