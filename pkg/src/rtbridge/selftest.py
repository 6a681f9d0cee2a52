"""Built-in consistency checks for ``rtbridge selftest`` and ``stress-gc``.

The GC check drives a random mix of managed and native mutations,
conversions and stale refreshes, and compares every collection against
reachability in the true combined graph (real managed references, the
counterpart pairing, native references, delegation stubs to their twins).
Mirrored edges are deliberately ignored by that oracle.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass

from .errors import BridgeError, FatalInvariantError
from .managed import MKind
from .native import DELEGATE, INITIALIZED, Kind, NativeRef
from .runtime import Runtime
from .valuefmt import build_value, parse_args, parse_format


def true_reachable(rt):
    """(managed handles, native refs) reachable from managed roots."""
    m, n, b = rt.managed, rt.native, rt.bridge
    seen_m, seen_n = set(), set()
    stack = [("m", h) for h in m.roots if m.is_live(h)]
    while stack:
        side, x = stack.pop()
        if side == "m":
            if x in seen_m or not m.is_live(x):
                continue
            seen_m.add(x)
            obj = m.get(x)
            refs = list(obj.attributes.values())
            if obj.kind in (MKind.TUPLE, MKind.SLICE):
                refs += list(obj.payload)
            elif obj.kind == MKind.LIST and isinstance(obj.payload, list):
                refs += obj.payload
            elif obj.kind == MKind.DICT:
                for k, v in obj.payload.values():
                    refs += [k, v]
            elif obj.kind == MKind.MODULE:
                refs.append(obj.payload)
            elif obj.kind == MKind.FUNCTION:
                refs += list(obj.payload.captures)
            stack.extend(("m", h) for h in refs)
            r = b.table.get(x)
            if r is None and obj.kind in (MKind.PEER, MKind.PEER_TYPE):
                r = obj.native_peer
            if r:
                stack.append(("n", NativeRef(r)))
        else:
            if x in seen_n or not n.is_live(x) or n.is_immortal(x):
                continue
            seen_n.add(x)
            stack.extend(("n", c) for c in n.referents(x))
            if n.kind_of(x) == Kind.INSTANCE:
                stack.append(("n", n.type_of(x)))
            flags = n.header_flags(x)
            if flags & DELEGATE and flags & INITIALIZED and n.header_peer(x):
                stack.append(("m", n.header_peer(x)))
    return seen_m, seen_n


def _check_survivors(rt, snap_m, snap_n):
    m, n = rt.managed, rt.native
    bad = sum(1 for h in snap_m if not m.is_live(h))
    bad += sum(1 for r, serial in snap_n.items() if not n.is_live(r) or n.serial.get(r) != serial)
    return bad


class _Workload:
    """Random mutator over one runtime; native refs in ``held`` are owned."""

    def __init__(self, rt, rng):
        self.rt, self.rng = rt, rng
        self.roots = []
        self.held = []
        self.point = rt.ext.type_ref("demo", "Point")

    def _managed_value(self):
        m, rng = self.rt.managed, self.rng
        if self.roots and rng.random() < 0.6:
            return rng.choice(self.roots)
        return m.new_int(rng.randrange(100)) if rng.random() < 0.5 else m.new_str(f"s{rng.randrange(50)}")

    def _native_value(self):
        n, rng = self.rt.native, self.rng
        if self.held and rng.random() < 0.6:
            return rng.choice(self.held)
        if self.roots and rng.random() < 0.5:
            return self.rt.bridge._to_native(rng.choice(self.roots))
        return n.none

    def _root(self, h):
        self.rt.managed.add_root(h)
        self.roots.append(h)

    def step(self):
        rt, m, n, b, rng = self.rt, self.rt.managed, self.rt.native, self.rt.bridge, self.rng
        op = rng.randrange(11)
        if op == 0:
            kind = rng.randrange(3)
            if kind == 0:
                h = m.new_list([self._managed_value() for _ in range(rng.randrange(3))])
            elif kind == 1:
                h = m.new_dict([(m.new_str(f"k{rng.randrange(5)}"), self._managed_value())])
            else:
                h = m.new_tuple([self._managed_value() for _ in range(rng.randrange(3))])
            self._root(h)
        elif op == 1 and self.roots:
            h = self.roots.pop(rng.randrange(len(self.roots)))
            m.remove_root(h)
        elif op == 2 and self.roots:
            h = rng.choice(self.roots)
            if m.kind(h) == MKind.LIST:
                m.list_append(h, self._managed_value())
            elif m.kind(h) == MKind.DICT:
                m.dict_set(h, m.new_str(f"k{rng.randrange(5)}"), self._managed_value())
        elif op == 3 and self.roots:
            with rt.lock.native():
                r = b._to_native(rng.choice(self.roots))
                n.incref(r)
                self.held.append(r)
        elif op == 4:
            with rt.lock.native():
                kind = rng.randrange(3)
                if kind == 0:
                    r = n.new_list()
                    for _ in range(rng.randrange(3)):
                        n.list_append(r, self._native_value())
                elif kind == 1:
                    r = n.new_dict()
                    n.dict_setitem_str(r, f"k{rng.randrange(5)}", self._native_value())
                else:
                    r = n.new_instance(self.point)
                    n.setattr(r, f"a{rng.randrange(3)}", self._native_value())
                self.held.append(r)
        elif op in (5, 6) and self.held:
            with rt.lock.native():
                r = rng.choice(self.held)
                kind = n.kind_of(r)
                if kind == Kind.LIST:
                    if n.list_len(r) and rng.random() < 0.4:
                        n.decref(n.list_pop(r, rng.randrange(n.list_len(r))))
                    elif n.list_len(r) and rng.random() < 0.5:
                        n.list_setitem(r, rng.randrange(n.list_len(r)), self._native_value())
                    else:
                        n.list_append(r, self._native_value())
                elif kind == Kind.DICT:
                    name = f"k{rng.randrange(5)}"
                    if rng.random() < 0.3:
                        key = n.new_str(name)
                        try:
                            n.dict_delitem(r, key)
                        except (KeyError, BridgeError):
                            pass
                        n.decref(key)
                    else:
                        n.dict_setitem_str(r, name, self._native_value())
                elif kind == Kind.INSTANCE:
                    n.setattr(r, f"a{rng.randrange(3)}", self._native_value())
        elif op == 7 and self.held:
            h = b.to_managed(rng.choice(self.held))
            if h is not None and m.kind(h) not in (MKind.SINGLETON,):
                self._root(h)
        elif op == 8 and self.held:
            r = self.held.pop(rng.randrange(len(self.held)))
            with rt.lock.native():
                n.decref(r)
        elif op == 9:
            with rt.lock.native():
                covered = rt.gc.covered()
                scope = [r for r in covered if rng.random() < 0.5]
                rt.gc.refresh(scope)
        elif op == 10:
            return self.collect()
        return 0

    def collect(self):
        rt = self.rt
        with rt.lock.native():
            snap_m, snap_n = true_reachable(rt)
            snap_n = {r: rt.native.serial[r] for r in snap_n}
            rt.managed.gc_collect()
            bad = _check_survivors(rt, snap_m, snap_n)
        rt.gc.drain()
        with rt.lock.native():
            bad += _check_survivors(rt, snap_m, snap_n)
        return bad

    def release_all(self):
        with self.rt.lock.native():
            for r in self.held:
                self.rt.native.decref(r)
        self.held.clear()
        for h in self.roots:
            self.rt.managed.remove_root(h)
        self.roots.clear()


def gc_safety_trials(trials, seed=0, steps=120):
    """Run random workloads; returns how many reachable objects were lost."""
    rng = random.Random(seed)
    violations = 0
    for _ in range(trials):
        rt = Runtime(capacity=1 << 22, demo=True)
        w = _Workload(rt, rng)
        for _ in range(steps):
            violations += w.step()
        violations += w.collect()
    return violations


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _check_header_roundtrip(rng, iterations):
    rt = Runtime()
    n = rt.native
    bad = 0
    with rt.lock.native():
        for _ in range(iterations):
            r = n.new_list(wants_gc=rng.random() < 0.5) if rng.random() < 0.5 else n.new_int(rng.randrange(1000))
            if n.from_header(n.as_header(r)) != r:
                bad += 1
            n.decref(r)
    return CheckResult("header-roundtrip", bad == 0, f"{iterations} objects, {bad} mismatches")


def _check_conversion(rng, iterations):
    rt = Runtime()
    m, b = rt.managed, rt.bridge
    bad = 0
    for _ in range(iterations):
        h = m.new_int(rng.randrange(-1000, 1000)) if rng.random() < 0.5 else m.new_str(f"v{rng.randrange(99)}")
        r = b.to_native(h)
        if b.to_managed(r) != h or b.to_native(h) != r:
            bad += 1
    return CheckResult("conversion-identity", bad == 0, f"{iterations} values, {bad} mismatches")


def _check_format(rng, iterations):
    rt = Runtime()
    n = rt.native
    bad = 0
    units = "ids"
    with rt.lock.native():
        for _ in range(iterations):
            fmt = "".join(rng.choice(units) for _ in range(rng.randrange(1, 5)))
            values = [rng.randrange(100) if u == "i" else float(rng.randrange(100)) if u == "d" else f"x{rng.randrange(9)}"
                      for u in fmt]
            # A parenthesized build is always a tuple, the shape an args tuple has.
            built = build_value(n, parse_format(f"({fmt})"), values)
            back = parse_args(n, parse_format(fmt), built)
            if list(back) != values:
                bad += 1
            n.decref(built)
    return CheckResult("format-roundtrip", bad == 0, f"{iterations} formats, {bad} mismatches")


def _check_lock(iterations):
    rt = Runtime(trace_lock=True)
    holders = []
    guard = threading.Lock()
    overlap = [0]

    def work():
        for _ in range(iterations):
            with rt.lock.native():
                with guard:
                    holders.append(1)
                    if len(holders) > 1:
                        overlap[0] += 1
                with guard:
                    holders.pop()

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return CheckResult("lock-exclusion", overlap[0] == 0, f"4 threads x {iterations}, {overlap[0]} overlaps")


def _check_cycle():
    rt = Runtime()
    m, b = rt.managed, rt.bridge
    base_m, base_n = m.live_count, rt.native.live_count
    d = m.new_dict()
    t = m.new_tuple([d])
    b.to_native(t)
    m.dict_set(d, m.new_str("t"), t)
    rt.gc.full_cycle()
    ok = m.live_count == base_m and rt.native.live_count == base_n
    return CheckResult("cycle-reclaimed", ok,
                       f"managed delta {m.live_count - base_m}, native delta {rt.native.live_count - base_n}")


def run_selftest(iterations=200, seed=0):
    """Every check as a ``CheckResult``."""
    rng = random.Random(seed)
    results = [
        _check_header_roundtrip(rng, iterations),
        _check_conversion(rng, iterations),
        _check_format(rng, iterations),
        _check_lock(max(1, iterations // 4)),
        _check_cycle(),
    ]
    try:
        lost = gc_safety_trials(max(1, iterations // 50), rng.randrange(1 << 30))
        results.append(CheckResult("gc-safety", lost == 0, f"{lost} reachable objects lost"))
    except FatalInvariantError as exc:
        results.append(CheckResult("gc-safety", False, f"invariant violation: {exc}"))
    return results
