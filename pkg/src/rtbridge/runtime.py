"""One bridged world: native heap, managed heap, lock, bridge, gc, extensions."""

from __future__ import annotations

import threading
from collections import Counter

from .bridge import Bridge
from .extload import DEMO_DESCRIPTOR, ExtensionRegistry
from .gcbridge import GcBridge
from .lock import BoundaryLock
from .managed import ManagedRuntime
from .native import NativeRuntime


class Stats:
    """Thread-safe named counters."""

    def __init__(self):
        self._counts = Counter()
        self._mutex = threading.Lock()

    def incr(self, key, n=1):
        with self._mutex:
            self._counts[key] += n

    def __getitem__(self, key):
        with self._mutex:
            return self._counts[key]

    def snapshot(self):
        with self._mutex:
            return dict(self._counts)


class Runtime:
    def __init__(self, capacity=1 << 23, debug=True, trace_lock=False, demo=False):
        self.lock = BoundaryLock(trace=trace_lock)
        self.native = NativeRuntime(capacity, debug=debug)
        if debug:
            self.native.lock_check = self.lock.check_owned
        self.managed = ManagedRuntime()
        self.managed.lock = self.lock
        self.stats = Stats()
        self.bridge = Bridge(self.native, self.managed, self.lock, self.stats)
        self.gc = GcBridge(self.bridge, self.stats)
        self.ext = ExtensionRegistry(self)
        self.native.invoke = self.ext.invoke
        if demo:
            self.ext.register_text(DEMO_DESCRIPTOR)

    # Shorthands used all over tests and the CLI.
    def to_managed(self, r):
        return self.bridge.to_managed(r)

    def to_native(self, h):
        return self.bridge.to_native(h)

    def native_section(self):
        return self.lock.native()

    def counters(self):
        """Every counter the CLI reports, as a flat dict."""
        out = Counter()
        out.update(self.stats.snapshot())
        out.update(self.lock.stats)
        out.update(self.managed.stats)
        out["native_allocations"] = self.native.arena.allocations
        out["native_frees"] = self.native.freed_total
        out["native_live"] = self.native.live_count
        out["native_aux_live"] = self.native.aux_live
        out["managed_live"] = self.managed.live_count
        out["gc_generation"] = self.gc.generation
        out["gc_queue_length"] = len(self.managed.queue)
        out["gc_polled"] = self.managed.queue.polled
        return dict(out)
