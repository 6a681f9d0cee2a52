"""Cycle collection across the boundary.

The managed collector is the single authority.  Native connectivity is made
visible to it by giving every relevant native object a *stand-in* handle:
its managed counterpart if it is bridged, otherwise a GC head (a minimal
managed object created here).  Each stand-in carries ``mirrored_edges``,
the stand-ins of the native object's referents.

Update discipline: edge additions are mirrored at the mutation site (the
native store hook), removals only at ``refresh``.  Between refreshes the
mirrored graph is therefore a supergraph of the true native graph, so a
stale mirror can delay reclamation but never reclaim a reachable object.

Native references that no native object or stand-in accounts for (C
globals, native callers holding results) are external roots; the
stand-ins of everything natively reachable from them are reported to the
managed collector as extra roots.

Finalizing a stand-in only drops its pin.  Native objects that then stay
alive purely through each other are found and cleared by ``reap`` at the
end of each drain.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass

from .errors import FatalInvariantError
from .managed import MKind
from .native import AUX_GC_TAG, Kind, NativeRef


@dataclass
class RefreshReport:
    edges_added: int
    edges_removed: int
    generation: int


class GcBridge:
    def __init__(self, bridge, stats):
        self.bridge = bridge
        self.native = bridge.native
        self.managed = bridge.managed
        self.lock = bridge.lock
        self.stats = stats
        self.pins = Counter()
        self.generation = 0
        self.finalized = set()
        self.finalized_since_reap = 0
        self.heads_created = 0
        self.managed.root_providers.append(self.native_held_roots)
        self.native.store_hook = self.on_native_store
        self.native.on_free = self._on_free
        bridge.gc = self
        self._poller = None

    # ------------------------------------------------------------------
    # Stand-ins
    # ------------------------------------------------------------------

    def pinned(self, r):
        self.pins[r] += 1

    def _unpin(self, r):
        self.pins[r] -= 1
        if self.pins[r] <= 0:
            del self.pins[r]
        self.native.decref(r)

    def _on_free(self, r):
        if self.pins.get(r):
            raise FatalInvariantError(f"pinned native object 0x{int(r):x} freed")

    def stand_in(self, r):
        """Managed handle standing for native ``r``, or None."""
        n, m = self.native, self.managed
        if n.is_immortal(r):
            return None
        peer = n.header_peer(r)
        if peer and m.is_live(peer):
            return peer
        head = n.aux_get(r, AUX_GC_TAG)
        if head is not None and m.is_live(head):
            return head
        return None

    def gc_head_of(self, r):
        head = self.native.aux_get(r, AUX_GC_TAG)
        return head if head is not None and self.managed.is_live(head) else None

    def ensure_gc_head(self, r):
        """Stand-in for ``r``, creating GC heads for it and every native
        object reachable from it that has none.  New heads get their edges
        from a fresh traversal, so coverage never lags behind reachability.
        """
        r = NativeRef(r)
        found = self.stand_in(r)
        if found is not None or self.native.is_immortal(r):
            return found
        n, m = self.native, self.managed
        created = []
        stack = [r]
        while stack:
            x = stack.pop()
            if n.is_immortal(x) or self.stand_in(x) is not None:
                continue
            g = m.new_gc_head(x)
            n.aux_set(x, AUX_GC_TAG, g)
            n.incref(x)
            self.pinned(x)
            self.heads_created += 1
            self.stats.incr("gc_heads_created")
            created.append((x, g))
            stack.extend(n.referents(x))
        for x, g in created:
            m.get(g).mirrored_edges = self._edge_targets(x)
        return self.stand_in(r)

    def _edge_targets(self, r):
        n = self.native
        out = []
        for child in n.referents(r):
            if n.is_immortal(child):
                continue
            s = self.stand_in(child)
            if s is None:
                s = self.ensure_gc_head(child)
            out.append(s)
        return out

    def cover(self, r, h):
        """Give a freshly bound counterpart ``h`` the edges of ``r``.

        A GC head that stood for ``r`` before it was bridged stays alive as
        long as stale edges point at it; it forwards to the counterpart.
        """
        old = self.gc_head_of(r)
        if old is not None and old != h:
            self.managed.get(old).mirrored_edges = [h]
        self.managed.get(h).mirrored_edges = self._edge_targets(r)

    def on_native_store(self, container, value):
        """Store hook: mirror a new native edge immediately."""
        n = self.native
        if n.is_immortal(value):
            return
        s = self.stand_in(container)
        if s is None:
            return
        target = self.ensure_gc_head(value)
        self.managed.get(s).mirrored_edges.append(target)
        self.stats.incr("gc_edges_added_eager")

    # ------------------------------------------------------------------
    # Refresh
    # ------------------------------------------------------------------

    def covered(self):
        """Live native objects that currently have a stand-in."""
        return [r for r in self.native.live_objects() if self.stand_in(r) is not None]

    def refresh(self, scope=None):
        """Re-read native connectivity for ``scope`` (default: every object
        with a stand-in) and replace mirrored edges per object."""
        self.lock.check_owned()
        n, m = self.native, self.managed
        if scope is None:
            scope = self.covered()
        added = removed = 0
        for r in scope:
            r = NativeRef(r)
            if not n.is_live(r) or n.is_immortal(r):
                continue
            s = self.stand_in(r) or self.ensure_gc_head(r)
            obj = m.get(s)
            new = self._edge_targets(r)
            diff_new, diff_old = Counter(new), Counter(obj.mirrored_edges)
            added += sum((diff_new - diff_old).values())
            removed += sum((diff_old - diff_new).values())
            obj.mirrored_edges = new
        self.generation += 1
        self.stats.incr("gc_refreshes")
        self.stats.incr("gc_edges_added", added)
        self.stats.incr("gc_edges_removed", removed)
        return RefreshReport(added, removed, self.generation)

    # ------------------------------------------------------------------
    # Roots held from the native side
    # ------------------------------------------------------------------

    def external_native_roots(self):
        """Native objects referenced from outside the native heap and pins."""
        n = self.native
        live = [r for r in n.live_objects() if not n.is_immortal(r)]
        gc_refs = {r: n.refcount(r) - self.pins.get(r, 0) for r in live}
        for r in live:
            for child in n.referents(r):
                if child in gc_refs:
                    gc_refs[child] -= 1
            if n.kind_of(r) == Kind.INSTANCE:
                t = n.type_of(r)
                if t in gc_refs:
                    gc_refs[t] -= 1
        return [r for r, count in gc_refs.items() if count > 0]

    def native_held_roots(self):
        n = self.native
        seen = set()
        stack = self.external_native_roots()
        out = []
        while stack:
            r = stack.pop()
            if r in seen or n.is_immortal(r):
                continue
            seen.add(r)
            s = self.stand_in(r)
            if s is not None:
                out.append(s)
            stack.extend(n.referents(r))
        return out

    # ------------------------------------------------------------------
    # Collection and finalization
    # ------------------------------------------------------------------

    def collect(self):
        with self.lock.native():
            return self.managed.gc_collect()

    def on_finalized(self, h):
        """Release the native side of a swept managed object."""
        self.lock.check_owned()
        if h in self.finalized:
            raise FatalInvariantError(f"handle {h} finalized twice")
        obj = self.managed.phantom(h)
        if obj is None:
            raise FatalInvariantError(f"handle {h} was never queued for finalization")
        self.finalized.add(h)
        n = self.native
        if obj.kind == MKind.GC_HEAD:
            r = NativeRef(obj.payload)
            if n.aux_get(r, AUX_GC_TAG) == h:
                n.aux_remove(r, AUX_GC_TAG)
        else:
            r = self.bridge.unbind(h, obj)
        self.managed.forget(h)
        self.stats.incr("gc_finalized")
        self.finalized_since_reap += 1
        self._unpin(r)

    def reap(self):
        """Free native cycles that nothing outside the native heap holds.

        Refcount subtraction the way CPython's cycle detector does it: a
        reference not explained by another live native object is external
        (C code, or a pin held for a managed stand-in).  Objects not
        reachable from such referenced objects are garbage; clearing their
        containers lets refcounting free them.
        """
        self.lock.check_owned()
        n = self.native
        live = [r for r in n.live_objects() if not n.is_immortal(r)]
        gc_refs = {r: n.refcount(r) for r in live}
        children = {}
        for r in live:
            out = n.referents(r)
            if n.kind_of(r) == Kind.INSTANCE:
                out.append(n.type_of(r))
            children[r] = out
            for c in out:
                if c in gc_refs:
                    gc_refs[c] -= 1
        reachable = set()
        stack = [r for r, count in gc_refs.items() if count > 0]
        while stack:
            r = stack.pop()
            if r in reachable:
                continue
            reachable.add(r)
            stack.extend(c for c in children[r] if c in gc_refs)
        garbage = [r for r in live if r not in reachable]
        if not garbage:
            return 0
        for r in garbage:
            n.incref(r)
        for r in garbage:
            n.clear_refs(r)
        freed_before = n.freed_total
        for r in garbage:
            n.decref(r)
        self.stats.incr("gc_native_cleared", len(garbage))
        return n.freed_total - freed_before

    def finalize_now(self, h):
        """Finalize a swept handle ahead of the queue; the drain skips it."""
        self.on_finalized(h)

    def drain(self):
        """Poll the reference queue until empty; returns handles finalized."""
        count = 0
        with self.lock.native():
            while True:
                h = self.managed.poll_finalizable()
                if h is None:
                    break
                if h in self.finalized:
                    continue
                self.on_finalized(h)
                count += 1
            self.reap()
            self.finalized_since_reap = 0
        return count

    def full_cycle(self):
        """refresh + collect + drain; returns (RefreshReport, CollectReport, finalized)."""
        with self.lock.native():
            rep = self.refresh()
            col = self.managed.gc_collect()
        return rep, col, self.drain()

    # ------------------------------------------------------------------
    # Daemon poller
    # ------------------------------------------------------------------

    def start_poller(self, interval=0.01):
        if self._poller is not None:
            return
        stop = threading.Event()

        def run():
            while not stop.is_set():
                h = self.managed.poll_finalizable()
                if h is None:
                    if self.finalized_since_reap:
                        with self.lock.native():
                            self.reap()
                        self.finalized_since_reap = 0
                    stop.wait(interval)
                    continue
                with self.lock.native():
                    if h not in self.finalized:
                        self.on_finalized(h)

        t = threading.Thread(target=run, name="finalization-poller", daemon=True)
        self._poller = (t, stop)
        t.start()

    def stop_poller(self):
        if self._poller is None:
            return
        t, stop = self._poller
        stop.set()
        t.join()
        self._poller = None
