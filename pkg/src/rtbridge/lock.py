"""Reentrant lock held exactly while a thread executes native code."""

from __future__ import annotations

import threading
from contextlib import contextmanager

from .errors import FatalInvariantError


class _Guard:
    __slots__ = ("_lock", "_tid", "_done")

    def __init__(self, lock, tid):
        self._lock = lock
        self._tid = tid
        self._done = False

    def release(self):
        if self._done:
            raise FatalInvariantError("boundary guard released twice")
        if threading.get_ident() != self._tid:
            raise FatalInvariantError("boundary guard released on a foreign thread")
        self._done = True
        self._lock._exit()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()
        return False


class BoundaryLock:
    """Process-wide (per bridge runtime) mutual exclusion for native code.

    Acquisition order between waiting threads is not guaranteed; a waiter
    is only promised to get the lock eventually.

    With ``trace=True`` every ownership transition is appended to
    ``self.trace`` as ``(seq, thread_id, event, reason)`` where event is
    ``"acquire"`` or ``"release"``.  ``seq`` is a total order.
    """

    def __init__(self, trace=False):
        self._cond = threading.Condition(threading.Lock())
        self._owner = None
        self._depth = 0
        self._allow_stack = {}
        self._seq = 0
        self.trace = [] if trace else None
        self.stats = {
            "lock_acquisitions": 0,
            "lock_contentions": 0,
            "native_entries": 0,
            "native_exits": 0,
            "nested_entries": 0,
            "managed_callbacks": 0,
            "allow_threads_windows": 0,
        }

    # -- state -----------------------------------------------------------

    @property
    def owner(self):
        return self._owner

    @property
    def depth(self):
        return self._depth

    def owned(self):
        return self._owner == threading.get_ident()

    def check_owned(self):
        if self._owner != threading.get_ident():
            raise FatalInvariantError("native memory touched without holding the boundary lock")

    # -- low-level transitions (callers hold self._cond) -----------------

    def _record(self, tid, event, reason):
        self._seq += 1
        if self.trace is not None:
            self.trace.append((self._seq, tid, event, reason))

    def _take(self, tid, depth, reason):
        if self._owner is not None:
            self.stats["lock_contentions"] += 1
            while self._owner is not None:
                self._cond.wait()
        self._owner = tid
        self._depth = depth
        self.stats["lock_acquisitions"] += 1
        self._record(tid, "acquire", reason)

    def _drop(self, tid, reason):
        saved = self._depth
        self._owner = None
        self._depth = 0
        self._record(tid, "release", reason)
        self._cond.notify()
        return saved

    # -- public protocol -------------------------------------------------

    def enter_native(self):
        """Acquire (or re-enter) the lock; returns a guard to release it."""
        tid = threading.get_ident()
        with self._cond:
            if self._owner == tid:
                self._depth += 1
                self.stats["nested_entries"] += 1
            else:
                self._take(tid, 1, "enter")
                self.stats["native_entries"] += 1
        return _Guard(self, tid)

    def _exit(self):
        tid = threading.get_ident()
        with self._cond:
            if self._owner != tid or self._depth <= 0:
                raise FatalInvariantError("exit from native code without owning the boundary lock")
            self._depth -= 1
            if self._depth == 0:
                self.stats["native_exits"] += 1
                self._drop(tid, "exit")

    def callback_to_managed(self, fn, *args, **kwargs):
        """Run managed code from native code with the lock fully released."""
        tid = threading.get_ident()
        with self._cond:
            if self._owner != tid:
                raise FatalInvariantError("managed callback from a thread that is not in native code")
            self.stats["managed_callbacks"] += 1
            saved = self._drop(tid, "callback")
        try:
            return fn(*args, **kwargs)
        finally:
            with self._cond:
                self._take(tid, saved, "callback-return")

    def allow_threads_begin(self):
        tid = threading.get_ident()
        with self._cond:
            if self._owner != tid:
                raise FatalInvariantError("allow-threads begin without owning the boundary lock")
            self.stats["allow_threads_windows"] += 1
            self._allow_stack.setdefault(tid, []).append(self._drop(tid, "allow-begin"))

    def allow_threads_end(self):
        tid = threading.get_ident()
        with self._cond:
            stack = self._allow_stack.get(tid)
            if not stack:
                raise FatalInvariantError("allow-threads end without a matching begin")
            saved = stack.pop()
            if not stack:
                del self._allow_stack[tid]
            self._take(tid, saved, "allow-end")

    @contextmanager
    def allow_threads(self):
        self.allow_threads_begin()
        try:
            yield
        finally:
            self.allow_threads_end()

    @contextmanager
    def native(self):
        """``with lock.native():`` shorthand for enter_native()/release()."""
        guard = self.enter_native()
        try:
            yield
        finally:
            guard.release()
