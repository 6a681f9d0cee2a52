"""Simulated managed runtime: handle-addressed objects and a tracing collector.

Objects are never freed by refcounting here.  ``gc_collect`` marks from the
root set (plus any registered root providers) and sweeps the rest.  Swept
objects that declared finalization interest are not destroyed inline: their
handle goes onto a FIFO reference queue and a phantom record is kept until
``forget`` is called by whoever drains the queue.
"""

from __future__ import annotations

import collections
import enum
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .errors import BridgeAttributeError, BridgeTypeError, FatalInvariantError


class MKind(enum.Enum):
    INT = "int"
    FLOAT = "float"
    STR = "str"
    TUPLE = "tuple"
    LIST = "list"
    DICT = "dict"
    MODULE = "module"
    FUNCTION = "function"
    PEER = "peer"
    PEER_TYPE = "peer_type"
    GC_HEAD = "gc_head"
    SINGLETON = "singleton"
    SLICE = "slice"


class MSingleton(enum.Enum):
    NONE = "None"
    TRUE = "True"
    FALSE = "False"
    NOT_IMPLEMENTED = "NotImplemented"
    ELLIPSIS = "Ellipsis"


@dataclass(eq=False, slots=True)
class ManagedObject:
    kind: MKind
    payload: Any = None
    attributes: dict = field(default_factory=dict)
    native_peer: int = 0
    mirrored_edges: list = field(default_factory=list)
    finalizable: bool = False


@dataclass(slots=True)
class Function:
    name: str
    body: Callable
    captures: tuple = ()


@dataclass
class CollectReport:
    reclaimed_count: int
    enqueued_finalizables: int
    reclaimed: set = field(default_factory=set, repr=False)


class FinalizationQueue:
    """FIFO of swept handles; the only structure here safe without the lock."""

    def __init__(self):
        self._items = collections.deque()
        self._mutex = threading.Lock()
        self.enqueued = 0
        self.polled = 0

    def put(self, handle):
        with self._mutex:
            self._items.append(handle)
            self.enqueued += 1

    def poll(self):
        with self._mutex:
            if not self._items:
                return None
            self.polled += 1
            return self._items.popleft()

    def __len__(self):
        with self._mutex:
            return len(self._items)


class PeerOps:
    """Interface the bridge implements for objects living across the boundary."""

    def get_attr(self, handle, name):
        raise NotImplementedError

    def call(self, handle, args):
        raise NotImplementedError

    def repr(self, handle):
        raise NotImplementedError

    def str(self, handle):
        raise NotImplementedError


class ManagedRuntime:
    def __init__(self):
        self.heap = {}
        self._ids = itertools.count(1)
        self.roots = collections.Counter()
        self.root_providers = []
        self.queue = FinalizationQueue()
        self.phantoms = {}
        self.peer_ops: Optional[PeerOps] = None
        self.lock = None
        self.stats = collections.Counter()
        self._stats_mutex = threading.Lock()
        self._repr_active = set()
        self.singletons = {}
        for which in MSingleton:
            h = self._new(MKind.SINGLETON, which)
            self.singletons[which] = h
            self.add_root(h)
        self._methods = {
            MKind.LIST: {"append": _list_append, "pop": _list_pop},
            MKind.DICT: {"get": _dict_get, "keys": _dict_keys},
            MKind.STR: {"upper": _str_upper},
        }

    def _count(self, key, n=1):
        with self._stats_mutex:
            self.stats[key] += n

    # ------------------------------------------------------------------
    # Allocation
    # ------------------------------------------------------------------

    def _new(self, kind, payload=None, **fields):
        h = next(self._ids)
        self.heap[h] = ManagedObject(kind, payload, **fields)
        self._count("managed_allocs")
        return h

    def new_int(self, value):
        return self._new(MKind.INT, int(value))

    def new_float(self, value):
        return self._new(MKind.FLOAT, float(value))

    def new_str(self, value):
        return self._new(MKind.STR, str(value))

    def new_tuple(self, items):
        return self._new(MKind.TUPLE, tuple(items))

    def new_list(self, items=()):
        return self._new(MKind.LIST, list(items))

    def new_dict(self, pairs=()):
        h = self._new(MKind.DICT, {})
        for k, v in pairs:
            self.dict_set(h, k, v)
        return h

    def new_module(self, name, doc=None, dict_handle=None):
        if dict_handle is None:
            dict_handle = self.new_dict()
            self.dict_set(dict_handle, self.new_str("__name__"), self.new_str(name))
            self.dict_set(dict_handle, self.new_str("__doc__"), self.new_str(doc) if doc is not None else self.none)
        return self._new(MKind.MODULE, dict_handle)

    def new_function(self, name, body, captures=()):
        return self._new(MKind.FUNCTION, Function(name, body, tuple(captures)))

    def new_slice(self, start, stop, step):
        return self._new(MKind.SLICE, (start, stop, step))

    def new_peer(self, native_addr, is_type=False):
        if not native_addr:
            raise FatalInvariantError("peer needs a non-null native address")
        return self._new(MKind.PEER_TYPE if is_type else MKind.PEER, None, native_peer=int(native_addr), finalizable=True)

    def new_gc_head(self, native_addr):
        return self._new(MKind.GC_HEAD, int(native_addr), finalizable=True)

    def singleton(self, which):
        return self.singletons[which]

    @property
    def none(self):
        return self.singletons[MSingleton.NONE]

    def new_bool(self, value):
        return self.singletons[MSingleton.TRUE if value else MSingleton.FALSE]

    def get(self, h):
        try:
            return self.heap[h]
        except KeyError:
            raise FatalInvariantError(f"use of dead managed handle {h}") from None

    def is_live(self, h):
        return h in self.heap

    def kind(self, h):
        return self.get(h).kind

    def value(self, h):
        return self.get(h).payload

    @property
    def live_count(self):
        return len(self.heap)

    # ------------------------------------------------------------------
    # Roots
    # ------------------------------------------------------------------

    def add_root(self, h):
        self.roots[h] += 1

    def remove_root(self, h):
        if self.roots[h] <= 0:
            raise FatalInvariantError(f"handle {h} is not rooted")
        self.roots[h] -= 1
        if self.roots[h] == 0:
            del self.roots[h]

    # ------------------------------------------------------------------
    # Containers
    # ------------------------------------------------------------------

    def hash_key(self, h):
        obj = self.get(h)
        if obj.kind in (MKind.INT, MKind.FLOAT):
            return obj.payload
        if obj.kind == MKind.STR:
            return obj.payload.encode("utf-8", errors="surrogateescape")
        if obj.kind == MKind.SINGLETON:
            if obj.payload == MSingleton.TRUE:
                return True
            if obj.payload == MSingleton.FALSE:
                return False
            return ("singleton", obj.payload.value)
        if obj.kind == MKind.TUPLE:
            return ("tuple",) + tuple(self.hash_key(i) for i in obj.payload)
        return ("handle", h)

    def dict_get(self, d, key):
        entry = self.get(d).payload.get(self.hash_key(key))
        return entry[1] if entry else None

    def dict_get_str(self, d, name):
        entry = self.get(d).payload.get(name.encode("utf-8"))
        return entry[1] if entry else None

    def dict_set(self, d, key, value):
        entries = self.get(d).payload
        hk = self.hash_key(key)
        if hk in entries:
            entries[hk] = (entries[hk][0], value)
        else:
            entries[hk] = (key, value)

    def dict_set_str(self, d, name, value):
        self.dict_set(d, self.new_str(name), value)

    def dict_del(self, d, key):
        del self.get(d).payload[self.hash_key(key)]

    def dict_items(self, d):
        return list(self.get(d).payload.values())

    def list_items(self, h):
        return list(self.get(h).payload)

    def list_append(self, h, item):
        self.get(h).payload.append(item)

    def list_insert(self, h, index, item):
        self.get(h).payload.insert(index, item)

    def list_setitem(self, h, index, item):
        self.get(h).payload[index] = item

    def list_pop(self, h, index=-1):
        return self.get(h).payload.pop(index)

    def list_len(self, h):
        return len(self.get(h).payload)

    # ------------------------------------------------------------------
    # Attribute access, calls, rendering
    # ------------------------------------------------------------------

    def _note_entry(self):
        # Managed code must never run while this thread holds the boundary lock.
        if self.lock is not None and self.lock.owned():
            self._count("managed_while_locked")

    def find_attr(self, h, name):
        self._note_entry()
        obj = self.get(h)
        if obj.kind in (MKind.PEER, MKind.PEER_TYPE):
            return self.peer_ops.get_attr(h, name)
        if obj.kind == MKind.MODULE:
            found = self.dict_get_str(obj.payload, name)
            if found is not None:
                return found
        if name in obj.attributes:
            return obj.attributes[name]
        method = self._methods.get(obj.kind, {}).get(name)
        if method is not None:
            return self.new_function(f"{obj.kind.value}.{name}", method, (h,))
        return None

    def get_attr(self, h, name):
        found = self.find_attr(h, name)
        if found is None:
            raise BridgeAttributeError(f"'{self.type_name(h)}' object has no attribute {name!r}")
        return found

    def set_attr(self, h, name, value):
        obj = self.get(h)
        if obj.kind == MKind.MODULE:
            self.dict_set_str(obj.payload, name, value)
        elif obj.kind in (MKind.PEER, MKind.PEER_TYPE):
            self.peer_ops.set_attr(h, name, value)
        else:
            obj.attributes[name] = value

    def call_object(self, h, args):
        """Call ``h`` with ``args``, a managed tuple handle."""
        self._note_entry()
        obj = self.get(h)
        if self.kind(args) != MKind.TUPLE:
            raise BridgeTypeError("call arguments must be a tuple")
        if obj.kind == MKind.FUNCTION:
            fn = obj.payload
            return fn.body(self, *fn.captures, *self.value(args))
        if obj.kind in (MKind.PEER, MKind.PEER_TYPE):
            return self.peer_ops.call(h, args)
        raise BridgeTypeError(f"'{self.type_name(h)}' object is not callable")

    def call(self, h, *items):
        return self.call_object(h, self.new_tuple(items))

    def type_name(self, h):
        obj = self.get(h)
        if obj.kind in (MKind.PEER, MKind.PEER_TYPE):
            return self.peer_ops.type_name(h)
        if obj.kind == MKind.SINGLETON:
            return {MSingleton.NONE: "NoneType", MSingleton.TRUE: "bool", MSingleton.FALSE: "bool",
                    MSingleton.NOT_IMPLEMENTED: "NotImplementedType", MSingleton.ELLIPSIS: "ellipsis"}[obj.payload]
        return obj.kind.value

    def repr_of(self, h):
        obj = self.get(h)
        k = obj.kind
        if k in (MKind.PEER, MKind.PEER_TYPE):
            return self.peer_ops.repr(h)
        if k == MKind.INT:
            return str(obj.payload)
        if k == MKind.FLOAT:
            return repr(obj.payload)
        if k == MKind.STR:
            return repr(obj.payload)
        if k == MKind.SINGLETON:
            return obj.payload.value
        if k == MKind.FUNCTION:
            return f"<function {obj.payload.name}>"
        if k == MKind.GC_HEAD:
            return f"<gc head for 0x{obj.payload:x}>"
        if k == MKind.MODULE:
            name = self.dict_get_str(obj.payload, "__name__")
            return f"<module '{self.str_of(name) if name else '?'}'>"
        if h in self._repr_active:
            return {MKind.LIST: "[...]", MKind.DICT: "{...}"}.get(k, "(...)")
        self._repr_active.add(h)
        try:
            if k == MKind.TUPLE:
                parts = [self.repr_of(i) for i in obj.payload]
                return "(" + ", ".join(parts) + ("," if len(parts) == 1 else "") + ")"
            if k == MKind.LIST:
                return "[" + ", ".join(self.repr_of(i) for i in list(obj.payload)) + "]"
            if k == MKind.DICT:
                return "{" + ", ".join(f"{self.repr_of(a)}: {self.repr_of(b)}" for a, b in self.dict_items(h)) + "}"
            if k == MKind.SLICE:
                return "slice(" + ", ".join(self.repr_of(p) for p in obj.payload) + ")"
        finally:
            self._repr_active.discard(h)
        raise FatalInvariantError(f"cannot render {k}")

    def str_of(self, h):
        obj = self.get(h)
        if obj.kind == MKind.STR:
            return obj.payload
        if obj.kind in (MKind.PEER, MKind.PEER_TYPE):
            return self.peer_ops.str(h)
        return self.repr_of(h)

    # ------------------------------------------------------------------
    # Collection
    # ------------------------------------------------------------------

    def edges(self, obj):
        """Managed references held by ``obj`` (mirrored native edges included)."""
        out = list(obj.attributes.values())
        k = obj.kind
        if k == MKind.TUPLE or k == MKind.SLICE:
            out.extend(obj.payload)
        elif k == MKind.LIST:
            if isinstance(obj.payload, list):
                out.extend(obj.payload)
        elif k == MKind.DICT:
            for a, b in obj.payload.values():
                out.append(a)
                out.append(b)
        elif k == MKind.MODULE:
            out.append(obj.payload)
        elif k == MKind.FUNCTION:
            out.extend(obj.payload.captures)
        out.extend(obj.mirrored_edges)
        return out

    def reachable(self, extra_roots=()):
        marked = set()
        stack = [h for h in self.roots if h in self.heap]
        for provider in self.root_providers:
            stack.extend(h for h in provider() if h in self.heap)
        stack.extend(h for h in extra_roots if h in self.heap)
        heap = self.heap
        while stack:
            h = stack.pop()
            if h in marked:
                continue
            marked.add(h)
            for e in self.edges(heap[h]):
                if e not in marked and e in heap:
                    stack.append(e)
        return marked

    def gc_collect(self):
        """Mark from roots, sweep the rest; finalizable objects are queued."""
        if self.lock is not None and not self.lock.owned():
            raise FatalInvariantError("gc_collect requires the boundary lock")
        marked = self.reachable()
        reclaimed = set()
        enqueued = 0
        for h in [h for h in self.heap if h not in marked]:
            obj = self.heap.pop(h)
            reclaimed.add(h)
            if obj.finalizable:
                self.phantoms[h] = obj
                self.queue.put(h)
                enqueued += 1
        self._count("gc_collections")
        self._count("gc_reclaimed", len(reclaimed))
        self._count("gc_enqueued", enqueued)
        return CollectReport(len(reclaimed), enqueued, reclaimed)

    def poll_finalizable(self):
        return self.queue.poll()

    def phantom(self, h):
        """The swept object behind a queued handle (until ``forget``)."""
        return self.phantoms.get(h)

    def forget(self, h):
        self.phantoms.pop(h, None)


def _list_append(rt, self_h, item):
    rt.list_append(self_h, item)
    return rt.none


def _list_pop(rt, self_h, *index):
    i = rt.value(index[0]) if index else -1
    return rt.list_pop(self_h, i)


def _dict_get(rt, self_h, key, default=None):
    found = rt.dict_get(self_h, key)
    if found is None:
        return default if default is not None else rt.none
    return found


def _dict_keys(rt, self_h):
    return rt.new_list(k for k, _ in rt.dict_items(self_h))


def _str_upper(rt, self_h):
    return rt.new_str(rt.value(self_h).upper())
