"""Pairing native objects with managed counterparts.

Three strategies, chosen per native type:

DELEGATE  the managed twin owns the data; the native object is a stub whose
          dict/module operations forward to it (dict, module, slice).
MIRROR    data exists on both sides.  Immutable payloads are copied once at
          initialization; lists share one backend, the managed list reading
          and writing the native item vector directly (int, float, str,
          tuple, list).
PEER      no managed counterpart type exists; a Peer object holds the raw
          native address and forwards attribute access, calls and
          rendering across the boundary (extension types, functions,
          capsules, heap type objects).

Every bridged pair owns exactly one native reference (the pin), released
when the managed side is finalized.
"""

from __future__ import annotations

import enum
from collections.abc import MutableSequence

from .errors import (
    BridgeAttributeError,
    BridgeError,
    BridgeTypeError,
    CallError,
    ConversionError,
    FatalInvariantError,
)
from .managed import MKind, MSingleton, PeerOps
from .native import (
    DELEGATE,
    HAS_GC_HEAD,
    INITIALIZED,
    MIRROR,
    PEER,
    STRATEGY_MASK,
    SYNC_ON_INIT_DONE,
    Kind,
    NativeRef,
    Singleton,
)


class Strategy(enum.Enum):
    DELEGATE = DELEGATE
    MIRROR = MIRROR
    PEER = PEER


# Native kinds with a managed counterpart type, and whether the native
# API exposes their memory through direct-access macros.
COUNTERPART = {
    Kind.INT: MKind.INT,
    Kind.FLOAT: MKind.FLOAT,
    Kind.STR: MKind.STR,
    Kind.TUPLE: MKind.TUPLE,
    Kind.LIST: MKind.LIST,
    Kind.DICT: MKind.DICT,
    Kind.MODULE: MKind.MODULE,
    Kind.SLICE: MKind.SLICE,
    Kind.SINGLETON: MKind.SINGLETON,
}
DIRECT_ACCESS = {
    Kind.INT: True,
    Kind.FLOAT: True,
    Kind.STR: True,
    Kind.TUPLE: True,
    Kind.LIST: True,
    Kind.SINGLETON: True,
    Kind.DICT: False,
    Kind.MODULE: False,
    Kind.SLICE: False,
}

_TO_MANAGED_SINGLETON = {
    Singleton.NONE: MSingleton.NONE,
    Singleton.TRUE: MSingleton.TRUE,
    Singleton.FALSE: MSingleton.FALSE,
    Singleton.NOT_IMPLEMENTED: MSingleton.NOT_IMPLEMENTED,
    Singleton.ELLIPSIS: MSingleton.ELLIPSIS,
}
_TO_NATIVE_SINGLETON = {v: k for k, v in _TO_MANAGED_SINGLETON.items()}


class StaticTypeRegistry:
    """Statically allocated native types and their managed PeerType handles."""

    def __init__(self):
        self.by_ref = {}
        self.by_name = {}

    def add(self, ref, name, handle):
        if name in self.by_name:
            raise BridgeError(f"static type {name!r} registered twice")
        self.by_ref[ref] = handle
        self.by_name[name] = ref

    def __contains__(self, ref):
        return ref in self.by_ref


class NativeListView(MutableSequence):
    """Managed list backend reading and writing a native list's item vector."""

    def __init__(self, bridge, ref):
        self._bridge = bridge
        self.ref = NativeRef(ref)

    def __len__(self):
        b = self._bridge
        with b.lock.native():
            return b.native.list_len(self.ref)

    def __getitem__(self, index):
        b = self._bridge
        with b.lock.native():
            if isinstance(index, slice):
                return [b._to_managed(r) for r in b.native.list_items(self.ref)[index]]
            return b._to_managed(b.native.list_getitem(self.ref, index))

    def __setitem__(self, index, handle):
        b = self._bridge
        with b.lock.native():
            b.native.list_setitem(self.ref, index, b._to_native(handle))

    def __delitem__(self, index):
        b = self._bridge
        with b.lock.native():
            b.native.list_delitem(self.ref, index)

    def insert(self, index, handle):
        b = self._bridge
        with b.lock.native():
            b.native.list_insert(self.ref, index, b._to_native(handle))

    def append(self, handle):
        b = self._bridge
        with b.lock.native():
            b.native.list_append(self.ref, b._to_native(handle))

    def pop(self, index=-1):
        b = self._bridge
        with b.lock.native():
            r = b.native.list_pop(self.ref, index)
            try:
                return b._to_managed(r)
            finally:
                b.native.decref(r)

    def __iter__(self):
        b = self._bridge
        with b.lock.native():
            return iter([b._to_managed(r) for r in b.native.list_items(self.ref)])

    def __repr__(self):
        return f"NativeListView(0x{int(self.ref):x})"


class Bridge(PeerOps):
    def __init__(self, native, managed, lock, stats):
        self.native = native
        self.managed = managed
        self.lock = lock
        self.stats = stats
        self.gc = None  # set by GcBridge
        self.table = {}
        self.static = StaticTypeRegistry()
        self.last_native_error = None
        self.render_failures = []
        self.native_to_managed_calls = 0
        managed.peer_ops = self
        native.delegate = _DelegateForwarder(self)
        for name, ref in native.static_types.items():
            self.register_static_type(ref)

    # ------------------------------------------------------------------
    # Strategy and registration
    # ------------------------------------------------------------------

    def strategy_for(self, type_ref):
        desc = self.native.type_desc(type_ref)
        kind = desc.instance_kind
        if desc.is_heap_type or kind not in COUNTERPART:
            return Strategy.PEER
        return Strategy.MIRROR if DIRECT_ACCESS[kind] else Strategy.DELEGATE

    def register_static_type(self, ref):
        desc = self.native.type_desc(ref)
        if desc.is_heap_type:
            raise BridgeError(f"heap type {desc.name!r} cannot enter the static registry")
        h = self.managed.new_peer(ref, is_type=True)
        self.managed.get(h).finalizable = False
        self.managed.add_root(h)
        self.static.add(ref, desc.name, h)
        return h

    def _bind(self, r, h, strategy, pin):
        n = self.native
        n.set_header_peer(r, h)
        n.set_header_flags(r, (n.header_flags(r) & HAS_GC_HEAD) | strategy.value)
        self.table[h] = r
        self.managed.get(h).finalizable = True
        if pin:
            n.incref(r)
        self.gc.pinned(r)

    def _finish(self, r, sync=True):
        flags = self.native.header_flags(r) | INITIALIZED
        if sync:
            flags |= SYNC_ON_INIT_DONE
        self.native.set_header_flags(r, flags)

    def unbind(self, h, obj):
        """Forget the pairing for a finalized managed handle; returns the native address."""
        r = self.table.pop(h, None)
        if r is None:
            r = obj.native_peer
        r = NativeRef(r)
        n = self.native
        if n.is_live(r) and n.header_peer(r) == h:
            n.set_header_peer(r, 0)
            n.set_header_flags(r, n.header_flags(r) & HAS_GC_HEAD)
        return r

    def strategy_of(self, r):
        flags = self.native.header_flags(r) & STRATEGY_MASK
        return Strategy(flags) if flags else None

    # ------------------------------------------------------------------
    # Native -> managed
    # ------------------------------------------------------------------

    def to_managed(self, r):
        if not r:
            self.stats.incr("conv_to_managed_null")
            return None
        with self.lock.native():
            return self._to_managed(NativeRef(r))

    def _to_managed(self, r):
        n, m = self.native, self.managed
        kind = n.kind_of(r)
        if kind == Kind.SINGLETON:
            self.stats.incr("conv_to_managed_singleton")
            return m.singleton(_TO_MANAGED_SINGLETON[n.singleton_which(r)])
        if r in self.static.by_ref:
            self.stats.incr("conv_to_managed_static")
            return self.static.by_ref[r]
        peer = n.header_peer(r)
        if peer:
            if m.is_live(peer):
                self.stats.incr("conv_to_managed_hit")
                return peer
            # Twin already swept but not yet drained from the queue.
            self.gc.finalize_now(peer)
        if kind == Kind.FOREIGN:
            raise ConversionError(f"foreign stub 0x{int(r):x} has lost its managed object")
        self.stats.incr("conv_to_managed_init")
        strategy = self.strategy_for(n.type_of(r)) if kind != Kind.TYPE else Strategy.PEER
        if strategy == Strategy.PEER:
            h = m.new_peer(r, is_type=kind == Kind.TYPE)
            self._bind(r, h, strategy, pin=True)
            self._finish(r, sync=False)
        elif strategy == Strategy.MIRROR:
            h = m._new(COUNTERPART[kind])
            self._bind(r, h, strategy, pin=True)
            self.sync_mirror_init(r, h)
        else:
            h = m._new(COUNTERPART[kind])
            self._bind(r, h, strategy, pin=True)
            self._sync_delegate_init(r, h)
        self.gc.cover(r, h)
        return h

    def sync_mirror_init(self, r, h):
        """Initial data synchronization of a native-origin mirror."""
        n, obj = self.native, self.managed.get(h)
        kind = n.kind_of(r)
        if kind == Kind.INT:
            obj.payload = n.int_value(r)
        elif kind == Kind.FLOAT:
            obj.payload = n.float_value(r)
        elif kind == Kind.STR:
            obj.payload = n.str_value(r)
        elif kind == Kind.TUPLE:
            obj.payload = tuple(self._to_managed(i) for i in n.tuple_items(r))
        elif kind == Kind.LIST:
            obj.payload = NativeListView(self, r)
        else:
            raise ConversionError(f"kind {kind.name} cannot be mirrored")
        self._finish(r)

    def _sync_delegate_init(self, r, h):
        n, m = self.native, self.managed
        obj = m.get(h)
        kind = n.kind_of(r)
        if kind == Kind.DICT:
            obj.payload = {}
            for k, v in n.dict_items(r):
                m.dict_set(h, self._to_managed(k), self._to_managed(v))
            n.dict_clear_payload(r)
        elif kind == Kind.MODULE:
            obj.payload = self._to_managed(n.module_dict(r))
        elif kind == Kind.SLICE:
            obj.payload = tuple(self._to_managed(p) for p in n.slice_parts(r))
        else:
            raise ConversionError(f"kind {kind.name} cannot be delegated")
        self._finish(r)

    # ------------------------------------------------------------------
    # Managed -> native
    # ------------------------------------------------------------------

    def to_native(self, h):
        """Borrowed native reference for ``h`` (kept alive by the pairing)."""
        if h is None:
            self.stats.incr("conv_to_native_null")
            return None
        with self.lock.native():
            return self._to_native(h)

    def _to_native(self, h):
        n, m = self.native, self.managed
        obj = m.get(h)
        k = obj.kind
        if k == MKind.SINGLETON:
            self.stats.incr("conv_to_native_singleton")
            return n.singleton(_TO_NATIVE_SINGLETON[obj.payload])
        r = self.table.get(h)
        if r is not None:
            self.stats.incr("conv_to_native_hit")
            return r
        if k in (MKind.PEER, MKind.PEER_TYPE):
            self.stats.incr("conv_to_native_hit")
            return NativeRef(obj.native_peer)
        self.stats.incr("conv_to_native_init")
        if k == MKind.INT:
            r = n.new_int(obj.payload)
            self._bind(r, h, Strategy.MIRROR, pin=False)
        elif k == MKind.FLOAT:
            r = n.new_float(obj.payload)
            self._bind(r, h, Strategy.MIRROR, pin=False)
        elif k == MKind.STR:
            r = n.new_str(obj.payload)
            self._bind(r, h, Strategy.MIRROR, pin=False)
        elif k == MKind.TUPLE:
            r = n.new_tuple([self._to_native(i) for i in obj.payload])
            self._bind(r, h, Strategy.MIRROR, pin=False)
        elif k == MKind.LIST:
            r = n.new_list()
            self._bind(r, h, Strategy.MIRROR, pin=False)
            for item in list(obj.payload):
                n.list_append(r, self._to_native(item))
            obj.payload = NativeListView(self, r)
        elif k == MKind.DICT:
            r = n.new_dict()
            self._bind(r, h, Strategy.DELEGATE, pin=False)
        elif k == MKind.MODULE:
            name = m.dict_get_str(obj.payload, "__name__")
            r = n.new_module_from_dict(
                m.value(name) if name is not None and m.kind(name) == MKind.STR else "?",
                self._to_native(obj.payload),
            )
            self._bind(r, h, Strategy.DELEGATE, pin=False)
        elif k == MKind.SLICE:
            r = n.new_slice(*(self._to_native(p) for p in obj.payload))
            self._bind(r, h, Strategy.DELEGATE, pin=False)
        elif k == MKind.FUNCTION:
            # Native code can hold and pass it back, nothing more.
            r = n.new_foreign()
            self._bind(r, h, Strategy.DELEGATE, pin=False)
        else:
            raise ConversionError(f"managed {k.value} has no native representation")
        self._finish(r)
        self.gc.cover(r, h)
        return r

    # ------------------------------------------------------------------
    # Peer operations (managed side calling into native code)
    # ------------------------------------------------------------------

    def _native_text(self, exc):
        return f"{type(exc).__name__}: {exc}"

    def peer_get_attr(self, h, name):
        r = NativeRef(self.managed.get(h).native_peer)
        with self.lock.native():
            try:
                res = self.native.getattr(r, name)
            except BridgeError:
                raise
            except Exception as exc:
                self.last_native_error = self._native_text(exc)
                raise BridgeAttributeError(self.last_native_error) from exc
            if res is None:
                self.last_native_error = f"'{self.native.type_name(r)}' object has no attribute {name!r}"
                return None
            try:
                return self._to_managed(res)
            finally:
                self.native.decref(res)

    get_attr = peer_get_attr

    def set_attr(self, h, name, value):
        r = NativeRef(self.managed.get(h).native_peer)
        with self.lock.native():
            try:
                self.native.setattr(r, name, self._to_native(value))
            except BridgeError:
                raise
            except Exception as exc:
                raise BridgeAttributeError(self._native_text(exc)) from exc

    def call(self, h, args):
        r = NativeRef(self.managed.get(h).native_peer)
        n = self.native
        with self.lock.native():
            argt = n.new_tuple([self._to_native(a) for a in self.managed.value(args)])
            try:
                kind = n.kind_of(r)
                if kind == Kind.CFUNCTION:
                    fn_id, self_ref = n.cfunction_info(r)
                    res = n.call_function(fn_id, self_ref, argt)
                elif kind == Kind.TYPE:
                    res = self.construct(r, argt)
                else:
                    raise BridgeTypeError(f"'{n.type_name(r)}' object is not callable")
                try:
                    return self._to_managed(res)
                finally:
                    n.decref(res)
            except BridgeError:
                raise
            except Exception as exc:
                raise CallError(self._native_text(exc)) from exc
            finally:
                n.decref(argt)

    def construct(self, type_ref, argt):
        """Create a native instance of ``type_ref``; returns a new reference."""
        n = self.native
        desc = n.type_desc(type_ref)
        if desc.instance_kind != Kind.INSTANCE:
            raise BridgeTypeError(f"cannot create '{desc.name}' instances")
        inst = n.new_instance(type_ref)
        try:
            if desc.init_fn is not None:
                n.decref(n.call_function(desc.init_fn, inst, argt))
            elif n.tuple_len(argt):
                raise BridgeTypeError(f"{desc.name}() takes no arguments")
        except BaseException:
            n.decref(inst)
            raise
        return inst

    def _render(self, h, how):
        r = NativeRef(self.managed.get(h).native_peer)
        n = self.native
        with self.lock.native():
            try:
                return getattr(n, how)(r)
            except FatalInvariantError:
                raise
            except Exception as exc:
                # Rendering never fails outright; the failure is recorded instead.
                self.last_native_error = self._native_text(exc)
                self.render_failures.append(self.last_native_error)
                self.stats.incr("render_failures")
                return f"<{n.type_name(r)} object at 0x{int(r):x} ({how} failed)>"

    def repr(self, h):
        return self._render(h, "repr")

    def str(self, h):
        return self._render(h, "str")

    def type_name(self, h):
        r = NativeRef(self.managed.get(h).native_peer)
        with self.lock.native():
            return self.native.type_name(r)

    def type_of(self, h):
        """Managed handle of the type of ``h`` (a PeerType)."""
        obj = self.managed.get(h)
        with self.lock.native():
            if obj.kind in (MKind.PEER, MKind.PEER_TYPE):
                return self._to_managed(self.native.type_of(NativeRef(obj.native_peer)))
            name = self.managed.type_name(h)
            return self.static.by_ref[self.static.by_name[name]]


class _DelegateForwarder:
    """Native-side operations on delegation stubs, forwarded to the twin.

    Called with the boundary lock held.  Managed attribute resolution runs
    as a managed callback (lock released); temporaries are rooted across it.
    """

    def __init__(self, bridge):
        self.b = bridge

    def _twin(self, ref):
        return self.b.native.header_peer(ref)

    def dict_getitem(self, ref, key):
        b = self.b
        found = b.managed.dict_get(self._twin(ref), b._to_managed(key))
        return b._to_native(found) if found is not None else None

    def dict_getitem_str(self, ref, name):
        b = self.b
        found = b.managed.dict_get_str(self._twin(ref), name)
        return b._to_native(found) if found is not None else None

    def dict_setitem(self, ref, key, value):
        b = self.b
        b.managed.dict_set(self._twin(ref), b._to_managed(key), b._to_managed(value))

    def dict_delitem(self, ref, key):
        b = self.b
        b.managed.dict_del(self._twin(ref), b._to_managed(key))

    def dict_items(self, ref):
        b = self.b
        return [(b._to_native(k), b._to_native(v)) for k, v in b.managed.dict_items(self._twin(ref))]

    def module_getattr(self, ref, name):
        b = self.b
        twin = self._twin(ref)
        b.native_to_managed_calls += 1
        found = b.lock.callback_to_managed(b.managed.find_attr, twin, name)
        if found is None:
            return None
        r = b._to_native(found)
        b.native.incref(r)
        return r

    def module_setattr(self, ref, name, value):
        b = self.b
        twin = self._twin(ref)
        vh = b._to_managed(value)
        b.native_to_managed_calls += 1
        b.managed.add_root(vh)
        try:
            b.lock.callback_to_managed(b.managed.set_attr, twin, name, vh)
        finally:
            b.managed.remove_root(vh)
