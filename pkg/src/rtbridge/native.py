"""Simulated native runtime.

Objects live in a flat byte arena and are addressed by integer offsets.
Every allocation is laid out, from low to high address, as::

    [bridge header][optional gc head][object body]

The body starts with a fixed prefix (refcount, type address, kind byte,
object flags) followed by a kind-specific payload.  Fixed-size payload
fields are packed into the arena; growable payloads (list items, dict
entries) are kept in a side table keyed by body address, the way a C list
keeps its item vector in a separate allocation.

``as_header``/``from_header`` locate the bridge header from a body address
and back using arithmetic only.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import AllocationError, FatalInvariantError

# Layout constants.  All three regions are multiples of 8 bytes.
HEADER_SIZE = 16
GC_HEAD_SIZE = 16
OBJECT_PREFIX_SIZE = 24
ALIGN = 8

_HEADER = struct.Struct("<QHxxI")  # peer handle, flags, aux list id
_PREFIX = struct.Struct("<qQBBxxxxxx")  # refcount, type addr, kind, object flags
_Q = struct.Struct("<Q")
_q = struct.Struct("<q")
_d = struct.Struct("<d")

# Bridge header flag bits.
DELEGATE = 1 << 0
MIRROR = 1 << 1
PEER = 1 << 2
HAS_GC_HEAD = 1 << 3
INITIALIZED = 1 << 4
SYNC_ON_INIT_DONE = 1 << 5
STRATEGY_MASK = DELEGATE | MIRROR | PEER
FLAGS_MASK = 0xFFFF
RESERVED_MASK = FLAGS_MASK & ~0x3F

# Object flag bits (body prefix, not the bridge header).
_OB_GC = 1 << 0
_OB_IMMORTAL = 1 << 1

_FREED_KIND = 0xFF
_IMMORTAL_REFCNT = 1 << 40

# Aux-list tag reserved for the gc bridge.
AUX_GC_TAG = 1


class Kind(enum.IntEnum):
    INT = 1
    FLOAT = 2
    STR = 3
    TUPLE = 4
    LIST = 5
    DICT = 6
    CFUNCTION = 7
    CAPSULE = 8
    INSTANCE = 9
    TYPE = 10
    SINGLETON = 11
    MODULE = 12
    SLICE = 13
    FOREIGN = 14  # stub standing for a managed object with no native form


class Singleton(enum.IntEnum):
    NONE = 0
    TRUE = 1
    FALSE = 2
    NOT_IMPLEMENTED = 3
    ELLIPSIS = 4


SINGLETON_NAMES = {
    Singleton.NONE: "None",
    Singleton.TRUE: "True",
    Singleton.FALSE: "False",
    Singleton.NOT_IMPLEMENTED: "NotImplemented",
    Singleton.ELLIPSIS: "Ellipsis",
}


class NativeRef(int):
    """Address of a native object body.  Arithmetic on it yields plain ints."""

    __slots__ = ()

    def __repr__(self):
        return f"NativeRef(0x{int(self):x})"


def align(n):
    return (n + ALIGN - 1) & ~(ALIGN - 1)


@dataclass
class NativeTypeObject:
    """Type descriptor stored alongside a native TYPE object.

    ``members`` maps a name to ``(offset, code)`` where code is ``"i"``
    (signed 64-bit) or ``"d"`` (double); offsets are relative to the start
    of the instance payload.
    """

    name: str
    instance_kind: Kind
    is_heap_type: bool = False
    methods: dict = field(default_factory=dict)
    getsets: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)
    dict_offset: Optional[int] = None
    basicsize: int = 0
    doc: Optional[str] = None
    init_fn: Optional[int] = None
    repr_fn: Optional[int] = None
    str_fn: Optional[int] = None

    def validate(self):
        for name, (offset, code) in self.members.items():
            if code not in ("i", "d"):
                raise ValueError(f"member {name}: unknown code {code!r}")
            if offset < 0 or offset + 8 > self.basicsize:
                raise ValueError(f"member {name}: offset {offset} outside payload of {self.basicsize} bytes")
        if self.dict_offset is not None:
            if self.dict_offset < 0 or self.dict_offset + 8 > self.basicsize:
                raise ValueError(f"dict offset {self.dict_offset} outside payload")
            for name, (offset, _) in self.members.items():
                if offset == self.dict_offset:
                    raise ValueError(f"member {name} overlaps the dict slot")


@dataclass
class NativeFunction:
    """An extension behaviour callable from native code."""

    name: str
    arg_format: str
    result_format: str
    impl: Callable
    bound: bool = False


class _AuxNode:
    __slots__ = ("tag", "blob", "next")

    def __init__(self, tag, blob, next_id):
        self.tag = tag
        self.blob = blob
        self.next = next_id


class Arena:
    """Bump allocator with size-segregated free lists over one bytearray."""

    def __init__(self, capacity=1 << 23):
        self.capacity = capacity
        self.mem = bytearray(capacity)
        self._top = ALIGN  # address 0 stays null
        self._free = {}
        self.blocks = {}  # start -> size, live blocks only
        self.allocations = 0
        self.frees = 0

    def allocate(self, size):
        size = align(size)
        bucket = self._free.get(size)
        if bucket:
            start = bucket.pop()
        else:
            if self._top + size > self.capacity:
                raise AllocationError(f"arena exhausted: need {size} bytes, {self.capacity - self._top} left")
            start = self._top
            self._top += size
        self.mem[start:start + size] = bytes(size)
        self.blocks[start] = size
        self.allocations += 1
        return start

    def release(self, start):
        size = self.blocks.pop(start)
        self._free.setdefault(size, []).append(start)
        self.frees += 1

    @property
    def used(self):
        return sum(self.blocks.values())


class NativeRuntime:
    """The native object world: allocation, refcounting and the C-level API.

    Hooks wired in by the layers above:

    ``lock_check``   called before touching native memory; raises if the
                     calling thread does not own the boundary lock.
    ``delegate``     forwards dict/module operations on delegation stubs to
                     their managed twin.
    ``store_hook``   notified whenever a reference is stored into an
                     existing container (gc edge mirroring).
    ``invoke``       runs a NativeFunction: ``invoke(fn_id, self_ref, args)``.
    """

    def __init__(self, capacity=1 << 23, debug=True):
        self.arena = Arena(capacity)
        self.debug = debug
        self.lock_check = None
        self.delegate = None
        self.store_hook = None
        self.invoke = None
        self.on_free = None
        self.functions = []
        self._types = {}  # type body addr -> NativeTypeObject
        self._var = {}  # body addr -> growable payload (list items / dict entries)
        self._bodies = {}  # body addr -> block start, live objects only
        self.serial = {}  # body addr -> allocation number, tells reused addresses apart
        self._aux_nodes = {}
        self._aux_next = 1
        self.live_count = 0  # non-immortal live objects
        self.immortal_count = 0
        self.freed_total = 0
        self.static_types = {}
        self._dealloc_pending = []
        self._deallocating = False
        self._repr_active = set()

        self.metatype = self._bootstrap_metatype()
        self.builtin_types = {"type": self.metatype}
        for name, kind in (
            ("int", Kind.INT),
            ("float", Kind.FLOAT),
            ("str", Kind.STR),
            ("tuple", Kind.TUPLE),
            ("list", Kind.LIST),
            ("dict", Kind.DICT),
            ("builtin_function_or_method", Kind.CFUNCTION),
            ("PyCapsule", Kind.CAPSULE),
            ("module", Kind.MODULE),
            ("slice", Kind.SLICE),
            ("foreign_object", Kind.FOREIGN),
            ("NoneType", Kind.SINGLETON),
            ("bool", Kind.SINGLETON),
            ("NotImplementedType", Kind.SINGLETON),
            ("ellipsis", Kind.SINGLETON),
        ):
            self.builtin_types[name] = self.new_type(NativeTypeObject(name, kind), immortal=True)
        self._kind_types = {
            Kind.INT: self.builtin_types["int"],
            Kind.FLOAT: self.builtin_types["float"],
            Kind.STR: self.builtin_types["str"],
            Kind.TUPLE: self.builtin_types["tuple"],
            Kind.LIST: self.builtin_types["list"],
            Kind.DICT: self.builtin_types["dict"],
            Kind.CFUNCTION: self.builtin_types["builtin_function_or_method"],
            Kind.CAPSULE: self.builtin_types["PyCapsule"],
            Kind.MODULE: self.builtin_types["module"],
            Kind.SLICE: self.builtin_types["slice"],
            Kind.FOREIGN: self.builtin_types["foreign_object"],
        }
        singleton_types = {
            Singleton.NONE: "NoneType",
            Singleton.TRUE: "bool",
            Singleton.FALSE: "bool",
            Singleton.NOT_IMPLEMENTED: "NotImplementedType",
            Singleton.ELLIPSIS: "ellipsis",
        }
        self.singletons = {}
        for which, tname in singleton_types.items():
            ref = self.alloc(self.builtin_types[tname], Kind.SINGLETON, False, 8, immortal=True)
            self._write_q(ref, OBJECT_PREFIX_SIZE, int(which))
            self.singletons[which] = ref

    # ------------------------------------------------------------------
    # Raw memory access
    # ------------------------------------------------------------------

    def _read_q(self, ref, offset):
        return _q.unpack_from(self.arena.mem, ref + offset)[0]

    def _write_q(self, ref, offset, value):
        _q.pack_into(self.arena.mem, ref + offset, value)

    def _read_u(self, ref, offset):
        return _Q.unpack_from(self.arena.mem, ref + offset)[0]

    def _write_u(self, ref, offset, value):
        _Q.pack_into(self.arena.mem, ref + offset, value)

    def _check_lock(self):
        if self.lock_check is not None:
            self.lock_check()

    def _check_live(self, ref):
        if self.debug and ref not in self._bodies:
            raise FatalInvariantError(f"access to dead or invalid native object 0x{int(ref):x}")

    # ------------------------------------------------------------------
    # Allocation and header arithmetic
    # ------------------------------------------------------------------

    def _bootstrap_metatype(self):
        desc = NativeTypeObject("type", Kind.TYPE)
        ref = self.alloc(None, Kind.TYPE, False, 8, immortal=True)
        # The metatype is its own type.
        _PREFIX.pack_into(self.arena.mem, ref, _IMMORTAL_REFCNT, ref, Kind.TYPE, _OB_IMMORTAL)
        self._types[ref] = desc
        self.static_types["type"] = ref
        return ref

    def alloc(self, type_ref, kind, wants_gc_head, payload_size, immortal=False):
        """Reserve header, optional gc head and body; refcount starts at 1."""
        self._check_lock()
        payload = align(payload_size)
        gc = GC_HEAD_SIZE if wants_gc_head else 0
        start = self.arena.allocate(HEADER_SIZE + gc + OBJECT_PREFIX_SIZE + payload)
        ref = NativeRef(start + HEADER_SIZE + gc)
        obflags = (_OB_GC if wants_gc_head else 0) | (_OB_IMMORTAL if immortal else 0)
        _PREFIX.pack_into(
            self.arena.mem,
            ref,
            _IMMORTAL_REFCNT if immortal else 1,
            type_ref or 0,
            int(kind),
            obflags,
        )
        _HEADER.pack_into(self.arena.mem, start, 0, HAS_GC_HEAD if wants_gc_head else 0, 0)
        self._bodies[ref] = start
        self.serial[ref] = self.arena.allocations
        if immortal:
            self.immortal_count += 1
        else:
            self.live_count += 1
        return ref

    def has_gc_head(self, ref):
        return bool(self.arena.mem[ref + 17] & _OB_GC)

    def as_header(self, ref):
        """Header address of ``ref``: body minus gc head (if any) minus header."""
        gc = GC_HEAD_SIZE if self.arena.mem[ref + 17] & _OB_GC else 0
        return ref - gc - HEADER_SIZE

    def from_header(self, hdr):
        flags = _HEADER.unpack_from(self.arena.mem, hdr)[1]
        gc = GC_HEAD_SIZE if flags & HAS_GC_HEAD else 0
        return NativeRef(hdr + HEADER_SIZE + gc)

    def header(self, ref):
        """(peer handle, flags, aux id) of the bridge header."""
        return _HEADER.unpack_from(self.arena.mem, self.as_header(ref))

    def header_peer(self, ref):
        return _Q.unpack_from(self.arena.mem, self.as_header(ref))[0]

    def header_flags(self, ref):
        return _HEADER.unpack_from(self.arena.mem, self.as_header(ref))[1]

    def set_header_peer(self, ref, handle):
        _Q.pack_into(self.arena.mem, self.as_header(ref), handle or 0)

    def set_header_flags(self, ref, flags):
        if flags & ~FLAGS_MASK or flags & RESERVED_MASK:
            raise FatalInvariantError(f"invalid header flags 0x{flags:x}")
        hdr = self.as_header(ref)
        peer, _, aux = _HEADER.unpack_from(self.arena.mem, hdr)
        _HEADER.pack_into(self.arena.mem, hdr, peer, flags, aux)

    def _set_aux_head(self, ref, node_id):
        hdr = self.as_header(ref)
        peer, flags, _ = _HEADER.unpack_from(self.arena.mem, hdr)
        _HEADER.pack_into(self.arena.mem, hdr, peer, flags, node_id)

    def is_live(self, ref):
        return ref in self._bodies

    def is_immortal(self, ref):
        return bool(self.arena.mem[ref + 17] & _OB_IMMORTAL)

    def live_objects(self):
        return list(self._bodies)

    def live_blocks(self):
        """(block start, block size, body address) for every live object."""
        return [(start, self.arena.blocks[start], ref) for ref, start in self._bodies.items()]

    # ------------------------------------------------------------------
    # Refcounting
    # ------------------------------------------------------------------

    def refcount(self, ref):
        return self._read_q(ref, 0)

    def incref(self, ref):
        self._check_lock()
        self._check_live(ref)
        if not self.is_immortal(ref):
            self._write_q(ref, 0, self._read_q(ref, 0) + 1)

    def xincref(self, ref):
        if ref:
            self.incref(ref)

    def decref(self, ref):
        self._check_lock()
        if ref not in self._bodies:
            raise FatalInvariantError(f"decref of freed or invalid object 0x{int(ref):x}")
        if self.is_immortal(ref):
            return
        count = self._read_q(ref, 0)
        if count <= 0:
            raise FatalInvariantError(f"decref of object 0x{int(ref):x} with refcount {count}")
        self._write_q(ref, 0, count - 1)
        if count == 1:
            self._dealloc_pending.append(ref)
            if not self._deallocating:
                self._drain_deallocs()

    def xdecref(self, ref):
        if ref:
            self.decref(ref)

    def _drain_deallocs(self):
        self._deallocating = True
        try:
            while self._dealloc_pending:
                self._dealloc(self._dealloc_pending.pop())
        finally:
            self._deallocating = False

    def _dealloc(self, ref):
        kind = self.kind_of(ref)
        if self.on_free is not None:
            self.on_free(ref)
        self._aux_clear(ref)
        owned = list(self._owned_refs(ref, kind))
        if kind == Kind.INSTANCE:
            tref = self.type_of(ref)
            if self._types[tref].is_heap_type:
                owned.append(tref)
        self._var.pop(ref, None)
        self._types.pop(ref, None)
        start = self._bodies.pop(ref)
        self.arena.mem[ref + 16] = _FREED_KIND
        self.arena.release(start)
        self.live_count -= 1
        self.freed_total += 1
        for child in owned:
            self.decref(child)

    # ------------------------------------------------------------------
    # Aux list
    # ------------------------------------------------------------------

    def aux_set(self, ref, tag, blob):
        node_id = self.header(ref)[2]
        while node_id:
            node = self._aux_nodes[node_id]
            if node.tag == tag:
                node.blob = blob
                return
            node_id = node.next
        new_id = self._aux_next
        self._aux_next += 1
        self._aux_nodes[new_id] = _AuxNode(tag, blob, self.header(ref)[2])
        self._set_aux_head(ref, new_id)

    def aux_get(self, ref, tag):
        node_id = self.header(ref)[2]
        while node_id:
            node = self._aux_nodes[node_id]
            if node.tag == tag:
                return node.blob
            node_id = node.next
        return None

    def aux_remove(self, ref, tag):
        prev = None
        node_id = self.header(ref)[2]
        while node_id:
            node = self._aux_nodes[node_id]
            if node.tag == tag:
                if prev is None:
                    self._set_aux_head(ref, node.next)
                else:
                    prev.next = node.next
                del self._aux_nodes[node_id]
                return node.blob
            prev, node_id = node, node.next
        return None

    def _aux_clear(self, ref):
        node_id = self.header(ref)[2]
        while node_id:
            node = self._aux_nodes.pop(node_id)
            node_id = node.next
        self._set_aux_head(ref, 0)

    @property
    def aux_live(self):
        return len(self._aux_nodes)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    def kind_of(self, ref):
        return Kind(self.arena.mem[ref + 16])

    def type_of(self, ref):
        return NativeRef(self._read_u(ref, 8))

    def type_desc(self, type_ref):
        return self._types[type_ref]

    def type_name(self, ref):
        return self._types[self.type_of(ref)].name

    def _payload(self, ref):
        return ref + OBJECT_PREFIX_SIZE

    def _owned_refs(self, ref, kind):
        p = OBJECT_PREFIX_SIZE
        if kind == Kind.TUPLE:
            n = self._read_u(ref, p)
            for i in range(n):
                yield NativeRef(self._read_u(ref, p + 8 + 8 * i))
        elif kind == Kind.LIST:
            yield from self._var.get(ref, ())
        elif kind == Kind.DICT:
            for k, v in self._var.get(ref, {}).values():
                yield k
                yield v
        elif kind == Kind.INSTANCE:
            desc = self._types[self.type_of(ref)]
            if desc.dict_offset is not None:
                d = self._read_u(ref, p + desc.dict_offset)
                if d:
                    yield NativeRef(d)
        elif kind == Kind.CFUNCTION:
            s = self._read_u(ref, p + 8)
            if s:
                yield NativeRef(s)
        elif kind == Kind.MODULE:
            for off in (0, 8):
                r = self._read_u(ref, p + off)
                if r:
                    yield NativeRef(r)
        elif kind == Kind.SLICE:
            for off in (0, 8, 16):
                yield NativeRef(self._read_u(ref, p + off))

    def visit_refs(self, ref, visitor):
        """Call ``visitor`` once per outgoing reference held by the payload."""
        self._check_live(ref)
        for child in self._owned_refs(ref, self.kind_of(ref)):
            visitor(child)

    def referents(self, ref):
        out = []
        self.visit_refs(ref, out.append)
        return out

    # ------------------------------------------------------------------
    # Constructors
    # ------------------------------------------------------------------

    def _new(self, kind, payload_size, wants_gc=False):
        return self.alloc(self._kind_types[kind], kind, wants_gc, payload_size)

    def singleton(self, which):
        return self.singletons[Singleton(which)]

    @property
    def none(self):
        return self.singletons[Singleton.NONE]

    def new_bool(self, value):
        return self.singletons[Singleton.TRUE if value else Singleton.FALSE]

    def new_int(self, value):
        if not -(1 << 63) <= value < (1 << 63):
            raise OverflowError(f"{value} does not fit a signed 64-bit int")
        ref = self._new(Kind.INT, 8)
        self._write_q(ref, OBJECT_PREFIX_SIZE, value)
        return ref

    def new_float(self, value):
        ref = self._new(Kind.FLOAT, 8)
        _d.pack_into(self.arena.mem, ref + OBJECT_PREFIX_SIZE, value)
        return ref

    def new_str(self, value):
        data = value.encode("utf-8") if isinstance(value, str) else bytes(value)
        ref = self._new(Kind.STR, 8 + len(data))
        p = ref + OBJECT_PREFIX_SIZE
        self._write_u(ref, OBJECT_PREFIX_SIZE, len(data))
        self.arena.mem[p + 8:p + 8 + len(data)] = data
        return ref

    def new_tuple(self, items, wants_gc=True):
        """New tuple; takes a new reference to every item."""
        items = list(items)
        ref = self._new(Kind.TUPLE, 8 + 8 * len(items), wants_gc)
        self._write_u(ref, OBJECT_PREFIX_SIZE, len(items))
        for i, item in enumerate(items):
            self.incref(item)
            self._write_u(ref, OBJECT_PREFIX_SIZE + 8 + 8 * i, item)
        return ref

    def new_list(self, items=(), wants_gc=True):
        items = [NativeRef(i) for i in items]
        for item in items:
            self.incref(item)
        ref = self._new(Kind.LIST, 8, wants_gc)
        self._var[ref] = items
        return ref

    def new_dict(self, wants_gc=True):
        ref = self._new(Kind.DICT, 8, wants_gc)
        self._var[ref] = {}
        return ref

    def new_capsule(self, blob):
        blob = bytes(blob)
        ref = self._new(Kind.CAPSULE, 8 + len(blob))
        self._write_u(ref, OBJECT_PREFIX_SIZE, len(blob))
        p = ref + OBJECT_PREFIX_SIZE + 8
        self.arena.mem[p:p + len(blob)] = blob
        return ref

    def new_cfunction(self, fn_id, self_ref=None):
        ref = self._new(Kind.CFUNCTION, 16, wants_gc=self_ref is not None)
        self._write_u(ref, OBJECT_PREFIX_SIZE, fn_id)
        if self_ref:
            self.incref(self_ref)
            self._write_u(ref, OBJECT_PREFIX_SIZE + 8, self_ref)
        return ref

    def new_module(self, name, doc=None):
        d = self.new_dict()
        ref = self.new_module_from_dict(name, d)
        self.decref(d)
        self.dict_setitem_str(d, "__name__", NativeRef(self._read_u(ref, OBJECT_PREFIX_SIZE + 8)))
        docref = self.new_str(doc) if doc is not None else self.none
        self.dict_setitem_str(d, "__doc__", docref)
        self.decref(docref)
        return ref

    def new_module_from_dict(self, name, dict_ref):
        """Module object over an existing dict (takes a new reference to it)."""
        ref = self._new(Kind.MODULE, 16, wants_gc=True)
        self.incref(dict_ref)
        self._write_u(ref, OBJECT_PREFIX_SIZE, dict_ref)
        self._write_u(ref, OBJECT_PREFIX_SIZE + 8, self.new_str(name))
        return ref

    def new_foreign(self):
        """Payload-free stub; the bridge header names the managed object."""
        return self._new(Kind.FOREIGN, 8, wants_gc=False)

    def new_slice(self, start, stop, step):
        ref = self._new(Kind.SLICE, 24, wants_gc=False)
        for i, part in enumerate((start, stop, step)):
            part = part or self.none
            self.incref(part)
            self._write_u(ref, OBJECT_PREFIX_SIZE + 8 * i, part)
        return ref

    def new_type(self, desc, immortal=None):
        """Allocate a type object.  Static (non-heap) types are immortal and
        registered by name exactly once."""
        desc.validate()
        if immortal is None:
            immortal = not desc.is_heap_type
        if not desc.is_heap_type:
            if desc.name in self.static_types:
                raise ValueError(f"static type {desc.name!r} already registered")
        ref = self.alloc(self.metatype, Kind.TYPE, desc.is_heap_type, 8, immortal=immortal)
        self._types[ref] = desc
        if not desc.is_heap_type:
            self.static_types[desc.name] = ref
        return ref

    def new_instance(self, type_ref):
        desc = self._types[type_ref]
        if desc.instance_kind != Kind.INSTANCE:
            raise TypeError(f"type {desc.name} does not create instances")
        ref = self.alloc(type_ref, Kind.INSTANCE, True, desc.basicsize)
        if desc.is_heap_type:
            self.incref(type_ref)
        if desc.dict_offset is not None:
            d = self.new_dict()
            self._write_u(ref, OBJECT_PREFIX_SIZE + desc.dict_offset, d)
        return ref

    # ------------------------------------------------------------------
    # Scalar accessors
    # ------------------------------------------------------------------

    def int_value(self, ref):
        return self._read_q(ref, OBJECT_PREFIX_SIZE)

    def float_value(self, ref):
        return _d.unpack_from(self.arena.mem, ref + OBJECT_PREFIX_SIZE)[0]

    def str_bytes(self, ref):
        n = self._read_u(ref, OBJECT_PREFIX_SIZE)
        p = ref + OBJECT_PREFIX_SIZE + 8
        return bytes(self.arena.mem[p:p + n])

    def str_value(self, ref):
        return self.str_bytes(ref).decode("utf-8", errors="surrogateescape")

    def poke_str_byte(self, ref, index, value):
        """Overwrite one byte of a str payload in place (what a C extension
        can do through the direct-access macro)."""
        n = self._read_u(ref, OBJECT_PREFIX_SIZE)
        if not 0 <= index < n:
            raise IndexError(index)
        self.arena.mem[ref + OBJECT_PREFIX_SIZE + 8 + index] = value

    def singleton_which(self, ref):
        return Singleton(self._read_q(ref, OBJECT_PREFIX_SIZE))

    def capsule_blob(self, ref):
        n = self._read_u(ref, OBJECT_PREFIX_SIZE)
        p = ref + OBJECT_PREFIX_SIZE + 8
        return bytes(self.arena.mem[p:p + n])

    def cfunction_info(self, ref):
        fn_id = self._read_u(ref, OBJECT_PREFIX_SIZE)
        s = self._read_u(ref, OBJECT_PREFIX_SIZE + 8)
        return fn_id, (NativeRef(s) if s else None)

    def module_dict(self, ref):
        return NativeRef(self._read_u(ref, OBJECT_PREFIX_SIZE))

    def module_name(self, ref):
        return self.str_value(NativeRef(self._read_u(ref, OBJECT_PREFIX_SIZE + 8)))

    def slice_parts(self, ref):
        return tuple(NativeRef(self._read_u(ref, OBJECT_PREFIX_SIZE + 8 * i)) for i in range(3))

    # ------------------------------------------------------------------
    # Tuples
    # ------------------------------------------------------------------

    def tuple_len(self, ref):
        return self._read_u(ref, OBJECT_PREFIX_SIZE)

    def tuple_items(self, ref):
        n = self._read_u(ref, OBJECT_PREFIX_SIZE)
        return [NativeRef(self._read_u(ref, OBJECT_PREFIX_SIZE + 8 + 8 * i)) for i in range(n)]

    def tuple_getitem(self, ref, index):
        n = self._read_u(ref, OBJECT_PREFIX_SIZE)
        if index < 0:
            index += n
        if not 0 <= index < n:
            raise IndexError("tuple index out of range")
        return NativeRef(self._read_u(ref, OBJECT_PREFIX_SIZE + 8 + 8 * index))

    # ------------------------------------------------------------------
    # Lists (borrowed results, like PyList_GetItem)
    # ------------------------------------------------------------------

    def _stored(self, container, value):
        if self.store_hook is not None:
            self.store_hook(container, value)

    def list_len(self, ref):
        self._check_lock()
        return len(self._var[ref])

    def list_items(self, ref):
        self._check_lock()
        return list(self._var[ref])

    def list_getitem(self, ref, index):
        self._check_lock()
        return self._var[ref][index]

    def list_setitem(self, ref, index, value):
        self._check_lock()
        items = self._var[ref]
        old = items[index]
        self.incref(value)
        items[index] = NativeRef(value)
        self._stored(ref, value)
        self.decref(old)

    def list_append(self, ref, value):
        self._check_lock()
        self.incref(value)
        self._var[ref].append(NativeRef(value))
        self._stored(ref, value)

    def list_insert(self, ref, index, value):
        self._check_lock()
        self.incref(value)
        self._var[ref].insert(index, NativeRef(value))
        self._stored(ref, value)

    def list_pop(self, ref, index=-1):
        """Remove an item and return it as a new reference."""
        self._check_lock()
        return self._var[ref].pop(index)

    def list_delitem(self, ref, index):
        self.decref(self.list_pop(ref, index))

    # ------------------------------------------------------------------
    # Dicts; delegation stubs forward to their managed twin
    # ------------------------------------------------------------------

    def _is_delegate(self, ref):
        return self.header_flags(ref) & (DELEGATE | INITIALIZED) == DELEGATE | INITIALIZED

    def dict_key(self, ref):
        kind = self.kind_of(ref)
        if kind == Kind.INT:
            return self.int_value(ref)
        if kind == Kind.FLOAT:
            return self.float_value(ref)
        if kind == Kind.STR:
            return self.str_bytes(ref)
        if kind == Kind.SINGLETON:
            which = self.singleton_which(ref)
            if which == Singleton.TRUE:
                return True
            if which == Singleton.FALSE:
                return False
            return ("singleton", int(which))
        return ("addr", int(ref))

    def dict_getitem(self, ref, key):
        """Borrowed reference to the value, or None when missing."""
        self._check_lock()
        if self._is_delegate(ref):
            return self.delegate.dict_getitem(ref, key)
        entry = self._var[ref].get(self.dict_key(key))
        return entry[1] if entry else None

    def dict_getitem_str(self, ref, name):
        self._check_lock()
        if self._is_delegate(ref):
            return self.delegate.dict_getitem_str(ref, name)
        entry = self._var[ref].get(name.encode("utf-8"))
        return entry[1] if entry else None

    def dict_setitem(self, ref, key, value):
        self._check_lock()
        if self._is_delegate(ref):
            self.delegate.dict_setitem(ref, key, value)
            return
        entries = self._var[ref]
        hk = self.dict_key(key)
        entry = entries.get(hk)
        old = entry[1] if entry is not None else None
        self.incref(value)
        if entry is None:
            self.incref(key)
            entries[hk] = [NativeRef(key), NativeRef(value)]
            self._stored(ref, key)
        else:
            entry[1] = NativeRef(value)
        self._stored(ref, value)
        if old is not None:
            self.decref(old)

    def dict_setitem_str(self, ref, name, value):
        key = self.new_str(name)
        try:
            self.dict_setitem(ref, key, value)
        finally:
            self.decref(key)

    def dict_delitem(self, ref, key):
        self._check_lock()
        if self._is_delegate(ref):
            self.delegate.dict_delitem(ref, key)
            return
        k, v = self._var[ref].pop(self.dict_key(key))
        self.decref(k)
        self.decref(v)

    def dict_items(self, ref):
        """Borrowed (key, value) pairs in insertion order."""
        self._check_lock()
        if self._is_delegate(ref):
            return self.delegate.dict_items(ref)
        return [(k, v) for k, v in self._var[ref].values()]

    def dict_len(self, ref):
        self._check_lock()
        if self._is_delegate(ref):
            return len(self.delegate.dict_items(ref))
        return len(self._var[ref])

    def clear_refs(self, ref):
        """Drop every reference a list or plain dict holds (cycle breaking)."""
        self._check_lock()
        kind = self.kind_of(ref)
        if kind == Kind.LIST:
            items, self._var[ref] = self._var[ref], []
            for item in items:
                self.decref(item)
        elif kind == Kind.DICT and not self._is_delegate(ref):
            entries, self._var[ref] = self._var[ref], {}
            for k, v in entries.values():
                self.decref(k)
                self.decref(v)

    def dict_clear_payload(self, ref):
        """Drop native storage (used when a dict becomes a delegation stub)."""
        entries = self._var[ref]
        self._var[ref] = {}
        for k, v in entries.values():
            self.decref(k)
            self.decref(v)

    # ------------------------------------------------------------------
    # Instances
    # ------------------------------------------------------------------

    def instance_dict(self, ref):
        desc = self._types[self.type_of(ref)]
        if desc.dict_offset is None:
            return None
        d = self._read_u(ref, OBJECT_PREFIX_SIZE + desc.dict_offset)
        return NativeRef(d) if d else None

    def member_get(self, ref, name):
        offset, code = self._types[self.type_of(ref)].members[name]
        if code == "i":
            return self._read_q(ref, OBJECT_PREFIX_SIZE + offset)
        return _d.unpack_from(self.arena.mem, ref + OBJECT_PREFIX_SIZE + offset)[0]

    def member_set(self, ref, name, value):
        self._check_lock()
        offset, code = self._types[self.type_of(ref)].members[name]
        if code == "i":
            self._write_q(ref, OBJECT_PREFIX_SIZE + offset, int(value))
        else:
            _d.pack_into(self.arena.mem, ref + OBJECT_PREFIX_SIZE + offset, float(value))

    # ------------------------------------------------------------------
    # Functions
    # ------------------------------------------------------------------

    def register_function(self, fn):
        self.functions.append(fn)
        return len(self.functions) - 1

    def call_function(self, fn_id, self_ref, args):
        """Run a NativeFunction on a native args tuple; new reference back."""
        if self.invoke is None:
            raise RuntimeError("no function invoker installed")
        return self.invoke(fn_id, self_ref, args)

    # ------------------------------------------------------------------
    # Generic attribute lookup (native path only)
    # ------------------------------------------------------------------

    def getattr(self, ref, name):
        """New reference to attribute ``name`` or None when absent.

        Lookup order for instances: instance dict, type get-sets, members,
        methods (bound as new CFunction objects).  Delegation stubs forward
        to the managed side; mirrored objects and peers never do.
        """
        self._check_lock()
        kind = self.kind_of(ref)
        if kind == Kind.MODULE:
            if self._is_delegate(ref):
                return self.delegate.module_getattr(ref, name)
            v = self.dict_getitem_str(self.module_dict(ref), name)
            if v is not None:
                self.incref(v)
            return v
        if kind == Kind.TYPE:
            desc = self._types[ref]
            if name == "__name__":
                return self.new_str(desc.name.rsplit(".", 1)[-1])
            if name == "__doc__":
                return self.new_str(desc.doc) if desc.doc is not None else self.none
            return None
        desc = self._types[self.type_of(ref)]
        d = self.instance_dict(ref) if kind == Kind.INSTANCE else None
        if d is not None:
            v = self.dict_getitem_str(d, name)
            if v is not None:
                self.incref(v)
                return v
        if name in desc.getsets:
            getter, _ = desc.getsets[name]
            empty = self.new_tuple(())
            try:
                return self.call_function(getter, ref, empty)
            finally:
                self.decref(empty)
        if name in desc.members:
            offset, code = desc.members[name]
            value = self.member_get(ref, name)
            return self.new_int(value) if code == "i" else self.new_float(value)
        if name in desc.methods:
            return self.new_cfunction(desc.methods[name], ref)
        return None

    def setattr(self, ref, name, value):
        self._check_lock()
        kind = self.kind_of(ref)
        if kind == Kind.MODULE:
            if self._is_delegate(ref):
                self.delegate.module_setattr(ref, name, value)
            else:
                self.dict_setitem_str(self.module_dict(ref), name, value)
            return
        if kind != Kind.INSTANCE:
            raise AttributeError(f"'{self.type_name(ref)}' object attributes are read-only")
        desc = self._types[self.type_of(ref)]
        if name in desc.members:
            code = desc.members[name][1]
            vk = self.kind_of(value)
            if vk == Kind.INT:
                self.member_set(ref, name, self.int_value(value))
            elif vk == Kind.FLOAT and code == "d":
                self.member_set(ref, name, self.float_value(value))
            else:
                raise TypeError(f"member {name} needs a number")
            return
        if name in desc.getsets and desc.getsets[name][1] is not None:
            args = self.new_tuple((value,))
            try:
                self.decref(self.call_function(desc.getsets[name][1], ref, args))
            finally:
                self.decref(args)
            return
        d = self.instance_dict(ref)
        if d is None:
            raise AttributeError(f"'{desc.name}' object has no attribute {name!r}")
        self.dict_setitem_str(d, name, value)

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def repr(self, ref):
        self._check_lock()
        kind = self.kind_of(ref)
        if kind == Kind.INT:
            return str(self.int_value(ref))
        if kind == Kind.FLOAT:
            return format_float(self.float_value(ref))
        if kind == Kind.STR:
            return repr(self.str_value(ref))
        if kind == Kind.SINGLETON:
            return SINGLETON_NAMES[self.singleton_which(ref)]
        if kind == Kind.TYPE:
            return f"<type '{self._types[ref].name}'>"
        if kind == Kind.CAPSULE:
            return f"<capsule object at 0x{int(ref):x}>"
        if kind == Kind.CFUNCTION:
            fn_id, s = self.cfunction_info(ref)
            name = self.functions[fn_id].name
            if s is None:
                return f"<built-in function {name}>"
            return f"<built-in method {name} of {self.type_name(s)} object at 0x{int(s):x}>"
        if kind == Kind.MODULE:
            return f"<module '{self.module_name(ref)}'>"
        if kind == Kind.FOREIGN:
            return f"<foreign object at 0x{int(ref):x}>"
        if kind == Kind.INSTANCE:
            desc = self._types[self.type_of(ref)]
            if desc.repr_fn is not None:
                return self._render_with(desc.repr_fn, ref)
            return f"<{desc.name} object at 0x{int(ref):x}>"
        if ref in self._repr_active:
            return {Kind.LIST: "[...]", Kind.DICT: "{...}"}.get(kind, "(...)")
        self._repr_active.add(ref)
        try:
            if kind == Kind.TUPLE:
                parts = [self.repr(i) for i in self.tuple_items(ref)]
                return "(" + ", ".join(parts) + ("," if len(parts) == 1 else "") + ")"
            if kind == Kind.LIST:
                return "[" + ", ".join(self.repr(i) for i in self.list_items(ref)) + "]"
            if kind == Kind.DICT:
                return "{" + ", ".join(f"{self.repr(k)}: {self.repr(v)}" for k, v in self.dict_items(ref)) + "}"
            if kind == Kind.SLICE:
                return "slice(" + ", ".join(self.repr(p) for p in self.slice_parts(ref)) + ")"
        finally:
            self._repr_active.discard(ref)
        raise FatalInvariantError(f"cannot render kind {kind!r}")

    def str(self, ref):
        kind = self.kind_of(ref)
        if kind == Kind.STR:
            return self.str_value(ref)
        if kind == Kind.INSTANCE:
            desc = self._types[self.type_of(ref)]
            if desc.str_fn is not None:
                return self._render_with(desc.str_fn, ref)
        return self.repr(ref)

    def _render_with(self, fn_id, ref):
        empty = self.new_tuple(())
        try:
            out = self.call_function(fn_id, ref, empty)
        finally:
            self.decref(empty)
        try:
            if self.kind_of(out) != Kind.STR:
                raise TypeError("render function must return str")
            return self.str_value(out)
        finally:
            self.decref(out)

    # ------------------------------------------------------------------
    # Structural comparison (used by the bridge and by tests)
    # ------------------------------------------------------------------

    def structurally_equal(self, a, b):
        if a == b:
            return True
        ka, kb = self.kind_of(a), self.kind_of(b)
        if ka != kb:
            return False
        if ka == Kind.INT:
            return self.int_value(a) == self.int_value(b)
        if ka == Kind.FLOAT:
            x, y = self.float_value(a), self.float_value(b)
            return x == y or (math.isnan(x) and math.isnan(y))
        if ka == Kind.STR:
            return self.str_bytes(a) == self.str_bytes(b)
        if ka == Kind.TUPLE:
            ia, ib = self.tuple_items(a), self.tuple_items(b)
            return len(ia) == len(ib) and all(self.structurally_equal(x, y) for x, y in zip(ia, ib))
        if ka == Kind.LIST:
            ia, ib = self.list_items(a), self.list_items(b)
            return len(ia) == len(ib) and all(self.structurally_equal(x, y) for x, y in zip(ia, ib))
        if ka == Kind.CAPSULE:
            return self.capsule_blob(a) == self.capsule_blob(b)
        return False


def format_float(value):
    """Float rendering shared by both runtimes (shortest round-trip repr)."""
    return repr(float(value))
