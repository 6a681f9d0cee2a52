"""Reference implementations the tests compare against.

Nothing here calls into the code under test beyond raw state inspection
(heap contents, native referents, header fields, lock trace).
"""

from collections import defaultdict, deque

from rtbridge.managed import MKind
from rtbridge.native import DELEGATE, INITIALIZED, Kind


def combined_graph(rt):
    """Adjacency of the true combined graph, keyed by ('m', h) / ('n', r).

    Managed edges are real references only (mirrored edges are bookkeeping
    and are excluded).  A counterpart points at its native object; a native
    object points at its referents, heap-type instances at their type, and
    initialized delegation stubs at the twin that holds their data.
    """
    m, n = rt.managed, rt.native
    adj = defaultdict(list)
    for h, obj in m.heap.items():
        out = adj[("m", h)]
        out.extend(("m", x) for x in obj.attributes.values())
        p = obj.payload
        if obj.kind in (MKind.TUPLE, MKind.SLICE):
            out.extend(("m", x) for x in p)
        elif obj.kind == MKind.LIST and isinstance(p, list):
            out.extend(("m", x) for x in p)
        elif obj.kind == MKind.DICT:
            for k, v in p.values():
                out.append(("m", k))
                out.append(("m", v))
        elif obj.kind == MKind.MODULE:
            out.append(("m", p))
        elif obj.kind == MKind.FUNCTION:
            out.extend(("m", x) for x in p.captures)
        if obj.kind in (MKind.PEER, MKind.PEER_TYPE):
            out.append(("n", obj.native_peer))
        elif h in rt.bridge.table:
            out.append(("n", int(rt.bridge.table[h])))
    for r in n.live_objects():
        if n.is_immortal(r):
            continue
        out = adj[("n", int(r))]
        out.extend(("n", int(c)) for c in n.referents(r))
        if n.kind_of(r) == Kind.INSTANCE:
            out.append(("n", int(n.type_of(r))))
        flags = n.header_flags(r)
        if flags & DELEGATE and flags & INITIALIZED and n.header_peer(r):
            out.append(("m", n.header_peer(r)))
    return adj


def reachable_from_roots(rt):
    """Managed handles and native addresses reachable from managed roots."""
    adj = combined_graph(rt)
    m, n = rt.managed, rt.native
    seen = set()
    queue = deque(("m", h) for h in m.roots if h in m.heap)
    while queue:
        node = queue.popleft()
        if node in seen:
            continue
        side, x = node
        if side == "m" and x not in m.heap:
            continue
        if side == "n" and (not n.is_live(x) or n.is_immortal(x)):
            continue
        seen.add(node)
        queue.extend(adj.get(node, ()))
    managed = {x for s, x in seen if s == "m"}
    native = {x for s, x in seen if s == "n"}
    return managed, native


def lock_intervals(trace):
    """Per-thread native intervals from an acquire/release trace.

    Returns (intervals, balanced) where intervals is a list of
    (start_seq, end_seq, tid) and balanced says every acquire was released.
    """
    open_at = {}
    intervals = []
    balanced = True
    for seq, tid, event, _reason in trace:
        if event == "acquire":
            if tid in open_at:
                balanced = False
            open_at[tid] = seq
        else:
            if tid not in open_at:
                balanced = False
                continue
            intervals.append((open_at.pop(tid), seq, tid))
    if open_at:
        balanced = False
    return intervals, balanced


def overlapping(intervals):
    """Pairs of intervals from different threads that overlap."""
    events = sorted(intervals)
    bad = []
    for i, (s1, e1, t1) in enumerate(events):
        for s2, e2, t2 in events[i + 1:]:
            if s2 > e1:
                break
            if t1 != t2:
                bad.append(((s1, e1, t1), (s2, e2, t2)))
    return bad


def format_tree(text):
    """Independent recursive-descent reading of a format string.

    Returns a nested list of leaf codes; raises ValueError on bad input.
    """
    pos = 0

    def seq(depth):
        nonlocal pos
        out = []
        while pos < len(text):
            c = text[pos]
            if c in "idsO":
                out.append(c)
                pos += 1
            elif c == "(":
                pos += 1
                out.append(seq(depth + 1))
                if pos >= len(text) or text[pos] != ")":
                    raise ValueError("unclosed group")
                pos += 1
            elif c == ")":
                if depth == 0:
                    raise ValueError("unmatched )")
                return out
            else:
                raise ValueError(f"bad char {c!r}")
        if depth:
            raise ValueError("unclosed group")
        return out

    return seq(0)


def leaves(tree):
    for u in tree:
        if isinstance(u, list):
            yield from leaves(u)
        else:
            yield u


def expected_shape(tree, values):
    """Python value the packed object should render to."""
    it = iter(values)

    def one(u):
        if isinstance(u, list):
            return tuple(one(x) for x in u)
        v = next(it)
        return float(v) if u == "d" else v

    if not tree:
        return None
    if len(tree) == 1:
        return one(tree[0])
    return tuple(one(u) for u in tree)


def native_shape(n, r, opaque):
    """Render a native object as Python data; ``opaque`` maps O-objects to tokens."""
    if r in opaque:
        return opaque[r]
    k = n.kind_of(r)
    if k == Kind.INT:
        return n.int_value(r)
    if k == Kind.FLOAT:
        return n.float_value(r)
    if k == Kind.STR:
        return n.str_value(r)
    if k == Kind.TUPLE:
        return tuple(native_shape(n, c, opaque) for c in n.tuple_items(r))
    if k == Kind.SINGLETON and r == n.none:
        return None
    raise AssertionError(f"unexpected kind {k}")
