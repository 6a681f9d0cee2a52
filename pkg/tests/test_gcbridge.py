import random

import pytest

from gc_workload import CombinedGraph
from oracles import reachable_from_roots
from rtbridge.errors import FatalInvariantError
from rtbridge.managed import MKind
from rtbridge.native import AUX_GC_TAG


def settle(rt, rounds=4):
    for _ in range(rounds):
        _, col, fin = rt.gc.full_cycle()
        if col.reclaimed_count == 0 and fin == 0:
            break


def test_gc_head_created_for_unbridged_referents(rt):
    n, m = rt.native, rt.managed
    with rt.lock.native():
        inner = n.new_list()
        outer = n.new_list([inner])
        n.decref(inner)
    h = rt.to_managed(outer)
    with rt.lock.native():
        head = n.aux_get(inner, AUX_GC_TAG)
    assert m.kind(head) == MKind.GC_HEAD
    assert m.get(h).mirrored_edges == [head]


def test_eager_store_adds_edge(rt):
    n, m = rt.native, rt.managed
    with rt.lock.native():
        lst = n.new_list()
    h = rt.to_managed(lst)
    with rt.lock.native():
        x = n.new_str("x")
        n.list_append(lst, x)
        n.decref(x)
    assert len(m.get(h).mirrored_edges) == 1
    assert rt.stats["gc_edges_added_eager"] == 1


def test_refresh_removes_stale_edges(rt):
    n, m = rt.native, rt.managed
    with rt.lock.native():
        lst = n.new_list()
        x = n.new_str("x")
        n.list_append(lst, x)
        n.decref(x)
    h = rt.to_managed(lst)
    with rt.lock.native():
        n.decref(n.list_pop(lst))
        rep = rt.gc.refresh([lst])
    assert rep.edges_removed == 1
    assert m.get(h).mirrored_edges == []


def test_stale_edge_delays_but_does_not_lose(rt):
    n, m = rt.native, rt.managed
    with rt.lock.native():
        lst = n.new_list()
        x = n.new_str("x")
        n.list_append(lst, x)
        n.decref(x)
    h = rt.to_managed(lst)
    m.add_root(h)
    with rt.lock.native():
        n.decref(n.list_pop(lst))
    rt.gc.collect()
    rt.gc.drain()
    assert m.is_live(h)
    assert n.is_live(x)  # its gc head is still held through the stale edge
    rt.gc.full_cycle()
    assert not n.is_live(x)


def test_cross_boundary_cycle_reclaimed(rt):
    m, n = rt.managed, rt.native
    base = (m.live_count, n.live_count)
    d = m.new_dict()
    t = m.new_tuple([d])
    rt.to_native(t)
    m.dict_set(d, m.new_str("t"), t)
    rt.gc.full_cycle()
    assert (m.live_count, n.live_count) == base


def test_native_cycle_seen_by_managed_is_reclaimed(rt):
    m, n = rt.managed, rt.native
    base = (m.live_count, n.live_count)
    with rt.lock.native():
        a, b = n.new_list(), n.new_dict()
        n.list_append(a, b)
        n.dict_setitem_str(b, "a", a)
    rt.to_managed(a)
    with rt.lock.native():
        n.decref(a)
        n.decref(b)
    rt.gc.full_cycle()
    assert (m.live_count, n.live_count) == base


def test_natively_held_object_survives(rt):
    m, n = rt.managed, rt.native
    with rt.lock.native():
        owner = n.new_list()
    h = m.new_str("kept by native code")
    with rt.lock.native():
        n.list_append(owner, rt.bridge._to_native(h))
    rt.gc.full_cycle()
    assert m.is_live(h)
    with rt.lock.native():
        n.decref(owner)
    rt.gc.full_cycle()
    assert not m.is_live(h)


def test_double_finalization_is_fatal(rt):
    m = rt.managed
    with rt.lock.native():
        r = rt.native.new_list()
    h = rt.to_managed(r)
    with rt.lock.native():
        rt.native.decref(r)
    rt.gc.collect()
    rt.gc.drain()
    with rt.lock.native(), pytest.raises(FatalInvariantError):
        rt.gc.on_finalized(h)


def test_to_managed_after_sweep_rebinds(rt):
    m, n = rt.managed, rt.native
    with rt.lock.native():
        r = n.new_list()
    h = rt.to_managed(r)
    # Hide the native-held roots so h is swept while r is still owned here,
    # leaving it queued but not yet drained.
    providers = list(m.root_providers)
    m.root_providers.clear()
    rt.gc.collect()
    m.root_providers.extend(providers)
    assert not m.is_live(h)
    h2 = rt.to_managed(r)
    assert h2 != h and m.is_live(h2)
    assert rt.gc.drain() == 0  # already finalized ahead of the queue
    with rt.lock.native():
        n.decref(r)
    rt.gc.full_cycle()
    assert not n.is_live(r)


def test_collect_requires_lock(rt):
    with pytest.raises(FatalInvariantError):
        rt.managed.gc_collect()


def test_poller_finalizes(rt):
    m, n = rt.managed, rt.native
    base = n.live_count
    with rt.lock.native():
        r = n.new_list()
    rt.to_managed(r)
    with rt.lock.native():
        n.decref(r)
    rt.gc.start_poller(interval=0.001)
    try:
        rt.gc.collect()
        import time
        deadline = time.time() + 5
        while n.live_count != base and time.time() < deadline:
            time.sleep(0.005)
    finally:
        rt.gc.stop_poller()
    assert n.live_count == base


@pytest.mark.parametrize("seed", range(40))
def test_random_graphs_never_lose_reachable_objects(rt, seed):
    rng = random.Random(seed)
    g = CombinedGraph(rt, rng).build()
    for _ in range(4):
        g.mutate(10)
        assert g.checked_collect() == []
    g.release()
    rt.ext.unload_all()
    settle(rt)
    _, native_reachable = reachable_from_roots(rt)
    assert rt.native.live_count == len(native_reachable)
