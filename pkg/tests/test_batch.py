import pytest
from hypothesis import given, settings, strategies as st

from userpage import (
    AddressSpace,
    AllocationRequest,
    BatchAllocator,
    GpAllocator,
    Kernel,
    UserPageAllocator,
)
from userpage.errors import DoubleFree, InvalidSize, OutOfPhysicalMemory, UnknownAddress
from userpage.umpa import AllocFlags


def _batch(frames=16384):
    k = Kernel(frames)
    gp = GpAllocator(UserPageAllocator(k, AddressSpace(k, va_pages=1 << 18)))
    return k, gp, BatchAllocator(gp)


def test_request_validation():
    with pytest.raises(InvalidSize):
        AllocationRequest(0)
    with pytest.raises(ValueError):
        AllocationRequest(8, alignment=48)


def test_batch_of_small_blocks_uses_one_chunk():
    _, gp, b = _batch()
    results = b.batch_alloc([AllocationRequest(64)] * 10000)
    assert gp.umpa_calls <= 2
    spans = sorted((r.address, r.actual_size) for r in results)
    assert all(r.actual_size >= 64 for r in results)
    assert all(a + n <= c for (a, n), (c, _) in zip(spans, spans[1:]))
    gp.audit()


def test_mixed_batch_alignment_and_zeroing():
    _, gp, b = _batch()
    junk = gp.gp_malloc(4096)
    gp.space.write_bytes(junk, b"\x77" * 4096)
    gp.gp_free(junk)
    reqs = [AllocationRequest(100, 256), AllocationRequest(4000, flags=AllocFlags(zeroed=True)),
            AllocationRequest(600 * 1024)]
    res = b.batch_alloc(reqs)
    assert res[0].address % 256 == 0
    assert gp.space.read_bytes(res[1].address, 4000) == bytes(4000)
    assert res[2].address in gp.direct
    gp.audit()


def test_plan_counts_chunks_and_pages():
    _, gp, b = _batch()
    assert b.plan([AllocationRequest(64)] * 10000) == (1, 0)
    assert b.plan([AllocationRequest(200 * 1024)] * 10) == (2, 0)
    assert b.plan([AllocationRequest(300 * 1024)]) == (0, 75)


def test_infeasible_batch_changes_nothing():
    k, gp, b = _batch(frames=300)
    before = (gp.umpa_calls, k.db.free_small, gp.free_bytes())
    with pytest.raises(OutOfPhysicalMemory):
        b.batch_alloc([AllocationRequest(64)] * 10 + [AllocationRequest(2 * 1024 * 1024)])
    assert (gp.umpa_calls, k.db.free_small, gp.free_bytes()) == before
    assert not gp.live and not gp.direct


def test_batch_free_is_all_or_nothing():
    _, gp, b = _batch()
    res = b.batch_alloc([AllocationRequest(64)] * 4)
    addrs = [r.address for r in res]
    with pytest.raises(UnknownAddress):
        b.batch_free(addrs + [999])
    with pytest.raises(UnknownAddress):
        b.batch_free([addrs[0], addrs[0]])
    assert len(gp.live) == 4
    b.batch_free(addrs[:2])
    with pytest.raises(DoubleFree):
        b.batch_free(addrs[:1] + addrs[2:])
    assert len(gp.live) == 2


def test_batch_free_merges_once():
    _, gp, b = _batch()
    res = b.batch_alloc([AllocationRequest(n) for n in range(16, 4000, 37)] + [AllocationRequest(400 * 1024)])
    passes = gp.coalesce_passes
    b.batch_free([r.address for r in res])
    assert gp.coalesce_passes == passes + 1
    assert gp.free_lists.size == {c: gp.chunk_size for c in gp.chunks}
    assert not gp.direct


def test_try_resize_in_place():
    _, gp, b = _batch()
    (r,) = b.batch_alloc([AllocationRequest(64)])
    assert b.try_resize_in_place(r.address, 1000)
    assert gp.usable_size(r.address) >= 1000


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 300 * 1024), st.sampled_from([16, 64, 1024])), min_size=1, max_size=40),
       st.integers(0, 20))
def test_plan_matches_real_allocation(sizes, warm):
    _, gp, b = _batch()
    for i in range(warm):
        gp.gp_malloc(1000 + 997 * i)
    reqs = [AllocationRequest(s, a) for s, a in sizes]
    chunks_before = len(gp.chunks)
    direct_before = sum(-(-n // 4096) for n in gp.direct.values())
    want = b.plan(reqs)
    b.batch_alloc(reqs)
    direct_after = sum(-(-n // 4096) for n in gp.direct.values())
    assert want == (len(gp.chunks) - chunks_before, direct_after - direct_before)
    gp.audit()
