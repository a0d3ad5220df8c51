import pytest
from hypothesis import given, settings, strategies as st

from userpage import AccessKind, AddressSpace, Kernel, LazyPager, SizeClass
from userpage.errors import (
    AlignmentError,
    AlreadyMapped,
    ConsistencyFault,
    FrameAliased,
    NotMapped,
    NotOwner,
    RangeOverlap,
    ReservationError,
    SegmentationFault,
    UnmappedPage,
)

PAGE = 4096
W = AccessKind.WRITE


def _space(frames=4096, va_pages=1 << 16):
    k = Kernel(frames)
    return k, AddressSpace(k, va_pages=va_pages)


def _mapped(space, n, at=None):
    frames = space.kernel.sys_exchange_pages(space.owner, request=[SizeClass.SMALL] * n)
    vpn = space.reserve(n) if at is None else at
    space.map_pages(vpn, frames)
    return vpn, frames


class LruOracle:
    """Strict-LRU L2 of 256 small-page entries plus the sheet rule for refill kind."""

    def __init__(self):
        self.entries: list[int] = []
        self.last_sheet = None
        self.near = self.far = 0

    def access(self, vpn):
        if vpn in self.entries:
            self.entries.remove(vpn)
            self.entries.append(vpn)
            return
        sheet = vpn // 512
        if sheet == self.last_sheet:
            self.near += 1
        else:
            self.far += 1
        self.last_sheet = sheet
        self.entries.append(vpn)
        if len(self.entries) > 256:
            self.entries.pop(0)


def test_null_page_never_mappable():
    k, space = _space()
    f = k.sys_exchange_pages(space.owner, request=[SizeClass.SMALL])
    with pytest.raises(ReservationError):
        space.map_pages(0, f)
    with pytest.raises(SegmentationFault):
        space.access_byte(100)


def test_map_rules():
    k, space = _space()
    other = AddressSpace(k)
    vpn, frames = _mapped(space, 4)
    assert space.ledger.pte_writes == 4
    with pytest.raises(AlreadyMapped):
        space.map_pages(vpn, k.sys_exchange_pages(space.owner, request=[SizeClass.SMALL]))
    with pytest.raises(FrameAliased):
        space.map_pages(vpn + 100, frames[:1])
    with pytest.raises(NotOwner):
        other.map_pages(10, frames[:1])


def test_unmap_returns_frames_and_leaves_stale_tlb():
    k, space = _space()
    vpn, frames = _mapped(space, 3)
    space.access_byte(vpn * PAGE, W, 5)
    got = space.unmap_pages(vpn, 3)
    assert got.tolist() == frames.tolist()
    with pytest.raises(NotMapped):
        space.unmap_pages(vpn, 3)
    space.map_pages(vpn, got[::-1].copy())
    with pytest.raises(ConsistencyFault):
        space.access_byte(vpn * PAGE)
    space.tlb_flush(vpn, 3)
    assert space.access_byte((vpn + 2) * PAGE) == 5


def test_translate_sets_accessed_and_dirty():
    _, space = _space()
    vpn, _ = _mapped(space, 1)
    space.access_byte(vpn * PAGE)
    e = space.entry(vpn)
    assert e.accessed and not e.dirty
    space.access_byte(vpn * PAGE, W, 1)
    assert space.entry(vpn).dirty


def test_read_only_page():
    k, space = _space()
    f = k.sys_exchange_pages(space.owner, request=[SizeClass.SMALL])
    space.map_pages(7, f, writable=False)
    space.access_byte(7 * PAGE)
    with pytest.raises(SegmentationFault):
        space.access_byte(7 * PAGE, W, 1)


def test_large_mapping_alignment_and_translation():
    k, space = _space(2048)
    big = k.sys_exchange_pages(space.owner, request=[SizeClass.LARGE])
    with pytest.raises(AlignmentError):
        space.map_pages(513, big)
    space.map_pages(1024, big)
    assert space.ledger.pte_writes == 1 and space.is_present(1024, 512)
    space.write_bytes(1024 * PAGE + 3 * PAGE + 9, b"hi")
    assert k.memory.read(int(big[0]) + 3, 9, 2) == b"hi"
    refills = space.ledger.tlb_near_refills + space.ledger.tlb_far_refills
    space.access_byte(1024 * PAGE + 400 * PAGE)
    assert space.ledger.tlb_near_refills + space.ledger.tlb_far_refills == refills
    with pytest.raises(AlignmentError):
        space.unmap_pages(1024, 100)
    assert space.unmap_pages(1024, 512).tolist() == big.tolist()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 1499), min_size=1, max_size=400))
def test_tlb_refills_match_lru_oracle(vpns):
    k, space = _space(2048)
    base = 1024
    _mapped(space, 1500, at=base)
    oracle = LruOracle()
    for v in vpns:
        space.access_byte((base + v) * PAGE)
        oracle.access(base + v)
    assert (space.ledger.tlb_near_refills, space.ledger.tlb_far_refills) == (oracle.near, oracle.far)
    assert len(space.tlb.l1) <= 16 and len(space.tlb.l2) <= 256
    assert set(space.tlb.l1) <= set(space.tlb.l2)


def _pair(lazy: bool, warm: list[int], frames=4096):
    out = []
    for _ in range(2):
        k, space = _space(frames)
        if lazy:
            pager = LazyPager(space)
            vpn = space.reserve(600)
            pager.add_region(vpn, 600)
        else:
            vpn, _ = _mapped(space, 600)
        for w in warm:
            space.access_byte((vpn + w) * PAGE, W, 3)
        out.append((k, space, vpn))
    return out


@settings(max_examples=30, deadline=None)
@given(st.booleans(), st.lists(st.integers(0, 599), max_size=20), st.integers(0, 300), st.integers(1, 300),
       st.integers(0, 4095))
def test_bulk_touch_matches_per_page_access(lazy, warm, start, count, offset):
    (k1, s1, v1), (k2, s2, v2) = _pair(lazy, warm)
    s1.touch_pages((v1 + start) * PAGE + offset, count, 9)
    for i in range(count):
        s2.access_byte((v2 + start + i) * PAGE + offset, W, 9)
    assert s1.ledger.snapshot() == s2.ledger.snapshot()
    assert s1.tlb.last_sheet == s2.tlb.last_sheet
    for i in range(600):
        if s1.entry(v1 + i) is not None:
            assert s1.peek((v1 + i) * PAGE, PAGE) == s2.peek((v2 + i) * PAGE, PAGE)
    assert list(s1.tlb.l2) == list(s2.tlb.l2)


def test_traversal_cost_predicts_touch():
    _, space = _space()
    vpn, _ = _mapped(space, 700)
    predicted = space.traversal_cost(vpn * PAGE, 700)
    before = space.ledger.cycles
    space.touch_pages(vpn * PAGE, 700)
    assert space.ledger.cycles - before == predicted


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.binary(min_size=1, max_size=64), st.integers(0, 4000))
def test_remap_preserves_contents(n, payload, off):
    _, space = _space()
    src, _ = _mapped(space, n)
    space.write_bytes(src * PAGE + off, payload)
    before = space.peek(src * PAGE, n * PAGE)
    dst = space.reserve(n)
    space.remap_pages(src, dst, n)
    space.tlb_flush(src, n)
    assert space.peek(dst * PAGE, n * PAGE) == before
    assert not space.any_present(src, n)
    assert space.read_bytes(dst * PAGE + off, len(payload)) == (before[off:off + len(payload)])


def test_remap_and_swap_errors():
    _, space = _space()
    a, _ = _mapped(space, 4)
    with pytest.raises(RangeOverlap):
        space.remap_pages(a, a + 2, 4)
    with pytest.raises(NotMapped):
        space.remap_pages(a + 10, a + 20, 2)
    b, _ = _mapped(space, 4)
    with pytest.raises(AlreadyMapped):
        space.remap_pages(a, b, 4)


def test_swap_entries_exchanges_contents():
    _, space = _space()
    a, fa = _mapped(space, 2)
    b, fb = _mapped(space, 2)
    space.write_bytes(a * PAGE, b"A")
    space.write_bytes(b * PAGE, b"B")
    space.swap_entries(a, b, 2)
    space.tlb_flush()
    assert space.read_bytes(a * PAGE, 1) == b"B" and space.read_bytes(b * PAGE, 1) == b"A"
    assert space.frames_at(a, 2).tolist() == fb.tolist()


def test_copy_and_fill_charges():
    _, space = _space()
    a, _ = _mapped(space, 4)
    space.write_bytes(a * PAGE + 10, b"xyz" * 2000)
    space.copy_bytes(a * PAGE + 9000, a * PAGE + 10, 6000)
    assert space.peek(a * PAGE + 9000, 6000) == b"xyz" * 2000
    assert space.ledger.bytes_copied == 6000
    space.fill_zero(a * PAGE, 3 * PAGE)
    assert space.peek(a * PAGE, 3 * PAGE) == bytes(3 * PAGE)
    assert space.ledger.bytes_zeroed == 3 * PAGE


def test_watch_fires_once():
    _, space = _space()
    a, _ = _mapped(space, 2)
    fired = []
    space.watch([a], lambda va, kind: fired.append((va, kind)))
    space.access_byte(a * PAGE + 5, W, 1)
    space.access_byte(a * PAGE + 6)
    assert fired == [(a * PAGE + 5, W)]
    with pytest.raises(UnmappedPage):
        space.watch([a + 50], print)


def test_reservations_first_fit_and_coalesce():
    _, space = _space(va_pages=1000)
    r1 = space.reserve(10)
    r2 = space.reserve(10)
    r3 = space.reserve(10)
    assert (r1, r2, r3) == (1, 11, 21)
    space.release_reservation(r2, 10)
    assert space.reserve(5) == 11
    space.release_reservation(11, 5)
    space.release_reservation(r1, 10)
    space.release_reservation(r3, 10)
    assert space.free_ranges() == [(1, 999)]
    assert space.reserve(8, align=512) == 512
    with pytest.raises(ReservationError):
        space.release_reservation(600, 4)


def test_lazy_pager_faults_once_per_page():
    _, space = _space()
    pager = LazyPager(space)
    vpn = space.reserve(8)
    pager.add_region(vpn, 8)
    for rep in range(2):
        for i in range(8):
            space.access_byte((vpn + i) * PAGE, W, 1)
        assert space.ledger.faults == 8
    with pytest.raises(SegmentationFault):
        space.access_byte((vpn + 20) * PAGE)


def test_surcharge_only_for_large_regions():
    from userpage.costmodel import profile
    k = Kernel(2048, profile("linux"))
    space = AddressSpace(k)
    pager = LazyPager(space)
    small = space.reserve(512)
    big = space.reserve(600)
    pager.add_region(small, 512)
    pager.add_region(big, 600)
    space.touch_pages(small * PAGE, 512)
    assert space.ledger.surcharged_faults == 0
    space.touch_pages(big * PAGE, 600)
    assert space.ledger.surcharged_faults == 600
