"""Hierarchy tests: latencies, PLRU, flush, evictions, determinism."""

import pytest
from hypothesis import given, strategies as st

from cohsim.defense import DefenseConfig, DefenseId
from cohsim.hierarchy import (
    CacheLevelConfig,
    EventKind,
    Hierarchy,
    HierarchyParams,
    Level,
    TimingModel,
    TreePLRU,
)
from cohsim.protocol import CoherenceState, ConfigurationError, ResponseKind

C1 = DefenseConfig(DefenseId.C1_INSECURE)
C2 = DefenseConfig(DefenseId.C2_TORC)
C3 = DefenseConfig(DefenseId.C3_TORC_DSRC)

LINE = 0x4000
OTHER = 0x8000


def make_hierarchy(config=C1, **kwargs):
    return Hierarchy(config, **kwargs)


class TestTimingModel:
    def test_defaults(self):
        t = TimingModel()
        assert (t.t_l1, t.t_l2, t.t_llc, t.t_mem) == (2, 16, 40, 140)
        assert t.llc_hit == 58 and t.miss == 198

    def test_ordering_enforced(self):
        with pytest.raises(ConfigurationError):
            TimingModel(t_l1=16, t_l2=2)
        with pytest.raises(ConfigurationError):
            TimingModel(t_mem=40, t_llc=40)


class TestLevelConfig:
    def test_divisibility(self):
        with pytest.raises(ConfigurationError):
            CacheLevelConfig(size=1000, associativity=8)

    def test_sets(self):
        assert CacheLevelConfig(32 * 1024, 8).n_sets == 64


class TestAccessLatencies:
    # The latency oracle: sum the traversed levels from the timing model
    # directly, independent of the hierarchy walk.
    def test_cold_miss_pays_every_level(self):
        h = make_hierarchy()
        t = h.timing
        out = h.access_load(LINE, 0, False, now=0)
        assert out.total_latency == t.t_l1 + t.t_l2 + t.t_llc + t.t_mem == 198
        assert out.hit_level is Level.MEMORY

    def test_llc_hit_from_second_core(self):
        h = make_hierarchy()
        h.access_load(LINE, 1, False, now=0)
        out = h.access_load(LINE, 0, False, now=300)
        assert out.total_latency == h.timing.llc_hit == 58
        assert out.hit_level is Level.LLC

    def test_l1_hit(self):
        h = make_hierarchy()
        h.access_load(LINE, 0, False, now=0)
        out = h.access_load(LINE, 0, False, now=300)
        assert out.total_latency == h.timing.t_l1 == 2
        assert out.hit_level is Level.L1

    def test_l2_hit_after_l1_only_eviction(self):
        h = make_hierarchy()
        h.access_load(LINE, 0, False, now=0)
        h.l1[0].remove(h.line_of(LINE))
        out = h.access_load(LINE, 0, False, now=300)
        assert out.hit_level is Level.L2
        assert out.total_latency == h.timing.t_l1 + h.timing.t_l2 == 18

    def test_latency_monotonic_in_depth(self):
        h = make_hierarchy()
        t = h.timing
        assert t.t_l1 < t.t_l1 + t.t_l2 < t.llc_hit < t.miss

    def test_address_space_bound(self):
        h = make_hierarchy(params=HierarchyParams(address_bits=16))
        with pytest.raises(ConfigurationError):
            h.access_load(1 << 20, 0, False, now=0)

    def test_fill_propagates_into_private_levels(self):
        h = make_hierarchy()
        h.access_load(LINE, 0, False, now=0)
        line = h.line_of(LINE)
        assert h.l1[0].contains(line) and h.l2[0].contains(line)
        assert h.llc.lookup(line) is not None


class TestFillStates:
    def test_mesi_load_miss_fills_exclusive(self):
        h = make_hierarchy(C1)
        h.access_load(LINE, 0, False, now=0)
        e = h.llc.lookup(h.line_of(LINE))
        assert e.state is CoherenceState.EXCLUSIVE
        assert e.sharers.cores() == [0]

    def test_ss_mesi_load_miss_fills_shared(self):
        h = make_hierarchy(DefenseConfig(DefenseId.C5_TORC_DSRC_SSMESI))
        h.access_load(LINE, 0, False, now=0)
        e = h.llc.lookup(h.line_of(LINE))
        assert e.state is CoherenceState.SHARED

    def test_nonspec_read_of_remote_exclusive_downgrades(self):
        h = make_hierarchy(C3)
        h.access_load(LINE, 1, False, now=0)
        h.access_load(LINE, 0, False, now=300)
        e = h.llc.lookup(h.line_of(LINE))
        assert e.state is CoherenceState.SHARED
        assert e.sharers.cores() == [0, 1]


class TestFlush:
    def test_flush_absent_line_is_noop(self):
        h = make_hierarchy()
        h.flush(LINE, now=0)
        assert h.llc.lookup(h.line_of(LINE)) is None
        h.check_invariants()

    def test_flush_removes_everywhere(self):
        h = make_hierarchy()
        h.access_load(LINE, 1, False, now=0)
        h.flush(LINE, now=10)
        line = h.line_of(LINE)
        assert h.llc.lookup(line) is None
        assert not h.l1[1].contains(line) and not h.l2[1].contains(line)

    def test_flush_of_modified_line_writes_back(self):
        h = make_hierarchy()
        h.access_store(LINE, 0, now=0)
        h.flush(LINE, now=10)
        kinds = [e.kind for e in h.events]
        wb = [e for e in h.events if e.kind is EventKind.WRITEBACK]
        assert EventKind.WRITEBACK in kinds
        assert wb[-1].address == h.line_of(LINE) and wb[-1].cycle == 10

    def test_flush_of_clean_line_has_no_writeback(self):
        h = make_hierarchy()
        h.access_load(LINE, 0, False, now=0)
        before = len([e for e in h.events if e.kind is EventKind.WRITEBACK])
        h.flush(LINE, now=10)
        after = len([e for e in h.events if e.kind is EventKind.WRITEBACK])
        assert before == after == 0


class TestStores:
    def test_store_hit_on_own_exclusive_is_silent_and_fast(self):
        h = make_hierarchy()
        h.access_load(LINE, 0, False, now=0)
        out = h.access_store(LINE, 0, now=100)
        assert out.total_latency == h.timing.t_l1 == 2
        assert h.llc.lookup(h.line_of(LINE)).state is CoherenceState.MODIFIED

    def test_store_hit_on_shared_line_broadcasts(self):
        h = make_hierarchy()
        h.access_load(LINE, 0, False, now=0)
        h.access_load(LINE, 1, False, now=100)  # downgrade to S
        out = h.access_store(LINE, 0, now=300)
        t = h.timing
        assert out.total_latency == t.t_l1 + t.llc_hit + t.t_llc == 100
        e = h.llc.lookup(h.line_of(LINE))
        assert e.state is CoherenceState.MODIFIED and e.sharers.cores() == [0]
        assert not h.l1[1].contains(h.line_of(LINE))

    def test_store_latency_asymmetry(self):
        # Table-2-style qualitative check: S-store strictly beats E-store.
        for sharers in range(2, 9):
            h = make_hierarchy(params=HierarchyParams(cores=8))
            for c in range(sharers):
                h.access_load(LINE, c, False, now=c * 300)
            s_latency = h.access_store(LINE, 0, now=5000).total_latency

            h2 = make_hierarchy()
            h2.access_load(OTHER, 0, False, now=0)
            e_latency = h2.access_store(OTHER, 0, now=300).total_latency
            assert s_latency > e_latency

    def test_store_miss_fills_modified(self):
        h = make_hierarchy()
        out = h.access_store(LINE, 0, now=0)
        assert out.total_latency == h.timing.miss
        assert h.llc.lookup(h.line_of(LINE)).state is CoherenceState.MODIFIED


class TestEvictions:
    def tiny(self, config=C1):
        params = HierarchyParams(
            l1=CacheLevelConfig(2 * 64, 2, 64),      # 1 set, 2 ways
            l2=CacheLevelConfig(4 * 64, 4, 64),      # 1 set, 4 ways
            llc=CacheLevelConfig(8 * 64, 8, 64),     # 1 set, 8 ways
            cores=2,
            address_bits=32,
        )
        return Hierarchy(config, params=params)

    def test_private_eviction_retires_directory_entry(self):
        h = self.tiny()
        lines = [i * 64 for i in range(5)]
        for i, a in enumerate(lines):
            h.access_load(a, 0, False, now=i * 300)
            h.check_invariants()
        # L2 holds 4 ways; the fifth fill evicted the LRU line entirely.
        resident = [e.address for e in h.llc.entries()]
        assert len(resident) == 4
        assert lines[0] not in resident

    def test_llc_eviction_recalls_private_copies(self):
        h = self.tiny()
        for i in range(4):
            h.access_load(i * 64, 0, False, now=i * 300)
        for i in range(4, 8):
            h.access_load(i * 64, 1, False, now=i * 300)
        h.check_invariants()
        # Ninth distinct line overflows the single LLC set.
        h.access_load(8 * 64, 0, False, now=4000)
        h.check_invariants()
        assert len(h.llc.entries()) <= 8

    def test_modified_llc_eviction_writes_back(self):
        h = self.tiny()
        h.access_store(0, 0, now=0)
        for i in range(1, 4):
            h.access_load(i * 64, 0, False, now=i * 300)
        for i in range(4, 8):
            h.access_load(i * 64, 1, False, now=i * 300)
        assert len(h.llc.entries()) == 8  # set full, dirty line is LRU
        h.access_load(8 * 64, 1, False, now=4000)
        assert any(e.kind is EventKind.WRITEBACK for e in h.events)
        assert h.llc.lookup(0) is None
        assert not h.l2[0].contains(0)
        h.check_invariants()


class TestDeterminism:
    def test_identical_sequences_identical_outcomes(self):
        def run():
            h = make_hierarchy(C2)
            outs = []
            outs.append(h.access_load(LINE, 1, False, now=0))
            outs.append(h.access_load(LINE, 0, True, now=250))
            outs.append(h.access_store(OTHER, 0, now=600))
            h.flush(LINE, now=900)
            return outs, h.events

        first, second = run(), run()
        assert first[0] == second[0]
        assert first[1] == second[1]


class TestRemoteEmImmutability:
    def test_directory_snapshot_bit_identical(self):
        h = make_hierarchy(C3)
        h.access_load(LINE, 1, False, now=0)
        before = h.llc.snapshot()
        out = h.access_load(LINE, 0, True, now=300)
        assert out.response.kind is ResponseKind.REMOTE_EM
        assert h.llc.snapshot() == before
        line = h.line_of(LINE)
        assert not h.l1[0].contains(line) and not h.l2[0].contains(line)


class TestTreePLRU:
    def test_requires_power_of_two(self):
        with pytest.raises(ConfigurationError):
            TreePLRU(6)

    def test_fresh_tree_victims_way_zero(self):
        assert TreePLRU(8).victim() == 0

    def test_touch_protects_way(self):
        plru = TreePLRU(8)
        for w in range(8):
            plru.touch(w)
        assert plru.victim() == 0
        plru.touch(0)
        assert plru.victim() != 0

    @given(st.lists(st.integers(min_value=0, max_value=7), min_size=1, max_size=64))
    def test_victim_never_most_recent(self, touches):
        plru = TreePLRU(8)
        for w in touches:
            plru.touch(w)
        assert plru.victim() != touches[-1]

    def test_two_way_alternates(self):
        plru = TreePLRU(2)
        plru.touch(0)
        assert plru.victim() == 1
        plru.touch(1)
        assert plru.victim() == 0
