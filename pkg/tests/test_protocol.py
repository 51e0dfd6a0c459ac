"""Protocol-level unit tests: remoteness, GETS/GETX transitions, vectors."""

import pytest
from hypothesis import given, strategies as st

from cohsim.protocol import (
    CacheRequest,
    CacheResponse,
    CoherenceState,
    ConfigurationError,
    DirectoryEntry,
    GetxResult,
    ProtocolVariant,
    RequestKind,
    ResponseKind,
    SharerVector,
    UpgradeKind,
    gets_hit_transition,
    getx_transition,
    is_remote,
    load_fill_state,
)

E = CoherenceState.EXCLUSIVE
M = CoherenceState.MODIFIED
S = CoherenceState.SHARED


def entry(state, *cores, width=8, address=0x1000):
    vec = SharerVector(width=width)
    for c in cores:
        vec.add(c)
    return DirectoryEntry(address=address, state=state, sharers=vec)


class TestIsRemote:
    def test_exclusive_line_of_other_core_is_remote(self):
        assert is_remote(entry(E, 1), requester=0) is True

    def test_own_insertion_is_local(self):
        assert is_remote(entry(E, 0), requester=0) is False

    def test_requester_among_sharers_is_local(self):
        assert is_remote(entry(S, 0, 1), requester=0) is False


class TestGetsTransitions:
    def test_miss_fill_state_mesi(self):
        assert load_fill_state(ProtocolVariant.MESI) is E

    def test_miss_fill_state_start_with_s(self):
        assert load_fill_state(ProtocolVariant.SS_MESI) is S

    def test_spec_hit_on_remote_exclusive_with_dsrc_defers(self):
        e = entry(E, 1)
        res = gets_hit_transition(e, requester=0, spec_flag=True, dsrc_active=True)
        assert res.response is ResponseKind.REMOTE_EM
        assert res.remote_em and not res.state_changed and not res.add_requester
        assert e.state is E and e.sharers.cores() == [1]

    def test_nonspec_hit_on_remote_exclusive_downgrades(self):
        res = gets_hit_transition(entry(E, 1), requester=0, spec_flag=False, dsrc_active=True)
        assert res.response is ResponseKind.DATA
        assert res.new_state is S and res.add_requester

    def test_spec_hit_without_dsrc_downgrades(self):
        res = gets_hit_transition(entry(E, 1), requester=0, spec_flag=True, dsrc_active=False)
        assert res.response is ResponseKind.DATA and res.new_state is S

    def test_hit_on_shared_line_adds_sharer(self):
        res = gets_hit_transition(entry(S, 1, 2), requester=0, spec_flag=True, dsrc_active=True)
        assert res.response is ResponseKind.DATA
        assert res.new_state is S and res.add_requester

    def test_hit_on_own_exclusive_keeps_state(self):
        res = gets_hit_transition(entry(E, 0), requester=0, spec_flag=True, dsrc_active=True)
        assert res.response is ResponseKind.DATA
        assert res.new_state is E and not res.state_changed

    def test_spec_hit_on_remote_modified_defers(self):
        res = gets_hit_transition(entry(M, 3), requester=0, spec_flag=True, dsrc_active=True)
        assert res.response is ResponseKind.REMOTE_EM


class TestGetxTransitions:
    def test_silent_upgrade_on_own_exclusive(self):
        assert getx_transition(entry(E, 0), requester=0) == GetxResult(
            UpgradeKind.SILENT, 0, False
        )

    def test_broadcast_on_shared_pair(self):
        assert getx_transition(entry(S, 0, 1), requester=0) == GetxResult(
            UpgradeKind.BROADCAST, 1, False
        )

    def test_broadcast_on_full_sharer_set(self):
        assert getx_transition(entry(S, *range(8)), requester=0) == GetxResult(
            UpgradeKind.BROADCAST, 7, False
        )

    def test_miss_is_fill(self):
        assert getx_transition(None, requester=0) == GetxResult(UpgradeKind.FILL, 0, False)

    def test_store_to_foreign_modified_writes_back(self):
        res = getx_transition(entry(M, 2), requester=0)
        assert res == GetxResult(UpgradeKind.FILL, 1, True)

    def test_invalidation_count_brute_force_over_all_vectors(self):
        # Oracle: enumerate every 8-bit sharer vector containing the
        # requester; invalidations must equal popcount - 1.
        for bits in range(1, 256):
            if not bits & 1:
                continue
            e = entry(S, *(c for c in range(8) if bits >> c & 1))
            res = getx_transition(e, requester=0)
            assert res.upgrade is UpgradeKind.BROADCAST
            assert res.invalidations == bin(bits).count("1") - 1


class TestSharerVector:
    def test_add_remove_popcount(self):
        v = SharerVector(width=4)
        v.add(0)
        v.add(3)
        assert v.popcount() == 2 and v.cores() == [0, 3]
        v.remove(0)
        assert v.cores() == [3] and v.only(3)

    def test_width_bound(self):
        v = SharerVector(width=4)
        with pytest.raises(ConfigurationError):
            v.add(4)

    @given(st.sets(st.integers(min_value=0, max_value=7)))
    def test_popcount_matches_set(self, cores):
        v = SharerVector(width=8)
        for c in cores:
            v.add(c)
        assert v.popcount() == len(cores)
        assert set(v.cores()) == cores


class TestRequestResponseInvariants:
    def test_redo_request_rejects_spec_flag(self):
        with pytest.raises(ValueError):
            CacheRequest(RequestKind.REDO_GETS, 0x1000, 0, spec_flag=True)

    def test_redo_request_default_is_valid(self):
        req = CacheRequest(RequestKind.REDO_GETS, 0x1000, 0)
        assert req.spec_flag is False

    def test_remote_em_response_carries_no_data(self):
        with pytest.raises(ValueError):
            CacheResponse(ResponseKind.REMOTE_EM, 10, data=0x40)
        assert CacheResponse(ResponseKind.REMOTE_EM, 10).data is None


@given(
    state=st.sampled_from([E, M, S]),
    holders=st.sets(st.integers(min_value=0, max_value=7), min_size=1),
    requester=st.integers(min_value=0, max_value=7),
    spec=st.booleans(),
    dsrc=st.booleans(),
)
def test_gets_hit_never_invents_or_drops_other_sharers(
    state, holders, requester, spec, dsrc
):
    if state in (E, M) and len(holders) != 1:
        holders = {min(holders)}
    e = entry(state, *holders)
    res = gets_hit_transition(e, requester, spec, dsrc)
    if res.response is ResponseKind.REMOTE_EM:
        assert not res.state_changed
    else:
        # Data responses may only add the requester, never touch others.
        expected = set(holders) | ({requester} if res.add_requester else set())
        after = set(e.sharers.cores()) | ({requester} if res.add_requester else set())
        assert after == expected
        if res.remote_em:
            assert res.new_state is S
