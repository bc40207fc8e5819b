import pytest

from sgpbft.config import ScenarioConfig
from sgpbft.core_types import ClientRequest, Kind, KeyTable, request_message
from sgpbft.pbft_engine import ClientState, ConfigError, sends_of
from sgpbft.sg_pbft_engine import (
    INITIAL_SCORE,
    MasterCollector,
    NodeSets,
    apply_scores,
    default_rotation_m,
    partition,
    quorum_threshold,
    select_master,
    sg_client_step,
    sg_finalize,
    sg_init,
    sg_step,
    update_con_nodes,
)
from sgpbft.simnet import Simulation, run_scenario

from oracles import reference_rotation, replay_scores, sg_first_delay


def test_init_partition_sizes_and_scores():
    replicas, sets = sg_init(8, 1, seed=42)
    assert len(sets.consensus) == 4 and len(sets.candidates) == 4
    assert set(sets.scores.values()) == {INITIAL_SCORE}
    assert sets.request_count == 0
    assert sorted(sets.consensus + sets.candidates) == list(range(8))
    assert [r.role for r in replicas].count("consensus") == 4


def test_init_rejects_small_consensus_set():
    with pytest.raises(ConfigError):
        sg_init(6, 1, seed=0)
    with pytest.raises(ConfigError):
        sg_init(9, 1, seed=0)


def test_partition_deterministic():
    assert partition(16, 2, 7) == partition(16, 2, 7)
    assert partition(16, 2, 7).consensus != partition(16, 2, 8).consensus


@pytest.mark.parametrize("v,cn,expect", [(0, 4, 0), (5, 4, 1), (8, 4, 0)])
def test_select_master(v, cn, expect):
    assert select_master(v, cn) == expect


def test_select_master_empty():
    with pytest.raises(ValueError):
        select_master(0, 0)


def _resp(keys, sender, result, digest=b"d" * 32):
    return keys.sign_message(Kind.RESPONSE, sender, view=0, seq=1, digest=digest, result=result)


def test_finalize_at_threshold():
    keys = KeyTable.generate(range(4), seed=0)
    col = MasterCollector(b"d" * 32)
    for s in (0, 1):
        col.add(_resp(keys, s, b"A"))
    assert sg_finalize(col, 1) is None
    col.add(_resp(keys, 2, b"A"))
    result, cert = sg_finalize(col, 1)
    assert result == b"A" and [c.sender for c in cert] == [0, 1, 2]
    col.add(_resp(keys, 3, b"A"))
    assert sg_finalize(col, 1) is None


def test_split_responses_do_not_finalize():
    keys = KeyTable.generate(range(4), seed=0)
    col = MasterCollector(b"d" * 32)
    for s, r in ((0, b"A"), (1, b"A"), (2, b"B"), (3, b"B")):
        col.add(_resp(keys, s, r))
    assert sg_finalize(col, 1) is None


def test_strict_quorum_needs_one_more():
    assert quorum_threshold(1) == 3 and quorum_threshold(1, strict=True) == 4


def test_collector_ignores_duplicates_and_other_digests():
    keys = KeyTable.generate(range(4), seed=0)
    col = MasterCollector(b"d" * 32)
    assert col.add(_resp(keys, 0, b"A"))
    assert not col.add(_resp(keys, 0, b"B"))
    assert not col.add(_resp(keys, 1, b"A", digest=b"e" * 32))
    assert col.judgments == {0: b"A"}


def test_apply_scores_deltas():
    sets = NodeSets([0, 1, 2, 3], [4, 5], {i: 100 for i in range(6)})
    out = apply_scores(sets, b"R", {0: b"R", 1: b"X", 2: None}, {3})
    assert out.scores == {0: 101, 1: 95, 2: 100, 3: 80, 4: 100, 5: 100}
    assert out.request_count == 1 and sets.request_count == 0
    # convicted equivocating master that also judged wrongly
    assert apply_scores(sets, b"R", {0: b"X"}, {0}).scores[0] == 75
    # evidence is a set: one conviction per round however often it is reported
    assert apply_scores(sets, b"R", {}, {3, 3}).scores[3] == 80


def test_candidates_never_scored():
    sets = NodeSets([0, 1, 2, 3], [4, 5], {i: 100 for i in range(6)})
    out = apply_scores(sets, b"R", {4: b"X", 5: b"R"}, set())
    assert out.scores[4] == 100 and out.scores[5] == 100


def test_update_con_nodes_example():
    scores = {10: 101, 11: 95, 12: 99, 13: 80, 4: 100, 5: 100}
    sets = NodeSets([10, 11, 12, 13], [4, 5], scores, request_count=50, rotation_m=1)
    out = update_con_nodes(sets)
    assert out.consensus == [10, 11, 12, 4]
    assert out.candidates == [5, 13]
    assert out.request_count == 0 and out.scores == scores


def test_update_con_nodes_m_zero_is_identity():
    sets = NodeSets([0, 1, 2, 3], [4, 5], {i: 100 for i in range(6)}, 50, rotation_m=0)
    out = update_con_nodes(sets)
    assert (out.consensus, out.candidates, out.scores) == (sets.consensus, sets.candidates,
                                                           sets.scores)


def test_update_con_nodes_equal_scores_tie_break():
    sets = NodeSets([3, 0, 6, 5], [1, 7, 2, 4], {i: 100 for i in range(8)}, 50, rotation_m=2)
    out = update_con_nodes(sets)
    assert sorted(set(sets.consensus) - set(out.consensus)) == [5, 6]
    assert sorted(set(out.consensus) - set(sets.consensus)) == [1, 2]
    assert (out.consensus, out.candidates) == reference_rotation(
        sets.consensus, sets.candidates, sets.scores, 2)


def test_default_rotation_width():
    assert default_rotation_m(4) == 1 and default_rotation_m(25) == 2


def test_candidate_ignores_protocol_messages():
    replicas, sets = sg_init(8, 1, seed=3)
    keys = replicas[0].keys
    master = sets.consensus[0]
    cand = replicas[sets.candidates[0]]
    req = request_message(keys, ClientRequest(b"op", 1, "c0"))
    _, actions = sg_step(replicas[master], req)
    pp = sends_of(actions)[0].msg
    assert sends_of(actions)[0].dests == tuple(sets.consensus[1:])
    before = cand.protocol_state()
    for msg in (req, pp):
        assert sg_step(cand, msg)[1] == []
    assert cand.protocol_state() == before and sum(cand.drops.values()) == 2


def test_replica_sends_one_response_after_prepare_quorum():
    replicas, sets = sg_init(8, 1, seed=3)
    keys = replicas[0].keys
    m, a, b, c = sets.consensus
    req = request_message(keys, ClientRequest(b"op", 1, "c0"))
    pp = sends_of(sg_step(replicas[m], req)[1])[0].msg
    prep_b = sends_of(sg_step(replicas[b], pp)[1])[0].msg
    sends_of(sg_step(replicas[a], pp)[1])
    out = sends_of(sg_step(replicas[a], prep_b)[1])
    assert len(out) == 1 and out[0].msg.kind == Kind.RESPONSE and out[0].dests == (m,)
    prep_c = sends_of(sg_step(replicas[c], pp)[1])[0].msg
    assert not sends_of(sg_step(replicas[a], prep_c)[1])


def test_client_requires_valid_certificate():
    keys = KeyTable.generate(list(range(4)) + ["c0"], seed=0)
    request = ClientRequest(b"op", 1, "c0")
    d = request_message(keys, request).digest
    cert = tuple(keys.sign_message(Kind.RESPONSE, s, view=0, seq=1, digest=d, result=b"R")
                 for s in (0, 1, 2))
    good = keys.sign_message(Kind.REPLY, 0, view=0, seq=1, digest=d, result=b"R", cert=cert)
    lie = keys.sign_message(Kind.REPLY, 0, view=0, seq=1, digest=d, result=b"X", cert=cert)
    short = keys.sign_message(Kind.REPLY, 0, view=0, seq=1, digest=d, result=b"R", cert=cert[:2])
    for reply, done in ((lie, False), (short, False), (good, True)):
        st = sg_client_step(ClientState(request, 3), reply, keys, [0, 1, 2, 3], 1)
        assert st.completed is done


@pytest.mark.parametrize("n", [8, 12, 16, 32])
def test_message_count_identity(n):
    report = run_scenario(ScenarioConfig(protocol="SGPBFT", n=n, f=(n // 2 - 1) // 3))
    cn = n // 2
    assert report.protocol_messages_sent == (cn - 1) * (cn + 1)
    assert report.sent["RESULT_BROADCAST"] == n - 1


def test_delay_matches_critical_path():
    cfg = ScenarioConfig(protocol="SGPBFT", n=16, f=2, latency_ticks=4, per_message_overhead=2)
    report, sim = run_scenario(cfg, simulation=True)
    assert report.requests[0]["completed_at"] == sg_first_delay(
        Simulation(cfg).consensus(), 2, 4, 2)


def test_candidate_passivity_in_runs():
    cfg = ScenarioConfig(protocol="SGPBFT", n=12, f=1, requests=60)
    holder = {}
    seen = []

    def spy(dest, msg):
        if msg.kind in (Kind.PREPARE, Kind.RESPONSE):
            seen.append((holder["sim"].now, msg.sender))
        return True

    sim = Simulation(cfg, delivery_filter=spy)
    holder["sim"] = sim
    initial = set(sim.consensus())
    queue = [f"op-{i}".encode() for i in range(60)]
    sim.on_complete = lambda s, _r: queue and s.inject(queue.pop(0))
    sim.inject(queue.pop(0), at=0)
    sim.run()
    report = sim.report()
    assert report.all_completed and len(report.rotations) == 1
    turn = report.rotations[0]["tick"]
    final = set(report.final_consensus)
    assert seen
    for at, sender in seen:
        assert sender in (initial if at <= turn else final)


def test_silent_master_convicted_and_rotated_out():
    base = ScenarioConfig(protocol="SGPBFT", n=8, f=1, seed=1)
    master = Simulation(base).consensus()[0]
    cfg = base.with_(faults=(f"{master}:silent",), requests=51)
    report = run_scenario(cfg)
    assert report.all_completed
    convicted = {c for vc in report.view_changes for c in vc["convicted"]}
    assert convicted == {master}
    assert report.rotations[0]["out"] == [master]
    assert master not in report.final_consensus
    # master hiding: after leaving, no later round is mastered by it
    after = report.rotations[0]["after_round"]
    assert all(r["master"] != master for r in report.rounds[after:])


def test_scores_match_replayed_ledger():
    cfg = ScenarioConfig(protocol="SGPBFT", n=8, f=1, seed=2, requests=30)
    wrong = Simulation(cfg).consensus()[2]
    report = run_scenario(cfg.with_(faults=(f"{wrong}:wrong_result",)))
    late = [e for h in report.score_history if h["round"] is None for e in h["evidence"]]
    replayed = replay_scores(range(8), report.rounds, late)
    assert {str(k): v for k, v in replayed.items()} == report.final_scores
    assert report.final_scores[str(wrong)] == 100 - 5 * 30


def test_result_broadcast_conflicting_with_pre_prepare_is_evidence():
    replicas, sets = sg_init(8, 1, seed=3)
    keys = replicas[0].keys
    m, a = sets.consensus[0], sets.consensus[1]
    r1 = request_message(keys, ClientRequest(b"one", 1, "c0"))
    r2 = request_message(keys, ClientRequest(b"two", 2, "c0"))
    pp = keys.sign_message(Kind.PRE_PREPARE, m, view=0, seq=1, digest=r1.digest, body=r1)
    sg_step(replicas[a], pp)
    cert = tuple(keys.sign_message(Kind.RESPONSE, s, view=0, seq=1, digest=r2.digest, result=b"R")
                 for s in sets.consensus[:3])
    rb = keys.sign_message(Kind.RESULT_BROADCAST, m, view=0, seq=1, digest=r2.digest,
                           result=b"R", body=r2, cert=cert)
    out = sg_step(replicas[a], rb)[1]
    assert replicas[a].evidence == {m}
    assert [s.msg.kind for s in sends_of(out)] == [Kind.VIEW_CHANGE]
    # the certified result is still applied
    assert replicas[a].applied[r2.request.rid][0] == b"R"


def test_equivocating_master_deposed_at_odd_consensus_size():
    cfg = ScenarioConfig(protocol="SGPBFT", n=14, f=1)
    master = Simulation(cfg).consensus()[0]
    report = run_scenario(cfg.with_(faults=(f"{master}:equivocate",)))
    assert report.all_completed
    assert {c for vc in report.view_changes for c in vc["convicted"]} == {master}
    assert report.final_scores[str(master)] == 100 + 1 - 20
