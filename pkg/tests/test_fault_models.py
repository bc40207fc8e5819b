import pytest

from sgpbft.config import ScenarioConfig
from sgpbft.core_types import ClientRequest, Kind, KeyTable, digest_of, request_message
from sgpbft.fault_models import Behavior, FaultSpec, wrap
from sgpbft.pbft_engine import PbftConfig, Send, pbft_init, sends_of
from sgpbft.simnet import Simulation, run_scenario


@pytest.mark.parametrize("text,expect", [
    ("3:silent", FaultSpec(3, Behavior.SILENT)),
    ("0:equivocate", FaultSpec(0, Behavior.EQUIVOCATE)),
    ("2:delay:5", FaultSpec(2, Behavior.DELAY, 5)),
    ("1:drop:0.25", FaultSpec(1, Behavior.DROP, 0.25)),
    ("4:wrong_result", FaultSpec(4, Behavior.WRONG_RESULT)),
])
def test_parse_round_trip(text, expect):
    spec = FaultSpec.parse(text)
    assert spec == expect
    assert FaultSpec.parse(str(spec)) == spec


@pytest.mark.parametrize("text", ["3", "x:silent", "1:fly", "1:drop:2", "1:delay", "1:silent:3",
                                  "1:delay:-1", "1:delay:1.5"])
def test_parse_rejects_malformed(text):
    with pytest.raises(ValueError):
        FaultSpec.parse(text)


def _pair(spec, n=4):
    keys = KeyTable.generate(list(range(n)) + ["c0"], seed=0)
    cfg = PbftConfig(n, 1, 50)
    honest = pbft_init(cfg, spec.node, keys)
    twin = pbft_init(cfg, spec.node, keys)
    return keys, honest, twin, wrap(twin.step, spec, keys, seed=0)


@pytest.mark.parametrize("behavior,param", [(Behavior.SILENT, None), (Behavior.EQUIVOCATE, None),
                                            (Behavior.WRONG_RESULT, None), (Behavior.DELAY, 3),
                                            (Behavior.DROP, 0.5)])
def test_wrapper_leaves_state_transitions_alone(behavior, param):
    keys, honest, twin, faulty = _pair(FaultSpec(0, behavior, param))
    req = request_message(keys, ClientRequest(b"op", 1, "c0"))
    honest.step(req)
    faulty(req)
    assert honest.protocol_state() == twin.protocol_state()


def test_silent_emits_no_sends():
    keys, _, _, faulty = _pair(FaultSpec(0, Behavior.SILENT))
    out = faulty(request_message(keys, ClientRequest(b"op", 1, "c0")))
    assert not sends_of(out)


def test_equivocation_splits_destinations():
    keys, _, _, faulty = _pair(FaultSpec(0, Behavior.EQUIVOCATE), n=7)
    out = sends_of(faulty(request_message(keys, ClientRequest(b"op", 1, "c0"))))
    assert [s.dests for s in out] == [(1, 2, 3), (4, 5, 6)]
    a, b = out[0].msg, out[1].msg
    assert a.digest != b.digest and (a.view, a.seq) == (b.view, b.seq)
    assert keys.verify_message(a) and keys.verify_message(b)
    assert b.digest == digest_of(b.body.request)


def test_equivocation_on_replica_is_harmless():
    # a replica never emits pre-prepares, so there is nothing to equivocate
    cfg = ScenarioConfig(n=4, f=1, faults=("2:equivocate",), requests=3)
    report = run_scenario(cfg)
    assert report.all_completed and report.protocol_messages_sent == 3 * 24


def test_wrong_result_flips_reply():
    keys, honest, twin, faulty = _pair(FaultSpec(1, Behavior.WRONG_RESULT))
    msg = keys.sign_message(Kind.REPLY, 1, view=0, seq=1, digest=b"d" * 32, result=b"\x00")
    out = faulty.rewrite([Send(("c0",), msg)])
    assert out[0].msg.result == b"\xff" and keys.verify_message(out[0].msg)


def test_delay_adds_ticks():
    keys, _, _, faulty = _pair(FaultSpec(0, Behavior.DELAY, 7))
    out = sends_of(faulty(request_message(keys, ClientRequest(b"op", 1, "c0"))))
    assert out[0].delay == 7


def test_drop_zero_is_identity_and_one_is_silent():
    base = ScenarioConfig(n=4, f=1, requests=2, seed=3)
    plain = run_scenario(base)
    zero = run_scenario(base.with_(faults=("2:drop:0",)))
    assert zero.requests == plain.requests and zero.sent == plain.sent
    assert zero.delivered == plain.delivered and zero.rounds == plain.rounds
    assert zero.dropped == {}

    def states(cfg):
        sim = Simulation(cfg)
        sim.inject(b"x", at=0)
        sim.run()
        return [n.protocol_state() for n in sim.nodes], sim.tap.delivered

    s_one, d_one = states(base.with_(faults=("3:drop:1",)))
    s_silent, d_silent = states(base.with_(faults=("3:silent",)))
    assert s_one == s_silent and d_one == d_silent


def test_silent_replica_pbft_still_commits():
    report = run_scenario(ScenarioConfig(n=4, f=1, faults=("3:silent",)))
    assert report.all_completed and report.view_changes == []


def test_wrong_result_consensus_node_loses_five_per_round():
    cfg = ScenarioConfig(protocol="SGPBFT", n=8, f=1, requests=4)
    node = Simulation(cfg).consensus()[1]
    report = run_scenario(cfg.with_(faults=(f"{node}:wrong_result",)))
    assert report.all_completed
    honest = run_scenario(cfg)
    assert [r["result"] for r in report.requests] == [r["result"] for r in honest.requests]
    assert report.final_scores[str(node)] == 100 - 5 * 4


def test_equivocating_master_triggers_view_change_and_penalty():
    cfg = ScenarioConfig(protocol="SGPBFT", n=8, f=1, seed=4)
    master = Simulation(cfg).consensus()[0]
    report = run_scenario(cfg.with_(faults=(f"{master}:equivocate",)))
    assert report.all_completed and report.view_changes
    assert {c for vc in report.view_changes for c in vc["convicted"]} == {master}
    # one conviction, and it judged the re-proposed request like an honest replica
    assert report.final_scores[str(master)] == 100 + 1 - 20
