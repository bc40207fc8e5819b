"""Score-grouped PBFT (SG-PBFT).

Half of the nodes form the consensus set and run pre-prepare and prepare;
the other half are passive candidates that only apply finalized results.
The commit broadcast is replaced by a response phase: every prepared
consensus node sends its local result to the master, which finalizes once
enough identical results arrive and broadcasts the result, with the
responses as a certificate, to every node including candidates.

Scores start at 100 and move by +1 (judgment agrees with the final result),
-5 (judgment disagrees) and -20 (objective Byzantine evidence). Every
``rotation_period`` finalized requests the ``m`` lowest-scoring consensus
nodes swap places with the ``m`` best candidates.

Ties are broken by physical node id: among equal scores the lower id is
"higher" and the higher id is "lower".
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

from .core_types import Kind, KeyTable, NodeId, ProtocolMessage, digest_of, valid_request
from .pbft_engine import (
    ConfigError,
    Note,
    Replica,
    Send,
    Slot,
    ClientState,
)

INITIAL_SCORE = 100
REWARD = 1
PENALTY_WRONG = 5
PENALTY_BYZANTINE = 20
ROTATION_PERIOD = 50


def default_rotation_m(cn: int) -> int:
    return max(1, cn // 10)


def quorum_threshold(f: int, strict: bool = False) -> int:
    """Identical responses needed to finalize. ``strict`` reads the
    threshold as "more than 2f + 1"."""
    return 2 * f + 2 if strict else 2 * f + 1


@dataclass
class NodeSets:
    consensus: List[NodeId]
    candidates: List[NodeId]
    scores: Dict[NodeId, int]
    request_count: int = 0
    rotation_m: int = 1
    rotation_period: int = ROTATION_PERIOD

    @property
    def cn(self) -> int:
        return len(self.consensus)

    def universe(self) -> List[NodeId]:
        return sorted(self.consensus + self.candidates)

    def copy(self) -> "NodeSets":
        return NodeSets(list(self.consensus), list(self.candidates), dict(self.scores),
                        self.request_count, self.rotation_m, self.rotation_period)


def check_sizes(n_total: int, f: int) -> None:
    if n_total <= 0 or n_total % 2:
        raise ConfigError(f"SG-PBFT needs an even node count, got {n_total}")
    if n_total // 2 < 3 * f + 1:
        raise ConfigError(f"consensus set {n_total // 2} < 3f+1={3 * f + 1}")


def partition(n_total: int, f: int, seed: int, rotation_m: Optional[int] = None,
              rotation_period: int = ROTATION_PERIOD) -> NodeSets:
    check_sizes(n_total, f)
    order = list(range(n_total))
    random.Random(seed).shuffle(order)
    cn = n_total // 2
    m = default_rotation_m(cn) if rotation_m is None else rotation_m
    if m < 0:
        raise ConfigError("rotation_m must be non-negative")
    return NodeSets(
        consensus=order[:cn],
        candidates=order[cn:],
        scores={i: INITIAL_SCORE for i in order},
        rotation_m=m,
        rotation_period=rotation_period,
    )


def select_master(view: int, cn: int) -> int:
    """Index into the consensus list of the master for ``view``."""
    if cn <= 0:
        raise ValueError("consensus set is empty")
    return view % cn


# --- scoring and rotation -----------------------------------------------------


def score_deltas(consensus: Sequence[NodeId], final_result: bytes,
                 judgments: Mapping[NodeId, Optional[bytes]],
                 byzantine_evidence: Set[NodeId]) -> Dict[NodeId, int]:
    deltas: Dict[NodeId, int] = {}
    members = set(consensus)
    for node, judged in judgments.items():
        if node not in members or judged is None:
            continue
        deltas[node] = REWARD if judged == final_result else -PENALTY_WRONG
    for node in byzantine_evidence:
        deltas[node] = deltas.get(node, 0) - PENALTY_BYZANTINE
    return deltas


def apply_scores(sets: NodeSets, final_result: bytes, judgments: Mapping[NodeId, Optional[bytes]],
                 byzantine_evidence: Set[NodeId] = frozenset()) -> NodeSets:
    out = sets.copy()
    for node, delta in score_deltas(sets.consensus, final_result, judgments,
                                    byzantine_evidence).items():
        out.scores[node] += delta
    out.request_count += 1
    return out


def update_con_nodes(sets: NodeSets) -> NodeSets:
    """Swap the ``m`` lowest consensus nodes with the ``m`` best candidates."""
    out = sets.copy()
    out.request_count = 0
    m = min(sets.rotation_m, len(sets.candidates), len(sets.consensus))
    if m <= 0:
        return out
    scores = sets.scores
    leaving = sorted(sets.consensus, key=lambda i: (scores[i], -i))[:m]
    joining = sorted(sets.candidates, key=lambda i: (-scores[i], i))[:m]
    out.consensus = [i for i in sets.consensus if i not in leaving] + joining
    out.candidates = [i for i in sets.candidates if i not in joining] + leaving
    return out


# --- response collection -------------------------------------------------------


@dataclass
class MasterCollector:
    """Responses gathered by the master for one (view, seq)."""

    digest: bytes
    responses: Dict[bytes, Dict[NodeId, ProtocolMessage]] = field(default_factory=dict)
    judgments: Dict[NodeId, bytes] = field(default_factory=dict)
    finalized: Optional[bytes] = None

    def add(self, msg: ProtocolMessage) -> bool:
        if msg.sender in self.judgments or msg.digest != self.digest:
            return False
        self.judgments[msg.sender] = msg.result
        self.responses.setdefault(msg.result, {})[msg.sender] = msg
        return True


def sg_finalize(collector: MasterCollector, f: int, strict: bool = False
                ) -> Optional[Tuple[bytes, Tuple[ProtocolMessage, ...]]]:
    """Finalize at the first result with enough distinct responders.

    Returns ``(result, certificate)`` once, then ``None`` for every later call.
    """
    if collector.finalized is not None:
        return None
    need = quorum_threshold(f, strict)
    for result in sorted(collector.responses):
        voters = collector.responses[result]
        if len(voters) >= need:
            collector.finalized = result
            return result, tuple(voters[i] for i in sorted(voters))
    return None


def valid_certificate(keys: KeyTable, members: Sequence[NodeId], f: int, strict: bool,
                      view: int, seq: int, digest: bytes, result: bytes,
                      cert: Sequence[ProtocolMessage]) -> bool:
    member_set = set(members)
    seen = set()
    for resp in cert:
        if (resp.kind != Kind.RESPONSE or resp.view != view or resp.seq != seq
                or resp.digest != digest or resp.result != result
                or resp.sender not in member_set or resp.sender in seen
                or not keys.verify_message(resp)):
            return False
        seen.add(resp.sender)
    return len(seen) >= quorum_threshold(f, strict)


# --- replica ------------------------------------------------------------------


@dataclass
class SgSlot(Slot):
    local_result: Optional[bytes] = None
    collector: Optional[MasterCollector] = None


class SgReplica(Replica):
    protocol = "SGPBFT"

    handlers = {
        Kind.REQUEST: "_on_request",
        Kind.PRE_PREPARE: "_on_pre_prepare",
        Kind.PREPARE: "_on_prepare",
        Kind.RESPONSE: "_on_response",
        Kind.RESULT_BROADCAST: "_on_result_broadcast",
        Kind.VIEW_CHANGE: "_on_view_change",
    }

    def __init__(self, node_id: NodeId, consensus: Sequence[NodeId], n_total: int, f: int,
                 keys: KeyTable, timeout_ticks: int, app=None, strict_quorum: bool = False):
        super().__init__(node_id, tuple(consensus), f, keys, timeout_ticks, app)
        self.n_total = n_total
        self.strict_quorum = strict_quorum
        self.universe = tuple(range(n_total))
        self.applied: Dict[tuple, Tuple[bytes, int, int]] = {}

    @property
    def role(self) -> str:
        return "consensus" if self.is_member else "candidate"

    def set_consensus(self, consensus: Sequence[NodeId]) -> None:
        """Install a rotated consensus list; only called between rounds."""
        self.members = tuple(consensus)

    def _slot(self, key) -> SgSlot:
        slot = self.log.get(key)
        if slot is None:
            slot = self.log[key] = SgSlot()
        return slot

    def _propose(self, req_msg):
        actions = super()._propose(req_msg)
        slot = self.log[(self.view, self.max_seq)]
        slot.collector = MasterCollector(req_msg.digest)
        return actions

    def _on_prepared(self, slot: SgSlot) -> list:
        pp = slot.pre_prepare
        request = pp.body.request
        rid = request.rid
        result = self.done.get(rid)
        if result is None:
            result = self.app.execute(request)
        slot.local_result = result
        resp = self._sign(Kind.RESPONSE, view=pp.view, seq=pp.seq, digest=pp.digest, result=result)
        actions = []
        if rid in self.timers:
            actions.append(self._arm(rid))
        if self.is_master:
            slot.collector.add(resp)
            actions.extend(self._check_finalize(slot))
        else:
            actions.append(Send((self.master_of(pp.view),), resp))
        return actions

    def _on_response(self, msg: ProtocolMessage) -> list:
        if msg.sender not in self.members:
            return self._drop("response-from-candidate", msg)
        if msg.view != self.view or self.id != self.master_of(msg.view):
            return self._drop("not-master", msg)
        slot = self.log.get(msg.slot)
        if slot is None or slot.collector is None or msg.result is None:
            return self._drop("unknown-slot", msg)
        if not slot.collector.add(msg):
            return []
        actions = [Note("judgment", {"node": self.id, "view": msg.view, "seq": msg.seq,
                                     "responder": msg.sender})]
        actions.extend(self._check_finalize(slot))
        return actions

    def _check_finalize(self, slot: SgSlot) -> list:
        outcome = sg_finalize(slot.collector, self.f, self.strict_quorum)
        if outcome is None:
            return []
        result, cert = outcome
        pp = slot.pre_prepare
        body = pp.body
        reply = self._sign(Kind.REPLY, view=pp.view, seq=pp.seq, digest=pp.digest,
                           result=result, cert=cert)
        broadcast = self._sign(Kind.RESULT_BROADCAST, view=pp.view, seq=pp.seq, digest=pp.digest,
                               result=result, body=body, cert=cert)
        actions = [
            Note("finalized", {"node": self.id, "view": pp.view, "seq": pp.seq,
                               "rid": body.request.rid, "result": result}),
            Send((body.request.c,), reply),
            Send(tuple(i for i in self.universe if i != self.id), broadcast),
        ]
        actions.extend(self._apply(broadcast))
        return actions

    def _on_result_broadcast(self, msg: ProtocolMessage) -> list:
        body = msg.body
        if not valid_request(self.keys, body) or body.digest != msg.digest or msg.result is None:
            return self._drop("bad-body", msg)
        if body.request.rid in self.applied:
            return []
        if not valid_certificate(self.keys, self.members, self.f, self.strict_quorum,
                                 msg.view, msg.seq, msg.digest, msg.result, msg.cert):
            return self._drop("bad-certificate", msg)
        actions = []
        slot = self.log.get(msg.slot)
        if slot is not None and slot.pre_prepare is not None \
                and slot.pre_prepare.digest != msg.digest and msg.sender == self.master_of(msg.view):
            # the master signed two digests for one (view, seq)
            actions = self._accuse(msg.sender, msg.view, msg.seq)
        return actions + self._apply(msg)

    def _apply(self, msg: ProtocolMessage) -> list:
        request = msg.body.request
        rid = request.rid
        if rid in self.applied:
            return []
        self.applied[rid] = (msg.result, msg.view, msg.seq)
        self.app.apply(request, msg.result, msg.view, msg.seq)
        self.done[rid] = msg.result
        self.pending.pop(rid, None)
        rearm = self._disarm(rid)
        actions = [] if rearm is None else [rearm]
        return actions + [Note("applied", {"node": self.id, "rid": rid, "result": msg.result,
                                 "view": msg.view, "seq": msg.seq, "master": msg.sender})]

    def _on_duplicate_request(self, msg: ProtocolMessage) -> list:
        rid = msg.request.rid
        if not self.is_master or msg.seq <= self.replied_attempt.get(rid, 0):
            return []
        self.replied_attempt[rid] = msg.seq
        for slot in self.log.values():
            col = getattr(slot, "collector", None)
            if col is not None and col.finalized is not None \
                    and slot.pre_prepare.body.request.rid == rid:
                pp = slot.pre_prepare
                voters = col.responses[col.finalized]
                cert = tuple(voters[i] for i in sorted(voters))
                reply = self._sign(Kind.REPLY, view=pp.view, seq=pp.seq, digest=pp.digest,
                                   result=col.finalized, cert=cert)
                return [Send((msg.sender,), reply)]
        return []


def sg_init(n_total: int, f: int, seed: int, keys: Optional[KeyTable] = None,
            timeout_ticks: int = 44, apps=None, strict_quorum: bool = False,
            rotation_m: Optional[int] = None, rotation_period: int = ROTATION_PERIOD
            ) -> Tuple[List[SgReplica], NodeSets]:
    """Build all replicas and the initial seeded consensus/candidate split."""
    sets = partition(n_total, f, seed, rotation_m, rotation_period)
    if keys is None:
        keys = KeyTable.generate(list(range(n_total)) + ["c0"], seed)
    replicas = []
    for i in range(n_total):
        app = apps[i] if apps is not None else None
        replicas.append(SgReplica(i, sets.consensus, n_total, f, keys, timeout_ticks, app,
                                  strict_quorum))
    return replicas, sets


def sg_step(state: SgReplica, event) -> Tuple[SgReplica, list]:
    return state, state.step(event)


def sg_view_change(state: SgReplica, timeout) -> Tuple[SgReplica, list]:
    return state, state.step(timeout)


def sg_client_step(state: ClientState, reply: ProtocolMessage, keys: KeyTable,
                   consensus: Sequence[NodeId], f: int, strict: bool = False,
                   now: int = 0) -> ClientState:
    """Accept a master's REPLY only if its certificate checks out; every
    certified responder then counts as a replier for that result."""
    if reply.kind != Kind.REPLY or reply.result is None:
        return state
    digest = digest_of(state.request)
    if reply.digest != digest:
        return state
    if not valid_certificate(keys, consensus, f, strict, reply.view, reply.seq, digest,
                             reply.result, reply.cert):
        return state
    voters = state.replies.setdefault(reply.result, set())
    voters.update(r.sender for r in reply.cert)
    if state.completed_at is None and len(voters) >= state.quorum:
        state.completed_at = now
        state.result = reply.result
    return state
