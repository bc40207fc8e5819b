"""Baseline three-phase PBFT replica.

A replica is an event-driven state machine: ``step(event)`` consumes one
delivered message or fired timer and returns the actions it wants performed
(``Send``, ``SetTimer``, ``Note``). The replica never touches the network or
the clock itself, so the same object can be driven by the simulator or by a
unit test feeding hand-built messages.

Message accounting per consensus instance (fault-free, n nodes):

* pre-prepare: master -> every other node, ``n - 1``
* prepare: every replica except the master -> every other node, ``(n - 1)**2``
* commit: every node -> every other node, ``n * (n - 1)``

A node's own prepare/commit counts toward its quorum without a self-send.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .core_types import (
    ClientRequest,
    Kind,
    KeyTable,
    NodeId,
    Principal,
    ProtocolMessage,
    SeqNum,
    View,
    digest_of,
    valid_request,
)

logger = logging.getLogger(__name__)

RequestId = Tuple[str, int]


class ConfigError(ValueError):
    """Scenario or engine parameters violate a protocol precondition."""


# --- actions ---------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    dests: Tuple[Principal, ...]
    msg: ProtocolMessage
    delay: int = 0
    # positions in ``dests`` that are lost in transit (still counted as sent)
    dropped: frozenset = frozenset()


@dataclass(frozen=True)
class SetTimer:
    key: tuple
    after: int


@dataclass(frozen=True)
class Note:
    """Observability record consumed by the simulator (logs, scoring)."""

    kind: str
    data: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class Timeout:
    key: tuple


Action = object  # Send | SetTimer | Note


def sends_of(actions) -> List[Send]:
    return [a for a in actions if isinstance(a, Send)]


# --- application hook --------------------------------------------------------


class DigestApp:
    """Default replicated service: the result of ``o`` is a hash of ``o``."""

    def __init__(self):
        self.applied: Dict[RequestId, Tuple[bytes, View, SeqNum]] = {}

    def execute(self, request: ClientRequest) -> bytes:
        return hashlib.sha256(b"exec:" + request.o).digest()[:16]

    def apply(self, request: ClientRequest, result: bytes, view: View, seq: SeqNum) -> None:
        self.applied[request.rid] = (result, view, seq)


# --- configuration and state ---------------------------------------------------


@dataclass(frozen=True)
class PbftConfig:
    n_nodes: int
    f: int
    timeout_ticks: int = 32

    def __post_init__(self):
        if self.f < 0 or self.n_nodes < 1:
            raise ConfigError("n_nodes must be positive and f non-negative")
        if self.n_nodes < 3 * self.f + 1:
            raise ConfigError(f"n_nodes={self.n_nodes} < 3f+1={3 * self.f + 1}")
        if self.timeout_ticks <= 0:
            raise ConfigError("timeout_ticks must be positive")


@dataclass
class Slot:
    """Log entry for one (view, seq)."""

    pre_prepare: Optional[ProtocolMessage] = None
    prepares: Dict[bytes, Set[NodeId]] = field(default_factory=lambda: defaultdict(set))
    commits: Dict[bytes, Set[NodeId]] = field(default_factory=lambda: defaultdict(set))
    prepared: bool = False
    committed: bool = False
    executed: bool = False
    result: Optional[bytes] = None


class Replica:
    """Machinery shared by PBFT and SG-PBFT replicas: authentication,
    pre-prepare/prepare handling, timers and the simplified view change."""

    protocol = "PBFT"

    def __init__(self, node_id: NodeId, members: Tuple[NodeId, ...], f: int, keys: KeyTable,
                 timeout_ticks: int, app=None):
        self.id = node_id
        self.members = tuple(members)
        self.f = f
        self.keys = keys
        self.timeout_ticks = timeout_ticks
        self.app = app if app is not None else DigestApp()

        self.view: View = 0
        self.log: Dict[Tuple[View, SeqNum], Slot] = {}
        self.max_seq: SeqNum = 0
        self.assigned: Dict[RequestId, Tuple[View, SeqNum]] = {}
        self.pending: Dict[RequestId, ProtocolMessage] = {}
        self.done: Dict[RequestId, bytes] = {}
        self.replied_attempt: Dict[RequestId, int] = {}
        self.timers: Dict[RequestId, int] = {}
        self._timer_gen = 0
        self._watchdog_live = False
        self.seen_pp: Dict[Tuple[View, SeqNum], Dict[bytes, ProtocolMessage]] = {}
        self.evidence: Set[NodeId] = set()
        self.vc_votes: Dict[View, Dict[NodeId, ProtocolMessage]] = defaultdict(dict)
        self.vc_target: View = 0
        self.future: Dict[View, List[ProtocolMessage]] = defaultdict(list)
        self.drops: Counter = Counter()
        self._dispatch = {kind: getattr(self, name) for kind, name in self.handlers.items()}

    # --- roles -----------------------------------------------------------

    def master_of(self, view: View) -> NodeId:
        return self.members[view % len(self.members)]

    @property
    def master(self) -> NodeId:
        return self.master_of(self.view)

    @property
    def is_master(self) -> bool:
        return self.id == self.master

    @property
    def is_member(self) -> bool:
        return self.id in self.members

    @property
    def prepare_quorum(self) -> int:
        return 2 * self.f

    def others(self) -> Tuple[NodeId, ...]:
        return tuple(m for m in self.members if m != self.id)

    def protocol_state(self) -> dict:
        """Deep copy of every protocol-relevant field (diagnostics excluded)."""
        state = {k: v for k, v in vars(self).items() if k not in ("drops", "keys", "app", "_dispatch")}
        return copy.deepcopy(state)

    # --- entry point -----------------------------------------------------

    def step(self, event) -> list:
        if isinstance(event, Timeout):
            return self._on_timeout(event.key)
        msg = event
        if not self.keys.verify_message(msg):
            return self._drop("bad-auth", msg)
        handler = self._dispatch.get(msg.kind)
        if handler is None:
            return self._drop("unexpected-kind", msg)
        return handler(msg)

    handlers = {
        Kind.REQUEST: "_on_request",
        Kind.PRE_PREPARE: "_on_pre_prepare",
        Kind.PREPARE: "_on_prepare",
        Kind.COMMIT: "_on_commit",
        Kind.VIEW_CHANGE: "_on_view_change",
    }

    def _drop(self, reason: str, msg: Optional[ProtocolMessage] = None) -> list:
        self.drops[reason] += 1
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("node %s drops %s (%s)", self.id, msg.kind.name if msg else "-", reason)
        return []

    def _slot(self, key) -> Slot:
        slot = self.log.get(key)
        if slot is None:
            slot = self.log[key] = Slot()
        return slot

    def _sign(self, kind: Kind, **fields) -> ProtocolMessage:
        return self.keys.sign_message(kind, self.id, **fields)

    # --- timers ------------------------------------------------------------

    # One watchdog covers every pending request, as in classic PBFT: it is
    # restarted whenever a watched request makes progress, so queueing under
    # load does not fire it but a master that stalls everything does.

    def _arm(self, rid: RequestId, restart: bool = True) -> Optional[SetTimer]:
        self.timers[rid] = self._timer_gen
        if self._watchdog_live and not restart:
            return None
        return self._restart_watchdog(rid)

    def _restart_watchdog(self, rid: RequestId) -> SetTimer:
        self._timer_gen += 1
        self._watchdog_live = True
        return SetTimer(("req", rid, self._timer_gen), self.timeout_ticks)

    def _disarm(self, rid: RequestId) -> Optional[SetTimer]:
        self.timers.pop(rid, None)
        if self.timers:
            return self._restart_watchdog(min(self.timers))
        self._timer_gen += 1
        self._watchdog_live = False
        return None

    def _on_timeout(self, key) -> list:
        if key[0] == "req":
            _, _rid, gen = key
            if gen != self._timer_gen:
                return []
            self._watchdog_live = False
            stuck = [r for r in self.timers if r not in self.done]
            self.timers.clear()
            if not stuck:
                return []
            return self._start_view_change(max(self.view, self.vc_target) + 1)
        if key[0] == "vc":
            target = key[1]
            if self.view >= target or self.vc_target != target or not self.pending:
                return []
            return self._start_view_change(target + 1)
        return []

    # --- request / pre-prepare / prepare -------------------------------------

    def _on_request(self, msg: ProtocolMessage) -> list:
        if not self.is_member:
            return self._drop("not-member", msg)
        if not valid_request(self.keys, msg):
            return self._drop("bad-request", msg)
        rid = msg.request.rid
        if rid in self.done:
            return self._on_duplicate_request(msg)
        actions = []
        if rid not in self.pending:
            self.pending[rid] = msg
            actions.append(self._arm(rid, restart=False))
        if self.is_master and self.vc_target <= self.view and rid not in self.assigned:
            actions.extend(self._propose(msg))
        return actions

    def _on_duplicate_request(self, msg: ProtocolMessage) -> list:
        return []

    def _propose(self, req_msg: ProtocolMessage) -> list:
        self.max_seq += 1
        key = (self.view, self.max_seq)
        self.assigned[req_msg.request.rid] = key
        pp = self._sign(Kind.PRE_PREPARE, view=self.view, seq=self.max_seq,
                        digest=req_msg.digest, body=req_msg)
        slot = self._slot(key)
        slot.pre_prepare = pp
        self.seen_pp.setdefault(key, {})[pp.digest] = pp
        return [Send(self.others(), pp)]

    def _record_seen_pp(self, pp: ProtocolMessage) -> list:
        seen = self.seen_pp.setdefault(pp.slot, {})
        if pp.digest in seen:
            return []
        seen[pp.digest] = pp
        if len(seen) > 1:
            return self._accuse(pp.sender, pp.view, pp.seq)
        return []

    def _accuse(self, accused: NodeId, view: View, seq: SeqNum) -> list:
        """Record proof of equivocation; a proven master is voted out at once."""
        if accused in self.evidence:
            return []
        self.evidence.add(accused)
        actions = [Note("evidence", {"node": self.id, "accused": accused, "view": view,
                                     "seq": seq})]
        if view == self.view and accused == self.master:
            actions.extend(self._start_view_change(self.view + 1))
        return actions

    def _on_pre_prepare(self, msg: ProtocolMessage) -> list:
        if not self.is_member:
            return self._drop("not-member", msg)
        if msg.sender != self.master_of(msg.view):
            return self._drop("not-master", msg)
        notes = self._record_seen_pp(msg)
        if msg.view < self.view:
            return notes + self._drop("stale-view", msg)
        if msg.view > self.view:
            self.future[msg.view].append(msg)
            return notes
        slot = self._slot(msg.slot)
        if slot.pre_prepare is not None:
            if slot.pre_prepare.digest != msg.digest:
                return notes + self._drop("conflicting-pre-prepare", msg)
            return notes
        if self.is_master:
            return notes + self._drop("own-pre-prepare", msg)
        if not valid_request(self.keys, msg.body) or msg.body.digest != msg.digest:
            # only a faulty master signs a proposal it could not have validated
            self._drop("bad-body", msg)
            return notes + self._start_view_change(self.view + 1)
        slot.pre_prepare = msg
        self.max_seq = max(self.max_seq, msg.seq)
        rid = msg.body.request.rid
        actions = list(notes)
        if rid not in self.done:
            self.pending.setdefault(rid, msg.body)
            actions.append(self._arm(rid))
        prepare = self._sign(Kind.PREPARE, view=msg.view, seq=msg.seq, digest=msg.digest)
        slot.prepares[msg.digest].add(self.id)
        actions.append(Send(self.others(), prepare))
        actions.extend(self._check_prepared(slot))
        return actions

    def _on_prepare(self, msg: ProtocolMessage) -> list:
        if not self.is_member or msg.sender not in self.members:
            return self._drop("not-member", msg)
        if msg.sender == self.master_of(msg.view):
            return self._drop("prepare-from-master", msg)
        if msg.view < self.view:
            return self._drop("stale-view", msg)
        if msg.view > self.view:
            self.future[msg.view].append(msg)
            return []
        slot = self._slot(msg.slot)
        voters = slot.prepares[msg.digest]
        if msg.sender in voters:
            return []
        voters.add(msg.sender)
        return self._check_prepared(slot)

    def _check_prepared(self, slot: Slot) -> list:
        pp = slot.pre_prepare
        if pp is None or slot.prepared:
            return []
        if len(slot.prepares[pp.digest]) < self.prepare_quorum:
            return []
        slot.prepared = True
        return self._on_prepared(slot)

    # --- PBFT-specific commit phase ------------------------------------------

    @property
    def commit_quorum(self) -> int:
        return 2 * self.f + 1

    def _on_prepared(self, slot: Slot) -> list:
        pp = slot.pre_prepare
        actions = []
        rid = pp.body.request.rid
        if rid in self.timers:
            actions.append(self._arm(rid))
        commit = self._sign(Kind.COMMIT, view=pp.view, seq=pp.seq, digest=pp.digest)
        slot.commits[pp.digest].add(self.id)
        actions.append(Send(self.others(), commit))
        actions.extend(self._check_committed(slot))
        return actions

    def _on_commit(self, msg: ProtocolMessage) -> list:
        if not self.is_member or msg.sender not in self.members:
            return self._drop("not-member", msg)
        if msg.view < self.view:
            return self._drop("stale-view", msg)
        if msg.view > self.view:
            self.future[msg.view].append(msg)
            return []
        slot = self._slot(msg.slot)
        voters = slot.commits[msg.digest]
        if msg.sender in voters:
            return []
        voters.add(msg.sender)
        return self._check_committed(slot)

    def _check_committed(self, slot: Slot) -> list:
        pp = slot.pre_prepare
        if pp is None or not slot.prepared or slot.executed:
            return []
        if len(slot.commits[pp.digest]) < self.commit_quorum:
            return []
        slot.committed = True
        request = pp.body.request
        rid = request.rid
        if rid in self.done:
            result = self.done[rid]
        else:
            result = self.app.execute(request)
            self.app.apply(request, result, pp.view, pp.seq)
            self.done[rid] = result
        slot.executed = True
        slot.result = result
        self.pending.pop(rid, None)
        rearm = self._disarm(rid)
        self.replied_attempt[rid] = max(self.replied_attempt.get(rid, 0), 0)
        reply = self._sign(Kind.REPLY, view=pp.view, seq=pp.seq, digest=pp.digest, result=result)
        actions = [] if rearm is None else [rearm]
        return actions + [
            Note("executed", {"node": self.id, "rid": rid, "result": result,
                              "view": pp.view, "seq": pp.seq}),
            Send((request.c,), reply),
        ]

    def _resend_reply(self, msg: ProtocolMessage) -> list:
        rid = msg.request.rid
        if msg.seq <= self.replied_attempt.get(rid, -1):
            return []
        self.replied_attempt[rid] = msg.seq
        for (v, n), slot in self.log.items():
            pp = slot.pre_prepare
            if slot.executed and pp is not None and pp.body.request.rid == rid:
                reply = self._sign(Kind.REPLY, view=v, seq=n, digest=pp.digest, result=slot.result)
                return [Send((msg.sender,), reply)]
        return []

    # --- simplified view change ----------------------------------------------

    def _view_change_cert(self) -> Tuple[ProtocolMessage, ...]:
        items = [self.pending[rid] for rid in sorted(self.pending)]
        for key in sorted(self.seen_pp):
            if key[0] < self.view:
                continue
            for d in sorted(self.seen_pp[key]):
                pp = self.seen_pp[key][d]
                body = pp.body
                rid = body.request.rid if body is not None and body.request is not None else None
                if rid not in self.done:
                    items.append(pp)
        return tuple(items)

    def _start_view_change(self, target: View) -> list:
        if not self.is_member or target <= max(self.view, self.vc_target):
            return []
        self.vc_target = target
        vc = self._sign(Kind.VIEW_CHANGE, view=target, cert=self._view_change_cert())
        self.vc_votes[target][self.id] = vc
        actions = [
            Note("view_change_vote", {"node": self.id, "target": target}),
            Send(self.others(), vc),
            SetTimer(("vc", target), self.timeout_ticks),
        ]
        actions.extend(self._check_view_change(target))
        return actions

    def _on_view_change(self, msg: ProtocolMessage) -> list:
        if not self.is_member or msg.sender not in self.members:
            return self._drop("not-member", msg)
        target = msg.view
        if target <= self.view:
            return self._drop("stale-view-change", msg)
        votes = self.vc_votes[target]
        if msg.sender in votes:
            return []
        votes[msg.sender] = msg
        actions = []
        for item in msg.cert:
            if item.kind == Kind.PRE_PREPARE and item.sender == self.master_of(item.view) \
                    and self.keys.verify_message(item):
                actions.extend(self._record_seen_pp(item))
                self.max_seq = max(self.max_seq, item.seq)
        if len(votes) >= self.f + 1 and target > self.vc_target:
            actions.extend(self._start_view_change(target))
        actions.extend(self._check_view_change(target))
        return actions

    def _check_view_change(self, target: View) -> list:
        votes = self.vc_votes.get(target, {})
        if target <= self.view or self.id not in votes or len(votes) < 2 * self.f + 1:
            return []
        return self._adopt_view(target)

    def _adopt_view(self, target: View) -> list:
        old = self.view
        convicted = sorted({self.master_of(v) for v in range(old, target)})
        votes = self.vc_votes.pop(target)
        self.view = target
        self.vc_target = max(self.vc_target, target)
        for v in [v for v in self.vc_votes if v <= target]:
            del self.vc_votes[v]
        self.assigned.clear()
        actions: list = [Note("view_change", {"node": self.id, "from": old, "to": target,
                                              "convicted": convicted})]

        self._watchdog_live = False
        for rid in sorted(self.pending):
            timer = self._arm(rid, restart=False)
            if timer is not None:
                actions.append(timer)

        if self.is_master:
            proposals: Dict[RequestId, ProtocolMessage] = dict(self.pending)
            for sender in sorted(votes):
                for item in votes[sender].cert:
                    req = item if item.kind == Kind.REQUEST else item.body
                    if not valid_request(self.keys, req):
                        continue
                    proposals.setdefault(req.request.rid, req)
            for rid in sorted(proposals):
                if rid in self.done and rid not in self._reported_pending(votes):
                    continue
                actions.extend(self._propose(proposals[rid]))

        for v in sorted(v for v in self.future if v <= target):
            buffered = self.future.pop(v)
            if v == target:
                for m in buffered:
                    actions.extend(self.step(m))
        return actions

    @staticmethod
    def _reported_pending(votes) -> Set[RequestId]:
        out = set()
        for msg in votes.values():
            for item in msg.cert:
                req = item if item.kind == Kind.REQUEST else item.body
                if req is not None and req.request is not None:
                    out.add(req.request.rid)
        return out


class PbftReplica(Replica):
    """PBFT replica: executes on committed-local and replies to the client."""

    def _on_duplicate_request(self, msg: ProtocolMessage) -> list:
        return self._resend_reply(msg)


# --- client ----------------------------------------------------------------


@dataclass
class ClientState:
    request: ClientRequest
    quorum: int
    replies: Dict[bytes, Set[Principal]] = field(default_factory=dict)
    completed_at: Optional[int] = None
    result: Optional[bytes] = None

    @property
    def completed(self) -> bool:
        return self.completed_at is not None


def pbft_client_step(state: ClientState, reply: ProtocolMessage, now: int = 0) -> ClientState:
    """Record one REPLY; completion at the first result with ``quorum`` repliers."""
    if reply.kind != Kind.REPLY or reply.digest != digest_of(state.request) or reply.result is None:
        return state
    voters = state.replies.setdefault(reply.result, set())
    voters.add(reply.sender)
    if state.completed_at is None and len(voters) >= state.quorum:
        state.completed_at = now
        state.result = reply.result
    return state


# --- functional facade -------------------------------------------------------


def pbft_init(config: PbftConfig, node_id: NodeId, keys: Optional[KeyTable] = None,
              app=None) -> PbftReplica:
    if not 0 <= node_id < config.n_nodes:
        raise ConfigError(f"node id {node_id} outside 0..{config.n_nodes - 1}")
    if keys is None:
        keys = KeyTable.generate(list(range(config.n_nodes)) + ["c0"])
    return PbftReplica(node_id, tuple(range(config.n_nodes)), config.f, keys,
                       config.timeout_ticks, app)


def pbft_step(state: Replica, event) -> Tuple[Replica, list]:
    """Advance ``state`` by one event. Returns the state and emitted actions."""
    actions = state.step(event)
    return state, actions


def pbft_view_change(state: Replica, timeout: Timeout) -> Tuple[Replica, list]:
    """Deliver an expired request timer; starts the view change if still pending."""
    return pbft_step(state, timeout)
