"""Deterministic discrete-event network simulator.

Time is an integer tick. Events are processed in strict ``(tick, insertion
sequence)`` order, so a run is a pure function of its configuration.

Network model: each principal owns one outgoing link that transmits its
messages one at a time, ``per_message_overhead`` ticks each, in the order
they were emitted (destinations in list order). A message then travels for
the sampled latency. For a multicast starting at ``s`` the k-th destination
(0-based) receives at ``s + (k + 1) * overhead + latency``. With zero
overhead every leg costs exactly the latency.

A multicast under constant latency is kept as a single cursor in the event
queue, so the queue holds O(n) entries even when every node broadcasts.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from .config import ScenarioConfig
from .core_types import (
    PROTOCOL_KINDS,
    ClientRequest,
    Kind,
    KeyTable,
    Principal,
    ProtocolMessage,
    digest_of,
    request_message,
)
from .fault_models import wrap
from .pbft_engine import (
    ClientState,
    DigestApp,
    Note,
    PbftReplica,
    Send,
    SetTimer,
    Timeout,
    pbft_client_step,
)
from .sg_pbft_engine import (
    NodeSets,
    apply_scores,
    quorum_threshold,
    score_deltas,
    sg_client_step,
    sg_init,
    update_con_nodes,
)

logger = logging.getLogger(__name__)

CLIENT = "c0"

_CURSOR, _TIMER, _INJECT, _CLIENT_TIMER, _BARRIER = 0, 1, 2, 3, 4


class Timeline:
    """Priority queue of events keyed by (tick, insertion sequence)."""

    def __init__(self):
        self.queue: list = []
        self.now = 0
        self._seq = itertools.count()

    def push(self, at: int, kind: int, payload) -> None:
        heapq.heappush(self.queue, (at, next(self._seq), kind, payload))

    def pop(self):
        at, _, kind, payload = heapq.heappop(self.queue)
        self.now = at
        return kind, payload

    def peek_time(self) -> Optional[int]:
        return self.queue[0][0] if self.queue else None

    def __len__(self) -> int:
        return len(self.queue)


@dataclass
class Tap:
    """Per-kind message counters. ``sent`` counts every enqueued delivery."""

    sent: Counter = field(default_factory=Counter)
    delivered: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    drop_log: list = field(default_factory=list)

    @property
    def protocol_sent(self) -> int:
        return sum(self.sent[k.name] for k in PROTOCOL_KINDS)


@dataclass
class RequestRecord:
    index: int
    request: ClientRequest
    injected_at: int
    state: ClientState
    attempt: int = 0

    @property
    def completed_at(self) -> Optional[int]:
        return self.state.completed_at


@dataclass
class RunReport:
    scenario: dict
    status: str
    end_tick: int
    requests: List[dict]
    sent: Dict[str, int]
    delivered: Dict[str, int]
    dropped: Dict[str, int]
    protocol_messages_sent: int
    view_changes: List[dict]
    rounds: List[dict]
    rotations: List[dict]
    score_history: List[dict]
    final_scores: Optional[Dict[str, int]]
    final_consensus: Optional[List[int]]

    @property
    def protocol(self) -> str:
        return self.scenario["protocol"]

    @property
    def n(self) -> int:
        return self.scenario["n"]

    @property
    def f(self) -> int:
        return self.scenario["f"]

    @property
    def completed(self) -> List[dict]:
        return [r for r in self.requests if r["completed_at"] is not None]

    @property
    def all_completed(self) -> bool:
        return self.status == "complete"

    def to_text(self) -> str:
        """Structured text form: canonical JSON (sorted keys, one value per line)."""
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


class Simulation:
    """One scenario: replicas, the client, the network and (for SG-PBFT) the
    coordinator that owns scores and node sets."""

    def __init__(self, config: ScenarioConfig, app_factory: Optional[Callable] = None,
                 delivery_filter: Optional[Callable[[Principal, ProtocolMessage], bool]] = None,
                 on_complete: Optional[Callable[["Simulation", RequestRecord], None]] = None):
        config.validate()
        self.config = config
        self.latency = config.latency()
        self.rng = random.Random(config.seed)
        self.timeout = config.effective_timeout()
        self.client_timeout = 3 * self.timeout
        self.budget = config.effective_budget()
        self.delivery_filter = delivery_filter
        self.on_complete = on_complete
        self.strict = config.strict_quorum

        n, f = config.n, config.f
        self.keys = KeyTable.generate(list(range(n)) + [CLIENT], config.seed)
        apps = [app_factory(i) if app_factory else DigestApp() for i in range(n)]
        self.sets: Optional[NodeSets] = None
        if config.protocol == "PBFT":
            self.nodes = [PbftReplica(i, tuple(range(n)), f, self.keys, self.timeout, apps[i])
                          for i in range(n)]
        else:
            self.nodes, self.sets = sg_init(
                n, f, config.seed, self.keys, self.timeout, apps, self.strict,
                config.rotation_m, config.rotation_period)
        self.faulty = {spec.node: spec for spec in config.faults}
        self.steppers = []
        for node in self.nodes:
            spec = self.faulty.get(node.id)
            self.steppers.append(wrap(node.step, spec, self.keys, config.seed) if spec else node.step)

        self.timeline = Timeline()
        self.tap = Tap()
        self.link_free: Dict[Principal, int] = defaultdict(int)
        self.requests: List[RequestRecord] = []
        self._by_digest: Dict[bytes, RequestRecord] = {}
        self._next_t = 0
        self.client_view = 0
        self.view_changes: List[dict] = []
        self._views_adopted = set()

        # SG-PBFT coordinator state
        self.rounds: List[dict] = []
        self.rotations: List[dict] = []
        self.score_history: List[dict] = []
        self.pending_evidence: set = set()
        self._open_round: Optional[dict] = None
        self._registered = set()
        self._rotation_due = False
        # reconfiguration barrier: injections held until the rotation is safe
        self._since_rotation = 0
        self._held: List[bytes] = []
        self._barrier_deadline: Optional[int] = None
        self._applied_total = 0

    # --- membership helpers --------------------------------------------------

    @property
    def now(self) -> int:
        return self.timeline.now

    def consensus(self) -> tuple:
        if self.sets is None:
            return tuple(range(self.config.n))
        return tuple(self.sets.consensus)

    def _client_targets(self) -> tuple:
        # master of the client's best-known view first, then everyone else
        members = self.consensus()
        master = members[self.client_view % len(members)]
        return (master,) + tuple(m for m in members if m != master)

    # --- workload ------------------------------------------------------------

    def inject(self, o: bytes, at: Optional[int] = None) -> None:
        """Schedule a client request; ``at`` defaults to now."""
        self.timeline.push(self.now if at is None else at, _INJECT, o)

    def _do_inject(self, o: bytes) -> None:
        if self.sets is not None and (self._held or
                                      self._since_rotation >= self.sets.rotation_period):
            self._hold(o)
            return
        self._close_round()
        self._since_rotation += 1
        self._next_t = max(self._next_t + 1, self.now)
        request = ClientRequest(o, self._next_t, CLIENT)
        quorum = quorum_threshold(self.config.f, self.strict) if self.sets is not None \
            else 2 * self.config.f + 1
        record = RequestRecord(len(self.requests), request, self.now, ClientState(request, quorum))
        self.requests.append(record)
        self._by_digest[digest_of(request)] = record
        msg = request_message(self.keys, request)
        self._send(CLIENT, Send(self._client_targets(), msg))
        self.timeline.push(self.now + self.client_timeout, _CLIENT_TIMER, (record.index, 0))

    def _on_client_timer(self, index: int, attempt: int) -> None:
        record = self.requests[index]
        if record.state.completed or record.attempt != attempt:
            return
        record.attempt += 1
        msg = request_message(self.keys, record.request, record.attempt)
        self._send(CLIENT, Send(self._client_targets(), msg))
        # exponential backoff keeps a queued burst from flooding the replicas
        self.timeline.push(self.now + (self.client_timeout << record.attempt), _CLIENT_TIMER,
                           (index, record.attempt))

    def _client_receive(self, msg: ProtocolMessage) -> None:
        if msg.kind != Kind.REPLY or not self.keys.verify_message(msg):
            return
        record = self._by_digest.get(msg.digest)
        if record is None or record.state.completed:
            return
        self.client_view = max(self.client_view, msg.view)
        if self.sets is None:
            pbft_client_step(record.state, msg, self.now)
        else:
            sg_client_step(record.state, msg, self.keys, self.sets.consensus, self.config.f,
                           self.strict, self.now)
        if record.state.completed and self.on_complete is not None:
            self.on_complete(self, record)
        if record.state.completed and self._held:
            self._try_release()

    # --- network -------------------------------------------------------------

    def _send(self, sender: Principal, action: Send) -> None:
        dests = action.dests
        if not dests:
            return
        lat = self.latency
        o = lat.per_message_overhead
        start = max(self.now + action.delay, self.link_free[sender])
        self.link_free[sender] = start + o * len(dests)
        self.tap.sent[action.msg.kind.name] += len(dests)
        if lat.kind == "constant":
            cursor = [dests, action.msg, 0, start, o, lat.ticks, action.dropped, sender, None]
            self.timeline.push(start + o + lat.ticks, _CURSOR, cursor)
        else:
            times = sorted((start + (k + 1) * o + self.rng.randint(lat.lo, lat.hi), k)
                           for k in range(len(dests)))
            cursor = [dests, action.msg, 0, start, o, 0, action.dropped, sender, times]
            self.timeline.push(times[0][0], _CURSOR, cursor)

    def _advance_cursor(self, cursor) -> None:
        dests, msg, i, start, o, ticks, dropped, sender, times = cursor
        if times is None:
            pos = i
        else:
            pos = times[i][1]
        i += 1
        cursor[2] = i
        if i < len(dests):
            nxt = start + (i + 1) * o + ticks if times is None else times[i][0]
            self.timeline.push(nxt, _CURSOR, cursor)
        self._deliver(sender, dests[pos], msg, pos in dropped)

    def _deliver(self, sender, dest, msg: ProtocolMessage, lost: bool) -> None:
        kind = msg.kind.name
        if lost:
            self.tap.dropped[kind] += 1
            self.tap.drop_log.append((self.now, sender, dest, kind, "fault"))
            return
        if self.delivery_filter is not None and not self.delivery_filter(dest, msg):
            self.tap.dropped[kind] += 1
            self.tap.drop_log.append((self.now, sender, dest, kind, "filter"))
            return
        self.tap.delivered[kind] += 1
        if dest == CLIENT:
            self._client_receive(msg)
        else:
            self._perform(dest, self.steppers[dest](msg))

    def _perform(self, node: int, actions) -> None:
        for a in actions:
            if isinstance(a, Send):
                self._send(node, a)
            elif isinstance(a, SetTimer):
                self.timeline.push(self.now + a.after, _TIMER, (node, a.key))
            elif isinstance(a, Note):
                self._on_note(node, a)

    # --- coordinator -------------------------------------------------------------

    def _on_note(self, node: int, note: Note) -> None:
        data = note.data
        if note.kind == "view_change":
            self.view_changes.append({"tick": self.now, "node": node, "from": data["from"],
                                      "to": data["to"], "convicted": list(data["convicted"])})
            if data["to"] not in self._views_adopted:
                self._views_adopted.add(data["to"])
                if self.sets is not None:
                    self.pending_evidence.update(data["convicted"])
        elif self.sets is None:
            return
        elif note.kind == "evidence":
            self.pending_evidence.add(data["accused"])
        elif note.kind == "applied":
            self._applied_total += 1
            if self._held:
                self._try_release()
            if data["node"] == data["master"] or data["rid"] in self._registered:
                return
            self._registered.add(data["rid"])
            self._close_round()
            self._open_round = {"rid": data["rid"], "view": data["view"], "seq": data["seq"],
                                "result": data["result"], "master": data["master"],
                                "finalized_at": self.now}
            self._check_round_complete()
        elif note.kind == "judgment":
            self._check_round_complete()

    def _round_judgments(self, rnd: dict) -> dict:
        slot = self.nodes[rnd["master"]].log.get((rnd["view"], rnd["seq"]))
        if slot is None or slot.collector is None:
            return {}
        return dict(slot.collector.judgments)

    def _check_round_complete(self) -> None:
        rnd = self._open_round
        if rnd is None:
            return
        judged = self._round_judgments(rnd)
        if all(m in judged for m in self.sets.consensus):
            self._close_round()

    def _close_round(self) -> None:
        if self.sets is None:
            return
        rnd, self._open_round = self._open_round, None
        if rnd is None:
            return
        judgments = self._round_judgments(rnd)
        evidence = set(self.pending_evidence)
        self.pending_evidence.clear()
        deltas = score_deltas(self.sets.consensus, rnd["result"], judgments, evidence)
        self.sets = apply_scores(self.sets, rnd["result"], judgments, evidence)
        number = len(self.rounds) + 1
        self.rounds.append({
            "round": number,
            "rid": list(rnd["rid"]),
            "view": rnd["view"],
            "seq": rnd["seq"],
            "master": rnd["master"],
            "result": rnd["result"].hex(),
            "closed_at": self.now,
            "consensus": list(self.sets.consensus),
            "judgments": {str(k): v.hex() for k, v in sorted(judgments.items())},
            "evidence": sorted(evidence),
        })
        self.score_history.append({
            "round": number,
            "deltas": {str(k): v for k, v in sorted(deltas.items())},
            "scores": {str(k): self.sets.scores[k] for k in sorted(deltas)},
        })
        if self.sets.request_count >= self.sets.rotation_period:
            self._rotation_due = True

    def _hold(self, o: bytes) -> None:
        """Queue an injection behind a pending rotation.

        Rotation changes who votes and who validates certificates, so it waits
        until every node has applied every request issued so far. A node that
        never catches up (e.g. behind a lossy link) cannot stall the workload
        for more than one timeout after the last client request completes.
        """
        self._held.append(o)
        self._try_release()

    def _try_release(self, force: bool = False) -> None:
        if not self._held:
            return
        if any(not r.state.completed for r in self.requests):
            return
        settled = self._applied_total >= len(self.nodes) * len(self.requests)
        if not (settled or force):
            if self._barrier_deadline is None:
                self._barrier_deadline = self.now + self.timeout
                self.timeline.push(self._barrier_deadline, _BARRIER, None)
            return
        self._close_round()
        self._maybe_rotate()
        self._since_rotation = 0
        self._barrier_deadline = None
        held, self._held = self._held, []
        for o in held:
            self.timeline.push(self.now, _INJECT, o)

    def _maybe_rotate(self) -> None:
        if not self._rotation_due or any(not r.state.completed for r in self.requests):
            return
        self._rotation_due = False
        before = list(self.sets.consensus)
        self.sets = update_con_nodes(self.sets)
        for node in self.nodes:
            node.set_consensus(self.sets.consensus)
        self.rotations.append({
            "tick": self.now,
            "after_round": len(self.rounds),
            "out": [i for i in before if i not in self.sets.consensus],
            "in": [i for i in self.sets.consensus if i not in before],
            "consensus": list(self.sets.consensus),
        })

    def _settle_evidence(self) -> None:
        """Evidence raised after the last round closed still costs its -20."""
        if self.sets is None or not self.pending_evidence:
            return
        evidence = set(self.pending_evidence)
        self.pending_evidence.clear()
        deltas = score_deltas(self.sets.consensus, b"", {}, evidence)
        sets = self.sets.copy()
        for k, v in deltas.items():
            sets.scores[k] += v
        self.sets = sets
        self.score_history.append({
            "round": None,
            "evidence": sorted(evidence),
            "deltas": {str(k): v for k, v in sorted(deltas.items())},
            "scores": {str(k): self.sets.scores[k] for k in sorted(deltas)},
        })

    # --- main loop ---------------------------------------------------------------

    def run(self, until: Optional[int] = None) -> None:
        """Process events up to tick ``until`` (default: the tick budget)."""
        limit = self.budget if until is None else min(until, self.budget)
        timeline = self.timeline
        queue = timeline.queue
        pop = heapq.heappop
        steppers = self.steppers
        while queue and queue[0][0] <= limit:
            at, _, kind, payload = pop(queue)
            timeline.now = at
            if kind == _CURSOR:
                self._advance_cursor(payload)
            elif kind == _TIMER:
                node, key = payload
                self._perform(node, steppers[node](Timeout(key)))
            elif kind == _INJECT:
                self._do_inject(payload)
            elif kind == _BARRIER:
                if self._barrier_deadline == at:
                    self._try_release(force=True)
            else:
                self._on_client_timer(*payload)

    def finish(self) -> None:
        self._close_round()
        self._settle_evidence()
        self._maybe_rotate()

    def quiescent(self) -> bool:
        return not self.timeline.queue

    def report(self) -> RunReport:
        status = "complete" if all(r.state.completed for r in self.requests) else "incomplete"
        return RunReport(
            scenario=self.config.to_dict(),
            status=status,
            end_tick=self.now,
            requests=[
                {
                    "index": r.index,
                    "client": r.request.c,
                    "t": r.request.t,
                    "injected_at": r.injected_at,
                    "completed_at": r.completed_at,
                    "result": r.state.result.hex() if r.state.result is not None else None,
                }
                for r in self.requests
            ],
            sent=dict(sorted(self.tap.sent.items())),
            delivered=dict(sorted(self.tap.delivered.items())),
            dropped=dict(sorted(self.tap.dropped.items())),
            protocol_messages_sent=self.tap.protocol_sent,
            view_changes=self.view_changes,
            rounds=self.rounds,
            rotations=self.rotations,
            score_history=self.score_history,
            final_scores=None if self.sets is None
            else {str(k): v for k, v in sorted(self.sets.scores.items())},
            final_consensus=None if self.sets is None else list(self.sets.consensus),
        )

    # --- post-run inspection ---------------------------------------------------

    def applied_results(self) -> Dict[int, Dict[tuple, bytes]]:
        """Per node: request id -> result it applied to its state."""
        out = {}
        for node in self.nodes:
            if self.sets is None:
                out[node.id] = {rid: r for rid, r in node.done.items()}
            else:
                out[node.id] = {rid: v[0] for rid, v in node.applied.items()}
        return out


def default_workload(count: int) -> List[bytes]:
    return [f"op-{i}".encode() for i in range(count)]


def run_scenario(config: ScenarioConfig, workload: Optional[Sequence[bytes]] = None,
                 app_factory: Optional[Callable] = None,
                 delivery_filter: Optional[Callable] = None,
                 simulation: bool = False):
    """Run one scenario to quiescence or the tick budget.

    ``workload`` defaults to ``config.requests`` distinct operations. In
    sequential mode each request is injected when the previous one completes;
    in burst mode all are injected at tick 0. Returns the ``RunReport``, or
    ``(report, sim)`` when ``simulation`` is true.
    """
    ops = list(default_workload(config.requests) if workload is None else workload)
    queue = list(ops)

    def next_request(sim: Simulation, _record) -> None:
        if queue:
            sim.inject(queue.pop(0))

    sequential = config.workload_mode == "sequential"
    sim = Simulation(config, app_factory, delivery_filter,
                     on_complete=next_request if sequential else None)
    if sequential:
        if queue:
            sim.inject(queue.pop(0), at=0)
    else:
        for o in queue:
            sim.inject(o, at=0)
        queue.clear()
    sim.run()
    sim.finish()
    report = sim.report()
    if report.status == "complete" and len(report.requests) < len(ops):
        report.status = "incomplete"
    return (report, sim) if simulation else report


def transaction_delay(report: RunReport, request: int) -> Optional[int]:
    """Ticks from injection to client acceptance; ``None`` if incomplete."""
    for r in report.requests:
        if r["index"] == request:
            if r["completed_at"] is None:
                return None
            return r["completed_at"] - r["injected_at"]
    return None


def delays(report: RunReport) -> List[int]:
    return [r["completed_at"] - r["injected_at"] for r in report.completed]


def throughput(report: RunReport) -> float:
    """Completed requests per 1000 ticks."""
    done = report.completed
    if not done:
        return 0.0
    first = min(r["injected_at"] for r in report.requests)
    last = max(r["completed_at"] for r in done)
    span = last - first
    if span <= 0:
        return 0.0
    return len(done) / span * 1000.0
