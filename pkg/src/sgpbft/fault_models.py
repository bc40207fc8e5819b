"""Byzantine behaviour injectors.

An injector wraps an honest replica's ``step`` and rewrites only the
``Send`` actions it returns; the replica's own state transitions are never
touched.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional

from .core_types import Kind, KeyTable, NodeId, ProtocolMessage, digest_of, flip, encode_value
from .pbft_engine import Send


class Behavior(str, Enum):
    SILENT = "silent"
    EQUIVOCATE = "equivocate"
    WRONG_RESULT = "wrong_result"
    DELAY = "delay"
    DROP = "drop"


@dataclass(frozen=True)
class FaultSpec:
    node: NodeId
    behavior: Behavior
    param: Optional[float] = None  # ticks for DELAY, probability for DROP

    def __post_init__(self):
        object.__setattr__(self, "behavior", Behavior(self.behavior))
        if self.behavior is Behavior.DELAY:
            if self.param is None or int(self.param) != self.param or self.param < 0:
                raise ValueError("delay fault needs a non-negative integer tick count")
            object.__setattr__(self, "param", int(self.param))
        elif self.behavior is Behavior.DROP:
            if self.param is None or not 0.0 <= float(self.param) <= 1.0:
                raise ValueError("drop fault needs a probability in [0, 1]")
            object.__setattr__(self, "param", float(self.param))
        elif self.param is not None:
            raise ValueError(f"{self.behavior.value} fault takes no parameter")

    @classmethod
    def parse(cls, text: str) -> "FaultSpec":
        """``"3:silent"``, ``"0:equivocate"``, ``"2:delay:5"``, ``"1:drop:0.25"``."""
        parts = text.strip().split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad fault spec {text!r}")
        node = int(parts[0])
        param = float(parts[2]) if len(parts) == 3 else None
        return cls(node, Behavior(parts[1].strip().lower()), param)

    def __str__(self) -> str:
        if self.param is None:
            return f"{self.node}:{self.behavior.value}"
        return f"{self.node}:{self.behavior.value}:{self.param}"


_RESULT_KINDS = (Kind.RESPONSE, Kind.REPLY, Kind.RESULT_BROADCAST)


def _equivocal_twin(keys: KeyTable, pp: ProtocolMessage) -> ProtocolMessage:
    """A second, master-signed pre-prepare for the same slot with another digest.

    The client's signature cannot be forged, so the twin's body keeps the
    original tag over an altered operation; it is still validly signed by
    the master, which is what makes the pair a proof of equivocation.
    """
    orig = pp.body
    altered = dataclasses.replace(orig.request, o=orig.request.o + b"#equivocation")
    body = ProtocolMessage(Kind.REQUEST, orig.view, orig.seq, digest_of(altered), orig.sender,
                           request=altered, auth=orig.auth)
    return keys.sign_message(Kind.PRE_PREPARE, pp.sender, view=pp.view, seq=pp.seq,
                             digest=body.digest, body=body)


class FaultyStep:
    """Callable with the same contract as ``Replica.step``."""

    def __init__(self, step: Callable, spec: FaultSpec, keys: KeyTable, seed: int = 0):
        self.step = step
        self.spec = spec
        self.keys = keys
        self.rng = random.Random(encode_value((seed, spec.node, "fault")))

    def __call__(self, event) -> list:
        return self.rewrite(self.step(event))

    def rewrite(self, actions) -> list:
        behavior = self.spec.behavior
        out: List = []
        for a in actions:
            if not isinstance(a, Send):
                out.append(a)
                continue
            if behavior is Behavior.SILENT:
                continue
            if behavior is Behavior.EQUIVOCATE:
                if a.msg.kind == Kind.PRE_PREPARE:
                    half = len(a.dests) // 2
                    if half:
                        out.append(dataclasses.replace(a, dests=a.dests[:half]))
                    out.append(dataclasses.replace(a, dests=a.dests[half:],
                                                   msg=_equivocal_twin(self.keys, a.msg)))
                else:
                    out.append(a)
            elif behavior is Behavior.WRONG_RESULT:
                msg = a.msg
                if msg.kind in _RESULT_KINDS and msg.result is not None:
                    lie = self.keys.sign_message(
                        msg.kind, msg.sender, view=msg.view, seq=msg.seq, digest=msg.digest,
                        body=msg.body, result=flip(msg.result), cert=msg.cert)
                    a = dataclasses.replace(a, msg=lie)
                out.append(a)
            elif behavior is Behavior.DELAY:
                out.append(dataclasses.replace(a, delay=a.delay + self.spec.param))
            elif behavior is Behavior.DROP:
                p = self.spec.param
                lost = frozenset(i for i in range(len(a.dests)) if self.rng.random() < p)
                out.append(dataclasses.replace(a, dropped=a.dropped | lost) if lost else a)
        return out


def wrap(engine_step: Callable, spec: FaultSpec, keys: KeyTable, seed: int = 0) -> FaultyStep:
    return FaultyStep(engine_step, spec, keys, seed)
