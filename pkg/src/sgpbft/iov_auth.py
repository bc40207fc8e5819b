"""Vehicle identity authentication on top of SG-PBFT.

The service provider (SP) sets up a toy elliptic curve, registers vehicles
under pseudo-IDs and acts as the consensus client; roadside units (RSUs)
are the replicas. Each RSU checks a submitted credential inside its
execution hook, and a finalized ACCEPT appends the pseudo-ID to that RSU's
ledger.

Curve: ``y^2 = x^3 + b`` over ``p = 6q - 1`` with ``p, q`` prime. Because
``p = 2 (mod 3)`` the curve has ``p + 1 = 6q`` points, and ``P = 6R`` for any
affine ``R`` generates the subgroup of prime order ``q``. Parameters are a
deterministic function of the seed. This is a toy (``p`` about 2^61) and
offers no real security.

Credential: ``h = H1(ID || t)`` is the pseudo-ID and ``S = (e, s)`` is a
Schnorr signature by the SP over ``h || T``, checkable with ``P_pub``.
``H2`` is defined for completeness only; the password is stored salted and
hashed but plays no further part.
"""

from __future__ import annotations

import hashlib
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from sympy import isprime

from .config import ScenarioConfig
from .core_types import ClientRequest, encode_value
from .simnet import Simulation

logger = logging.getLogger(__name__)

Point = Optional[Tuple[int, int]]  # None is the point at infinity

ACCEPT = b"ACCEPT"
REJECT = b"REJECT"
_MAGIC = b"AUTH1"
_CRED = struct.Struct(">QQQQ")  # h, T, e, s
GROUP_BITS = 58


class RegistrationError(ValueError):
    pass


# --- curve arithmetic ----------------------------------------------------------


def _add(p: int, a: int, P1: Point, P2: Point) -> Point:
    if P1 is None:
        return P2
    if P2 is None:
        return P1
    x1, y1 = P1
    x2, y2 = P2
    if x1 == x2:
        if (y1 + y2) % p == 0:
            return None
        lam = (3 * x1 * x1 + a) * pow(2 * y1, -1, p) % p
    else:
        lam = (y2 - y1) * pow(x2 - x1, -1, p) % p
    x3 = (lam * lam - x1 - x2) % p
    return x3, (lam * (x1 - x3) - y1) % p


def _mul(p: int, a: int, k: int, P: Point) -> Point:
    acc: Point = None
    while k:
        if k & 1:
            acc = _add(p, a, acc, P)
        P = _add(p, a, P, P)
        k >>= 1
    return acc


def on_curve(p: int, a: int, b: int, P: Point) -> bool:
    if P is None:
        return True
    x, y = P
    return (y * y - (x * x * x + a * x + b)) % p == 0


@dataclass(frozen=True)
class SystemParams:
    p: int
    q: int
    a: int
    b: int
    P: Tuple[int, int]
    P_pub: Tuple[int, int]

    def mul(self, k: int, P: Point) -> Point:
        return _mul(self.p, self.a, k, P)

    def add(self, P1: Point, P2: Point) -> Point:
        return _add(self.p, self.a, P1, P2)

    def nonsingular(self) -> bool:
        return (4 * self.a ** 3 + 27 * self.b ** 2) % self.p != 0

    def H1(self, data: bytes) -> int:
        """Bytes to Z_q^*."""
        return int.from_bytes(hashlib.sha256(b"H1" + data).digest(), "big") % (self.q - 1) + 1

    def H2(self, point: Point) -> int:
        """Curve points to Z_q^*."""
        return int.from_bytes(hashlib.sha256(b"H2" + encode_value(point)).digest(),
                              "big") % (self.q - 1) + 1


def _find_primes(rng: random.Random) -> Tuple[int, int]:
    q = rng.getrandbits(GROUP_BITS) | (1 << (GROUP_BITS - 1)) | 1
    while not (isprime(q) and isprime(6 * q - 1)):
        q += 2
    return 6 * q - 1, q


def sp_init(seed: int) -> Tuple[SystemParams, int]:
    """Deterministic curve parameters and the SP private key ``P_pri``."""
    rng = random.Random(encode_value(("sp-init", seed)))
    p, q = _find_primes(rng)
    b = rng.randrange(1, p)
    cube_root_exp = (2 * p - 1) // 3
    while True:
        y = rng.randrange(1, p)
        x = pow((y * y - b) % p, cube_root_exp, p)
        P = _mul(p, 0, 6, (x, y))
        if P is not None:
            break
    sk = rng.randrange(1, q)
    params = SystemParams(p, q, 0, b, P, _mul(p, 0, sk, P))
    return params, sk


# --- credentials ---------------------------------------------------------------


@dataclass(frozen=True)
class VehicleCredential:
    h: int  # pseudo-ID
    T: int  # registration tick
    S: Tuple[int, int]  # Schnorr (e, s)

    def encode(self) -> bytes:
        return _MAGIC + _CRED.pack(self.h, self.T, self.S[0], self.S[1])

    @classmethod
    def decode(cls, raw: bytes) -> "VehicleCredential":
        if len(raw) != len(_MAGIC) + _CRED.size or not raw.startswith(_MAGIC):
            raise ValueError("malformed credential")
        h, T, e, s = _CRED.unpack(raw[len(_MAGIC):])
        return cls(h, T, (e, s))


def _signed_bytes(h: int, T: int) -> bytes:
    return encode_value((h, T))


def _challenge(params: SystemParams, R: Point, m: bytes) -> int:
    return int.from_bytes(hashlib.sha256(b"schnorr" + encode_value(R) + m).digest(),
                          "big") % params.q


def issue(params: SystemParams, sk: int, h: int, T: int) -> Tuple[int, int]:
    m = _signed_bytes(h, T)
    k = int.from_bytes(hashlib.sha256(b"nonce" + encode_value((sk, m))).digest(),
                       "big") % (params.q - 1) + 1
    e = _challenge(params, params.mul(k, params.P), m)
    return e, (k + e * sk) % params.q


def verify_credential(params: SystemParams, h: int, T: int, S) -> bool:
    """Total: any malformed input is simply invalid."""
    try:
        e, s = S
        if not (0 <= e < params.q and 0 <= s < params.q) or not 0 < h < params.q or T < 0:
            return False
        R = params.add(params.mul(s, params.P), params.mul(params.q - e, params.P_pub))
        return R is not None and e == _challenge(params, R, _signed_bytes(h, T))
    except (TypeError, ValueError):
        return False


class ServiceProvider:
    """Registrar holding the private key and the real-ID to pseudo-ID map."""

    def __init__(self, params: SystemParams, sk: int, seed: int = 0):
        self.params = params
        self.sk = sk
        self.rng = random.Random(encode_value(("sp-registry", seed)))
        self.registry: Dict[bytes, int] = {}
        self.passwords: Dict[bytes, Tuple[bytes, bytes]] = {}

    def register(self, ID: bytes, PW: bytes, now: int) -> VehicleCredential:
        if not ID:
            raise RegistrationError("empty vehicle ID")
        if ID in self.registry:
            raise RegistrationError(f"vehicle {ID!r} already registered")
        t = self.rng.getrandbits(64)
        h = self.params.H1(ID + t.to_bytes(8, "big"))
        salt = self.rng.getrandbits(128).to_bytes(16, "big")
        self.passwords[ID] = (salt, hashlib.sha256(salt + PW).digest())
        self.registry[ID] = h
        return VehicleCredential(h, now, issue(self.params, self.sk, h, now))


def register_vehicle(sp: ServiceProvider, ID: bytes, PW: bytes, now: int = 0) -> VehicleCredential:
    return sp.register(ID, PW, now)


# --- ledger and RSU execution hook ---------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    pseudo_id: int
    T: int
    view: int
    seq: int

    def line(self) -> str:
        return f"{self.pseudo_id:016x}, {self.T}, {self.view}, {self.seq}"


class Ledger:
    """Append-only; pseudo-IDs are unique."""

    def __init__(self):
        self._entries: List[LedgerEntry] = []
        self._ids = set()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, pseudo_id: int) -> bool:
        return pseudo_id in self._ids

    @property
    def entries(self) -> Tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def append(self, entry: LedgerEntry) -> None:
        if entry.pseudo_id in self._ids:
            raise ValueError(f"pseudo-id {entry.pseudo_id:x} already on the ledger")
        self._ids.add(entry.pseudo_id)
        self._entries.append(entry)

    def to_text(self) -> str:
        return "".join(e.line() + "\n" for e in self._entries)


class RsuApp:
    """Replicated service run by each RSU."""

    def __init__(self, params: SystemParams):
        self.params = params
        self.ledger = Ledger()

    def execute(self, request: ClientRequest) -> bytes:
        try:
            cred = VehicleCredential.decode(request.o)
        except ValueError:
            return REJECT
        if cred.h in self.ledger or not verify_credential(self.params, cred.h, cred.T, cred.S):
            return REJECT
        return ACCEPT

    def apply(self, request: ClientRequest, result: bytes, view: int, seq: int) -> None:
        if result != ACCEPT:
            return
        cred = VehicleCredential.decode(request.o)
        if cred.h not in self.ledger:
            self.ledger.append(LedgerEntry(cred.h, cred.T, view, seq))


@dataclass
class AuthOutcome:
    pseudo_id: int
    accepted: Optional[bool]  # None when consensus did not finish
    view: Optional[int] = None
    seq: Optional[int] = None
    completed_at: Optional[int] = None


class AuthNetwork:
    """An SG-PBFT scenario whose replicas are RSUs running ``RsuApp``."""

    def __init__(self, params: SystemParams, config: ScenarioConfig):
        if config.protocol != "SGPBFT":
            config = config.with_(protocol="SGPBFT")
        self.params = params
        self.apps = [RsuApp(params) for _ in range(config.n)]
        self.sim = Simulation(config.validate(), app_factory=lambda i: self.apps[i])
        # each submission gets a fresh allowance on top of the current tick
        self.allowance = config.effective_budget()

    @property
    def now(self) -> int:
        return self.sim.now

    def authenticate(self, cred: VehicleCredential) -> AuthOutcome:
        sim = self.sim
        sim.budget = sim.now + self.allowance
        index = len(sim.requests)
        sim.inject(cred.encode())
        sim.run()
        if index >= len(sim.requests):
            return AuthOutcome(cred.h, None)
        state = sim.requests[index].state
        if not state.completed:
            return AuthOutcome(cred.h, None)
        applied = sim.nodes[self.honest()[0]].applied.get(state.request.rid)
        view, seq = (applied[1], applied[2]) if applied else (None, None)
        return AuthOutcome(cred.h, state.result == ACCEPT, view, seq, state.completed_at)

    def finish(self):
        self.sim.finish()
        return self.sim.report()

    def honest(self) -> List[int]:
        return [i for i in range(len(self.apps)) if i not in self.sim.faulty]

    def ledger(self) -> Ledger:
        """The ledger held by the lowest-numbered honest RSU."""
        return self.apps[self.honest()[0]].ledger


def authenticate(params: SystemParams, cred: VehicleCredential, network: AuthNetwork) -> AuthOutcome:
    return network.authenticate(cred)


def forge(params: SystemParams, cred: VehicleCredential, rng: random.Random) -> VehicleCredential:
    """Same pseudo-ID and tick with a random signature."""
    return VehicleCredential(cred.h, cred.T, (rng.randrange(params.q), rng.randrange(params.q)))


@dataclass
class DemoResult:
    outcomes: List[Tuple[str, AuthOutcome]]
    ledger_text: str
    honest_ledgers_agree: bool
    report: object = field(repr=False, default=None)

    def transcript(self) -> str:
        lines = []
        for name, out in self.outcomes:
            verdict = {True: "ACCEPT", False: "REJECT", None: "NO-DECISION"}[out.accepted]
            lines.append(f"{name}: pseudo-id {out.pseudo_id:016x} {verdict}")
        lines.append(f"ledger entries: {self.ledger_text.count(chr(10))}")
        return "\n".join(lines) + "\n"


def run_demo(config: ScenarioConfig) -> DemoResult:
    """Register ``auth_vehicles`` vehicles plus ``auth_forged`` forgeries and
    push every credential through consensus, forgeries last."""
    params, sk = sp_init(config.seed)
    sp = ServiceProvider(params, sk, config.seed)
    total = config.auth_vehicles + config.auth_forged
    net = AuthNetwork(params, config.with_(requests=max(total, 1)))
    rng = random.Random(encode_value(("forge", config.seed)))
    outcomes = []
    for i in range(config.auth_vehicles):
        cred = sp.register(f"vehicle-{i}".encode(), f"pw-{i}".encode(), net.now)
        outcomes.append((f"vehicle-{i}", net.authenticate(cred)))
    for j in range(config.auth_forged):
        genuine = sp.register(f"forged-{j}".encode(), b"", net.now)
        outcomes.append((f"forged-{j}", net.authenticate(forge(params, genuine, rng))))
    report = net.finish()
    texts = {net.apps[i].ledger.to_text() for i in net.honest()}
    return DemoResult(outcomes, net.ledger().to_text(), len(texts) == 1, report)
