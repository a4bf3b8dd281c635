"""Private set intersection for ID alignment.

The blinded mode is the classic semi-honest Diffie-Hellman PSI: each side
raises hashed IDs to a private exponent in a prime-order group, the other side
raises them again, and ``H(id)^(ab) == H(id)^(ba)`` identifies common IDs
without exposing the rest. The naive mode compares plain SHA-256 digests and
exists for tests and non-private deployments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import gmpy2

from .messages import BlindedIds, Control, IdList, MessageType, ProtocolMessage
from .paillier import RandomSource

SCALAR_BITS = 256


class EmptyIntersectionError(RuntimeError):
    """The parties share no IDs, so vertical training is impossible."""


_RFC3526_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1"
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245"
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D"
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D"
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9"
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)

_RFC3526_1536 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1"
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245"
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D"
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D"
    "670C354E4ABC9804F1746C08CA237327FFFFFFFFFFFFFFFF", 16)


@dataclass(frozen=True)
class PrimeOrderGroup:
    """Quadratic residues modulo a safe prime ``p = 2q + 1`` (order ``q``)."""

    p: int
    name: str

    @property
    def q(self) -> int:
        return (self.p - 1) // 2

    @property
    def width(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def hash_to_group(self, identifier: str) -> int:
        """Expand SHA-256 over a counter until an element other than 0/1 appears, then square."""
        data = identifier.encode("utf-8")
        nbytes = self.width + 16
        counter = 0
        while True:
            stream = b""
            block = 0
            while len(stream) < nbytes:
                stream += hashlib.sha256(
                    counter.to_bytes(4, "big") + block.to_bytes(4, "big") + data
                ).digest()
                block += 1
            x = int.from_bytes(stream[:nbytes], "big") % self.p
            y = int(gmpy2.powmod(x, 2, self.p))
            if y > 1:
                return y
            counter += 1

    def exp(self, element: int, scalar: int) -> int:
        return int(gmpy2.powmod(element, scalar, self.p))


MODP_2048 = PrimeOrderGroup(_RFC3526_2048, "modp2048")
MODP_1536 = PrimeOrderGroup(_RFC3526_1536, "modp1536")
GROUPS = {g.name: g for g in (MODP_2048, MODP_1536)}


def random_scalar(rng: RandomSource, group: PrimeOrderGroup, bits: int = SCALAR_BITS) -> int:
    bits = min(bits, group.q.bit_length() - 1)
    while True:
        k = rng.randbits(bits)
        if k > 1:
            return k


def _check_unique(ids: Sequence[str], who: str) -> None:
    if len(set(ids)) != len(ids):
        raise ValueError(f"{who} ID set contains duplicates")


@dataclass
class _Blinder:
    mode: str
    group: PrimeOrderGroup
    scalar: int = 0

    @property
    def width(self) -> int:
        return 32 if self.mode == "naive" else self.group.width

    def blind(self, ids: Iterable[str]) -> List[int]:
        if self.mode == "naive":
            return [int.from_bytes(hashlib.sha256(i.encode("utf-8")).digest(), "big") for i in ids]
        return [self.group.exp(self.group.hash_to_group(i), self.scalar) for i in ids]

    def reblind(self, elements: Iterable[int]) -> List[int]:
        if self.mode == "naive":
            return list(elements)
        return [self.group.exp(e, self.scalar) for e in elements]


def _make_blinder(mode: str, group: PrimeOrderGroup, rng: RandomSource) -> _Blinder:
    if mode not in ("naive", "blinded"):
        raise ValueError(f"unknown PSI mode {mode!r}")
    return _Blinder(mode, group, random_scalar(rng, group) if mode == "blinded" else 0)


@dataclass
class PsiGuestSession:
    """Guest half of the exchange; answers host messages."""

    ids: Sequence[str]
    mode: str = "blinded"
    group: PrimeOrderGroup = MODP_2048
    rng: RandomSource = field(default_factory=RandomSource)
    intersection: Optional[List[str]] = None

    def __post_init__(self) -> None:
        _check_unique(self.ids, "guest")
        self._blinder = _make_blinder(self.mode, self.group, self.rng)

    def handle(self, msg: ProtocolMessage, sender: int) -> ProtocolMessage:
        if msg.type is MessageType.PSI_BLINDED:
            doubled = self._blinder.reblind(msg.payload.elements)
            return ProtocolMessage(sender, MessageType.PSI_DOUBLE_BLINDED, BlindedIds(doubled, self._blinder.width))
        if msg.type is MessageType.PSI_REQUEST:
            order = list(self.ids)
            _shuffle(order, self.rng)
            return ProtocolMessage(sender, MessageType.PSI_BLINDED,
                                   BlindedIds(self._blinder.blind(order), self._blinder.width))
        if msg.type is MessageType.INTERSECTION:
            known = set(self.ids)
            missing = [i for i in msg.payload.ids if i not in known]
            if missing:
                raise ValueError(f"announced intersection contains unknown id {missing[0]!r}")
            self.intersection = list(msg.payload.ids)
            return ProtocolMessage(sender, MessageType.ACK, Control())
        raise ValueError(f"PSI guest cannot handle {msg.type.name}")


@dataclass
class PsiHostSession:
    ids: Sequence[str]
    mode: str = "blinded"
    group: PrimeOrderGroup = MODP_2048
    rng: RandomSource = field(default_factory=RandomSource)

    def __post_init__(self) -> None:
        _check_unique(self.ids, "host")
        self._blinder = _make_blinder(self.mode, self.group, self.rng)
        self._order = list(self.ids)
        _shuffle(self._order, self.rng)

    def first_message(self) -> BlindedIds:
        return BlindedIds(self._blinder.blind(self._order), self._blinder.width)

    def finish(self, doubled: BlindedIds, guest_blinded: BlindedIds) -> List[str]:
        if len(doubled.elements) != len(self._order):
            raise ValueError("guest returned the wrong number of double-blinded IDs")
        guest_doubled = set(self._blinder.reblind(guest_blinded.elements))
        common = [i for i, e in zip(self._order, doubled.elements) if e in guest_doubled]
        if not common:
            raise EmptyIntersectionError("host and guest ID sets do not intersect")
        return sorted(common)


def _shuffle(items: list, rng: RandomSource) -> None:
    for i in range(len(items) - 1, 0, -1):
        j = rng.randbelow(i + 1)
        items[i], items[j] = items[j], items[i]


def run_psi(channel, host_ids: Sequence[str], mode: str = "blinded",
            group: PrimeOrderGroup = MODP_2048, rng: Optional[RandomSource] = None) -> List[str]:
    """Host side of the exchange over a :class:`~stfl.transport.Channel`.

    The guest learns the result through a final INTERSECTION message.
    """
    session = PsiHostSession(host_ids, mode, group, rng or RandomSource())
    doubled = channel.request(MessageType.PSI_BLINDED, session.first_message()).payload
    guest_blinded = channel.request(MessageType.PSI_REQUEST, Control()).payload
    common = session.finish(doubled, guest_blinded)
    channel.request(MessageType.INTERSECTION, IdList(common))
    return common


def psi_intersect(host_ids: Iterable[str], guest_ids: Iterable[str], mode: str = "blinded",
                  group: PrimeOrderGroup = MODP_2048, rng: Optional[RandomSource] = None) -> List[str]:
    """Run both halves in memory and return the sorted common IDs."""
    host_ids, guest_ids = list(host_ids), list(guest_ids)
    rng = rng or RandomSource()
    if mode == "blinded" and (not host_ids or not guest_ids):
        raise EmptyIntersectionError("blinded PSI needs non-empty ID sets on both sides")
    guest = PsiGuestSession(guest_ids, mode, group, rng)
    host = PsiHostSession(host_ids, mode, group, rng)
    first = ProtocolMessage(0, MessageType.PSI_BLINDED, host.first_message())
    doubled = guest.handle(first, 1).payload
    guest_blinded = guest.handle(ProtocolMessage(0, MessageType.PSI_REQUEST, Control()), 1).payload
    return host.finish(doubled, guest_blinded)
