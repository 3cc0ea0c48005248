"""Block-production legitimacy: PoW mining, PoS selection, quorum, fork choice."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

from .ledger import (
    Block,
    BlockHeader,
    PosProof,
    PowProof,
    encode_proof,
    hash_block,
    header_signing_preimage,
)

MODE_POW = "pow"
MODE_POS = "pos"

MAX_TARGET = 1 << 256


class DifficultyZeroError(ValueError):
    pass


class EmptyStakeSetError(ValueError):
    pass


class VotesExceedNodesError(ValueError):
    pass


class NoCandidatesError(ValueError):
    pass


@dataclass(frozen=True)
class ConsensusConfig:
    mode: str = MODE_POW
    difficulty: int = 16
    block_reward: int = 10
    target_block_interval: int = 10


# StakeSet entries: (address, stake, age-in-blocks). Order matters for
# selection ties, so callers must pass a deterministic order.
StakeSet = Sequence[tuple[bytes, int, int]]


def pow_target(difficulty: int) -> int:
    """Threshold = floor(2^256 / difficulty); a digest wins if below it."""
    if difficulty == 0:
        raise DifficultyZeroError("difficulty must be >= 1")
    return MAX_TARGET // difficulty


def digest_value(digest: bytes) -> int:
    return int.from_bytes(digest, "big")


def pow_verify(header: BlockHeader, difficulty: int) -> bool:
    return digest_value(hash_block(header)) < pow_target(difficulty)


def pow_mine(
    template: BlockHeader, difficulty: int, max_iterations: int
) -> Optional[tuple[int, bytes]]:
    """Scan nonces 0..max_iterations-1 and return the first (nonce, digest)
    whose sealed-header digest beats the target, or None if exhausted.

    The scan is sequential; a parallel split over nonce ranges must still
    return the minimum winning nonce to match this result.
    """
    target = pow_target(difficulty)
    prefix = header_signing_preimage(template)
    for nonce in range(max_iterations):
        digest = hashlib.sha256(prefix + encode_proof(PowProof(nonce))).digest()
        if digest_value(digest) < target:
            return nonce, digest
    return None


def seal_pow(template: BlockHeader, nonce: int) -> BlockHeader:
    return replace(template, consensus_proof=PowProof(nonce))


def seal_pos(template: BlockHeader, secret: bytes, scheme) -> BlockHeader:
    signature = scheme.sign(secret, header_signing_preimage(template))
    return replace(template, consensus_proof=PosProof(signature))


def pos_select(stakes: StakeSet, seed: int, epoch: int) -> bytes:
    """Weighted draw over stake x (1 + age), seeded by hash(seed || epoch).

    Zero-age stakes stay selectable through the +1; zero-stake entries never
    win.  The draw walks cumulative weights in list order and returns the
    first address whose cumulative weight exceeds the drawn value.
    """
    weights = [stake * (1 + age) for _, stake, age in stakes]
    total = sum(weights)
    if total <= 0:
        raise EmptyStakeSetError("total stake weight must be positive")
    material = seed.to_bytes(8, "big") + epoch.to_bytes(8, "big")
    r = int.from_bytes(hashlib.sha256(material).digest(), "big") % total
    cumulative = 0
    for (address, _, _), weight in zip(stakes, weights):
        cumulative += weight
        if r < cumulative:
            return address
    raise AssertionError("unreachable: cumulative weights cover the draw range")


def finality_check(votes: int, n: int) -> bool:
    """True iff votes > 2n/3 in exact arithmetic (strict inequality)."""
    if n < 1:
        raise ValueError("node count must be >= 1")
    if votes < 0:
        raise ValueError("votes must be >= 0")
    if votes > n:
        raise VotesExceedNodesError(f"{votes} votes among {n} nodes")
    return 3 * votes > 2 * n


def fork_choice(candidates: Sequence[Sequence[Block]]) -> Sequence[Block]:
    """Longest chain wins; ties go to the lexicographically smaller tip digest."""
    if not candidates:
        raise NoCandidatesError("no candidate chains")
    return min(candidates, key=lambda c: (-len(c), hash_block(c[-1].header)))


def make_proof_checker(config: ConsensusConfig, public_keys: Mapping[bytes, bytes], scheme):
    """Header proof predicate for append/validate under the configured mode."""
    if config.mode == MODE_POW:
        def check(header: BlockHeader) -> bool:
            return isinstance(header.consensus_proof, PowProof) and pow_verify(
                header, config.difficulty
            )
        return check

    def check(header: BlockHeader) -> bool:
        proof = header.consensus_proof
        if not isinstance(proof, PosProof):
            return False
        public_key = public_keys.get(header.producer)
        if public_key is None:
            return False
        return scheme.verify(public_key, header_signing_preimage(header), proof.signature)

    return check
