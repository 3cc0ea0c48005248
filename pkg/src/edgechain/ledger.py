"""Transactions, blocks, and the hash-linked chain.

Canonical wire format (fixed so digests are bit-exact across runs and
platforms):

* integers are big-endian fixed width (nonce, gas fields, amounts and the
  PoW nonce are 8 bytes; firmware versions 4 bytes; tags 1 byte),
* addresses are 20 raw bytes, digests 32 raw bytes,
* variable-length byte fields carry a 4-byte big-endian length prefix,
* the transaction kind is selected by one tag byte
  (Transfer=0, ContractCall=1, Migrate=2, PermissionUpdate=3),
* a transaction's signing pre-image is its encoding without the signature;
  the sealed encoding (used for the transaction hash) appends it,
* a header's consensus proof is tagged 0 (PoW nonce) or 1 (PoS signature)
  and is the last encoded field, so PoS headers are signed over the
  proof-less prefix.

The root of an empty transaction list is 32 zero bytes, which makes the
all-zero genesis header self-consistent.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence, Union

DIGEST_LEN = 32
ADDRESS_LEN = 20
ZERO_DIGEST = b"\x00" * DIGEST_LEN
ZERO_ADDRESS = b"\x00" * ADDRESS_LEN

TAG_TRANSFER = 0
TAG_CONTRACT_CALL = 1
TAG_MIGRATE = 2
TAG_PERMISSION_UPDATE = 3

PROOF_TAG_POW = 0
PROOF_TAG_POS = 1


# ---------------------------------------------------------------------------
# errors

class LedgerError(Exception):
    pass


class TxValidationError(LedgerError):
    """Base for transaction admission failures."""


class BadSignature(TxValidationError):
    pass


class BadNonce(TxValidationError):
    pass


class InsufficientFunds(TxValidationError):
    pass


class GasLimitTooLow(TxValidationError):
    pass


class ChainError(LedgerError):
    """Chain structural failure, annotated with the offending height."""

    def __init__(self, message: str, height: int):
        super().__init__(f"{message} (height {height})")
        self.height = height


class BrokenLink(ChainError):
    pass


class BadHeight(ChainError):
    pass


class BadTxRoot(ChainError):
    pass


class BadProof(ChainError):
    pass


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class Transfer:
    to: bytes
    amount: int

    def __post_init__(self):
        _check_address(self.to)


@dataclass(frozen=True)
class ContractCall:
    method_id: int


@dataclass(frozen=True)
class Migrate:
    params: bytes = b""


@dataclass(frozen=True)
class PermissionUpdate:
    target: bytes
    allow: bool

    def __post_init__(self):
        _check_address(self.target)


TxKind = Union[Transfer, ContractCall, Migrate, PermissionUpdate]


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    nonce: int
    kind: TxKind
    payload: bytes = b""
    gas_limit: int = 0
    gas_price: int = 0
    signature: bytes = b""

    def __post_init__(self):
        _check_address(self.sender)


@dataclass(frozen=True)
class PowProof:
    nonce: int = 0


@dataclass(frozen=True)
class PosProof:
    signature: bytes


ConsensusProof = Union[PowProof, PosProof]


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    tx_root: bytes
    timestamp: int
    producer: bytes
    consensus_proof: ConsensusProof = PowProof(0)

    def __post_init__(self):
        _check_digest(self.prev_hash)
        _check_digest(self.tx_root)
        _check_address(self.producer)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()


@dataclass
class Account:
    address: bytes
    balance: int = 0
    nonce: int = 0
    stake: int = 0
    stake_age: int = 0

    def copy(self) -> "Account":
        return Account(self.address, self.balance, self.nonce, self.stake, self.stake_age)


def _check_address(value: bytes) -> None:
    if len(value) != ADDRESS_LEN:
        raise ValueError(f"address must be {ADDRESS_LEN} bytes, got {len(value)}")


def _check_digest(value: bytes) -> None:
    if len(value) != DIGEST_LEN:
        raise ValueError(f"digest must be {DIGEST_LEN} bytes, got {len(value)}")


# ---------------------------------------------------------------------------
# canonical encoding

def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def _u32(value: int) -> bytes:
    return struct.pack(">I", value)


def _var(data: bytes) -> bytes:
    return _u32(len(data)) + data


def encode_kind(kind: TxKind) -> bytes:
    if isinstance(kind, Transfer):
        return bytes([TAG_TRANSFER]) + kind.to + _u64(kind.amount)
    if isinstance(kind, ContractCall):
        return bytes([TAG_CONTRACT_CALL, kind.method_id & 0xFF])
    if isinstance(kind, Migrate):
        return bytes([TAG_MIGRATE]) + _var(kind.params)
    if isinstance(kind, PermissionUpdate):
        return bytes([TAG_PERMISSION_UPDATE]) + kind.target + bytes([1 if kind.allow else 0])
    raise TypeError(f"unknown transaction kind: {kind!r}")


def tx_signing_preimage(tx: Transaction) -> bytes:
    return (
        tx.sender
        + _u64(tx.nonce)
        + encode_kind(tx.kind)
        + _var(tx.payload)
        + _u64(tx.gas_limit)
        + _u64(tx.gas_price)
    )


def encode_transaction(tx: Transaction) -> bytes:
    """Sealed encoding: signing pre-image plus the signature."""
    return tx_signing_preimage(tx) + _var(tx.signature)


def encode_proof(proof: ConsensusProof) -> bytes:
    if isinstance(proof, PowProof):
        return bytes([PROOF_TAG_POW]) + _u64(proof.nonce)
    if isinstance(proof, PosProof):
        return bytes([PROOF_TAG_POS]) + _var(proof.signature)
    raise TypeError(f"unknown consensus proof: {proof!r}")


def header_signing_preimage(header: BlockHeader) -> bytes:
    """Header encoding without the consensus proof (what a PoS producer signs)."""
    return (
        _u64(header.height)
        + header.prev_hash
        + header.tx_root
        + _u64(header.timestamp)
        + header.producer
    )


def encode_header(header: BlockHeader) -> bytes:
    return header_signing_preimage(header) + encode_proof(header.consensus_proof)


def canonical_encode(item: Union[Transaction, BlockHeader]) -> bytes:
    if isinstance(item, Transaction):
        return encode_transaction(item)
    if isinstance(item, BlockHeader):
        return encode_header(item)
    raise TypeError(f"cannot canonically encode {type(item).__name__}")


def tx_hash(tx: Transaction) -> bytes:
    return sha256(encode_transaction(tx))


def hash_block(header: BlockHeader) -> bytes:
    return sha256(encode_header(header))


def tx_root(transactions: Sequence[Transaction]) -> bytes:
    """SHA-256 over the concatenated transaction digests; zero for no txs."""
    if not transactions:
        return ZERO_DIGEST
    return sha256(b"".join(tx_hash(tx) for tx in transactions))


# ---------------------------------------------------------------------------
# signing

def sign_transaction(tx: Transaction, secret: bytes, scheme) -> Transaction:
    return replace(tx, signature=scheme.sign(secret, tx_signing_preimage(tx)))


def transfer_amount(tx: Transaction) -> int:
    return tx.kind.amount if isinstance(tx.kind, Transfer) else 0


def verify_transaction(
    tx: Transaction,
    account: Account,
    schedule,
    public_keys: Mapping[bytes, bytes],
    scheme,
) -> None:
    """Admission check against the sender's current account state.

    Raises the first failed check: BadSignature, BadNonce,
    InsufficientFunds, then GasLimitTooLow.
    """
    public_key = public_keys.get(tx.sender)
    if public_key is None or not scheme.verify(
        public_key, tx_signing_preimage(tx), tx.signature
    ):
        raise BadSignature(f"signature check failed for {tx.sender.hex()}")
    if tx.nonce != account.nonce:
        raise BadNonce(f"expected nonce {account.nonce}, got {tx.nonce}")
    required = tx.gas_limit * tx.gas_price + transfer_amount(tx)
    if account.balance < required:
        raise InsufficientFunds(f"balance {account.balance} < required {required}")
    if tx.gas_limit < schedule.base_tx:
        raise GasLimitTooLow(f"gas limit {tx.gas_limit} < base cost {schedule.base_tx}")


# ---------------------------------------------------------------------------
# chain

ProofChecker = Callable[[BlockHeader], bool]


def genesis_block() -> Block:
    header = BlockHeader(
        height=0,
        prev_hash=ZERO_DIGEST,
        tx_root=ZERO_DIGEST,
        timestamp=0,
        producer=ZERO_ADDRESS,
        consensus_proof=PowProof(0),
    )
    return Block(header=header, transactions=())


def append_block(chain: Sequence[Block], block: Block, check_proof: ProofChecker) -> list[Block]:
    """Return chain + block after link, height, root, and proof checks."""
    tip = chain[-1]
    height = block.header.height
    if block.header.prev_hash != hash_block(tip.header):
        raise BrokenLink("prev_hash does not match tip digest", height)
    if height != tip.header.height + 1:
        raise BadHeight(f"expected height {tip.header.height + 1}", height)
    if tx_root(block.transactions) != block.header.tx_root:
        raise BadTxRoot("tx_root does not match transactions", height)
    if not check_proof(block.header):
        raise BadProof("consensus proof invalid", height)
    return list(chain) + [block]


def validate_chain(chain: Sequence[Block], check_proof: ProofChecker) -> None:
    """Replay append_block checks from genesis; raise on the first failure."""
    if not chain:
        raise BadHeight("empty chain has no genesis", 0)
    gen = chain[0]
    if (
        gen.header.height != 0
        or gen.header.prev_hash != ZERO_DIGEST
        or gen.header.timestamp != 0
    ):
        raise BadHeight("genesis must have height 0, zero prev_hash, timestamp 0", 0)
    if tx_root(gen.transactions) != gen.header.tx_root:
        raise BadTxRoot("genesis tx_root does not match transactions", 0)
    prefix: list[Block] = [gen]
    for block in chain[1:]:
        prefix = append_block(prefix, block, check_proof)


# ---------------------------------------------------------------------------
# JSON serialization (hex-encoded byte fields, lowercase, no prefix)

def kind_to_json(kind: TxKind) -> dict:
    if isinstance(kind, Transfer):
        return {"type": "transfer", "to": kind.to.hex(), "amount": kind.amount}
    if isinstance(kind, ContractCall):
        return {"type": "contract_call", "method_id": kind.method_id}
    if isinstance(kind, Migrate):
        return {"type": "migrate", "params": kind.params.hex()}
    if isinstance(kind, PermissionUpdate):
        return {"type": "permission_update", "target": kind.target.hex(), "allow": kind.allow}
    raise TypeError(f"unknown transaction kind: {kind!r}")


def kind_from_json(data: dict) -> TxKind:
    t = data["type"]
    if t == "transfer":
        return Transfer(to=bytes.fromhex(data["to"]), amount=int(data["amount"]))
    if t == "contract_call":
        return ContractCall(method_id=int(data["method_id"]))
    if t == "migrate":
        return Migrate(params=bytes.fromhex(data["params"]))
    if t == "permission_update":
        return PermissionUpdate(target=bytes.fromhex(data["target"]), allow=bool(data["allow"]))
    raise ValueError(f"unknown transaction kind tag: {t}")


def tx_to_json(tx: Transaction) -> dict:
    return {
        "sender": tx.sender.hex(),
        "nonce": tx.nonce,
        "kind": kind_to_json(tx.kind),
        "payload": tx.payload.hex(),
        "gas_limit": tx.gas_limit,
        "gas_price": tx.gas_price,
        "signature": tx.signature.hex(),
    }


def tx_from_json(data: dict) -> Transaction:
    return Transaction(
        sender=bytes.fromhex(data["sender"]),
        nonce=int(data["nonce"]),
        kind=kind_from_json(data["kind"]),
        payload=bytes.fromhex(data["payload"]),
        gas_limit=int(data["gas_limit"]),
        gas_price=int(data["gas_price"]),
        signature=bytes.fromhex(data["signature"]),
    )


def proof_to_json(proof: ConsensusProof) -> dict:
    if isinstance(proof, PowProof):
        return {"type": "pow", "nonce": proof.nonce}
    return {"type": "pos", "signature": proof.signature.hex()}


def proof_from_json(data: dict) -> ConsensusProof:
    if data["type"] == "pow":
        return PowProof(nonce=int(data["nonce"]))
    if data["type"] == "pos":
        return PosProof(signature=bytes.fromhex(data["signature"]))
    raise ValueError(f"unknown proof tag: {data['type']}")


def block_to_json(block: Block) -> dict:
    return {
        "height": block.header.height,
        "prev_hash": block.header.prev_hash.hex(),
        "tx_root": block.header.tx_root.hex(),
        "timestamp": block.header.timestamp,
        "producer": block.header.producer.hex(),
        "consensus_proof": proof_to_json(block.header.consensus_proof),
        "transactions": [tx_to_json(tx) for tx in block.transactions],
    }


def block_from_json(data: dict) -> Block:
    header = BlockHeader(
        height=int(data["height"]),
        prev_hash=bytes.fromhex(data["prev_hash"]),
        tx_root=bytes.fromhex(data["tx_root"]),
        timestamp=int(data["timestamp"]),
        producer=bytes.fromhex(data["producer"]),
        consensus_proof=proof_from_json(data["consensus_proof"]),
    )
    return Block(header=header, transactions=tuple(tx_from_json(t) for t in data["transactions"]))
