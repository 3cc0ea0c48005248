"""Gas-metered smart-contract state machine.

Covers device registration, firmware version gating, activity logging,
transaction-quota policing with penalties, and epoch resource distribution
(reimbursements plus grants).  Execution is a deterministic transition from
(world state, transaction) to (world state', receipt).

Gas accounting: every transaction pays base_tx plus per_payload_byte for
each payload byte, plus the method surcharge from the schedule.  All gas is
charged before the operation body runs, so a revert inside the body never
changes the metered amount.  Running past the transaction's gas limit
cancels the call and hands the full escrow to the block producer.

Revert discipline: operation bodies are check-then-effect, so a revert
leaves the contract state untouched except for log entries the operation
explicitly mandates (a version rejection records a Rejected activity entry
carrying the update URL event).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Union

from .ledger import (
    Account,
    ContractCall,
    Migrate,
    PermissionUpdate,
    Transaction,
    Transfer,
    tx_hash,
)

METHOD_REGISTER = 1
METHOD_SUBMIT_DATA = 2
METHOD_APPLY_UPDATE = 3
METHOD_REPORT_MALICIOUS = 4
METHOD_DISTRIBUTE = 5

# revert reasons
OUT_OF_GAS = "OutOfGas"
UNAUTHORIZED = "Unauthorized"
VERSION_REGRESSION = "VersionRegression"
ALREADY_REGISTERED = "AlreadyRegistered"
NOT_REGISTERED = "NotRegistered"
OUTDATED_VERSION = "OutdatedVersion"
NO_VIOLATION = "NoViolation"
SELF_REPORT = "SelfReport"
NOT_EPOCH_BOUNDARY = "NotEpochBoundary"
ALREADY_DISTRIBUTED = "AlreadyDistributed"
INSUFFICIENT_FUNDS = "InsufficientFunds"
BAD_CALL_DATA = "BadCallData"
BAD_METHOD = "BadMethod"


class ConservationError(AssertionError):
    """The economic conservation identity was violated."""


@dataclass(frozen=True)
class GasSchedule:
    base_tx: int = 21
    per_payload_byte: int = 1
    register: int = 50
    submit_data: int = 10
    report_malicious: int = 30
    distribute: int = 100
    migrate: int = 500
    init_surcharge: int = 200
    permission_update: int = 15

    def method_cost(self, method_id: int) -> int:
        # apply_update carries no schedule entry: base gas only.
        return {
            METHOD_REGISTER: self.register,
            METHOD_SUBMIT_DATA: self.submit_data,
            METHOD_APPLY_UPDATE: 0,
            METHOD_REPORT_MALICIOUS: self.report_malicious,
            METHOD_DISTRIBUTE: self.distribute,
        }.get(method_id, 0)

    def to_dict(self) -> dict:
        return {
            "base_tx": self.base_tx,
            "per_payload_byte": self.per_payload_byte,
            "register": self.register,
            "submit_data": self.submit_data,
            "report_malicious": self.report_malicious,
            "distribute": self.distribute,
            "migrate": self.migrate,
            "init_surcharge": self.init_surcharge,
            "permission_update": self.permission_update,
        }


@dataclass(frozen=True)
class QuotaConfig:
    window_blocks: int = 10
    max_share_percent: int = 40
    min_active_senders: int = 2
    penalty_rate: int = 42  # 2 x base_tx, in currency per excess transaction
    reporter_share_percent: int = 50

    def to_dict(self) -> dict:
        return {
            "window_blocks": self.window_blocks,
            "max_share_percent": self.max_share_percent,
            "min_active_senders": self.min_active_senders,
            "penalty_rate": self.penalty_rate,
            "reporter_share_percent": self.reporter_share_percent,
        }


class Action(str, Enum):
    REGISTER = "Register"
    SUBMIT_DATA = "SubmitData"
    REPORT = "Report"
    DISTRIBUTE = "Distribute"
    MIGRATE = "Migrate"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class ActivityEntry:
    height: int
    device: bytes
    action: Action
    gas_used: int


@dataclass
class DeviceRecord:
    address: bytes
    firmware_version: int = 0
    registered_at: int = 0
    window_tx_count: int = 0
    total_gas_spent: int = 0
    flagged: bool = False

    def copy(self) -> "DeviceRecord":
        return DeviceRecord(
            self.address,
            self.firmware_version,
            self.registered_at,
            self.window_tx_count,
            self.total_gas_spent,
            self.flagged,
        )


# receipt events
@dataclass(frozen=True)
class UpdateRequired:
    url: str


@dataclass(frozen=True)
class PenaltyApplied:
    offender: bytes
    amount: int


@dataclass(frozen=True)
class Reimbursed:
    to: bytes
    amount: int


@dataclass(frozen=True)
class Granted:
    to: bytes
    amount: int


Event = Union[UpdateRequired, PenaltyApplied, Reimbursed, Granted]


def event_to_json(event: Event) -> dict:
    if isinstance(event, UpdateRequired):
        return {"type": "UpdateRequired", "url": event.url}
    if isinstance(event, PenaltyApplied):
        return {"type": "PenaltyApplied", "offender": event.offender.hex(), "amount": event.amount}
    if isinstance(event, Reimbursed):
        return {"type": "Reimbursed", "to": event.to.hex(), "amount": event.amount}
    if isinstance(event, Granted):
        return {"type": "Granted", "to": event.to.hex(), "amount": event.amount}
    raise TypeError(f"unknown event: {event!r}")


@dataclass(frozen=True)
class Receipt:
    tx_hash: bytes
    status: str  # "success" | "reverted"
    gas_used: int
    fee: int
    revert_reason: Optional[str] = None
    events: tuple[Event, ...] = ()

    @property
    def success(self) -> bool:
        return self.status == "success"

    def to_json(self) -> dict:
        return {
            "tx_hash": self.tx_hash.hex(),
            "status": self.status,
            "gas_used": self.gas_used,
            "fee": self.fee,
            "revert_reason": self.revert_reason,
            "events": [event_to_json(e) for e in self.events],
        }


@dataclass
class ContractState:
    admin: bytes
    current_version: int = 0
    update_url: str = ""
    block_interval: int = 10
    epoch_length: int = 20
    epoch_mint: int = 0
    initialized: bool = False
    quota: QuotaConfig = field(default_factory=QuotaConfig)
    devices: dict[bytes, DeviceRecord] = field(default_factory=dict)
    activity_log: list[ActivityEntry] = field(default_factory=list)
    pending_reimbursements: dict[bytes, int] = field(default_factory=dict)
    penalty_shortfalls: dict[bytes, int] = field(default_factory=dict)
    penalty_pool: int = 0
    last_distributed_epoch: int = 0

    def copy(self) -> "ContractState":
        out = ContractState(
            admin=self.admin,
            current_version=self.current_version,
            update_url=self.update_url,
            block_interval=self.block_interval,
            epoch_length=self.epoch_length,
            epoch_mint=self.epoch_mint,
            initialized=self.initialized,
            quota=self.quota,
            devices={a: r.copy() for a, r in self.devices.items()},
            activity_log=list(self.activity_log),
            pending_reimbursements=dict(self.pending_reimbursements),
            penalty_shortfalls=dict(self.penalty_shortfalls),
            penalty_pool=self.penalty_pool,
            last_distributed_epoch=self.last_distributed_epoch,
        )
        return out

    def to_json(self) -> dict:
        return {
            "admin": self.admin.hex(),
            "current_version": self.current_version,
            "update_url": self.update_url,
            "block_interval": self.block_interval,
            "epoch_length": self.epoch_length,
            "epoch_mint": self.epoch_mint,
            "initialized": self.initialized,
            "quota": self.quota.to_dict(),
            "devices": {
                a.hex(): {
                    "firmware_version": r.firmware_version,
                    "registered_at": r.registered_at,
                    "window_tx_count": r.window_tx_count,
                    "total_gas_spent": r.total_gas_spent,
                    "flagged": r.flagged,
                }
                for a, r in sorted(self.devices.items())
            },
            "activity_log": [
                [e.height, e.device.hex(), e.action.value, e.gas_used]
                for e in self.activity_log
            ],
            "pending_reimbursements": {
                a.hex(): v for a, v in sorted(self.pending_reimbursements.items())
            },
            "penalty_shortfalls": {
                a.hex(): v for a, v in sorted(self.penalty_shortfalls.items())
            },
            "penalty_pool": self.penalty_pool,
            "last_distributed_epoch": self.last_distributed_epoch,
        }

    def digest(self) -> bytes:
        return _canonical_digest(self.to_json())


@dataclass
class Allowlist:
    """Admission policy: open (all but denied) or closed (allowed only)."""

    open: bool = True
    allowed: set = field(default_factory=set)
    denied: set = field(default_factory=set)

    def permits(self, address: bytes) -> bool:
        if self.open:
            return address not in self.denied
        return address in self.allowed

    def update(self, address: bytes, allow: bool) -> None:
        if allow:
            self.denied.discard(address)
            self.allowed.add(address)
        else:
            self.allowed.discard(address)
            self.denied.add(address)

    def copy(self) -> "Allowlist":
        return Allowlist(self.open, set(self.allowed), set(self.denied))

    def to_json(self) -> dict:
        return {
            "open": self.open,
            "allowed": sorted(a.hex() for a in self.allowed),
            "denied": sorted(a.hex() for a in self.denied),
        }


@dataclass
class WorldState:
    accounts: dict[bytes, Account] = field(default_factory=dict)
    contract: ContractState = None  # type: ignore[assignment]
    allowlist: Allowlist = field(default_factory=Allowlist)
    genesis_supply: int = 0

    def get_or_create(self, address: bytes) -> Account:
        account = self.accounts.get(address)
        if account is None:
            account = Account(address=address)
            self.accounts[address] = account
        return account

    def copy(self) -> "WorldState":
        return WorldState(
            accounts={a: acct.copy() for a, acct in self.accounts.items()},
            contract=self.contract.copy(),
            allowlist=self.allowlist.copy(),
            genesis_supply=self.genesis_supply,
        )

    def to_json(self) -> dict:
        return {
            "accounts": {
                a.hex(): {
                    "balance": acct.balance,
                    "nonce": acct.nonce,
                    "stake": acct.stake,
                    "stake_age": acct.stake_age,
                }
                for a, acct in sorted(self.accounts.items())
            },
            "contract": self.contract.to_json(),
            "allowlist": self.allowlist.to_json(),
            "genesis_supply": self.genesis_supply,
        }

    def digest(self) -> bytes:
        return _canonical_digest(self.to_json())


def _canonical_digest(obj: dict) -> bytes:
    encoded = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(encoded).digest()


@dataclass(frozen=True)
class BlockContext:
    height: int
    producer: bytes


class ContractRevert(Exception):
    def __init__(self, reason: str, events: Iterable[Event] = (), entries: Iterable[ActivityEntry] = ()):
        super().__init__(reason)
        self.reason = reason
        self.events = tuple(events)
        self.entries = tuple(entries)


# ---------------------------------------------------------------------------
# migrate parameter codec: u32 version | u64 block interval | u32 len | url

def encode_migrate_params(version: int, update_url: str, block_interval: int) -> bytes:
    url = update_url.encode()
    return struct.pack(">IQI", version, block_interval, len(url)) + url


def decode_migrate_params(params: bytes) -> tuple[int, str, int]:
    if len(params) < 16:
        raise ContractRevert(BAD_CALL_DATA)
    version, interval, url_len = struct.unpack(">IQI", params[:16])
    if len(params) != 16 + url_len:
        raise ContractRevert(BAD_CALL_DATA)
    return version, params[16:].decode(), interval


# ---------------------------------------------------------------------------
# operations (called with gas already charged)

def _log(contract: ContractState, entry: ActivityEntry) -> None:
    """Append an activity entry and refresh the device's cached counters.

    window_tx_count is the device's successful submit count inside the
    trailing quota window ending at this entry's height; total_gas_spent
    accumulates the gas of every logged entry.  Folding the log from
    genesis with this same rule reproduces both counters.
    """
    contract.activity_log.append(entry)
    record = contract.devices.get(entry.device)
    if record is None:
        return
    record.total_gas_spent += entry.gas_used
    if entry.action is Action.SUBMIT_DATA:
        record.window_tx_count = _window_counts(contract, entry.height).get(entry.device, 0)


def _window_counts(contract: ContractState, height: int) -> dict[bytes, int]:
    """Successful submit counts per device over blocks (height - W, height]."""
    low = height - contract.quota.window_blocks
    counts: dict[bytes, int] = {}
    for entry in reversed(contract.activity_log):
        if entry.height <= low:
            break
        if entry.height <= height and entry.action is Action.SUBMIT_DATA:
            counts[entry.device] = counts.get(entry.device, 0) + 1
    return counts


def check_quota(contract: ContractState, device: bytes, height: int) -> int:
    """Excess submit count over the allowed window share; 0 means within quota.

    With fewer than min_active_senders distinct submitters in the window the
    quota does not apply (a sole device can never exceed it).  Otherwise
    allowed = ceil(max_share_percent / 100 x total window submits) and the
    excess is count - allowed where strictly positive.
    """
    if device not in contract.devices:
        raise ContractRevert(NOT_REGISTERED)
    counts = _window_counts(contract, height)
    if len(counts) < contract.quota.min_active_senders:
        return 0
    total = sum(counts.values())
    allowed = -(-(contract.quota.max_share_percent * total) // 100)
    return max(0, counts.get(device, 0) - allowed)


def get_activity(contract: ContractState, device: bytes) -> list[ActivityEntry]:
    return [e for e in contract.activity_log if e.device == device]


def _op_migrate(world: WorldState, tx: Transaction, ctx: BlockContext, gas_used: int):
    c = world.contract
    if tx.sender != c.admin:
        raise ContractRevert(UNAUTHORIZED)
    version, url, interval = decode_migrate_params(tx.kind.params)
    if c.initialized and version < c.current_version:
        raise ContractRevert(VERSION_REGRESSION)
    c.current_version = version
    c.update_url = url
    c.block_interval = interval
    c.initialized = True
    return [], [ActivityEntry(ctx.height, tx.sender, Action.MIGRATE, gas_used)]


def _op_register(world: WorldState, tx: Transaction, ctx: BlockContext, gas_used: int):
    c = world.contract
    if tx.sender in c.devices:
        raise ContractRevert(ALREADY_REGISTERED)
    if len(tx.payload) != 4:
        raise ContractRevert(BAD_CALL_DATA)
    firmware = struct.unpack(">I", tx.payload)[0]
    c.devices[tx.sender] = DeviceRecord(
        address=tx.sender, firmware_version=firmware, registered_at=ctx.height
    )
    return [], [ActivityEntry(ctx.height, tx.sender, Action.REGISTER, gas_used)]


def _op_submit_data(world: WorldState, tx: Transaction, ctx: BlockContext, gas_used: int):
    c = world.contract
    record = c.devices.get(tx.sender)
    if record is None:
        raise ContractRevert(NOT_REGISTERED)
    if record.firmware_version < c.current_version:
        raise ContractRevert(
            OUTDATED_VERSION,
            events=[UpdateRequired(c.update_url)],
            entries=[ActivityEntry(ctx.height, tx.sender, Action.REJECTED, gas_used)],
        )
    return [], [ActivityEntry(ctx.height, tx.sender, Action.SUBMIT_DATA, gas_used)]


def _op_apply_update(world: WorldState, tx: Transaction, ctx: BlockContext, gas_used: int):
    c = world.contract
    record = c.devices.get(tx.sender)
    if record is None:
        raise ContractRevert(NOT_REGISTERED)
    record.firmware_version = c.current_version
    return [], []


def _op_report_malicious(world: WorldState, tx: Transaction, ctx: BlockContext, gas_used: int):
    c = world.contract
    if len(tx.payload) != 20:
        raise ContractRevert(BAD_CALL_DATA)
    offender = bytes(tx.payload)
    if tx.sender not in c.devices or offender not in c.devices:
        raise ContractRevert(NOT_REGISTERED)
    if offender == tx.sender:
        raise ContractRevert(SELF_REPORT)
    excess = check_quota(c, offender, ctx.height)
    if excess == 0:
        raise ContractRevert(NO_VIOLATION)

    nominal = excess * c.quota.penalty_rate
    offender_account = world.get_or_create(offender)
    collected = min(nominal, offender_account.balance)
    shortfall = nominal - collected
    offender_account.balance -= collected

    share = collected * c.quota.reporter_share_percent // 100
    c.penalty_pool += collected - share
    if share:
        c.pending_reimbursements[tx.sender] = c.pending_reimbursements.get(tx.sender, 0) + share
    if shortfall:
        c.penalty_shortfalls[offender] = c.penalty_shortfalls.get(offender, 0) + shortfall
    c.devices[offender].flagged = True

    events = [PenaltyApplied(offender, collected)]
    return events, [ActivityEntry(ctx.height, tx.sender, Action.REPORT, gas_used)]


def _op_distribute(world: WorldState, tx: Transaction, ctx: BlockContext, gas_used: int):
    c = world.contract
    if ctx.height == 0 or ctx.height % c.epoch_length != 0:
        raise ContractRevert(NOT_EPOCH_BOUNDARY)
    epoch = ctx.height // c.epoch_length
    if epoch <= c.last_distributed_epoch:
        raise ContractRevert(ALREADY_DISTRIBUTED)

    events: list[Event] = []
    for address in sorted(c.pending_reimbursements):
        amount = c.pending_reimbursements[address]
        world.get_or_create(address).balance += amount
        events.append(Reimbursed(address, amount))
    c.pending_reimbursements.clear()

    pot = c.penalty_pool + c.epoch_mint
    recipients = [a for a in sorted(c.devices) if not c.devices[a].flagged]
    paid = 0
    if recipients:
        grant = pot // len(recipients)
        if grant > 0:
            for address in recipients:
                withheld = min(grant, c.penalty_shortfalls.get(address, 0))
                if withheld:
                    remaining = c.penalty_shortfalls[address] - withheld
                    if remaining:
                        c.penalty_shortfalls[address] = remaining
                    else:
                        del c.penalty_shortfalls[address]
                payout = grant - withheld
                if payout:
                    world.get_or_create(address).balance += payout
                    events.append(Granted(address, payout))
                paid += payout
    c.penalty_pool = pot - paid
    c.last_distributed_epoch = epoch
    for record in c.devices.values():
        record.flagged = False

    return events, [ActivityEntry(ctx.height, tx.sender, Action.DISTRIBUTE, gas_used)]


_METHODS = {
    METHOD_REGISTER: _op_register,
    METHOD_SUBMIT_DATA: _op_submit_data,
    METHOD_APPLY_UPDATE: _op_apply_update,
    METHOD_REPORT_MALICIOUS: _op_report_malicious,
    METHOD_DISTRIBUTE: _op_distribute,
}


def _dispatch(world: WorldState, tx: Transaction, ctx: BlockContext, gas_used: int):
    kind = tx.kind
    if isinstance(kind, Transfer):
        sender = world.accounts[tx.sender]
        if sender.balance < kind.amount:
            raise ContractRevert(INSUFFICIENT_FUNDS)
        sender.balance -= kind.amount
        world.get_or_create(kind.to).balance += kind.amount
        return [], []
    if isinstance(kind, PermissionUpdate):
        if tx.sender != world.contract.admin:
            raise ContractRevert(UNAUTHORIZED)
        world.allowlist.update(kind.target, kind.allow)
        return [], []
    if isinstance(kind, Migrate):
        return _op_migrate(world, tx, ctx, gas_used)
    op = _METHODS.get(kind.method_id)
    if op is None:
        raise ContractRevert(BAD_METHOD)
    return op(world, tx, ctx, gas_used)


def execute(tx: Transaction, world: WorldState, schedule: GasSchedule, ctx: BlockContext) -> Receipt:
    """Run one verified transaction against the world state.

    The sender's gas escrow is debited up front and the nonce always
    increments.  On completion the unused escrow is refunded and the fee
    goes to the block producer; running out of gas cancels the call and the
    producer keeps the whole escrow.
    """
    sender = world.get_or_create(tx.sender)
    escrow = tx.gas_limit * tx.gas_price
    if sender.balance < escrow:
        raise ValueError("execute() requires a pre-verified transaction")
    sender.balance -= escrow
    sender.nonce += 1
    producer = world.get_or_create(ctx.producer)
    digest = tx_hash(tx)

    gas_used = schedule.base_tx + schedule.per_payload_byte * len(tx.payload)
    kind = tx.kind
    if isinstance(kind, ContractCall):
        gas_used += schedule.method_cost(kind.method_id)
    elif isinstance(kind, Migrate):
        gas_used += schedule.migrate
        if not world.contract.initialized:
            gas_used += schedule.init_surcharge
    elif isinstance(kind, PermissionUpdate):
        gas_used += schedule.permission_update

    if gas_used > tx.gas_limit:
        producer.balance += escrow
        return Receipt(digest, "reverted", tx.gas_limit, escrow, OUT_OF_GAS)

    reason = None
    try:
        events, entries = _dispatch(world, tx, ctx, gas_used)
    except ContractRevert as revert:
        reason = revert.reason
        events, entries = list(revert.events), list(revert.entries)

    fee = gas_used * tx.gas_price
    sender.balance += escrow - fee
    producer.balance += fee
    for entry in entries:
        _log(world.contract, entry)

    if reason is None:
        return Receipt(digest, "success", gas_used, fee, None, tuple(events))
    return Receipt(digest, "reverted", gas_used, fee, reason, tuple(events))


# ---------------------------------------------------------------------------
# block-level transition and conservation

def finalize_block(world: WorldState, producer: bytes, block_reward: int) -> None:
    """Credit the block reward and advance stake ages.

    Every staker ages by one block; producing a block counts as a stake
    event, so the producer's age resets to zero.
    """
    world.get_or_create(producer).balance += block_reward
    for account in world.accounts.values():
        if account.stake > 0:
            account.stake_age += 1
    producer_account = world.accounts.get(producer)
    if producer_account is not None and producer_account.stake > 0:
        producer_account.stake_age = 0


def apply_block(world: WorldState, block, schedule: GasSchedule, block_reward: int) -> list[Receipt]:
    """Execute a block's transactions, then credit the reward and age stakes."""
    ctx = BlockContext(height=block.header.height, producer=block.header.producer)
    receipts = [execute(tx, world, schedule, ctx) for tx in block.transactions]
    finalize_block(world, block.header.producer, block_reward)
    return receipts


def conservation_actual(world: WorldState) -> int:
    return (
        sum(a.balance for a in world.accounts.values())
        + world.contract.penalty_pool
        + sum(world.contract.pending_reimbursements.values())
    )


def conservation_expected(world: WorldState, block_reward: int, height: int) -> int:
    epochs = height // world.contract.epoch_length
    return world.genesis_supply + block_reward * height + world.contract.epoch_mint * epochs


def check_conservation(world: WorldState, block_reward: int, height: int) -> None:
    actual = conservation_actual(world)
    expected = conservation_expected(world, block_reward, height)
    if actual != expected:
        raise ConservationError(
            f"conservation violated at height {height}: have {actual}, want {expected}"
        )
