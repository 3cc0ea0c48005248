"""Contract execution: gas metering, version gating, quotas, penalties,
distribution, and the atomicity/conservation properties."""

import random
import struct

import pytest

from edgechain.contract import (
    ALREADY_DISTRIBUTED,
    ALREADY_REGISTERED,
    Action,
    ActivityEntry,
    Allowlist,
    BlockContext,
    ContractRevert,
    ContractState,
    DeviceRecord,
    GasSchedule,
    Granted,
    METHOD_APPLY_UPDATE,
    METHOD_DISTRIBUTE,
    METHOD_REGISTER,
    METHOD_REPORT_MALICIOUS,
    METHOD_SUBMIT_DATA,
    NO_VIOLATION,
    NOT_EPOCH_BOUNDARY,
    NOT_REGISTERED,
    OUT_OF_GAS,
    OUTDATED_VERSION,
    PenaltyApplied,
    QuotaConfig,
    Reimbursed,
    SELF_REPORT,
    UNAUTHORIZED,
    UpdateRequired,
    VERSION_REGRESSION,
    WorldState,
    check_quota,
    conservation_actual,
    encode_migrate_params,
    execute,
    get_activity,
    _log,
)
from edgechain.ledger import Account, ContractCall, Migrate, Transaction, Transfer

ADMIN = b"\x0a" * 20
MINER = b"\x0b" * 20
DEV1 = b"\x01" * 20
DEV2 = b"\x02" * 20
DEV3 = b"\x03" * 20

SCHEDULE = GasSchedule()


def make_world(registered=(DEV1,), version=1, initialized=True, url="http://u/fw",
               balances=None, epoch_length=20, epoch_mint=0):
    accounts = {
        ADMIN: Account(ADMIN, balance=100_000),
        MINER: Account(MINER, balance=10_000),
        DEV1: Account(DEV1, balance=10_000),
        DEV2: Account(DEV2, balance=10_000),
        DEV3: Account(DEV3, balance=10_000),
    }
    if balances:
        for address, amount in balances.items():
            accounts[address].balance = amount
    contract = ContractState(admin=ADMIN, current_version=version, update_url=url,
                             initialized=initialized, epoch_length=epoch_length,
                             epoch_mint=epoch_mint)
    for address in registered:
        contract.devices[address] = DeviceRecord(address=address, firmware_version=version,
                                                 registered_at=0)
    world = WorldState(accounts=accounts, contract=contract, allowlist=Allowlist())
    world.genesis_supply = conservation_actual(world)
    return world


def call(world, sender, method, payload=b"", gas_limit=100, price=1, height=1):
    tx = Transaction(sender=sender, nonce=world.accounts[sender].nonce,
                     kind=ContractCall(method), payload=payload,
                     gas_limit=gas_limit, gas_price=price)
    return execute(tx, world, SCHEDULE, BlockContext(height=height, producer=MINER))


def migrate(world, sender, version, url="http://u/fw", interval=10, gas_limit=1000, height=1):
    tx = Transaction(sender=sender, nonce=world.accounts[sender].nonce,
                     kind=Migrate(params=encode_migrate_params(version, url, interval)),
                     gas_limit=gas_limit, gas_price=1)
    return execute(tx, world, SCHEDULE, BlockContext(height=height, producer=MINER))


# ---------------------------------------------------------------------------
# gas metering

def test_submit_data_gas_breakdown():
    # base 21 + 4 payload bytes + submit_data 10 = 35
    world = make_world()
    before = world.accounts[DEV1].balance
    miner_before = world.accounts[MINER].balance
    receipt = call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"\x00" * 4, gas_limit=100)
    assert receipt.success
    assert receipt.gas_used == 21 + 4 + 10
    assert receipt.fee == 35
    assert world.accounts[MINER].balance == miner_before + 35
    assert world.accounts[DEV1].balance == before - 35  # 65 of 100 escrow refunded


def test_submit_data_out_of_gas_cancels_and_pays_producer():
    world = make_world()
    digest_before = world.contract.digest()
    miner_before = world.accounts[MINER].balance
    dev_before = world.accounts[DEV1].balance
    receipt = call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"\x00" * 4, gas_limit=30)
    assert receipt.status == "reverted" and receipt.revert_reason == OUT_OF_GAS
    assert receipt.gas_used == 30
    assert receipt.fee == 30
    assert world.contract.digest() == digest_before
    assert world.accounts[MINER].balance == miner_before + 30
    assert world.accounts[DEV1].balance == dev_before - 30


def test_submit_data_exact_gas_limit_boundary():
    world = make_world()
    receipt = call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"\x00" * 4, gas_limit=35)
    assert receipt.success and receipt.gas_used == 35 and receipt.fee == 35


def test_nonce_increments_on_every_outcome():
    world = make_world()
    call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234", gas_limit=100)
    call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234", gas_limit=30)   # out of gas
    call(world, DEV1, METHOD_REPORT_MALICIOUS, payload=b"x", gas_limit=100)  # reverted
    assert world.accounts[DEV1].nonce == 3


# ---------------------------------------------------------------------------
# migrate

def test_first_migrate_pays_init_surcharge():
    world = make_world(initialized=False, version=0)
    first = migrate(world, ADMIN, version=1)
    assert first.success
    assert first.gas_used == 21 + 500 + 200
    second = migrate(world, ADMIN, version=2, height=2)
    assert second.success
    assert second.gas_used == 21 + 500
    assert first.gas_used - second.gas_used == SCHEDULE.init_surcharge
    assert world.contract.current_version == 2


def test_migrate_sets_all_parameters_once_initialized():
    world = make_world(initialized=False, version=0)
    migrate(world, ADMIN, version=3, url="http://new/fw", interval=7)
    contract = world.contract
    assert contract.initialized
    assert (contract.current_version, contract.update_url, contract.block_interval) == (3, "http://new/fw", 7)


def test_migrate_non_admin_reverts_but_pays():
    world = make_world(initialized=False, version=0)
    miner_before = world.accounts[MINER].balance
    receipt = migrate(world, DEV1, version=9)
    assert receipt.revert_reason == UNAUTHORIZED
    assert not world.contract.initialized
    assert world.contract.current_version == 0
    assert world.accounts[MINER].balance == miner_before + receipt.fee
    assert receipt.fee > 0


def test_migrate_version_regression_rejected():
    world = make_world(version=5)
    receipt = migrate(world, ADMIN, version=4)
    assert receipt.revert_reason == VERSION_REGRESSION
    assert world.contract.current_version == 5


# ---------------------------------------------------------------------------
# register / submit / apply_update

def test_register_creates_device_record():
    world = make_world(registered=())
    receipt = call(world, DEV1, METHOD_REGISTER, payload=struct.pack(">I", 1), height=7)
    assert receipt.success
    record = world.contract.devices[DEV1]
    assert record.registered_at == 7
    assert record.firmware_version == 1
    assert get_activity(world.contract, DEV1)[-1].action is Action.REGISTER


def test_register_twice_reverts():
    world = make_world(registered=())
    call(world, DEV1, METHOD_REGISTER, payload=struct.pack(">I", 1))
    receipt = call(world, DEV1, METHOD_REGISTER, payload=struct.pack(">I", 1))
    assert receipt.revert_reason == ALREADY_REGISTERED
    assert len(world.contract.devices) == 1


def test_submit_from_unregistered_reverts():
    world = make_world(registered=())
    receipt = call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234")
    assert receipt.revert_reason == NOT_REGISTERED


def test_outdated_device_rejected_with_update_url():
    world = make_world(version=2)
    world.contract.devices[DEV1].firmware_version = 1
    receipt = call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234", height=3)
    assert receipt.revert_reason == OUTDATED_VERSION
    assert UpdateRequired(url="http://u/fw") in receipt.events
    entries = get_activity(world.contract, DEV1)
    assert entries[-1].action is Action.REJECTED


def test_current_device_submits_successfully():
    world = make_world()
    before = len(world.contract.activity_log)
    receipt = call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234")
    assert receipt.success
    assert len(world.contract.activity_log) == before + 1


def test_apply_update_enables_submits_and_is_idempotent():
    world = make_world(version=2)
    world.contract.devices[DEV1].firmware_version = 1
    assert call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234").revert_reason == OUTDATED_VERSION
    receipt = call(world, DEV1, METHOD_APPLY_UPDATE)
    assert receipt.success
    assert receipt.gas_used == 21  # no schedule entry: base gas only
    assert world.contract.devices[DEV1].firmware_version == 2
    assert call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234").success
    again = call(world, DEV1, METHOD_APPLY_UPDATE)
    assert again.success and world.contract.devices[DEV1].firmware_version == 2


def test_apply_update_unregistered():
    world = make_world(registered=())
    assert call(world, DEV1, METHOD_APPLY_UPDATE).revert_reason == NOT_REGISTERED


# ---------------------------------------------------------------------------
# quota

def _log_submits(world, counts: dict, heights):
    """Seed the activity log with successful submits spread over heights."""
    for device, count in counts.items():
        if device not in world.contract.devices:
            world.contract.devices[device] = DeviceRecord(address=device, firmware_version=1)
        for i in range(count):
            _log(world.contract,
                 ActivityEntry(height=heights[i % len(heights)], device=device,
                               action=Action.SUBMIT_DATA, gas_used=35))


def test_quota_sole_sender_is_never_penalized():
    world = make_world()
    _log_submits(world, {DEV1: 50}, heights=list(range(1, 11)))
    assert check_quota(world.contract, DEV1, 10) == 0


def test_quota_excess_arithmetic():
    # counts 8 and 2, Q=40: allowed = ceil(0.4 * 10) = 4, excess = 8 - 4 = 4
    world = make_world(registered=(DEV1, DEV2))
    _log_submits(world, {DEV1: 8, DEV2: 2}, heights=list(range(1, 11)))
    assert check_quota(world.contract, DEV1, 10) == 4
    assert check_quota(world.contract, DEV2, 10) == 0


def test_quota_boundary_is_strict():
    # counts 4 and 6: allowed 4; the 4-count device is within (> not >=)
    world = make_world(registered=(DEV1, DEV2))
    _log_submits(world, {DEV1: 4, DEV2: 6}, heights=list(range(1, 11)))
    assert check_quota(world.contract, DEV1, 10) == 0
    assert check_quota(world.contract, DEV2, 10) == 2


def test_quota_window_slides():
    world = make_world(registered=(DEV1, DEV2))
    _log_submits(world, {DEV1: 8, DEV2: 2}, heights=list(range(1, 11)))
    # at height 25 the window (15, 25] holds nothing: no violation
    assert check_quota(world.contract, DEV1, 25) == 0


def test_quota_unregistered_device():
    world = make_world(registered=())
    with pytest.raises(ContractRevert) as excinfo:
        check_quota(world.contract, DEV1, 10)
    assert excinfo.value.reason == NOT_REGISTERED


# ---------------------------------------------------------------------------
# report_malicious

def _overload(world, offender=DEV1, reporter=DEV2):
    _log_submits(world, {offender: 8, reporter: 2}, heights=list(range(1, 11)))


def test_report_collects_penalty_and_earmarks_reporter_share():
    # excess 4 x rate 42 = 168 penalty; reporter share 50% = 84
    world = make_world(registered=(DEV1, DEV2))
    _overload(world)
    offender_before = world.accounts[DEV1].balance
    receipt = call(world, DEV2, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    assert receipt.success
    assert PenaltyApplied(offender=DEV1, amount=168) in receipt.events
    assert world.accounts[DEV1].balance == offender_before - 168
    assert world.contract.pending_reimbursements[DEV2] == 84
    assert world.contract.penalty_pool == 168 - 84
    assert world.contract.devices[DEV1].flagged


def test_report_without_violation_reverts_cleanly():
    world = make_world(registered=(DEV1, DEV2))
    digest_before = world.contract.digest()
    receipt = call(world, DEV2, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    assert receipt.revert_reason == NO_VIOLATION
    # a reverted report leaves no activity entry and no economic change
    assert world.contract.digest() == digest_before
    assert world.contract.pending_reimbursements == {}
    assert world.contract.penalty_pool == 0


def test_self_report_rejected():
    world = make_world(registered=(DEV1, DEV2))
    _overload(world)
    receipt = call(world, DEV1, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    assert receipt.revert_reason == SELF_REPORT


def test_report_unregistered_parties():
    world = make_world(registered=(DEV2,))
    receipt = call(world, DEV2, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    assert receipt.revert_reason == NOT_REGISTERED


def test_penalty_clamped_to_balance_with_shortfall():
    world = make_world(registered=(DEV1, DEV2), balances={DEV1: 100 + 35 * 0})
    _overload(world)
    receipt = call(world, DEV2, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    assert receipt.success
    # nominal 168, collected 100, shortfall 68
    assert world.accounts[DEV1].balance == 0
    assert world.contract.penalty_shortfalls[DEV1] == 68
    assert world.contract.pending_reimbursements[DEV2] == 100 * 50 // 100
    assert world.contract.penalty_pool == 100 - 50


# ---------------------------------------------------------------------------
# distribute_resources

def test_distribution_pays_pending_reimbursement():
    world = make_world(registered=(DEV1, DEV2))
    _overload(world)
    call(world, DEV2, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    reporter_before = world.accounts[DEV2].balance
    receipt = call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=20)
    assert receipt.success
    assert Reimbursed(to=DEV2, amount=84) in receipt.events
    # the reporter also collects the whole 84-unit pool as the only
    # unflagged device (the offender is excluded this epoch)
    assert Granted(to=DEV2, amount=84) in receipt.events
    assert world.accounts[DEV2].balance == reporter_before + 84 + 84
    assert world.contract.pending_reimbursements == {}


def test_distribution_grant_integer_division_keeps_dust():
    world = make_world(registered=(DEV1, DEV2, DEV3))
    world.contract.penalty_pool = 100
    world.genesis_supply = conservation_actual(world)
    balances_before = {a: world.accounts[a].balance for a in (DEV1, DEV2, DEV3)}
    receipt = call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=20)
    assert receipt.success
    for address in (DEV1, DEV2, DEV3):
        assert world.accounts[address].balance == balances_before[address] + 33
    assert world.contract.penalty_pool == 1


def test_distribution_noop_when_nothing_to_share():
    world = make_world(registered=(DEV1,))
    dev_before = world.accounts[DEV1].balance
    receipt = call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=20)
    assert receipt.success
    assert world.accounts[DEV1].balance == dev_before
    assert receipt.events == ()


def test_distribution_off_boundary_reverts():
    world = make_world()
    receipt = call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=13)
    assert receipt.revert_reason == NOT_EPOCH_BOUNDARY


def test_distribution_twice_at_same_boundary_reverts():
    world = make_world()
    assert call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=20).success
    receipt = call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=20)
    assert receipt.revert_reason == ALREADY_DISTRIBUTED


def test_distribution_unflags_devices_for_next_epoch():
    world = make_world(registered=(DEV1, DEV2))
    _overload(world)
    call(world, DEV2, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    assert world.contract.devices[DEV1].flagged
    call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=20)
    assert not world.contract.devices[DEV1].flagged


def test_flagged_device_excluded_from_grants():
    world = make_world(registered=(DEV1, DEV2), epoch_mint=0)
    _overload(world)
    call(world, DEV2, METHOD_REPORT_MALICIOUS, payload=DEV1, height=10)
    offender_before = world.accounts[DEV1].balance
    receipt = call(world, MINER, METHOD_DISTRIBUTE, gas_limit=121, height=20)
    granted_to = [e.to for e in receipt.events if isinstance(e, Granted)]
    assert DEV1 not in granted_to
    assert world.accounts[DEV1].balance == offender_before


# ---------------------------------------------------------------------------
# activity log

def test_get_activity_in_order_and_empty_for_unknown():
    world = make_world(registered=())
    call(world, DEV1, METHOD_REGISTER, payload=struct.pack(">I", 1), height=1)
    call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234", height=2)
    call(world, DEV1, METHOD_SUBMIT_DATA, payload=b"1234", height=3)
    entries = get_activity(world.contract, DEV1)
    assert [e.action for e in entries] == [Action.REGISTER, Action.SUBMIT_DATA, Action.SUBMIT_DATA]
    assert [e.height for e in entries] == [1, 2, 3]
    assert get_activity(world.contract, DEV2) == []


def test_log_fold_reproduces_device_counters():
    world = make_world(registered=())
    rng = random.Random(31)
    height = 1
    call(world, DEV1, METHOD_REGISTER, payload=struct.pack(">I", 1), height=height)
    call(world, DEV2, METHOD_REGISTER, payload=struct.pack(">I", 1), height=height)
    for _ in range(60):
        height += rng.randrange(0, 2)
        sender = rng.choice((DEV1, DEV2))
        call(world, sender, METHOD_SUBMIT_DATA, payload=bytes(rng.randrange(0, 6)),
             gas_limit=100, height=height)

    # independent fold over the log
    window = world.contract.quota.window_blocks
    totals: dict = {}
    window_counts: dict = {}
    seen: list = []
    for entry in world.contract.activity_log:
        seen.append(entry)
        totals[entry.device] = totals.get(entry.device, 0) + entry.gas_used
        if entry.action is Action.SUBMIT_DATA:
            window_counts[entry.device] = sum(
                1 for e in seen
                if e.device == entry.device and e.action is Action.SUBMIT_DATA
                and entry.height - window < e.height <= entry.height
            )
    for address, record in world.contract.devices.items():
        assert record.total_gas_spent == totals.get(address, 0)
        assert record.window_tx_count == window_counts.get(address, 0)


# ---------------------------------------------------------------------------
# properties: atomicity, gas bound, execute-level conservation

def _random_call(world, rng, height):
    sender = rng.choice((ADMIN, DEV1, DEV2, DEV3))
    roll = rng.randrange(7)
    if roll == 0:
        tx = Transaction(sender=sender, nonce=world.accounts[sender].nonce,
                         kind=Migrate(params=encode_migrate_params(rng.randrange(0, 4), "http://u/fw", 10)),
                         gas_limit=1000, gas_price=1)
    elif roll == 1:
        tx = Transaction(sender=sender, nonce=world.accounts[sender].nonce,
                         kind=Transfer(to=rng.choice((DEV1, DEV2, MINER)), amount=rng.randrange(0, 50)),
                         gas_limit=25, gas_price=1)
    else:
        method = rng.choice((METHOD_REGISTER, METHOD_SUBMIT_DATA, METHOD_APPLY_UPDATE,
                             METHOD_REPORT_MALICIOUS, METHOD_DISTRIBUTE))
        payload = {
            METHOD_REGISTER: struct.pack(">I", rng.randrange(0, 3)),
            METHOD_SUBMIT_DATA: bytes(rng.randrange(0, 6)),
            METHOD_APPLY_UPDATE: b"",
            METHOD_REPORT_MALICIOUS: rng.choice((DEV1, DEV2, DEV3)),
            METHOD_DISTRIBUTE: b"",
        }[method]
        tx = Transaction(sender=sender, nonce=world.accounts[sender].nonce,
                         kind=ContractCall(method), payload=payload,
                         gas_limit=rng.choice((25, 40, 100, 200)), gas_price=1)
    # admission would refuse an unaffordable escrow; mirror that here
    needed = tx.gas_limit * tx.gas_price
    if isinstance(tx.kind, Transfer):
        needed += tx.kind.amount
    if world.accounts[sender].balance < needed:
        return None, None
    return tx, execute(tx, world, SCHEDULE, BlockContext(height=height, producer=MINER))


def test_random_sequence_atomicity_gas_bound_and_conservation():
    world = make_world(registered=())
    rng = random.Random(2718)
    supply = conservation_actual(world)
    for step in range(300):
        height = 1 + step // 5
        pre_digest = world.contract.digest()
        pre_log_len = len(world.contract.activity_log)
        tx, receipt = _random_call(world, rng, height)
        if tx is None:
            continue
        assert receipt.gas_used <= tx.gas_limit
        if receipt.status == "reverted":
            if receipt.revert_reason == OUTDATED_VERSION:
                # the mandated Rejected entry is the only contract-state delta
                assert len(world.contract.activity_log) == pre_log_len + 1
                assert world.contract.activity_log[-1].action is Action.REJECTED
            else:
                assert world.contract.digest() == pre_digest
        # fees only move value between accounts: the total is conserved
        assert conservation_actual(world) == supply
