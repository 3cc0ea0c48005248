"""Deterministic discrete-event simulation of the three-tier edge network.

Frontend customer nodes submit data transactions, near-end edge servers mine
or validate blocks, and a far-end update repository serves firmware
downloads.  Time is integer ticks; events are processed in (fire_at,
sequence) order, so identical (scenario, seed) inputs replay to bit-identical
chains and metrics.

Block production is interval-driven: each mining server seals a block every
block_interval ticks (the contract's stored interval once initialized) on
top of its current best chain.  Broadcast blocks carry the producer's whole
chain, so receivers resolve forks with a single fork-choice pass and never
track orphans.  At every epoch-boundary height the producer appends a
resource-distribution call of its own, which pays pending reimbursements and
grants; that keeps the mint schedule exact, which the conservation check
enforces after every adoption.
"""

from __future__ import annotations

import heapq
import itertools
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

from .consensus import (
    MODE_POS,
    EmptyStakeSetError,
    fork_choice,
    make_proof_checker,
    pos_select,
    pow_mine,
    seal_pos,
    seal_pow,
)
from .contract import (
    METHOD_APPLY_UPDATE,
    METHOD_DISTRIBUTE,
    METHOD_REGISTER,
    METHOD_REPORT_MALICIOUS,
    METHOD_SUBMIT_DATA,
    OUTDATED_VERSION,
    Allowlist,
    BlockContext,
    ContractState,
    Granted,
    Receipt,
    Reimbursed,
    PenaltyApplied,
    UpdateRequired,
    WorldState,
    apply_block,
    check_conservation,
    execute,
    finalize_block,
)
from .contract import encode_migrate_params
from .crypto import Keypair, MockSignatureScheme
from .ledger import (
    Account,
    BadNonce,
    Block,
    BlockHeader,
    ChainError,
    ContractCall,
    Migrate,
    PermissionUpdate,
    Transaction,
    Transfer,
    TxValidationError,
    append_block,
    genesis_block,
    hash_block,
    sign_transaction,
    tx_root,
    validate_chain,
    verify_transaction,
)
from .scenario import (
    KIND_ADMIN,
    KIND_CUSTOMER,
    KIND_EDGE_SERVER,
    KIND_UPDATE_REPOSITORY,
    InvalidScenarioError,
    NodeSpec,
    Scenario,
)

MAX_MINE_ITERATIONS = 1 << 22
RESEND_TIMEOUT_INTERVALS = 10


class EventKind(Enum):
    SUBMIT_TX = "SubmitTx"
    PRODUCE_BLOCK = "ProduceBlock"
    DELIVER_BLOCK = "DeliverBlock"
    DELIVER_TX = "DeliverTx"
    BEGIN_DOWNLOAD = "BeginDownload"
    FINISH_DOWNLOAD = "FinishDownload"
    EPOCH_TICK = "EpochTick"


@dataclass(frozen=True)
class Event:
    fire_at: int
    sequence: int
    kind: EventKind
    data: dict


class EventQueue:
    """Priority queue ordered by (fire_at, insertion sequence): total and
    deterministic."""

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = itertools.count()

    def push(self, fire_at: int, kind: EventKind, **data) -> None:
        seq = next(self._seq)
        event = Event(fire_at=fire_at, sequence=seq, kind=kind, data=data)
        heapq.heappush(self._heap, (fire_at, seq, event))

    def pop(self) -> Optional[Event]:
        if not self._heap:
            return None
        return heapq.heappop(self._heap)[2]

    def peek_time(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class MetricRow:
    tick: int
    height: int
    node: str
    event: str
    tx_hash: str
    gas_used: int
    fee: int
    balance_after: int
    detail: str

    def as_list(self) -> list:
        return [
            self.tick, self.height, self.node, self.event, self.tx_hash,
            self.gas_used, self.fee, self.balance_after, self.detail,
        ]


METRIC_HEADER = ["tick", "height", "node", "event", "tx_hash", "gas_used", "fee", "balance_after", "detail"]


class SimNode:
    """One participant: a chain view, a mempool, and actor-side state."""

    def __init__(self, spec: NodeSpec, keypair: Keypair, genesis: Block, state: WorldState):
        self.spec = spec
        self.keypair = keypair
        self.address = keypair.address
        self.chain: list[Block] = [genesis]
        self.state = state
        self.receipts: dict[bytes, tuple[int, Receipt]] = {}
        self.mempool: dict[tuple[bytes, int], Transaction] = {}
        self.drops: dict[str, int] = {}
        # client-side actor state
        self.next_nonce = 0
        self.inflight: dict[int, int] = {}  # nonce -> sent tick
        self.submits_sent = 0
        self.register_sent_at: Optional[int] = None
        self.downloading = False
        self.local_firmware = spec.firmware

    @property
    def name(self) -> str:
        return self.spec.name

    def height(self) -> int:
        return self.chain[-1].header.height

    def tip_hash(self) -> bytes:
        return hash_block(self.chain[-1].header)

    def count_drop(self, reason: str) -> None:
        self.drops[reason] = self.drops.get(reason, 0) + 1

    @property
    def drop_count(self) -> int:
        return sum(self.drops.values())


# ---------------------------------------------------------------------------
# genesis construction (shared with offline validate/replay)

def build_keys(scenario: Scenario, scheme: MockSignatureScheme) -> dict[str, Keypair]:
    """Derive every node's keypair from its scenario key seed."""
    return {node.name: scheme.keypair_from_seed(node.key_seed.encode()) for node in scenario.nodes}


def resolve_address(entry: str, keypairs: dict[str, Keypair]) -> bytes:
    if entry in keypairs:
        return keypairs[entry].address
    return bytes.fromhex(entry)


def build_genesis_world(scenario: Scenario, keypairs: dict[str, Keypair]) -> WorldState:
    accounts: dict[bytes, Account] = {}
    for node in scenario.nodes:
        address = keypairs[node.name].address
        if address in accounts:
            raise InvalidScenarioError(f"duplicate address for node '{node.name}'")
        accounts[address] = Account(address=address, balance=node.balance, stake=node.stake)
    admin = next(n for n in scenario.nodes if n.kind == KIND_ADMIN)
    contract = ContractState(
        admin=keypairs[admin.name].address,
        block_interval=scenario.contract.block_interval,
        epoch_length=scenario.contract.epoch_length,
        epoch_mint=scenario.contract.epoch_mint,
        quota=scenario.contract.quota,
    )
    if scenario.allowlist == "all":
        allowlist = Allowlist(open=True)
    else:
        allowed = {resolve_address(entry, keypairs) for entry in scenario.allowlist}
        allowlist = Allowlist(open=False, allowed=allowed)
    return WorldState(
        accounts=accounts,
        contract=contract,
        allowlist=allowlist,
        genesis_supply=sum(a.balance for a in accounts.values()),
    )


def stake_set(world: WorldState) -> list[tuple[bytes, int, int]]:
    """Stakers in address order (a deterministic order for pos_select)."""
    return [
        (a, acct.stake, acct.stake_age)
        for a, acct in sorted(world.accounts.items())
        if acct.stake > 0
    ]


# ---------------------------------------------------------------------------
# the simulation

class Sim:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        if seed is None:
            seed = scenario.run.seed
        self.seed = seed
        self.scenario = replace(scenario, run=replace(scenario.run, seed=seed))
        self.schedule = scenario.gas_schedule
        self.consensus = scenario.consensus
        self.scheme = MockSignatureScheme()
        self.keypairs = build_keys(self.scenario, self.scheme)
        self.keys = {kp.address: kp.public_key for kp in self.keypairs.values()}
        self.names_by_address = {kp.address: name for name, kp in self.keypairs.items()}
        self.proof_checker = make_proof_checker(self.consensus, self.keys, self.scheme)

        self.genesis_world = build_genesis_world(self.scenario, self.keypairs)
        genesis = genesis_block()
        self.nodes: dict[str, SimNode] = {}
        for spec in self.scenario.nodes:
            self.nodes[spec.name] = SimNode(
                spec, self.keypairs[spec.name], genesis, self.genesis_world.copy()
            )
        self.node_order = [self.nodes[s.name] for s in self.scenario.nodes]

        self.observer = self._pick_observer()
        self.repo_name = next(
            (s.name for s in self.scenario.nodes if s.kind == KIND_UPDATE_REPOSITORY), None
        )
        self.admin_name = next(s.name for s in self.scenario.nodes if s.kind == KIND_ADMIN)
        self._latency = {(a, b): t for a, b, t in self.scenario.latency_overrides}

        self.queue = EventQueue()
        self.tick = 0
        self._schedule_initial_events()

    # -- setup ------------------------------------------------------------

    def _pick_observer(self) -> SimNode:
        for node in self.node_order:
            if node.spec.kind == KIND_EDGE_SERVER and node.spec.mining:
                return node
        for node in self.node_order:
            if node.spec.kind == KIND_EDGE_SERVER:
                return node
        return self.nodes[next(s.name for s in self.scenario.nodes if s.kind == KIND_ADMIN)]

    def _schedule_initial_events(self) -> None:
        sc = self.scenario
        # the admin's initial migration carries the contract section's params
        self.queue.push(0, EventKind.SUBMIT_TX, node=self.admin_name, action="migrate",
                        version=sc.contract.version, update_url=sc.contract.update_url,
                        block_interval=sc.contract.block_interval)
        for step in sc.migrations:
            self.queue.push(step.tick, EventKind.SUBMIT_TX, node=self.admin_name, action="migrate",
                            version=step.version,
                            update_url=step.update_url if step.update_url is not None else sc.contract.update_url,
                            block_interval=step.block_interval if step.block_interval is not None else sc.contract.block_interval)
        for step in sc.permission_updates:
            self.queue.push(step.tick, EventKind.SUBMIT_TX, node=self.admin_name, action="permission",
                            target=step.target, allow=step.allow)
        for spec in sc.nodes:
            if spec.kind == KIND_CUSTOMER:
                self.queue.push(spec.submit_period, EventKind.SUBMIT_TX,
                                node=spec.name, action="customer_step")
                if spec.report_target and spec.report_every > 0:
                    self.queue.push(spec.report_every, EventKind.SUBMIT_TX,
                                    node=spec.name, action="report")
            elif spec.kind == KIND_EDGE_SERVER and spec.mining:
                self.queue.push(self.consensus.target_block_interval,
                                EventKind.PRODUCE_BLOCK, node=spec.name)

    # -- helpers ----------------------------------------------------------

    def latency(self, src: str, dst: str) -> int:
        return self._latency.get((src, dst), self.scenario.latency_default)

    def _partitioned(self, src: str, dst: str, tick: int) -> bool:
        for window in self.scenario.partitions:
            if window.start <= tick <= window.end:
                if self._group_of(window, src) != self._group_of(window, dst):
                    return True
        return False

    @staticmethod
    def _group_of(window, name: str) -> int:
        for index, group in enumerate(window.groups):
            if name in group:
                return index
        return -1

    def node_label(self, address: bytes) -> str:
        return self.names_by_address.get(address, address.hex())

    def _build_tx(self, node: SimNode, kind, payload: bytes = b"",
                  gas_limit: Optional[int] = None) -> Transaction:
        run = self.scenario.run
        tx = Transaction(
            sender=node.address,
            nonce=node.next_nonce,
            kind=kind,
            payload=payload,
            gas_limit=gas_limit if gas_limit is not None else run.tx_gas_limit,
            gas_price=run.tx_gas_price,
        )
        tx = sign_transaction(tx, node.keypair.secret, self.scheme)
        node.inflight[tx.nonce] = self.tick
        node.next_nonce += 1
        return tx

    def _broadcast_tx(self, origin: SimNode, tx: Transaction) -> None:
        for node in self.node_order:
            if node.spec.kind != KIND_EDGE_SERVER:
                continue
            self.queue.push(self.tick + self.latency(origin.name, node.name),
                            EventKind.DELIVER_TX, to=node.name, src=origin.name, tx=tx)

    def _broadcast_chain(self, origin: SimNode) -> None:
        snapshot = list(origin.chain)
        for node in self.node_order:
            if node is origin:
                continue
            self.queue.push(self.tick + self.latency(origin.name, node.name),
                            EventKind.DELIVER_BLOCK, to=node.name, src=origin.name,
                            chain=snapshot)

    # -- admission ---------------------------------------------------------

    def admit_to_mempool(self, node: SimNode, tx: Transaction, raise_on_drop: bool = False):
        """Allowlist gate, then verify_transaction, then duplicate rejection.

        Returns (accepted, reason); drops are counted on the node.  With
        raise_on_drop the verification error propagates to the caller (the
        in-process client path).
        """
        reason = None
        error: Optional[Exception] = None
        if not node.state.allowlist.permits(tx.sender):
            reason = "NotAllowed"
        else:
            key = (tx.sender, tx.nonce)
            if key in node.mempool:
                reason = "Duplicate"
            else:
                account = node.state.accounts.get(tx.sender) or Account(address=tx.sender)
                try:
                    # mempool admission tolerates queued-ahead nonces from the
                    # same sender so a client may submit several txs per block
                    pending_ahead = sum(
                        1 for (s, n) in node.mempool if s == tx.sender and account.nonce <= n < tx.nonce
                    )
                    shifted = Account(
                        address=account.address,
                        balance=account.balance,
                        nonce=account.nonce + pending_ahead,
                        stake=account.stake,
                        stake_age=account.stake_age,
                    )
                    verify_transaction(tx, shifted, self.schedule, self.keys, self.scheme)
                except TxValidationError as exc:
                    reason = type(exc).__name__
                    error = exc
        if reason is None:
            node.mempool[(tx.sender, tx.nonce)] = tx
            return True, None
        node.count_drop(reason)
        if raise_on_drop and error is not None:
            raise error
        if raise_on_drop:
            raise TxValidationError(reason)
        return False, reason

    # -- event handlers ----------------------------------------------------

    def run_until(self, max_tick: Optional[int] = None, max_height: Optional[int] = None) -> "Sim":
        """Process events in order until a bound is hit or the queue drains."""
        while True:
            if max_height is not None and self.observer.height() >= max_height:
                break
            when = self.queue.peek_time()
            if when is None:
                break
            if max_tick is not None and when > max_tick:
                break
            event = self.queue.pop()
            assert event is not None
            self.tick = event.fire_at
            self._dispatch(event)
        return self

    def _dispatch(self, event: Event) -> None:
        if event.kind is EventKind.SUBMIT_TX:
            self._handle_submit(event.data)
        elif event.kind is EventKind.PRODUCE_BLOCK:
            self._handle_produce(event.data)
        elif event.kind is EventKind.DELIVER_TX:
            self._handle_deliver_tx(event.data)
        elif event.kind is EventKind.DELIVER_BLOCK:
            self._handle_deliver_block(event.data)
        elif event.kind is EventKind.BEGIN_DOWNLOAD:
            self._handle_begin_download(event.data)
        elif event.kind is EventKind.FINISH_DOWNLOAD:
            self._handle_finish_download(event.data)
        # EPOCH_TICK is reserved for scenario hooks; nothing schedules it yet

    def _handle_submit(self, data: dict) -> None:
        node = self.nodes[data["node"]]
        action = data["action"]
        if action == "migrate":
            params = encode_migrate_params(data["version"], data["update_url"], data["block_interval"])
            limit = max(
                self.scenario.run.tx_gas_limit,
                self.schedule.base_tx + self.schedule.migrate + self.schedule.init_surcharge,
            )
            tx = self._build_tx(node, Migrate(params=params), gas_limit=limit)
            self._broadcast_tx(node, tx)
        elif action == "permission":
            target = resolve_address(data["target"], self.keypairs)
            tx = self._build_tx(node, PermissionUpdate(target=target, allow=data["allow"]))
            self._broadcast_tx(node, tx)
        elif action == "customer_step":
            self.queue.push(self.tick + node.spec.submit_period, EventKind.SUBMIT_TX,
                            node=node.name, action="customer_step")
            self._customer_step(node)
        elif action == "report":
            self.queue.push(self.tick + node.spec.report_every, EventKind.SUBMIT_TX,
                            node=node.name, action="report")
            target = self.keypairs[node.spec.report_target].address
            tx = self._build_tx(node, ContractCall(METHOD_REPORT_MALICIOUS), payload=target)
            self._broadcast_tx(node, tx)

    def _customer_step(self, node: SimNode) -> None:
        self._repair_nonce(node)
        if node.downloading:
            return
        registered = node.address in node.state.contract.devices
        if not registered:
            timeout = RESEND_TIMEOUT_INTERVALS * self.scenario.contract.block_interval
            if node.register_sent_at is None or self.tick - node.register_sent_at > timeout:
                payload = struct.pack(">I", node.local_firmware)
                tx = self._build_tx(node, ContractCall(METHOD_REGISTER), payload=payload)
                self._broadcast_tx(node, tx)
                node.register_sent_at = self.tick
            return
        if node.spec.max_submits and node.submits_sent >= node.spec.max_submits:
            return
        tx = self._build_tx(node, ContractCall(METHOD_SUBMIT_DATA),
                            payload=bytes(node.spec.payload_bytes))
        self._broadcast_tx(node, tx)
        node.submits_sent += 1

    def _repair_nonce(self, node: SimNode) -> None:
        """Resync the local nonce when in-flight txs look lost (reorg, drop)."""
        account = node.state.accounts.get(node.address)
        confirmed = account.nonce if account else 0
        node.inflight = {n: t for n, t in node.inflight.items() if n >= confirmed}
        if not node.inflight:
            if node.next_nonce < confirmed:
                node.next_nonce = confirmed
            return
        timeout = RESEND_TIMEOUT_INTERVALS * self.scenario.contract.block_interval
        oldest = min(node.inflight.values())
        if self.tick - oldest > timeout:
            node.inflight.clear()
            node.next_nonce = confirmed
            if node.register_sent_at is not None and node.address not in node.state.contract.devices:
                node.register_sent_at = None

    def _handle_deliver_tx(self, data: dict) -> None:
        if self._partitioned(data["src"], data["to"], self.tick):
            self.nodes[data["to"]].count_drop("Partitioned")
            return
        self.admit_to_mempool(self.nodes[data["to"]], data["tx"])

    def _handle_produce(self, data: dict) -> None:
        node = self.nodes[data["node"]]
        contract = node.state.contract
        interval = contract.block_interval if contract.initialized else self.consensus.target_block_interval
        self.queue.push(self.tick + interval, EventKind.PRODUCE_BLOCK, node=node.name)
        if not node.spec.mining:
            return
        height = node.height() + 1
        if self.consensus.mode == MODE_POS:
            try:
                selected = pos_select(stake_set(node.state), self.seed, height)
            except EmptyStakeSetError:
                return
            if selected != node.address:
                return  # not this epoch's validator

        work = node.state.copy()
        ctx = BlockContext(height=height, producer=node.address)
        txs: list[Transaction] = []
        receipts: list[Receipt] = []
        for key in list(node.mempool):
            if len(txs) >= self.scenario.run.max_block_txs:
                break
            tx = node.mempool[key]
            if not work.allowlist.permits(tx.sender):
                del node.mempool[key]
                node.count_drop("NotAllowed")
                continue
            account = work.accounts.get(tx.sender) or Account(address=tx.sender)
            try:
                verify_transaction(tx, account, self.schedule, self.keys, self.scheme)
            except BadNonce:
                if tx.nonce < account.nonce:
                    del node.mempool[key]
                    node.count_drop("BadNonce")
                continue  # queued ahead of its nonce: retry next block
            except TxValidationError as exc:
                del node.mempool[key]
                node.count_drop(type(exc).__name__)
                continue
            receipts.append(execute(tx, work, self.schedule, ctx))
            txs.append(tx)
            del node.mempool[key]

        if height % work.contract.epoch_length == 0:
            dtx = self._distribution_tx(node, work)
            if dtx is not None:
                receipts.append(execute(dtx, work, self.schedule, ctx))
                txs.append(dtx)

        finalize_block(work, node.address, self.consensus.block_reward)

        template = BlockHeader(
            height=height,
            prev_hash=node.tip_hash(),
            tx_root=tx_root(txs),
            timestamp=self.tick,
            producer=node.address,
        )
        if self.consensus.mode == MODE_POS:
            header = seal_pos(template, node.keypair.secret, self.scheme)
        else:
            mined = pow_mine(template, self.consensus.difficulty, MAX_MINE_ITERATIONS)
            if mined is None:
                node.count_drop("NoSolution")
                return
            header = seal_pow(template, mined[0])
        block = Block(header=header, transactions=tuple(txs))
        self._install(node, node.chain + [block], work, [(block, receipts)])
        self._broadcast_chain(node)

    def _distribution_tx(self, node: SimNode, work: WorldState) -> Optional[Transaction]:
        """Producer-signed distribute call injected at an epoch boundary."""
        account = work.accounts.get(node.address)
        if account is None:
            return None
        limit = self.schedule.base_tx + self.schedule.distribute
        price = self.scenario.run.tx_gas_price
        if not work.allowlist.permits(node.address) or account.balance < limit * price:
            node.count_drop("DistributionSkipped")
            return None
        tx = Transaction(
            sender=node.address,
            nonce=account.nonce,
            kind=ContractCall(METHOD_DISTRIBUTE),
            payload=b"",
            gas_limit=limit,
            gas_price=price,
        )
        return sign_transaction(tx, node.keypair.secret, self.scheme)

    def _handle_deliver_block(self, data: dict) -> None:
        if self._partitioned(data["src"], data["to"], self.tick):
            self.nodes[data["to"]].count_drop("Partitioned")
            return
        node = self.nodes[data["to"]]
        incoming: list[Block] = data["chain"]
        self._consider_chain(node, incoming)

    def _consider_chain(self, node: SimNode, incoming: list[Block]) -> None:
        mine = node.chain
        my_tip = node.tip_hash()
        if hash_block(incoming[-1].header) == my_tip:
            return
        if (
            len(incoming) == len(mine) + 1
            and incoming[-1].header.prev_hash == my_tip
        ):
            block = incoming[-1]
            try:
                append_block(mine, block, self.proof_checker)
            except ChainError:
                node.count_drop("InvalidBlock")
                return
            work = node.state.copy()
            receipts = apply_block(work, block, self.schedule, self.consensus.block_reward)
            check_conservation(work, self.consensus.block_reward, block.header.height)
            self._install(node, mine + [block], work, [(block, receipts)])
            return
        chosen = fork_choice([mine, incoming])
        if chosen is mine:
            return
        try:
            validate_chain(incoming, self.proof_checker)
        except ChainError:
            node.count_drop("InvalidChain")
            return
        world = self.genesis_world.copy()
        records = []
        for block in incoming[1:]:
            receipts = apply_block(world, block, self.schedule, self.consensus.block_reward)
            check_conservation(world, self.consensus.block_reward, block.header.height)
            records.append((block, receipts))
        self._install(node, list(incoming), world, records, rebuilt=True)

    def _install(self, node: SimNode, chain: list[Block], state: WorldState,
                 records: list[tuple[Block, list[Receipt]]], rebuilt: bool = False) -> None:
        check_conservation(state, self.consensus.block_reward, chain[-1].header.height)
        node.chain = chain
        node.state = state
        if rebuilt:
            node.receipts = {}
        for block, receipts in records:
            for tx, receipt in zip(block.transactions, receipts):
                node.receipts[receipt.tx_hash] = (block.header.height, receipt)
        # prune sealed or stale mempool entries
        for (sender, nonce) in list(node.mempool):
            account = state.accounts.get(sender)
            if account is not None and nonce < account.nonce:
                del node.mempool[(sender, nonce)]
        self._observe_own_receipts(node, records)

    def _observe_own_receipts(self, node: SimNode,
                              records: list[tuple[Block, list[Receipt]]]) -> None:
        for block, receipts in records:
            for tx, receipt in zip(block.transactions, receipts):
                if tx.sender != node.address:
                    continue
                node.inflight.pop(tx.nonce, None)
                if (
                    node.spec.kind == KIND_CUSTOMER
                    and receipt.revert_reason == OUTDATED_VERSION
                    and not node.downloading
                    and self._still_outdated(node)
                ):
                    self._start_download(node)

    def _still_outdated(self, node: SimNode) -> bool:
        contract = node.state.contract
        record = contract.devices.get(node.address)
        return record is not None and record.firmware_version < contract.current_version

    def _start_download(self, node: SimNode) -> None:
        node.downloading = True
        if self.repo_name is None:
            # no repository in the topology: apply straight away
            self._finish_download(node, node.state.contract.current_version)
            return
        self.queue.push(self.tick + self.latency(node.name, self.repo_name),
                        EventKind.BEGIN_DOWNLOAD, customer=node.name, repo=self.repo_name)

    def _handle_begin_download(self, data: dict) -> None:
        repo = self.nodes[data["repo"]]
        version = repo.state.contract.current_version
        customer = data["customer"]
        self.queue.push(self.tick + self.latency(data["repo"], customer),
                        EventKind.FINISH_DOWNLOAD, customer=customer, version=version)

    def _handle_finish_download(self, data: dict) -> None:
        node = self.nodes[data["customer"]]
        self._finish_download(node, data["version"])

    def _finish_download(self, node: SimNode, version: int) -> None:
        node.local_firmware = max(node.local_firmware, version)
        tx = self._build_tx(node, ContractCall(METHOD_APPLY_UPDATE))
        self._broadcast_tx(node, tx)
        node.downloading = False

    # -- outputs -----------------------------------------------------------

    def final_chain(self) -> list[Block]:
        return list(self.observer.chain)

    def final_state(self) -> WorldState:
        return self.observer.state

    def walk_final_chain(self):
        """Re-execute the observer's chain from genesis, yielding
        (block, receipts, world-after-block)."""
        world = self.genesis_world.copy()
        for block in self.observer.chain[1:]:
            receipts = apply_block(world, block, self.schedule, self.consensus.block_reward)
            yield block, receipts, world

    def metrics_rows(self) -> list[MetricRow]:
        """One row per gas event on the final chain, plus payout and reward rows."""
        rows: list[MetricRow] = []
        world = self.genesis_world.copy()
        for block in self.observer.chain[1:]:
            height = block.header.height
            ts = block.header.timestamp
            ctx = BlockContext(height=height, producer=block.header.producer)
            for tx in block.transactions:
                receipt = execute(tx, world, self.schedule, ctx)
                sender_balance = world.accounts[tx.sender].balance
                rows.append(MetricRow(
                    tick=ts, height=height, node=self.node_label(tx.sender),
                    event=_event_name(tx), tx_hash=receipt.tx_hash.hex(),
                    gas_used=receipt.gas_used, fee=receipt.fee,
                    balance_after=sender_balance, detail=_detail(receipt),
                ))
                for ev in receipt.events:
                    if isinstance(ev, Reimbursed):
                        label, to, amount = "Reimbursed", ev.to, ev.amount
                    elif isinstance(ev, Granted):
                        label, to, amount = "Granted", ev.to, ev.amount
                    else:
                        continue
                    rows.append(MetricRow(
                        tick=ts, height=height, node=self.node_label(to),
                        event=label, tx_hash=receipt.tx_hash.hex(),
                        gas_used=0, fee=0,
                        balance_after=world.accounts[to].balance,
                        detail=str(amount),
                    ))
            finalize_block(world, block.header.producer, self.consensus.block_reward)
            rows.append(MetricRow(
                tick=ts, height=height, node=self.node_label(block.header.producer),
                event="BlockReward", tx_hash="",
                gas_used=0, fee=0,
                balance_after=world.accounts[block.header.producer].balance,
                detail=str(self.consensus.block_reward),
            ))
        return rows

    def summary(self) -> dict:
        world = self.final_state()
        penalties = reimbursed = granted = fees = 0
        for _, receipt in self.observer.receipts.values():
            fees += receipt.fee
            for ev in receipt.events:
                if isinstance(ev, PenaltyApplied):
                    penalties += ev.amount
                elif isinstance(ev, Reimbursed):
                    reimbursed += ev.amount
                elif isinstance(ev, Granted):
                    granted += ev.amount
        return {
            "final_height": self.observer.height(),
            "tip_hash": self.observer.tip_hash().hex(),
            "final_state_digest": world.digest().hex(),
            "seed": self.seed,
            "balances": {
                self.node_label(a): acct.balance for a, acct in sorted(world.accounts.items())
            },
            "penalty_pool": world.contract.penalty_pool,
            "pending_reimbursements": {
                self.node_label(a): v
                for a, v in sorted(world.contract.pending_reimbursements.items())
            },
            "totals": {
                "penalties_collected": penalties,
                "reimbursed_paid": reimbursed,
                "granted": granted,
                "fees": fees,
            },
            "drops": {node.name: node.drop_count for node in self.node_order},
            "epochs_completed": self.observer.height() // world.contract.epoch_length,
        }


def _event_name(tx: Transaction) -> str:
    kind = tx.kind
    if isinstance(kind, Transfer):
        return "Transfer"
    if isinstance(kind, Migrate):
        return "Migrate"
    if isinstance(kind, PermissionUpdate):
        return "PermissionUpdate"
    return {
        METHOD_REGISTER: "Register",
        METHOD_SUBMIT_DATA: "SubmitData",
        METHOD_APPLY_UPDATE: "ApplyUpdate",
        METHOD_REPORT_MALICIOUS: "Report",
        METHOD_DISTRIBUTE: "Distribute",
    }.get(kind.method_id, f"Call{kind.method_id}")


def _detail(receipt: Receipt) -> str:
    if receipt.success:
        return "ok"
    for ev in receipt.events:
        if isinstance(ev, UpdateRequired):
            return f"{receipt.revert_reason} url={ev.url}"
    return receipt.revert_reason or "reverted"


def init_sim(scenario: Scenario, seed: Optional[int] = None) -> Sim:
    """Validate the scenario and build the initial simulation state."""
    return Sim(scenario, seed)
