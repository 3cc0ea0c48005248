"""In-process client facade for accounts, transactions, and queries.

A handle binds one keypair to one simulated node.  Submissions are signed,
nonce-filled from a local cache, and admitted synchronously at the bound
node, so admission drop reasons surface as exceptions.  Queries read the
bound node's current snapshot and never charge gas or change state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Union

from .contract import Receipt, get_activity
from .crypto import Keypair
from .ledger import BadNonce, Transaction, TxKind, sign_transaction, tx_hash
from .netsim import Sim, SimNode

PENDING = "pending"
UNKNOWN = "unknown"


class UnknownAddressError(KeyError):
    """Queried a device record for an address that never registered."""


def create_account(sim: Sim, seed: bytes) -> tuple[Keypair, bytes]:
    """Derive a keypair from the seed and register its public key with the
    network's verifier registry.  Deterministic: one seed, one address."""
    keypair = sim.scheme.keypair_from_seed(seed)
    sim.keys[keypair.address] = keypair.public_key
    return keypair, keypair.address


@dataclass
class ClientHandle:
    sim: Sim
    node: SimNode
    keypair: Keypair
    next_nonce: int = 0

    @classmethod
    def bind(cls, sim: Sim, keypair: Keypair, node_name: Optional[str] = None) -> "ClientHandle":
        node = sim.nodes[node_name] if node_name else sim.observer
        account = node.state.accounts.get(keypair.address)
        return cls(sim=sim, node=node, keypair=keypair,
                   next_nonce=account.nonce if account else 0)

    def submit(self, kind: TxKind, payload: bytes = b"",
               gas_limit: Optional[int] = None, gas_price: Optional[int] = None) -> bytes:
        """Sign, fill the nonce, and enqueue at the bound node.

        Returns the sealed transaction digest.  Admission failures raise;
        a BadNonce rejection repairs the local nonce cache before
        propagating, so the caller can simply retry.
        """
        run = self.sim.scenario.run
        tx = Transaction(
            sender=self.keypair.address,
            nonce=self.next_nonce,
            kind=kind,
            payload=payload,
            gas_limit=run.tx_gas_limit if gas_limit is None else gas_limit,
            gas_price=run.tx_gas_price if gas_price is None else gas_price,
        )
        tx = sign_transaction(tx, self.keypair.secret, self.sim.scheme)
        try:
            self.sim.admit_to_mempool(self.node, tx, raise_on_drop=True)
        except BadNonce:
            account = self.node.state.accounts.get(self.keypair.address)
            self.next_nonce = account.nonce if account else 0
            raise
        self.next_nonce += 1
        return tx_hash(tx)

    def get_receipt(self, digest: bytes) -> Union[Receipt, str]:
        """Receipt once sealed on the node's best chain, PENDING while in its
        mempool, UNKNOWN otherwise."""
        found = self.node.receipts.get(digest)
        if found is not None:
            return found[1]
        for tx in self.node.mempool.values():
            if tx_hash(tx) == digest:
                return PENDING
        return UNKNOWN

    def receipt_height(self, digest: bytes) -> Optional[int]:
        found = self.node.receipts.get(digest)
        return found[0] if found is not None else None

    # -- read-only queries --------------------------------------------------

    def balance(self, address: Optional[bytes] = None) -> int:
        address = address or self.keypair.address
        account = self.node.state.accounts.get(address)
        return account.balance if account else 0

    def device(self, address: Optional[bytes] = None) -> dict:
        address = address or self.keypair.address
        record = self.node.state.contract.devices.get(address)
        if record is None:
            raise UnknownAddressError(address.hex())
        return {
            "address": record.address.hex(),
            "firmware_version": record.firmware_version,
            "registered_at": record.registered_at,
            "window_tx_count": record.window_tx_count,
            "total_gas_spent": record.total_gas_spent,
            "flagged": record.flagged,
        }

    def activity(self, address: Optional[bytes] = None) -> list:
        address = address or self.keypair.address
        return get_activity(self.node.state.contract, address)

    def contract_meta(self) -> dict:
        contract = self.node.state.contract
        return {
            "version": contract.current_version,
            "update_url": contract.update_url,
            "block_interval": contract.block_interval,
        }
