"""Permissioned edge-computing blockchain: ledger, consensus, contract, simulator."""

from .consensus import (
    ConsensusConfig,
    finality_check,
    fork_choice,
    pos_select,
    pow_mine,
    pow_target,
    pow_verify,
)
from .contract import (
    Action,
    ActivityEntry,
    ContractState,
    DeviceRecord,
    GasSchedule,
    QuotaConfig,
    Receipt,
    WorldState,
    execute,
)
from .crypto import Keypair, MockSignatureScheme, derive_address
from .ledger import (
    Account,
    Block,
    BlockHeader,
    ContractCall,
    Migrate,
    PermissionUpdate,
    Transaction,
    Transfer,
    append_block,
    canonical_encode,
    hash_block,
    tx_hash,
    validate_chain,
    verify_transaction,
)
from .netsim import Sim, init_sim
from .scenario import Scenario, builtin_scenario, load_scenario, parse_scenario

__version__ = "0.1.0"
