import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))


def base_scenario_dict(**overrides) -> dict:
    """One admin, one mining edge server, one customer; PoW difficulty 16."""
    data = {
        "consensus": {"mode": "pow", "difficulty": 16, "block_reward": 10,
                      "target_block_interval": 10},
        "contract": {"version": 1, "epoch_length": 20, "epoch_mint": 0,
                     "block_interval": 10},
        "nodes": [
            {"name": "admin", "kind": "admin", "balance": 10_000},
            {"name": "edge1", "kind": "edge_server", "balance": 2_000},
            {"name": "dev", "kind": "customer", "balance": 5_000, "submit_period": 10},
        ],
        "run": {"max_blocks": 30, "seed": 5},
    }
    data.update(overrides)
    return data
