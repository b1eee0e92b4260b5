"""fedledger: deterministic simulator for a two-tier federated ledger.

Permissioned quorum-based ledgers per domain, a public work-sealed
inter-ledger federating them, a broker contract escrowing cross-domain
data-service payments, and a discrete-event network simulator driving
the whole protocol reproducibly from a single seed.
"""

from .chain import (
    Block,
    Checkpoint,
    IntraTx,
    Ledger,
    NotCommitted,
    make_checkpoint,
    verify_checkpoint,
)
from .crypto import Keyring, sha256
from .harness import batch, load_scenario, run_scenario, verify_log
from .metrics import MetricsReport
from .scenario import Scenario

__all__ = [
    "Block",
    "Checkpoint",
    "IntraTx",
    "Keyring",
    "Ledger",
    "MetricsReport",
    "NotCommitted",
    "Scenario",
    "batch",
    "load_scenario",
    "make_checkpoint",
    "run_scenario",
    "sha256",
    "verify_checkpoint",
    "verify_log",
]

__version__ = "0.1.0"
