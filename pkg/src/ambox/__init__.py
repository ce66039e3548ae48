"""AmBox: ambient monitoring devices wired to a verifiable event ledger.

The package provides four cooperating roles (node, mote, ledger, operator),
a fault-injecting transport layer with simulated and real-socket backends,
and a deterministic scenario harness that replays partition, tamper, and
latency experiments on a virtual clock.
"""

__version__ = "0.1.0"
