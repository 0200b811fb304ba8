"""Optimistic ML fraud-proof kernel.

Subsystems: Merkle-committed memory (`merkle`), the fraud-proof VM (`fpvm`),
the deterministic fixed-point inference engine (`ml`, `lowering`), single-
and multi-phase dispute games (`dispute`, `multiphase`), incentive and
security analytics (`economics`), and the scenario CLI (`cli`).
"""

from .hashing import active_scheme, get_scheme, set_active_scheme

__all__ = ["active_scheme", "get_scheme", "set_active_scheme"]
__version__ = "0.1.0"
