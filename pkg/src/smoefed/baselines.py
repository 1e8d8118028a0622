"""Rank-compression baselines.

Heterogeneous-rank methods are represented by a single scheme: truncate
the merged LoRA delta to the client's rank budget via SVD on the way
down, zero-pad back to the global rank on the way up. This deliberately
collapses the published methods' internals (self-pruning regularizers,
exact redistribution pipelines) to their shared comparison point: rank
compression of the global matrices. The trivial baseline needs no code
here; it is a federation run with a globally small rank.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .federation import GlobalState
from .moe import LoraPair
from .numerics import svd_truncate


def compress_for_client(global_state: GlobalState, r_i: int) -> list[LoraPair]:
    """Best rank-r_i factor pair per expert.

    Truncation operates on the merged delta A @ B, since that is the
    quantity the forward pass sees. The client alpha is rescaled so
    (alpha_i / r_i) L R matches (alpha / r) A B in delta space.
    """
    compressed = []
    for pair in global_state.loras:
        if not 1 <= r_i <= pair.rank:
            raise DomainError(f"r_i={r_i} out of range for global rank {pair.rank}")
        left, right = svd_truncate(pair.a @ pair.b, r_i)
        alpha_i = pair.alpha * r_i / pair.rank
        compressed.append(LoraPair(left, right, r_i, alpha_i))
    return compressed


def decompress_update(pair: LoraPair, r_global: int,
                      alpha_global: float) -> LoraPair:
    """Zero-pad a rank-r_i pair up to the global rank; the merged delta
    is unchanged (alpha goes back to the global value to compensate the
    alpha/rank scaling)."""
    if pair.rank > r_global:
        raise DomainError(f"client rank {pair.rank} exceeds global rank {r_global}")
    if pair.rank == r_global:
        return LoraPair(pair.a.copy(), pair.b.copy(), r_global, alpha_global)
    pad = r_global - pair.rank
    a = np.hstack([pair.a, np.zeros((pair.a.shape[0], pad))])
    b = np.vstack([pair.b, np.zeros((pad, pair.b.shape[1]))])
    return LoraPair(a, b, r_global, alpha_global)
