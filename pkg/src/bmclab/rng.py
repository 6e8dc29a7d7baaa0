"""Counter-based random streams.

Every trajectory owns a Philox-4x64 generator whose 128-bit key is
``(master_seed, trajectory_id)``; the counter starts at zero.  Streams are
therefore independent of scheduling and identical across platforms.
Sweeps derive per-run master seeds with ``SeedSequence([seed, run_index])``.
"""
from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= _U64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def trajectory_stream(master_seed: int, trajectory_id: int) -> np.random.Generator:
    key = np.array([check_seed(master_seed), int(trajectory_id) & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derived_seed(master_seed: int, run_index: int) -> int:
    ss = np.random.SeedSequence([check_seed(master_seed), int(run_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def multinomial_rows(rng: np.random.Generator, n: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Row-wise multinomial draws by conditional binomials.

    ``out[i] ~ Multinomial(n[i], P[i])``.  Equivalent in law to numpy's
    2-d ``multinomial`` but vectorized column-by-column, which is much
    faster for few categories and many rows.
    """
    n = np.asarray(n, dtype=np.int64)
    P = np.asarray(P, dtype=float)
    S, K = P.shape
    out = np.zeros((S, K), dtype=np.int64)
    if S == 0:
        return out
    if S == 1:
        return rng.multinomial(int(n[0]), P[0] / P[0].sum())[None, :].astype(np.int64)
    rest = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]
    remaining = n.copy()
    for j in range(K - 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            pj = np.where(rest[:, j] > 0, P[:, j] / rest[:, j], 0.0)
        pj = np.clip(pj, 0.0, 1.0)
        live = remaining > 0
        if not np.any(live):
            break
        x = np.zeros(S, dtype=np.int64)
        x[live] = rng.binomial(remaining[live], pj[live])
        out[:, j] = x
        remaining -= x
    out[:, K - 1] += remaining
    return out
