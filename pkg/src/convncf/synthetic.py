"""Seeded synthetic interaction logs with a planted low-rank preference
structure, used by the desk-scale learning tests and pipeline smoke runs.

Users and items get latent vectors of a small fixed rank; each user's
interactions are the top items of their noisy affinity row. Affinities are
z-scored per item first, which flattens global popularity so that a
popularity ranker stays weak while the low-rank structure remains fully
learnable. Timestamps are uniform random, making the held-out latest item a
uniform draw from each user's planted favorites.
"""

from __future__ import annotations

import numpy as np

Triple = tuple[str, str, int]


def planted_interactions(
    M: int = 200,
    N: int = 300,
    rank: int = 8,
    per_user: int = 20,
    noise: float = 0.5,
    seed: int = 0,
) -> list[Triple]:
    """Raw (user id, item id, timestamp) records, one block per user."""
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(M, rank))
    V = rng.normal(size=(N, rank))
    S = (U @ V.T) / np.sqrt(rank)
    S = (S - S.mean(axis=0)) / (S.std(axis=0) + 1e-12)
    triples: list[Triple] = []
    for u in range(M):
        noisy = S[u] + rng.gumbel(0.0, noise, size=N)
        chosen = np.argsort(-noisy)[:per_user]
        stamps = rng.integers(100_000, 200_000, size=per_user)
        for i, ts in zip(chosen.tolist(), stamps.tolist()):
            triples.append((f"u{u:03d}", f"i{i:03d}", int(ts)))
    return triples


def write_interactions(triples: list[Triple], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, item, ts in triples:
            fh.write(f"{user}\t{item}\t{ts}\n")
