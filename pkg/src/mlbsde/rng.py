"""Counter-based normal streams.

Every draw is addressed by ``(seed, domain, ids..., block)``; the Philox key is
derived from that tuple, so a path block can be regenerated at any time, in
any order and on any thread, and come out bit-identical.
"""

from __future__ import annotations

import numpy as np

# Paths are grouped in fixed-size blocks. Changing this changes every stream.
BLOCK_SIZE = 1 << 14

# Disjoint seed domains for the different kinds of simulation clouds.
DOMAIN_MULTILEVEL = 1
DOMAIN_LSMDP = 2
DOMAIN_EVAL = 3
DOMAIN_PROBE = 4
DOMAIN_ORACLE = 5

_MASK64 = (1 << 64) - 1


def _key(seed: int, domain: int, ids: tuple[int, ...], block: int) -> np.ndarray:
    words = [int(seed) & _MASK64, int(seed) >> 64 & _MASK64, domain, len(ids), *ids, block]
    return np.random.SeedSequence(words).generate_state(2, np.uint64)


def generator(seed: int, domain: int, ids: tuple[int, ...] = (), block: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, domain, tuple(ids), block)))


def normal_block(
    seed: int,
    domain: int,
    ids: tuple[int, ...],
    block: int,
    n_rows: int,
    n_paths: int,
    width: int,
) -> np.ndarray:
    """Standard normals of shape ``(n_rows, n_paths, width)`` for one path block.

    The stream is always drawn for a full block in row-major order, so entry
    ``[r, m, c]`` depends on ``(r, m, c)`` only, not on ``n_paths``.
    """
    if n_paths > BLOCK_SIZE:
        raise ValueError(f"a block holds at most {BLOCK_SIZE} paths")
    g = generator(seed, domain, ids, block)
    z = g.standard_normal((n_rows, BLOCK_SIZE, width))
    if n_paths == BLOCK_SIZE:
        return z
    return np.ascontiguousarray(z[:, :n_paths, :])


def block_slices(n_paths: int) -> list[tuple[int, int, int]]:
    """``(block, start, stop)`` triples covering ``range(n_paths)``."""
    out = []
    for b, start in enumerate(range(0, n_paths, BLOCK_SIZE)):
        out.append((b, start, min(start + BLOCK_SIZE, n_paths)))
    return out
