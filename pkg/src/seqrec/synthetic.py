"""Planted synthetic interaction logs with known structure.

Two generators: successor walks, where every next item is a fixed
permutation of the previous one (perfectly learnable next-item structure),
and pair-parity triples, where the middle item of each (left, middle,
right) triple is determined jointly by BOTH neighbors — the left narrows
it to a pair, the right's parity picks the member — so recovering a
masked middle item requires looking in both directions.
"""

from __future__ import annotations

import numpy as np

from .data import InteractionRecord


def successor_permutation(num_items: int, rng: np.random.Generator) -> np.ndarray:
    """A single num_items-cycle: perm[i] is the successor of item i (0-based)."""
    order = rng.permutation(num_items)
    perm = np.empty(num_items, dtype=np.int64)
    for i in range(num_items):
        perm[order[i]] = order[(i + 1) % num_items]
    return perm


def markov_records(
    num_items: int = 50,
    num_users: int = 2000,
    seq_len: int = 20,
    seed: int = 0,
) -> tuple[list[InteractionRecord], np.ndarray]:
    """Deterministic successor walks with round-robin start items.

    Returns (records, successor permutation). External ids are 1-based
    strings; the walk for a start item s is s, perm(s), perm(perm(s)), ...
    User u starts at item u % num_items, so when num_users is a multiple of
    num_items every item occurs exactly num_users * seq_len / num_items
    times: global popularity is perfectly flat and carries no signal about
    the next item, leaving sequence order as the only structure.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = successor_permutation(num_items, rng)
    records = []
    for u in range(num_users):
        item = u % num_items
        for t in range(seq_len):
            records.append(InteractionRecord(f"u{u}", str(item + 1), t))
            item = int(perm[item])
    return records, perm


def triple_records(
    group_size: int = 10,
    num_users: int = 1000,
    triples_per_user: int = 3,
    seed: int = 0,
) -> tuple[list[InteractionRecord], dict]:
    """Sequences of (left, middle, right) triples with middle = f(left, right).

    Left items are external ids 1..group_size, right items are
    group_size+1..2*group_size, and middles 2*group_size+1..4*group_size.
    The middle index is 2 * left_index + (right_index % 2): the left
    neighbor narrows the middle to a pair and the right neighbor's parity
    picks the member. Left and right are drawn independently and uniformly,
    so one-sided context caps masked-middle recovery at 1/2 (left alone)
    or 1/group_size (right alone), while two-sided context determines it.
    Use an even group_size so right parity is unbiased.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    layout = {"group_size": group_size, "triples_per_user": triples_per_user}
    for u in range(num_users):
        t = 0
        for _ in range(triples_per_user):
            left = int(rng.integers(group_size))
            right = int(rng.integers(group_size))
            middle = 2 * left + (right % 2)
            for external in (1 + left, 2 * group_size + 1 + middle, group_size + 1 + right):
                records.append(InteractionRecord(f"u{u}", str(external), t))
                t += 1
    return records, layout


def write_records_csv(records: list[InteractionRecord], path: str) -> None:
    """Write records as headerless user,item,timestamp CSV rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.user},{r.item},{r.timestamp}\n")
