"""Implicit-feedback data pipeline.

Raw logs become per-user interaction sequences ordered by timestamp (ties
keep file order), short users and optionally rare items are filtered, and
dense internal ids are assigned by first appearance: users 0..U-1, items
1..V with 0 reserved for padding. Splits, masking, padding, negative
sampling, and the on-disk dataset format all live here.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CandidateShortageError,
    ContractError,
    EmptyDatasetError,
    ParseError,
    SchemaError,
)
from .model import PAD_ID
from .seeds import derive_rng

DATASET_FILE = "dataset.txt"
ITEM_VOCAB_FILE = "item_vocab.txt"
USER_VOCAB_FILE = "user_vocab.txt"


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


@dataclass
class DatasetStats:
    num_users: int
    num_items: int
    num_actions: int
    avg_length: float
    density: float


@dataclass
class InteractionDataset:
    user_sequences: list[list[int]]
    item_to_internal: dict[str, int]
    internal_to_item: list[str]  # index 0 unused (padding)
    user_to_internal: dict[str, int]
    internal_to_user: list[str]
    popularity: np.ndarray  # interaction count per item, index 0 unused
    stats: DatasetStats = field(init=False)

    def __post_init__(self):
        num_users = len(self.user_sequences)
        num_items = len(self.internal_to_item) - 1
        num_actions = sum(len(s) for s in self.user_sequences)
        self.stats = DatasetStats(
            num_users=num_users,
            num_items=num_items,
            num_actions=num_actions,
            avg_length=num_actions / num_users if num_users else 0.0,
            density=num_actions / (num_users * num_items) if num_users and num_items else 0.0,
        )

    @property
    def num_users(self) -> int:
        return self.stats.num_users

    @property
    def num_items(self) -> int:
        return self.stats.num_items


@dataclass
class LeaveOneOutSplit:
    train: list[list[int]]  # per user, all but the last two interactions
    val: list[int]          # second-to-last item
    test: list[int]         # last item


@dataclass
class MaskedBatch:
    """Training rows with their masked-position labels, flattened.

    label_rows / label_positions / labels are parallel arrays: row r of
    input_ids holds the mask token at each listed position, whose true item
    is the matching label.
    """

    input_ids: np.ndarray       # (batch, max_len) int64
    pad_flags: np.ndarray       # (batch, max_len) bool
    label_rows: np.ndarray      # (labels,) int64
    label_positions: np.ndarray # (labels,) int64
    labels: np.ndarray          # (labels,) int64

    def validate(self, mask_id: int) -> None:
        got = self.input_ids[self.label_rows, self.label_positions]
        if not np.all(got == mask_id):
            raise ContractError("a labeled position does not hold the mask token")
        if np.any(self.labels == PAD_ID):
            raise ContractError("padding must never be labeled")
        rows_with_labels = np.unique(self.label_rows)
        if len(rows_with_labels) != self.input_ids.shape[0]:
            raise ContractError("every batch row needs at least one label")


# ----- parsing --------------------------------------------------------------


def parse_movielens(path: str) -> list[InteractionRecord]:
    """Read `user::item::rating::timestamp` lines; ratings are ignored."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(
                    f"{path}:{lineno}: expected 4 '::'-separated fields, got {len(parts)}"
                )
            user, item, _rating, ts = parts
            records.append(InteractionRecord(user, item, _parse_timestamp(ts, path, lineno)))
    return records


def parse_csv(path: str, user_col="user", item_col="item", time_col="timestamp"):
    """Read (user, item, timestamp) from a CSV.

    String column specs are header names; integer specs are 0-based
    positions in a headerless file.
    """
    cols = (user_col, item_col, time_col)
    positional = all(isinstance(c, int) for c in cols)
    if not positional and not all(isinstance(c, str) for c in cols):
        raise SchemaError("column specs must be all names or all positions")
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if positional:
            needed = max(cols) + 1
            for lineno, row in enumerate(reader, 1):
                if not row:
                    continue
                if len(row) < needed:
                    raise ParseError(f"{path}:{lineno}: expected >= {needed} columns")
                records.append(InteractionRecord(
                    row[user_col].strip(), row[item_col].strip(),
                    _parse_timestamp(row[time_col], path, lineno),
                ))
        else:
            header = next(reader, None)
            if header is None:
                return []
            names = [h.strip() for h in header]
            try:
                idx = [names.index(c) for c in cols]
            except ValueError as exc:
                raise SchemaError(f"{path}: missing column in header {names}: {exc}") from exc
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) <= max(idx):
                    raise ParseError(f"{path}:{lineno}: too few columns")
                records.append(InteractionRecord(
                    row[idx[0]].strip(), row[idx[1]].strip(),
                    _parse_timestamp(row[idx[2]], path, lineno),
                ))
    return records


def _parse_timestamp(text: str, path: str, lineno: int) -> int:
    try:
        ts = int(text.strip())
    except ValueError:
        raise ParseError(f"{path}:{lineno}: timestamp {text!r} is not an integer") from None
    if ts < 0:
        raise ParseError(f"{path}:{lineno}: negative timestamp {ts}")
    return ts


# ----- dataset construction --------------------------------------------------


def build_dataset(
    records: list[InteractionRecord],
    min_user_interactions: int = 5,
    min_item_interactions: int = 0,
) -> InteractionDataset:
    """Filter, order, and re-index raw interactions.

    User and item minimum-count filters are re-applied alternately until no
    further rows drop, so both constraints hold simultaneously at the end.
    """
    keep = list(records)
    changed = True
    while changed:
        changed = False
        user_counts: dict[str, int] = {}
        for r in keep:
            user_counts[r.user] = user_counts.get(r.user, 0) + 1
        filtered = [r for r in keep if user_counts[r.user] >= min_user_interactions]
        changed |= len(filtered) != len(keep)
        keep = filtered
        if min_item_interactions > 0:
            item_counts: dict[str, int] = {}
            for r in keep:
                item_counts[r.item] = item_counts.get(r.item, 0) + 1
            filtered = [r for r in keep if item_counts[r.item] >= min_item_interactions]
            changed |= len(filtered) != len(keep)
            keep = filtered
    if not keep:
        raise EmptyDatasetError("no interactions survived filtering")

    user_to_internal: dict[str, int] = {}
    internal_to_user: list[str] = []
    item_to_internal: dict[str, int] = {}
    internal_to_item: list[str] = [""]  # index 0 is the padding id
    per_user: dict[int, list[tuple[int, int]]] = {}
    for r in keep:
        uid = user_to_internal.get(r.user)
        if uid is None:
            uid = len(internal_to_user)
            user_to_internal[r.user] = uid
            internal_to_user.append(r.user)
            per_user[uid] = []
        iid = item_to_internal.get(r.item)
        if iid is None:
            iid = len(internal_to_item)
            item_to_internal[r.item] = iid
            internal_to_item.append(r.item)
        per_user[uid].append((r.timestamp, iid))

    sequences = []
    popularity = np.zeros(len(internal_to_item), dtype=np.int64)
    for uid in range(len(internal_to_user)):
        rows = per_user[uid]
        rows.sort(key=lambda pair: pair[0])  # stable: ties keep file order
        seq = [iid for _, iid in rows]
        for iid in seq:
            popularity[iid] += 1
        sequences.append(seq)

    return InteractionDataset(
        user_sequences=sequences,
        item_to_internal=item_to_internal,
        internal_to_item=internal_to_item,
        user_to_internal=user_to_internal,
        internal_to_user=internal_to_user,
        popularity=popularity,
    )


def leave_one_out(dataset: InteractionDataset) -> LeaveOneOutSplit:
    """Last item per user becomes test, second-to-last validation."""
    train, val, test = [], [], []
    for uid, seq in enumerate(dataset.user_sequences):
        if len(seq) < 3:
            raise ContractError(
                f"user {uid} has {len(seq)} interactions; need >= 3 to split"
            )
        train.append(seq[:-2])
        val.append(seq[-2])
        test.append(seq[-1])
    return LeaveOneOutSplit(train=train, val=val, test=test)


# ----- masking and batching --------------------------------------------------


def cloze_mask(seq: list[int], proportion: float, rng: np.random.Generator,
               mask_id: int, num_masks: int | None = None):
    """Replace k random positions with the mask token.

    k is max(1, floor(proportion * len(seq))) unless num_masks pins it.
    Returns (masked sequence, positions ascending, true items).
    """
    n = len(seq)
    if n == 0:
        raise ContractError("cannot mask an empty sequence")
    if num_masks is not None:
        k = min(max(1, num_masks), n)
    else:
        if not (0.0 < proportion < 1.0):
            raise ContractError(f"mask proportion must be in (0, 1), got {proportion}")
        k = max(1, math.floor(proportion * n))
    positions = sorted(int(p) for p in rng.choice(n, size=k, replace=False))
    masked = list(seq)
    labels = []
    for p in positions:
        labels.append(masked[p])
        masked[p] = mask_id
    return masked, positions, labels


def last_item_mask(seq: list[int], mask_id: int):
    """Mask only the final position (the next-item fine-tuning form)."""
    if not seq:
        raise ContractError("cannot mask an empty sequence")
    masked = list(seq)
    labels = [masked[-1]]
    masked[-1] = mask_id
    return masked, [len(seq) - 1], labels


def pad_truncate(ids: list[int], max_len: int, pad_id: int = PAD_ID) -> list[int]:
    """Keep the most recent max_len entries, left-padding short sequences."""
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    tail = list(ids)[-max_len:]
    return [pad_id] * (max_len - len(tail)) + tail


def make_training_batches(
    split: LeaveOneOutSplit,
    *,
    num_items: int,
    max_len: int,
    mask_proportion: float,
    batch_size: int,
    epoch_seed: int,
    last_item_instances: int = 1,
    masks_per_instance: int | None = None,
):
    """Yield shuffled MaskedBatch objects for one epoch.

    Every user contributes one freshly masked cloze instance of their
    training prefix plus last_item_instances copies of the
    final-position-masked instance.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    mask_id = num_items + 1
    rng = np.random.Generator(np.random.PCG64(epoch_seed))
    instances = []
    for seq in split.train:
        window = seq[-max_len:]
        instances.append(_instance_row(
            *cloze_mask(window, mask_proportion, rng, mask_id, masks_per_instance),
            max_len=max_len,
        ))
        for _ in range(last_item_instances):
            instances.append(_instance_row(*last_item_mask(window, mask_id), max_len=max_len))
    order = rng.permutation(len(instances))
    for start in range(0, len(instances), batch_size):
        chunk = [instances[i] for i in order[start:start + batch_size]]
        rows = np.stack([c[0] for c in chunk])
        label_rows, label_positions, labels = [], [], []
        for r, (_, positions, true_items) in enumerate(chunk):
            label_rows.extend([r] * len(positions))
            label_positions.extend(positions)
            labels.extend(true_items)
        batch = MaskedBatch(
            input_ids=rows,
            pad_flags=rows == PAD_ID,
            label_rows=np.asarray(label_rows, dtype=np.int64),
            label_positions=np.asarray(label_positions, dtype=np.int64),
            labels=np.asarray(labels, dtype=np.int64),
        )
        batch.validate(mask_id)
        yield batch


def _instance_row(masked: list[int], positions: list[int], labels: list[int], *,
                  max_len: int):
    offset = max_len - len(masked)
    row = np.full(max_len, PAD_ID, dtype=np.int64)
    row[offset:] = masked
    return row, [p + offset for p in positions], labels


# ----- negative sampling ------------------------------------------------------


def popularity_negatives(
    dataset: InteractionDataset,
    user: int,
    count: int = 100,
    *,
    rng: np.random.Generator | None = None,
    seed: int = 0,
    split_name: str = "test",
) -> list[int]:
    """Sample negatives proportional to popularity, without replacement.

    The user's full interaction history is excluded. When no generator is
    passed, one is derived from (seed, split_name, user) so candidate sets
    are reproducible and identical for every scorer sharing the seed.
    """
    if rng is None:
        rng = derive_rng(seed, "negatives", split_name, user)
    weights = dataset.popularity[1:].astype(np.float64).copy()
    for iid in dataset.user_sequences[user]:
        weights[iid - 1] = 0.0
    available = int(np.count_nonzero(weights))
    if available < count:
        raise CandidateShortageError(
            f"user {user}: only {available} catalog items outside the history, "
            f"need {count}"
        )
    chosen = []
    for _ in range(count):
        cumulative = np.cumsum(weights)
        draw = rng.random() * cumulative[-1]
        idx = int(np.searchsorted(cumulative, draw, side="right"))
        chosen.append(idx + 1)
        weights[idx] = 0.0
    return chosen


# ----- on-disk format ---------------------------------------------------------


def save_dataset(dataset: InteractionDataset, out_dir: str) -> str:
    """Write dataset.txt plus the item and user vocabulary files."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, DATASET_FILE)
    s = dataset.stats
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"users={s.num_users} items={s.num_items} actions={s.num_actions}\n")
        for uid, seq in enumerate(dataset.user_sequences):
            fh.write(f"{uid}\t{','.join(str(i) for i in seq)}\n")
    with open(os.path.join(out_dir, ITEM_VOCAB_FILE), "w", encoding="utf-8", newline="\n") as fh:
        for iid in range(1, len(dataset.internal_to_item)):
            fh.write(f"{iid}\t{dataset.internal_to_item[iid]}\n")
    with open(os.path.join(out_dir, USER_VOCAB_FILE), "w", encoding="utf-8", newline="\n") as fh:
        for uid, ext in enumerate(dataset.internal_to_user):
            fh.write(f"{uid}\t{ext}\n")
    return path


def load_dataset(path_or_dir: str) -> InteractionDataset:
    """Read a dataset directory (or its dataset.txt) back into memory."""
    if os.path.isdir(path_or_dir):
        directory = path_or_dir
        path = os.path.join(directory, DATASET_FILE)
    else:
        directory = os.path.dirname(path_or_dir)
        path = path_or_dir
    sequences = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            declared = dict(part.split("=", 1) for part in header.split())
            num_users = int(declared["users"])
            num_items = int(declared["items"])
            num_actions = int(declared["actions"])
        except (ValueError, KeyError):
            raise ParseError(f"{path}:1: bad header {header!r}") from None
        for lineno, raw in enumerate(fh, 2):
            line = raw.strip()
            if not line:
                continue
            try:
                uid_text, items_text = line.split("\t")
                uid = int(uid_text)
                seq = [int(x) for x in items_text.split(",")]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad user line") from None
            if uid != len(sequences):
                raise ParseError(f"{path}:{lineno}: user ids must be dense and ordered")
            sequences.append(seq)
    if len(sequences) != num_users:
        raise ParseError(f"{path}: header declares {num_users} users, found {len(sequences)}")
    actions = sum(len(s) for s in sequences)
    if actions != num_actions:
        raise ParseError(f"{path}: header declares {num_actions} actions, found {actions}")
    internal_to_item = [""] + [str(i) for i in range(1, num_items + 1)]
    item_to_internal = {str(i): i for i in range(1, num_items + 1)}
    internal_to_user = [str(u) for u in range(num_users)]
    user_to_internal = {str(u): u for u in range(num_users)}
    item_vocab = os.path.join(directory, ITEM_VOCAB_FILE)
    if os.path.exists(item_vocab):
        item_to_internal, internal_to_item = _read_vocab(item_vocab, num_items, first=1)
    user_vocab = os.path.join(directory, USER_VOCAB_FILE)
    if os.path.exists(user_vocab):
        user_to_internal, internal_to_user = _read_vocab(user_vocab, num_users, first=0)
    popularity = np.zeros(num_items + 1, dtype=np.int64)
    for seq in sequences:
        for iid in seq:
            if not (1 <= iid <= num_items):
                raise ParseError(f"{path}: item id {iid} outside 1..{num_items}")
            popularity[iid] += 1
    return InteractionDataset(
        user_sequences=sequences,
        item_to_internal=item_to_internal,
        internal_to_item=internal_to_item,
        user_to_internal=user_to_internal,
        internal_to_user=internal_to_user,
        popularity=popularity,
    )


def _read_vocab(path: str, expected: int, first: int):
    to_internal: dict[str, int] = {}
    to_external: list[str] = [""] * first
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            try:
                internal_text, external = line.split("\t", 1)
                internal = int(internal_text)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad vocab line") from None
            if internal != len(to_external):
                raise ParseError(f"{path}:{lineno}: vocab ids must be dense and ordered")
            to_external.append(external)
            to_internal[external] = internal
    if len(to_internal) != expected:
        raise ParseError(f"{path}: expected {expected} entries, found {len(to_internal)}")
    return to_internal, to_external


def dataset_fingerprint(path_or_dir: str) -> str:
    """Hex digest of the dataset file bytes, stored in checkpoints."""
    path = (
        os.path.join(path_or_dir, DATASET_FILE)
        if os.path.isdir(path_or_dir)
        else path_or_dir
    )
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
