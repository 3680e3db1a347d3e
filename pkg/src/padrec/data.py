"""Interaction logs, leave-one-out splitting, text-embedding files, and the
seeded synthetic world used for end-to-end validation.

TSV interaction format, one record per line:
    user \t item \t timestamp \t label
where label is "1"/"0" (click) or "r:<1-5>" (rating; positive iff rating > 3).

Text-embedding file (PADV1): magic "PADV1", u32 row count, u32 dimension,
then row-major little-endian float32. A companion index file lists one item
id per row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng

MAX_SEQ_LEN = 23
MIN_INTERACTIONS = 5
TEXT_MAGIC = b"PADV1"


@dataclass
class Interaction:
    user: str
    item: str
    timestamp: int
    positive: bool


@dataclass
class InteractionLog:
    records: list[Interaction] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def load_tsv(path: str) -> InteractionLog:
    log = InteractionLog()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, "
                    f"got {len(parts)}")
            user, item, ts_str, label = parts
            try:
                ts = int(ts_str)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad timestamp {ts_str!r}")
            if ts < 0:
                raise ValueError(f"{path}:{lineno}: negative timestamp")
            if label in ("0", "1"):
                positive = label == "1"
            elif label.startswith("r:"):
                try:
                    rating = int(label[2:])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad rating {label!r}")
                if not 1 <= rating <= 5:
                    raise ValueError(
                        f"{path}:{lineno}: rating {rating} outside 1-5")
                positive = rating > 3
            else:
                raise ValueError(f"{path}:{lineno}: bad label {label!r}")
            log.records.append(Interaction(user, item, ts, positive))
    return log


@dataclass
class SplitDataset:
    """Per-user sequences with train/val/test targets at l-2, l-1, l."""

    vocab: dict[str, int]
    items: list[str]
    user_ids: list[str]
    sequences: list[np.ndarray]
    train_freq: np.ndarray

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def task(self, user_index: int, which: str) -> tuple[np.ndarray, int]:
        """(behavior prefix, target id) for one of train/val/test."""
        seq = self.sequences[user_index]
        offset = {"train": 3, "val": 2, "test": 1}[which]
        t = len(seq) - offset
        return seq[:t], int(seq[t])


def preprocess_split(log: InteractionLog) -> SplitDataset:
    """Filter, order, truncate, and split per-user positive histories.

    Keeps users with at least MIN_INTERACTIONS positives, sorts each history
    by (timestamp, item id, input order), keeps the latest MAX_SEQ_LEN items,
    and counts training frequencies over the training view only (positions
    up to and including the train target).
    """
    per_user: dict[str, list[tuple[int, str, int]]] = {}
    for order, rec in enumerate(log.records):
        if rec.positive:
            per_user.setdefault(rec.user, []).append(
                (rec.timestamp, rec.item, order))
    kept = {u: rows for u, rows in per_user.items()
            if len(rows) >= MIN_INTERACTIONS}
    if not kept:
        raise ValueError("preprocess: no user has enough positive interactions")

    vocab: dict[str, int] = {}
    items: list[str] = []
    user_ids = sorted(kept)
    sequences = []
    for u in user_ids:
        rows = sorted(kept[u])  # (timestamp, item, input order)
        rows = rows[-MAX_SEQ_LEN:]
        seq = np.empty(len(rows), dtype=np.int64)
        for i, (_, item, _) in enumerate(rows):
            if item not in vocab:
                vocab[item] = len(items)
                items.append(item)
            seq[i] = vocab[item]
        sequences.append(seq)

    train_freq = np.zeros(len(items), dtype=np.int64)
    for seq in sequences:
        train_view = seq[: len(seq) - 2]  # behaviors + train target
        np.add.at(train_freq, train_view, 1)
    return SplitDataset(vocab, items, user_ids, sequences, train_freq)


# ---------------------------------------------------------------------------
# text-embedding files


def write_text_embeddings(path: str, index_path: str, matrix: np.ndarray,
                          item_ids: list[str]) -> None:
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] != len(item_ids):
        raise ValueError("write_text_embeddings: row/index mismatch")
    with open(path, "wb") as fh:
        fh.write(TEXT_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f4").tobytes())
    with open(index_path, "w", encoding="utf-8") as fh:
        for item in item_ids:
            fh.write(item + "\n")


def read_text_embeddings(path: str, index_path: str
                         ) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != TEXT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a PADV1 file")
    if len(blob) < 13:
        raise ValueError(f"{path}: truncated header")
    rows, dim = struct.unpack("<II", blob[5:13])
    if dim <= 0:
        raise ValueError(f"{path}: non-positive dimension {dim}")
    payload = blob[13:]
    expected = rows * dim * 4
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    with open(index_path, "r", encoding="utf-8") as fh:
        item_ids = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if len(item_ids) != rows:
        raise ValueError(
            f"{index_path}: {len(item_ids)} ids for {rows} embedding rows")
    return np.array(matrix), item_ids


def load_text_embeddings(path: str, index_path: str, vocab: dict[str, int],
                         strict: bool = True) -> np.ndarray:
    """Returns the frozen matrix reordered to dense vocabulary ids.

    Items missing from the file raise (strict) or fall back to zero rows.
    """
    matrix, item_ids = read_text_embeddings(path, index_path)
    row_of = {item: i for i, item in enumerate(item_ids)}
    out = np.zeros((len(vocab), matrix.shape[1]), dtype=np.float32)
    missing = []
    for item, dense in vocab.items():
        row = row_of.get(item)
        if row is None:
            missing.append(item)
        else:
            out[dense] = matrix[row]
    if missing and strict:
        shown = ", ".join(sorted(missing)[:20])
        raise ValueError(
            f"{path}: no text embedding for {len(missing)} items: {shown}")
    return out


# ---------------------------------------------------------------------------
# synthetic world


def gen_synthetic(
    seed: int,
    n_users: int,
    n_items: int,
    n_cold: int,
    latent_dim: int = 8,
    noise: float = 0.1,
    text_dim: int = 32,
    cold_test_fraction: float = 0.12,
    explore: float = 0.2,
) -> tuple[InteractionLog, np.ndarray, list[str]]:
    """Seeded latent-space world with designated cold items.

    Each item carries a latent vector whose first half is text-visible and
    whose second half is a hidden collaborative component; text embeddings
    are a random linear map of the visible part plus Gaussian noise, so text
    predicts transitions without exhausting them. User trajectories are
    popularity-weighted nearest-neighbor Markov walks over the full latent
    space, with an `explore` chance per step of jumping uniformly (this
    spreads test mass into the tail). Cold items never enter the walk; a
    fraction of users get their final (test) interaction replaced by a
    latent-nearby cold item, which leaves every cold item with training
    frequency 0 but decent test support.
    """
    if n_cold >= n_items:
        raise ValueError("gen_synthetic: need n_cold < n_items")
    rng = make_rng(seed, "synth")
    item_ids = [f"it{i:05d}" for i in range(n_items)]
    visible = rng.normal(size=(n_items, latent_dim))
    hidden = rng.normal(size=(n_items, latent_dim))
    latents = np.concatenate([visible, hidden], axis=1)
    mix = rng.normal(scale=1.0 / np.sqrt(latent_dim),
                     size=(latent_dim, text_dim))
    text = visible @ mix + noise * rng.normal(size=(n_items, text_dim))

    n_ord = n_items - n_cold
    cold = np.arange(n_ord, n_items)
    popularity = 1.0 / np.arange(1, n_ord + 1) ** 0.9
    popularity /= popularity.sum()

    # transition rows: popularity-biased softmax over latent proximity
    d2 = ((latents[:n_ord, None, :] - latents[None, :n_ord, :]) ** 2).sum(-1)
    trans = popularity[None, :] * np.exp(-d2 / 2.0)
    np.fill_diagonal(trans, 0.0)
    trans_cum = np.cumsum(trans / trans.sum(axis=1, keepdims=True), axis=1)

    # cold replacement rows: proximity-only softmax over cold items
    d2c = ((latents[:n_ord, None, :] - latents[None, cold, :]) ** 2).sum(-1)
    coldp = np.exp(-d2c / 2.0)
    coldp_cum = np.cumsum(coldp / coldp.sum(axis=1, keepdims=True), axis=1)

    pop_cum = np.cumsum(popularity)
    log = InteractionLog()
    for u in range(n_users):
        length = int(rng.integers(MIN_INTERACTIONS + 1, MAX_SEQ_LEN + 5))
        cur = int(np.searchsorted(pop_cum, rng.random()))
        seq = [cur]
        for _ in range(length - 1):
            if rng.random() < explore:
                cur = int(rng.integers(n_ord))
            else:
                cur = int(np.searchsorted(trans_cum[cur], rng.random()))
            seq.append(cur)
        if rng.random() < cold_test_fraction:
            seq[-1] = int(cold[np.searchsorted(coldp_cum[seq[-2]],
                                               rng.random())])
        user = f"u{u:06d}"
        for t, item in enumerate(seq):
            log.records.append(Interaction(user, item_ids[item], t, True))
    return log, text.astype(np.float32), item_ids
