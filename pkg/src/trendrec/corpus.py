"""Data model and file ingestion for messages, purchases, the item catalog,
and pre-trained embedding tables, plus the purchase-log preparation filters.

Time is an integer count of hours since a fixed epoch; hour of day is the
remainder mod 24.  All file formats are line-oriented text (tab-separated
records, space-joined token lists) so fixtures diff cleanly.  Loaded
structures are immutable and safe to share across threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "CorpusFormatError",
    "Message",
    "Item",
    "Purchase",
    "EmbeddingTable",
    "hour_of_day",
    "load_messages",
    "save_messages",
    "load_catalog",
    "save_catalog",
    "load_purchases",
    "save_purchases",
    "load_embeddings",
    "filter_active_users",
    "remove_free_items",
]

log = logging.getLogger(__name__)


class CorpusFormatError(ValueError):
    """Raised for malformed input files; message names file and line."""


def hour_of_day(hour: int) -> int:
    """Hour of day as the remainder of the hour count by 24."""
    return hour % 24


@dataclass(frozen=True)
class Message:
    id: str
    time: int
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Item:
    id: str
    tokens: tuple[str, ...]
    price: float
    avail_start: int
    avail_end: int


@dataclass(frozen=True)
class Purchase:
    user: str
    item: str
    time: int


class EmbeddingTable:
    """Mapping from string keys to fixed-dimension float64 vectors."""

    def __init__(self, dim: int, entries: Mapping[str, np.ndarray] | None = None):
        if dim <= 0:
            raise ValueError(f"embedding dim must be positive, got {dim}")
        self.dim = int(dim)
        self.entries: dict[str, np.ndarray] = {}
        self.n_duplicate_keys = 0
        if entries:
            for key, vec in entries.items():
                self.put(key, vec)

    def put(self, key: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(
                f"vector for key '{key}' has shape {vec.shape}, expected ({self.dim},)"
            )
        if key in self.entries:
            self.n_duplicate_keys += 1
        self.entries[key] = vec

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __getitem__(self, key: str) -> np.ndarray:
        return self.entries[key]

    def get(self, key: str, default=None):
        return self.entries.get(key, default)

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return load_embeddings(path)

    def save(self, path) -> None:
        lines = [f"{len(self.entries)} {self.dim}"]
        for key, vec in self.entries.items():
            lines.append(key + " " + " ".join(repr(float(v)) for v in vec))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_hour(field: str, path, lineno: int, what: str) -> int:
    try:
        value = int(field)
    except ValueError:
        raise CorpusFormatError(
            f"{path}:{lineno}: {what} '{field}' is not an integer hour"
        ) from None
    if value < 0:
        raise CorpusFormatError(f"{path}:{lineno}: {what} {value} is negative")
    return value


def load_messages(path, allowed_tokens: set[str] | None = None) -> list[Message]:
    """Load ``id <TAB> hour <TAB> tokens`` records.

    ``allowed_tokens`` is the pluggable noun-filter hook: when given, tokens
    outside the set are dropped and messages left empty by the filter are
    skipped.  Without a filter, a record with no tokens is a format error.
    """
    path = Path(path)
    messages: list[Message] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            msg_id, time_field, token_field = parts
            time = _parse_hour(time_field, path, lineno, "timestamp")
            tokens = tuple(token_field.split())
            if not tokens:
                raise CorpusFormatError(f"{path}:{lineno}: message has no tokens")
            if allowed_tokens is not None:
                tokens = tuple(t for t in tokens if t in allowed_tokens)
                if not tokens:
                    continue
            messages.append(Message(msg_id, time, tokens))
    return messages


def save_messages(path, messages: Iterable[Message]) -> None:
    lines = [f"{m.id}\t{m.time}\t{' '.join(m.tokens)}" for m in messages]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_catalog(path) -> dict[str, Item]:
    """Load ``item <TAB> price <TAB> start <TAB> end <TAB> tokens`` records."""
    path = Path(path)
    catalog: dict[str, Item] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}"
                )
            item_id, price_field, start_field, end_field, token_field = parts
            try:
                price = float(price_field)
            except ValueError:
                raise CorpusFormatError(
                    f"{path}:{lineno}: price '{price_field}' is not a number"
                ) from None
            if price < 0:
                raise CorpusFormatError(f"{path}:{lineno}: price {price} is negative")
            start = _parse_hour(start_field, path, lineno, "avail_start")
            end = _parse_hour(end_field, path, lineno, "avail_end")
            if start >= end:
                raise CorpusFormatError(
                    f"{path}:{lineno}: avail_start {start} must precede avail_end {end}"
                )
            catalog[item_id] = Item(item_id, tuple(token_field.split()), price, start, end)
    return catalog


def save_catalog(path, catalog: Mapping[str, Item]) -> None:
    lines = [
        f"{it.id}\t{it.price:g}\t{it.avail_start}\t{it.avail_end}\t{' '.join(it.tokens)}"
        for it in catalog.values()
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_purchases(path, catalog: Mapping[str, Item] | None = None) -> list[Purchase]:
    """Load ``user <TAB> item <TAB> hour`` records.

    With a catalog, each purchase must reference a known item and fall inside
    its availability window.
    """
    path = Path(path)
    purchases: list[Purchase] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            user, item, time_field = parts
            time = _parse_hour(time_field, path, lineno, "timestamp")
            if catalog is not None:
                entry = catalog.get(item)
                if entry is None:
                    raise CorpusFormatError(
                        f"{path}:{lineno}: purchase references unknown item '{item}'"
                    )
                if not (entry.avail_start <= time < entry.avail_end):
                    raise CorpusFormatError(
                        f"{path}:{lineno}: purchase at hour {time} outside availability "
                        f"[{entry.avail_start}, {entry.avail_end}) of item '{item}'"
                    )
            purchases.append(Purchase(user, item, time))
    return purchases


def save_purchases(path, purchases: Iterable[Purchase]) -> None:
    lines = [f"{p.user}\t{p.item}\t{p.time}" for p in purchases]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_embeddings(path) -> EmbeddingTable:
    """Load a ``<count> <dim>`` header followed by ``key v1 ... v_dim`` rows.

    Duplicate keys follow a last-wins rule; the number of overwritten keys is
    recorded on the table and logged.  An empty table is an error.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CorpusFormatError(f"{path}:1: header must be '<count> <dim>'")
        try:
            declared_count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise CorpusFormatError(f"{path}:1: header must be '<count> <dim>'") from None
        if dim <= 0:
            raise CorpusFormatError(f"{path}:1: dim must be positive, got {dim}")
        table = EmbeddingTable(dim)
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split()
            if len(fields) != dim + 1:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected {dim} values for key "
                    f"'{fields[0] if fields else ''}', got {len(fields) - 1}"
                )
            try:
                vec = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError:
                raise CorpusFormatError(
                    f"{path}:{lineno}: non-numeric vector component"
                ) from None
            table.put(fields[0], vec)
    if len(table) == 0:
        raise CorpusFormatError(f"{path}: empty embedding table")
    if table.n_duplicate_keys:
        log.warning(
            "%s: %d duplicate keys overwritten (last wins)", path, table.n_duplicate_keys
        )
    if declared_count != len(table):
        log.warning(
            "%s: header declares %d entries, loaded %d", path, declared_count, len(table)
        )
    return table


def filter_active_users(purchases: Sequence[Purchase], min_count: int) -> list[Purchase]:
    """Keep only purchases by users with at least ``min_count`` purchases."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for p in purchases:
        counts[p.user] = counts.get(p.user, 0) + 1
    return [p for p in purchases if counts[p.user] >= min_count]


def remove_free_items(
    catalog: Mapping[str, Item], purchases: Sequence[Purchase]
) -> tuple[dict[str, Item], list[Purchase]]:
    """Drop zero-price items and every purchase that references one."""
    kept = {item_id: item for item_id, item in catalog.items() if item.price != 0}
    return kept, [p for p in purchases if p.item in kept]
