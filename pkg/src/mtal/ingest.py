"""Dataset ingestion: parsing, side features, partitioning and splitting.

All functions are pure: they take immutable inputs plus an explicit seed and
return new objects, so concurrent callers never share mutable state.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sparse import SparseRows

SNAPSHOT_MAGIC = b"MTALDS1\x00"

# Canonical MovieLens genre order (the file/column order, minus "unknown").
GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

OCCUPATIONS = (
    "administrator", "artist", "doctor", "educator", "engineer",
    "entertainment", "executive", "healthcare", "homemaker", "lawyer",
    "librarian", "marketing", "none", "other", "programmer", "retired",
    "salesman", "scientist", "student", "technician", "writer",
)

# Age bracket lower bounds; seven bins: <18, 18-24, 25-34, 35-44, 45-49, 50-55, 56+.
AGE_EDGES = (18, 25, 35, 45, 50, 56)

FORMAT_SEPARATORS = {"tab_separated": "\t", "double_colon_separated": "::", "csv": ","}


class ParseError(ValueError):
    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass
class RatingDataset:
    """Sparse user-item interactions plus id maps and optional side features."""

    user_ids: list
    item_ids: list
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_features: np.ndarray | None = None
    item_features: np.ndarray | None = None

    @property
    def m(self):
        return len(self.user_ids)

    @property
    def n(self):
        return len(self.item_ids)

    @property
    def n_entries(self):
        return len(self.ratings)

    def matrix(self) -> SparseRows:
        return SparseRows.from_coo((self.m, self.n), self.users, self.items,
                                   self.ratings)

    def transposed(self) -> "RatingDataset":
        """Swap the user and item axes (items become the row entities)."""
        return RatingDataset(
            user_ids=list(self.item_ids), item_ids=list(self.user_ids),
            users=self.items.copy(), items=self.users.copy(),
            ratings=self.ratings.copy(), timestamps=self.timestamps.copy(),
            user_features=self.item_features, item_features=self.user_features)

    def validate(self):
        if self.n_entries:
            if self.users.max(initial=-1) >= self.m or self.items.max(initial=-1) >= self.n:
                raise ValueError("entry index out of range")
        if self.user_features is not None and len(self.user_features) != self.m:
            raise ValueError("user feature rows must equal user count")
        if self.item_features is not None and len(self.item_features) != self.n:
            raise ValueError("item feature rows must equal item count")
        key = self.users.astype(np.int64) * max(self.n, 1) + self.items
        if len(np.unique(key)) != len(key):
            raise ValueError("duplicate (user, item) pairs")
        return self


@dataclass
class DomainDataset:
    """One organization's shard: a local matrix plus local-to-global maps."""

    domain_id: int
    matrix: SparseRows
    row_globals: np.ndarray
    col_globals: np.ndarray
    user_features: np.ndarray | None = None
    item_features: np.ndarray | None = None

    def validate(self):
        for name, arr, limit in (("row", self.row_globals, self.matrix.shape[0]),
                                 ("col", self.col_globals, self.matrix.shape[1])):
            if len(arr) != limit:
                raise ValueError(f"{name} map length must match the matrix")
            if len(np.unique(arr)) != len(arr):
                raise ValueError(f"{name} map must be injective")
        self.matrix.check_ascending()
        return self


def _dedup_last_wins(users, items, ratings, timestamps, n_items):
    key = users.astype(np.int64) * max(n_items, 1) + items
    order = np.lexsort((np.arange(len(key)), key))
    sorted_key = key[order]
    is_last = np.r_[sorted_key[1:] != sorted_key[:-1], True] if len(key) else np.array([], bool)
    keep = np.sort(order[is_last])
    return users[keep], items[keep], ratings[keep], timestamps[keep]


def parse_ratings(source, fmt="tab_separated") -> RatingDataset:
    """Parse `user sep item sep rating [sep timestamp]` lines into a dataset.

    ``source`` may be bytes, a path, or a binary file object.  External ids
    are preserved in the id maps; indices are contiguous in first-appearance
    order.  Later duplicates of a (user, item) pair win.
    """
    if fmt not in FORMAT_SEPARATORS:
        raise ValueError(f"unknown format {fmt!r}")
    sep = FORMAT_SEPARATORS[fmt]
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(0, f"stream is not valid UTF-8: {exc}") from None

    user_index: dict = {}
    item_index: dict = {}
    users, items, ratings, stamps = [], [], [], []
    warned_scale = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(sep)
        if len(parts) not in (3, 4):
            raise ParseError(lineno, f"expected 3 or 4 fields, got {len(parts)}")
        u_raw, i_raw, r_raw = parts[0].strip(), parts[1].strip(), parts[2].strip()
        try:
            rating = float(r_raw)
        except ValueError:
            raise ParseError(lineno, f"bad rating value {r_raw!r}") from None
        ts = 0
        if len(parts) == 4:
            try:
                ts = int(float(parts[3].strip()))
            except ValueError:
                raise ParseError(lineno, f"bad timestamp {parts[3]!r}") from None
        if fmt != "csv" and not 0.5 <= rating <= 5.0 and not warned_scale:
            warnings.warn(f"line {lineno}: rating {rating} outside [0.5, 5]; kept")
            warned_scale = True
        users.append(user_index.setdefault(u_raw, len(user_index)))
        items.append(item_index.setdefault(i_raw, len(item_index)))
        ratings.append(rating)
        stamps.append(ts)

    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    stamps = np.asarray(stamps, dtype=np.int64)
    users, items, ratings, stamps = _dedup_last_wins(users, items, ratings,
                                                     stamps, len(item_index))
    return RatingDataset(user_ids=list(user_index), item_ids=list(item_index),
                         users=users, items=items, ratings=ratings,
                         timestamps=stamps)


def one_hot_block(values, categories, name="column"):
    """Rows x len(categories) one-hot block; unseen values map to all zeros."""
    lut = {c: i for i, c in enumerate(categories)}
    block = np.zeros((len(values), len(categories)))
    unknown = set()
    for r, v in enumerate(values):
        i = lut.get(v)
        if i is None:
            unknown.add(v)
        else:
            block[r, i] = 1.0
    if unknown:
        warnings.warn(f"{name}: unknown categories {sorted(map(str, unknown))[:5]} "
                      "mapped to zero block")
    return block


def binned_block(values, edges):
    """One-hot age-style bins from ascending lower-bound edges."""
    values = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(np.asarray(edges, dtype=np.float64), values, side="right")
    block = np.zeros((len(values), len(edges) + 1))
    block[np.arange(len(values)), idx] = 1.0
    return block


def build_side_features(user_table, item_table, schema):
    """Assemble dense one-hot feature matrices from attribute tables.

    ``schema`` maps "user" / "item" to ordered (column, spec) lists where a
    spec is ``("categorical", categories)`` or ``("binned", edges)``.  Either
    table may be None, in which case that side's features are absent.
    """
    def assemble(table, columns):
        if table is None or not columns:
            return None
        blocks = []
        for col, (kind, arg) in columns:
            values = [row[col] for row in table]
            if kind == "categorical":
                blocks.append(one_hot_block(values, arg, name=col))
            elif kind == "binned":
                blocks.append(binned_block(values, arg))
            else:
                raise ValueError(f"unknown feature kind {kind!r}")
        return np.hstack(blocks)

    return assemble(user_table, schema.get("user")), assemble(item_table, schema.get("item"))


ML_USER_SCHEMA = [
    ("gender", ("categorical", ("M", "F"))),
    ("age", ("binned", AGE_EDGES)),
    ("occupation", ("categorical", OCCUPATIONS)),
]


def load_movielens_100k(directory):
    """Load `u.data`/`u.item`/`u.user`; returns (dataset, genre flag matrix)."""
    directory = Path(directory)
    ds = parse_ratings(directory / "u.data", "tab_separated")

    flags = np.zeros((ds.n, len(GENRES)))
    item_lut = {str(e): i for i, e in enumerate(ds.item_ids)}
    seen = np.zeros(ds.n, dtype=bool)
    for line in (directory / "u.item").read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        parts = line.split("|")
        idx = item_lut.get(parts[0].strip())
        if idx is None:
            continue  # item never rated
        bits = [int(b) for b in parts[-19:]]  # leading bit is the "unknown" flag
        flags[idx] = bits[1:]
        seen[idx] = True
    if not seen.all():
        raise ValueError("u.item is missing rated items")

    user_lut = {str(e): i for i, e in enumerate(ds.user_ids)}
    table = [None] * ds.m
    for line in (directory / "u.user").read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        uid, age, gender, occupation, _zip = line.split("|")
        idx = user_lut.get(uid.strip())
        if idx is not None:
            table[idx] = {"gender": gender.strip(), "age": int(age),
                          "occupation": occupation.strip()}
    if any(row is None for row in table):
        raise ValueError("u.user is missing rated users")

    user_feats, _ = build_side_features(table, None, {"user": ML_USER_SCHEMA})
    ds.user_features = user_feats
    ds.item_features = flags.copy()
    return ds, flags


# ML1M codes its 21 occupations as integers; reuse the 100K vocabulary so the
# one-hot width matches (the exact label text never matters downstream).
ML1M_OCCUPATIONS = OCCUPATIONS


def load_movielens_1m(directory):
    """Load `ratings.dat`/`movies.dat`/`users.dat`; returns (dataset, flags)."""
    directory = Path(directory)
    ds = parse_ratings(directory / "ratings.dat", "double_colon_separated")

    genre_lut = {g: i for i, g in enumerate(GENRES)}
    flags = np.zeros((ds.n, len(GENRES)))
    item_lut = {str(e): i for i, e in enumerate(ds.item_ids)}
    for line in (directory / "movies.dat").read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        movie_id, _title, genres = line.split("::")
        idx = item_lut.get(movie_id.strip())
        if idx is None:
            continue
        for g in genres.strip().split("|"):
            gi = genre_lut.get(g)
            if gi is None:
                warnings.warn(f"unknown genre {g!r} ignored")
            else:
                flags[idx, gi] = 1.0

    user_lut = {str(e): i for i, e in enumerate(ds.user_ids)}
    table = [None] * ds.m
    for line in (directory / "users.dat").read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        uid, gender, age, occupation, _zip = line.split("::")
        idx = user_lut.get(uid.strip())
        if idx is not None:
            table[idx] = {"gender": gender.strip(), "age": int(age),
                          "occupation": ML1M_OCCUPATIONS[int(occupation)]}
    if any(row is None for row in table):
        raise ValueError("users.dat is missing rated users")

    user_feats, _ = build_side_features(table, None, {"user": ML_USER_SCHEMA})
    ds.user_features = user_feats
    ds.item_features = flags.copy()
    return ds, flags


def partition_by_genre(dataset: RatingDataset, genre_flags) -> list[DomainDataset]:
    """Split items into one domain per genre; users stay shared across all.

    A multi-genre item goes to its first flagged genre in canonical order; an
    item with no flags goes to domain 0 with a warning.
    """
    genre_flags = np.asarray(genre_flags)
    if genre_flags.shape[0] != dataset.n:
        raise ValueError("genre flag rows must equal the item count")
    k_domains = genre_flags.shape[1]
    flagged = genre_flags > 0
    assignment = np.argmax(flagged, axis=1)
    orphans = ~flagged.any(axis=1)
    if orphans.any():
        warnings.warn(f"{int(orphans.sum())} items have no genre flags; "
                      "assigned to domain 0")
        assignment[orphans] = 0

    entry_domain = assignment[dataset.items]
    domains = []
    for k in range(k_domains):
        item_globals = np.flatnonzero(assignment == k)
        local_of = np.full(dataset.n, -1, dtype=np.int64)
        local_of[item_globals] = np.arange(len(item_globals))
        sel = entry_domain == k
        matrix = SparseRows.from_coo((dataset.m, len(item_globals)),
                                     dataset.users[sel],
                                     local_of[dataset.items[sel]],
                                     dataset.ratings[sel])
        domains.append(DomainDataset(
            domain_id=k, matrix=matrix,
            row_globals=np.arange(dataset.m, dtype=np.int64),
            col_globals=item_globals,
            user_features=dataset.user_features,
            item_features=None if dataset.item_features is None
            else dataset.item_features[item_globals]))
    return domains


def partition_uniform(dataset: RatingDataset, k_domains: int, seed) -> list[DomainDataset]:
    """Deal shuffled users round-robin into K domains; items stay shared."""
    if k_domains < 1:
        raise ValueError("need at least one domain")
    if k_domains > dataset.m:
        raise ValueError(f"cannot split {dataset.m} users into {k_domains} domains")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.m)
    domains = []
    for k in range(k_domains):
        user_globals = np.sort(perm[k::k_domains])
        local_of = np.full(dataset.m, -1, dtype=np.int64)
        local_of[user_globals] = np.arange(len(user_globals))
        sel = local_of[dataset.users] >= 0
        matrix = SparseRows.from_coo((len(user_globals), dataset.n),
                                     local_of[dataset.users[sel]],
                                     dataset.items[sel],
                                     dataset.ratings[sel])
        domains.append(DomainDataset(
            domain_id=k, matrix=matrix,
            row_globals=user_globals,
            col_globals=np.arange(dataset.n, dtype=np.int64),
            user_features=None if dataset.user_features is None
            else dataset.user_features[user_globals],
            item_features=dataset.item_features))
    return domains


def split_train_test(dataset: RatingDataset, ratio: float, seed):
    """Seeded global shuffle; the first floor(ratio * N) entries train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n_entries)
    cut = int(np.floor(ratio * dataset.n_entries))
    picks = (np.sort(perm[:cut]), np.sort(perm[cut:]))
    out = []
    for pick in picks:
        out.append(RatingDataset(
            user_ids=dataset.user_ids, item_ids=dataset.item_ids,
            users=dataset.users[pick], items=dataset.items[pick],
            ratings=dataset.ratings[pick], timestamps=dataset.timestamps[pick],
            user_features=dataset.user_features,
            item_features=dataset.item_features))
    return out[0], out[1]


def to_implicit(dataset: RatingDataset) -> RatingDataset:
    """Replace every observed rating with 1.0; the pattern is the signal."""
    return RatingDataset(
        user_ids=dataset.user_ids, item_ids=dataset.item_ids,
        users=dataset.users.copy(), items=dataset.items.copy(),
        ratings=np.ones_like(dataset.ratings),
        timestamps=dataset.timestamps.copy(),
        user_features=dataset.user_features, item_features=dataset.item_features)


def write_snapshot(dataset: RatingDataset, path):
    """Binary snapshot: magic, m/n/count as u64, then (u32,u32,f32,i64) entries."""
    entries = np.empty(dataset.n_entries,
                       dtype=[("u", "<u4"), ("i", "<u4"), ("r", "<f4"), ("t", "<i8")])
    entries["u"] = dataset.users
    entries["i"] = dataset.items
    entries["r"] = dataset.ratings
    entries["t"] = dataset.timestamps
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<QQQ", dataset.m, dataset.n, dataset.n_entries))
        fh.write(entries.tobytes())


def read_snapshot(path) -> RatingDataset:
    with open(path, "rb") as fh:
        if fh.read(8) != SNAPSHOT_MAGIC:
            raise ValueError("not a dataset snapshot (bad magic)")
        m, n, count = struct.unpack("<QQQ", fh.read(24))
        raw = fh.read(20 * count)  # packed u32+u32+f32+i64
    if len(raw) != 20 * count:
        raise ValueError("truncated dataset snapshot")
    entries = np.frombuffer(raw, dtype=[("u", "<u4"), ("i", "<u4"),
                                        ("r", "<f4"), ("t", "<i8")])
    return RatingDataset(
        user_ids=list(range(m)), item_ids=list(range(n)),
        users=entries["u"].astype(np.int64), items=entries["i"].astype(np.int64),
        ratings=entries["r"].astype(np.float64),
        timestamps=entries["t"].astype(np.int64))
