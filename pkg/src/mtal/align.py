"""Common-entity sets between domains and the concatenated global column space.

Orientation convention: the *aligned* axis is the one domains share (users for
user-aligned systems, items for item-aligned ones); the other axis is split
across domains and concatenated into a single global column space that model
outputs range over.  Item-aligned behavior is the user-aligned behavior on
transposed matrices.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .ingest import DomainDataset

ALIGNMENT_MAGIC = b"MTALAM1\x00"


class AlignmentMode(enum.Enum):
    USER_ALIGNED = "user_aligned"
    ITEM_ALIGNED = "item_aligned"


def _aligned_ids(domain: DomainDataset, mode: AlignmentMode) -> np.ndarray:
    ids = domain.row_globals if mode is AlignmentMode.USER_ALIGNED else domain.col_globals
    return np.sort(np.asarray(ids, dtype=np.int64))


def _split_ids(domain: DomainDataset, mode: AlignmentMode) -> np.ndarray:
    return np.asarray(domain.col_globals if mode is AlignmentMode.USER_ALIGNED
                      else domain.row_globals, dtype=np.int64)


def common_entities(domain_a: DomainDataset, domain_b: DomainDataset,
                    mode: AlignmentMode) -> np.ndarray:
    """Sorted global ids of the aligned entities both domains hold."""
    return np.intersect1d(_aligned_ids(domain_a, mode), _aligned_ids(domain_b, mode))


@dataclass
class AlignmentMap:
    """Pairwise shared aligned-entity sets, with local row lookups."""

    mode: AlignmentMode
    aligned_ids: list  # per domain: sorted global ids of its aligned entities
    shared: dict       # ordered (k, l) -> sorted shared global ids

    @property
    def n_domains(self):
        return len(self.aligned_ids)

    def pair_ids(self, k, l) -> np.ndarray:
        return self.shared[(k, l)]

    def local_rows(self, domain, ids) -> np.ndarray:
        """Positions of the given global ids inside a domain's sorted id list."""
        pos = np.searchsorted(self.aligned_ids[domain], ids)
        if (pos >= len(self.aligned_ids[domain])).any() or \
                (self.aligned_ids[domain][pos] != ids).any():
            raise KeyError("id not present in domain")
        return pos

    def validate(self):
        for (k, l), ids in self.shared.items():
            if not np.array_equal(ids, self.shared[(l, k)]):
                raise ValueError(f"shared set asymmetry for pair ({k}, {l})")
            for d in (k, l):
                self.local_rows(d, ids)  # raises if an id is missing
        return self

    def to_bytes(self) -> bytes:
        parts = [ALIGNMENT_MAGIC,
                 struct.pack("<BQ", 0 if self.mode is AlignmentMode.USER_ALIGNED else 1,
                             self.n_domains)]
        for ids in self.aligned_ids:
            parts.append(struct.pack("<Q", len(ids)))
            parts.append(np.asarray(ids, dtype="<u4").tobytes())
        parts.append(struct.pack("<Q", len(self.shared)))
        for (k, l), ids in sorted(self.shared.items()):
            parts.append(struct.pack("<IIQ", k, l, len(ids)))
            parts.append(np.asarray(ids, dtype="<u4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AlignmentMap":
        if data[:8] != ALIGNMENT_MAGIC:
            raise ValueError("not an alignment map (bad magic)")
        off = 8
        mode_code, n_domains = struct.unpack_from("<BQ", data, off)
        off += 9
        aligned = []
        for _ in range(n_domains):
            (count,) = struct.unpack_from("<Q", data, off)
            off += 8
            aligned.append(np.frombuffer(data, "<u4", count, off).astype(np.int64))
            off += 4 * count
        (n_pairs,) = struct.unpack_from("<Q", data, off)
        off += 8
        shared = {}
        for _ in range(n_pairs):
            k, l, count = struct.unpack_from("<IIQ", data, off)
            off += 16
            shared[(k, l)] = np.frombuffer(data, "<u4", count, off).astype(np.int64)
            off += 4 * count
        mode = AlignmentMode.USER_ALIGNED if mode_code == 0 else AlignmentMode.ITEM_ALIGNED
        return cls(mode=mode, aligned_ids=aligned, shared=shared)


def build_alignment_map(domains, mode: AlignmentMode) -> AlignmentMap:
    aligned = [_aligned_ids(d, mode) for d in domains]
    shared = {}
    for k in range(len(domains)):
        for l in range(len(domains)):
            if k != l:
                shared[(k, l)] = np.intersect1d(aligned[k], aligned[l])
    return AlignmentMap(mode=mode, aligned_ids=aligned, shared=shared)


def restrict_alignment(amap: AlignmentMap, fraction: float, seed) -> AlignmentMap:
    """Keep a seeded sample of the globally shared ids; the rest turn private.

    The sample is drawn from the entities present in *every* domain, so the
    induced pairwise sets all equal the sample, matching a setting where one
    subset is shared among all domains.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0 or amap.n_domains == 1:
        return amap
    everywhere = reduce(np.intersect1d, amap.aligned_ids)
    rng = np.random.default_rng(seed)
    size = int(np.floor(fraction * len(everywhere)))
    kept = np.sort(rng.choice(everywhere, size=size, replace=False))
    shared = {}
    for (k, l), ids in amap.shared.items():
        shared[(k, l)] = np.intersect1d(ids, kept)
    return AlignmentMap(mode=amap.mode, aligned_ids=amap.aligned_ids, shared=shared)


@dataclass
class GlobalIndex:
    """Concatenated numbering of the split axis across all domains."""

    mode: AlignmentMode
    aligned_count: int
    offsets: np.ndarray       # K+1 cumulative column offsets
    split_dataset_ids: np.ndarray  # global column -> original dataset id

    @property
    def width(self):
        return int(self.offsets[-1])

    @property
    def n_domains(self):
        return len(self.offsets) - 1

    def col_range(self, domain):
        return int(self.offsets[domain]), int(self.offsets[domain + 1])

    def to_global(self, domain, local_cols):
        return self.offsets[domain] + np.asarray(local_cols)

    def domain_of_col(self, cols):
        return np.searchsorted(self.offsets, np.asarray(cols), side="right") - 1


def build_global_index(domains, mode: AlignmentMode) -> GlobalIndex:
    """Number split entities by (domain, local index); aligned ids stay global."""
    split = [_split_ids(d, mode) for d in domains]
    union = np.concatenate(split) if split else np.empty(0, dtype=np.int64)
    if len(np.unique(union)) != len(union):
        raise ValueError("split entity sets overlap across domains; "
                         "the partition assumption is violated")
    offsets = np.zeros(len(domains) + 1, dtype=np.int64)
    np.cumsum([len(s) for s in split], out=offsets[1:])
    aligned_union = reduce(np.union1d, (_aligned_ids(d, mode) for d in domains))
    return GlobalIndex(mode=mode,
                       aligned_count=int(aligned_union.max()) + 1 if len(aligned_union) else 0,
                       offsets=offsets, split_dataset_ids=union)
