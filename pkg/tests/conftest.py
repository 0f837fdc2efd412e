import numpy as np
import pytest

from mtal.align import (AlignmentMode, build_alignment_map,
                        build_global_index, restrict_alignment)
from mtal.ingest import (RatingDataset, partition_by_genre, partition_uniform,
                         split_train_test, to_implicit)
from mtal.objectives import FeedbackKind
from mtal.protocol import ModelHyper, build_domain_views


def synthetic_ratings(m=50, n=60, groups=3, density=0.3, seed=7, rank=3,
                      amp=1.0, noise=0.1):
    """Low-rank explicit ratings in [1, 5] plus single-flag group matrix.

    Structured enough that autoencoders and boosting have signal to learn.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(0.0, 1.0, size=(m, rank))
    v = rng.normal(0.0, 1.0, size=(n, rank))
    full = np.clip(3.0 + amp * (u @ v.T) / np.sqrt(rank)
                   + rng.normal(0, noise, (m, n)), 1.0, 5.0)
    mask = rng.random((m, n)) < density
    # every user and item keeps at least one observation
    for i in range(m):
        if not mask[i].any():
            mask[i, rng.integers(n)] = True
    for j in range(n):
        if not mask[:, j].any():
            mask[rng.integers(m), j] = True
    rows, cols = np.nonzero(mask)
    ds = RatingDataset(
        user_ids=[f"u{i}" for i in range(m)],
        item_ids=[f"v{j}" for j in range(n)],
        users=rows.astype(np.int64), items=cols.astype(np.int64),
        ratings=full[rows, cols], timestamps=np.zeros(len(rows), dtype=np.int64))
    flags = np.zeros((n, groups))
    flags[np.arange(n), np.arange(n) % groups] = 1.0
    return ds, flags


@pytest.fixture
def toy_dataset():
    return synthetic_ratings()


def toy_world(seed=11):
    """A learnable 3-domain rating world where assistance visibly helps."""
    return synthetic_ratings(m=60, n=45, groups=3, density=0.6, seed=seed,
                             amp=1.2, noise=0.02)


SMALL_HYPER = ModelHyper(hidden=(32, 16), dropout=0.05, epochs=10, batch_size=16)


def make_views(ds, flags, kind=FeedbackKind.EXPLICIT, hyper=SMALL_HYPER,
               mode=AlignmentMode.USER_ALIGNED, partition="genre", k_domains=3,
               seed=0, ratio=0.9, fraction=1.0, use_side=False):
    """Split, partition, align: the standard experiment setup for tests."""
    if kind is FeedbackKind.IMPLICIT:
        ds = to_implicit(ds)
    train, test = split_train_test(ds, ratio, seed)
    if partition == "genre":
        tr_dom = partition_by_genre(train, flags)
        te_dom = partition_by_genre(test, flags)
    else:
        tr_dom = partition_uniform(train, k_domains, seed)
        te_dom = partition_uniform(test, k_domains, seed)
    amap = build_alignment_map(tr_dom, mode)
    if fraction < 1.0:
        amap = restrict_alignment(amap, fraction, seed)
    gidx = build_global_index(tr_dom, mode)
    views = build_domain_views(tr_dom, te_dom, amap, gidx, kind, hyper,
                               use_side=use_side)
    return views, gidx, amap
