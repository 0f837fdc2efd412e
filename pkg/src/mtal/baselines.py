"""Alone and Joint baselines: conventional autoencoders, no assistance.

Alone trains one reconstruction autoencoder per domain on its local data;
Joint trains a single autoencoder on the un-partitioned matrix.  Both have
input width equal to output width.  They train for rounds * epochs epochs
total, logging metrics every `epochs` epochs so stage s in the metric rows is
compute-aligned with assistance round s (stage 1 is the single-pass result,
stage T the equal-compute one).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .objectives import FeedbackKind
from .protocol import DomainView, MetricsAggregator, ModelHyper
from .sparse import SparseRows


@dataclass
class BaselineConfig:
    rounds: int = 10
    seed: int = 0
    max_workers: int = 2


class _Reconstructor:
    """One autoencoder trained to reproduce its own (masked) input rows."""

    def __init__(self, view: DomainView, hyper: ModelHyper, rng):
        side_dims = (
            view.side_user.shape[1] if view.side_user is not None else None,
            view.side_item_sum.shape[1] if view.side_item_sum is not None else None)
        width = max(view.n_cols, 1)
        self.view = view
        self.hyper = hyper
        self.rng = rng
        self.params = nn.aae_init(width, width, hyper.hidden,
                                  side_dims=side_dims, dropout_rate=hyper.dropout,
                                  rng=rng)
        self.adam = nn.AdamState.for_params(self.params, lr=hyper.lr,
                                            weight_decay=hyper.weight_decay)

    def train_stage(self, inputs: SparseRows):
        nn.fit_reconstruction(
            self.params, inputs, self.view.kind, epochs=self.hyper.epochs,
            batch_size=self.hyper.batch_size, adam=self.adam, rng=self.rng,
            side_user=self.view.side_user, side_item_sum=self.view.side_item_sum)

    def outputs(self, inputs: SparseRows) -> np.ndarray:
        out = np.empty((inputs.shape[0], self.params.d_out))
        su, sv = self.view.side_user, self.view.side_item_sum
        for lo in range(0, inputs.shape[0], 512):
            rows = np.arange(lo, min(lo + 512, inputs.shape[0]))
            out[rows] = nn.aae_forward(
                self.params, inputs.take_rows(rows),
                side_user=None if su is None else su[rows],
                side_item_sum=None if sv is None else sv[rows],
                training=False)
        return out


def _pad(inputs: SparseRows) -> SparseRows:
    if inputs.shape[1] > 0:
        return inputs
    return SparseRows((inputs.shape[0], 1), inputs.indptr, inputs.cols, inputs.vals)


def _install_outputs(view: DomainView, out_local: np.ndarray):
    """Write a model's local-width outputs into the view's prediction state."""
    if view.kind is FeedbackKind.EXPLICIT:
        view.F_train = out_local[view.train.row_coo(), view.train.cols]
        view.F_test = out_local[view.test_rows, view.test_cols]
    else:
        view.target01 = view.train.to_dense()
        view.F_dense = out_local


def run_alone(views, cfg: BaselineConfig, aligned_count=None):
    """Per-domain isolated training; returns metric rows per stage."""
    agg = MetricsAggregator(views, aligned_count)
    models = {
        v.domain_id: _Reconstructor(
            v, v.hyper,
            np.random.default_rng(np.random.SeedSequence([cfg.seed, v.domain_id, 1])))
        for v in views}
    rows = []
    with threadpool_limits(limits=1, user_api="blas"), \
            ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
        for stage in range(1, cfg.rounds + 1):
            list(pool.map(
                lambda v: models[v.domain_id].train_stage(_pad(v.train)), views))
            for v in views:
                out = models[v.domain_id].outputs(_pad(v.train))[:, :v.n_cols]
                _install_outputs(v, out)
                rows.extend(agg.domain_rows(v, stage))
                agg.deposit(v, stage)
            rows.extend(agg.overall_rows(stage))
    for v in views:
        v.reset_state()
    return rows


def run_joint(views, joint_train: SparseRows, orig_of_global: np.ndarray,
              cfg: BaselineConfig, aligned_count=None,
              side_user=None, side_item_sum=None):
    """Centralized training on the un-partitioned matrix.

    ``joint_train`` is oriented like the views (rows aligned); per-domain
    breakdown comes from scattering the joint model's outputs back into each
    view through ``orig_of_global`` (global column -> original column).
    """
    agg = MetricsAggregator(views, aligned_count)
    kind = views[0].kind
    holder = DomainView(
        domain_id=0, kind=kind, mode=views[0].mode, hyper=views[0].hyper,
        train=joint_train, test_rows=np.empty(0, np.int64),
        test_cols=np.empty(0, np.int64), test_vals=np.empty(0),
        row_globals=np.arange(joint_train.shape[0], dtype=np.int64),
        col_offsets=np.array([0, joint_train.shape[1]], dtype=np.int64),
        side_user=side_user, side_item_sum=side_item_sum)
    model = _Reconstructor(holder, holder.hyper,
                           np.random.default_rng(np.random.SeedSequence([cfg.seed, 0, 2])))
    rows = []
    for stage in range(1, cfg.rounds + 1):
        model.train_stage(joint_train)
        out = model.outputs(joint_train)
        for v in views:
            orig_cols = orig_of_global[v.col_lo:v.col_hi]
            _install_outputs(v, out[np.ix_(v.row_globals, orig_cols)])
            rows.extend(agg.domain_rows(v, stage))
            agg.deposit(v, stage)
        rows.extend(agg.overall_rows(stage))
    for v in views:
        v.reset_state()
    return rows
