"""The round-based residual-exchange protocol and its per-domain state.

Orientation convention (see align): every view's rows are the aligned
entities shared across domains, and its columns are the domain's private
slice of the concatenated global column space.  Item-aligned experiments run
on transposed matrices, so one code path serves both.

Per assistance round, each domain
  1. computes pseudo-residuals of its overarching loss and broadcasts the
     rows shared with each peer,
  2. assembles everyone's residuals into a sparse pseudo-target matrix,
     fits a fresh local model to it, and broadcasts predicted outputs,
  3. optimizes simplex assistance weights and a learning rate, then folds
     the weighted combination into its running ensemble prediction.

Trained weights are rounded to float32 (the checkpoint precision) before any
prediction is made from them, so a reloaded checkpoint replays a run bit for
bit; peer values cross the bus as float32 for the same reason.
"""
from __future__ import annotations

import os
import struct
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .align import AlignmentMap, AlignmentMode, GlobalIndex
from .objectives import (FeedbackKind, MaskedMatrix, map_metric,
                         pseudo_residual, _sigmoid)
from .privacy import PrivacyConfig, apply_mechanism
from .sparse import SparseRows
from .transport import (KIND_PREDICTION, KIND_RESIDUAL, ProtocolAbort,
                        ProtocolError, Shard)

ENSEMBLE_MAGIC = b"MTALEN1\x00"


@dataclass
class ModelHyper:
    hidden: tuple = (256, 128)
    dropout: float = 0.5
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 5e-4


@dataclass
class ProtocolConfig:
    n_domains: int
    rounds: int = 10
    seed: int = 0
    eta_mode: str = "constant"      # constant | optimized
    eta_value: float = 0.3
    optimize_weights: bool = True
    qn_iters: int = 10
    timeout: float = 600.0
    max_workers: int | None = None  # None: MTAL_THREADS env, else cpu count
    privacy: PrivacyConfig | None = None

    def worker_cap(self):
        if self.max_workers:
            return self.max_workers
        env = os.environ.get("MTAL_THREADS")
        return max(1, int(env)) if env else (os.cpu_count() or 2)


@dataclass
class DomainView:
    """One organization's private state, in aligned-rows orientation."""

    domain_id: int
    kind: FeedbackKind
    mode: AlignmentMode
    hyper: ModelHyper
    train: SparseRows                  # local rows x local cols
    test_rows: np.ndarray
    test_cols: np.ndarray
    test_vals: np.ndarray
    row_globals: np.ndarray            # sorted aligned-entity ids
    col_offsets: np.ndarray            # all domains' global column offsets
    shared_local: dict = field(default_factory=dict)   # peer -> local row idx
    side_user: np.ndarray | None = None
    side_item_sum: np.ndarray | None = None
    base: np.ndarray | None = None
    # mutable ensemble state
    F_train: np.ndarray | None = None
    F_test: np.ndarray | None = None
    F_dense: np.ndarray | None = None
    target01: np.ndarray | None = None

    @property
    def n_rows(self):
        return self.train.shape[0]

    @property
    def n_cols(self):
        return self.train.shape[1]

    @property
    def col_lo(self):
        return int(self.col_offsets[self.domain_id])

    @property
    def col_hi(self):
        return int(self.col_offsets[self.domain_id + 1])

    @property
    def width(self):
        return int(self.col_offsets[-1])

    def peer_col_range(self, peer):
        return int(self.col_offsets[peer]), int(self.col_offsets[peer + 1])

    def reset_state(self):
        """(Re)initialize the ensemble prediction to the base model broadcast."""
        if self.kind is FeedbackKind.EXPLICIT:
            self.F_train = self.base[self.train.cols].copy()
            self.F_test = self.base[self.test_cols].copy()
            self.F_dense = self.target01 = None
        else:
            self.target01 = self.train.to_dense()
            self.F_dense = np.broadcast_to(self.base,
                                           (self.n_rows, self.n_cols)).copy()
            self.F_train = self.F_test = None
        return self

    def fresh_state(self):
        """Base-model prediction arrays without touching the view."""
        if self.kind is FeedbackKind.EXPLICIT:
            return (self.base[self.train.cols].copy(),
                    self.base[self.test_cols].copy(), None)
        return (None, None,
                np.broadcast_to(self.base, (self.n_rows, self.n_cols)).copy())


def observed_feature_sums(matrix: SparseRows, col_feats) -> np.ndarray:
    """Per row, the sum of feature vectors of that row's observed columns."""
    col_feats = np.asarray(col_feats, dtype=np.float64)
    out = np.zeros((matrix.shape[0], col_feats.shape[1]))
    for r in range(matrix.shape[0]):
        cols, _ = matrix.row_slice(r)
        if len(cols):
            out[r] = col_feats[cols].sum(axis=0)
    return out


def base_model(train: SparseRows, kind: FeedbackKind) -> np.ndarray:
    """Unbiased initializer: per-column mean rating or per-column popularity."""
    counts = np.zeros(train.shape[1])
    np.add.at(counts, train.cols, 1.0)
    if kind is FeedbackKind.IMPLICIT:
        return counts / max(train.shape[0], 1)
    sums = np.zeros(train.shape[1])
    np.add.at(sums, train.cols, train.vals)
    overall = train.vals.mean() if train.nnz else 0.0
    return np.where(counts > 0, sums / np.maximum(counts, 1.0), overall)


def build_domain_views(train_domains, test_domains, amap: AlignmentMap,
                       gidx: GlobalIndex, kind: FeedbackKind, hyper: ModelHyper,
                       use_side=False) -> list[DomainView]:
    """Orient domain datasets, slice alignment info, and seed base predictions."""
    views = []
    for k, (dtr, dte) in enumerate(zip(train_domains, test_domains)):
        if gidx.mode is AlignmentMode.USER_ALIGNED:
            train = dtr.matrix
            row_globals = np.asarray(dtr.row_globals, dtype=np.int64)
            test = dte.matrix
            row_feats, col_feats = dtr.user_features, dtr.item_features
        else:
            train = dtr.matrix.transposed()
            row_globals = np.asarray(dtr.col_globals, dtype=np.int64)
            test = dte.matrix.transposed()
            row_feats, col_feats = dtr.item_features, dtr.user_features
        if not np.all(np.diff(row_globals) > 0):
            raise ValueError("domain row ids must be sorted ascending")

        side_user = side_item_sum = None
        if use_side and row_feats is not None:
            side_user = np.asarray(row_feats, dtype=np.float64)
        if use_side and col_feats is not None:
            side_item_sum = observed_feature_sums(train, col_feats)

        view = DomainView(
            domain_id=k, kind=kind, mode=gidx.mode, hyper=hyper, train=train,
            test_rows=test.row_coo(), test_cols=test.cols.astype(np.int64),
            test_vals=test.vals.copy(), row_globals=row_globals,
            col_offsets=gidx.offsets.copy(),
            side_user=side_user, side_item_sum=side_item_sum)
        for l in range(amap.n_domains):
            if l != k:
                ids = amap.pair_ids(k, l)
                view.shared_local[l] = amap.local_rows(k, ids)
        # float32 is the checkpoint precision; freeze the base to it up front.
        view.base = base_model(train, kind).astype(np.float32).astype(np.float64)
        view.reset_state()
        views.append(view)
    return views


# ---------------------------------------------------------------------------
# Local models
# ---------------------------------------------------------------------------

class AaeModel:
    """Default local learner: a fresh assisted autoencoder per round."""

    def __init__(self, view: DomainView, rng, params=None):
        h = view.hyper
        side_dims = (
            view.side_user.shape[1] if view.side_user is not None else None,
            view.side_item_sum.shape[1] if view.side_item_sum is not None else None)
        self.view = view
        self.rng = rng
        self.params = params if params is not None else nn.aae_init(
            max(view.n_cols, 1), view.width, h.hidden, side_dims=side_dims,
            dropout_rate=h.dropout, rng=rng)

    def fit(self, inputs: SparseRows, targets: MaskedMatrix):
        h = self.view.hyper
        state = nn.AdamState.for_params(self.params, lr=h.lr,
                                        weight_decay=h.weight_decay)
        _, losses = nn.fit_pseudo_targets(
            self.params, _pad_inputs(inputs), targets, epochs=h.epochs,
            batch_size=h.batch_size, adam=state, rng=self.rng,
            side_user=self.view.side_user, side_item_sum=self.view.side_item_sum)
        self.params.freeze_f32()
        return losses

    def predict_all(self, inputs: SparseRows) -> np.ndarray:
        inputs = _pad_inputs(inputs)
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

    def to_bytes(self):
        return nn.model_to_bytes(self.params)


def _pad_inputs(inputs: SparseRows) -> SparseRows:
    # A domain with no columns still participates; its model reads a single
    # dummy all-zero input column.
    if inputs.shape[1] > 0:
        return inputs
    return SparseRows((inputs.shape[0], 1), inputs.indptr, inputs.cols, inputs.vals)


def default_model_factory(view: DomainView, rng) -> AaeModel:
    return AaeModel(view, rng)


@dataclass
class RoundRecord:
    round_t: int
    model: object
    weights: np.ndarray   # assistance weights on the simplex, length K
    eta: float


@dataclass
class EnsemblePredictor:
    """Base prediction plus one trained model, weights and rate per round."""

    domain_id: int
    kind: FeedbackKind
    base: np.ndarray
    records: list

    @property
    def rounds(self):
        return len(self.records)


@dataclass
class PredictOutput:
    F_train: np.ndarray | None
    F_test: np.ndarray | None
    F_dense: np.ndarray | None


# ---------------------------------------------------------------------------
# Round steps
# ---------------------------------------------------------------------------

def compute_round_residuals(view: DomainView, round_t: int,
                            privacy: PrivacyConfig | None = None):
    """Own residuals plus one shard per peer, restricted to shared rows.

    Peer shards may be noised by the privacy mechanism; the domain's own
    residuals stay exact.
    """
    if view.kind is FeedbackKind.EXPLICIT:
        own = pseudo_residual(view.F_train, view.train, view.kind)
    else:
        own = view.target01 - _sigmoid(view.F_dense)
    if not np.isfinite(own).all():
        raise ProtocolAbort(f"domain {view.domain_id}: non-finite residuals "
                            f"in round {round_t}")
    shards = {}
    if view.kind is FeedbackKind.EXPLICIT:
        rows_local = view.train.row_coo()
        g_rows = view.row_globals[rows_local]
        g_cols = view.col_lo + view.train.cols.astype(np.int64)
        for peer, local_rows in view.shared_local.items():
            lut = np.zeros(view.n_rows, dtype=bool)
            lut[local_rows] = True
            sel = lut[rows_local]
            shard = Shard(kind=KIND_RESIDUAL, sender=view.domain_id,
                          receiver=peer, round_t=round_t,
                          cell_rows=g_rows[sel], cell_cols=g_cols[sel],
                          cell_vals=own[sel])
            shards[peer] = apply_mechanism(shard, privacy)
    else:
        cols = np.arange(view.col_lo, view.col_hi, dtype=np.int64)
        for peer, local_rows in view.shared_local.items():
            shard = Shard(kind=KIND_RESIDUAL, sender=view.domain_id,
                          receiver=peer, round_t=round_t,
                          rect_rows=view.row_globals[local_rows],
                          rect_cols=cols, rect_vals=own[local_rows])
            shards[peer] = apply_mechanism(shard, privacy)
    return own, shards


def _rows_to_local(view: DomainView, global_rows):
    pos = np.searchsorted(view.row_globals, global_rows)
    if len(global_rows) and ((pos >= len(view.row_globals)).any()
                             or (view.row_globals[pos.clip(max=view.n_rows - 1)]
                                 != global_rows).any()):
        raise ProtocolError(f"domain {view.domain_id}: shard mentions unknown "
                            "entity ids")
    return pos


def assemble_pseudo_targets(view: DomainView, own_residuals,
                            shards: dict) -> MaskedMatrix:
    """Sparse (local rows x global width) matrix of everyone's residuals.

    A duplicate cell across shards indicates an indexing bug and raises.
    """
    rows_parts, cols_parts, vals_parts = [], [], []
    if view.kind is FeedbackKind.EXPLICIT:
        rows_parts.append(view.train.row_coo())
        cols_parts.append(view.col_lo + view.train.cols.astype(np.int64))
        vals_parts.append(np.asarray(own_residuals, dtype=np.float64))
    else:
        n_rows, n_cols = view.F_dense.shape
        rows_parts.append(np.repeat(np.arange(n_rows, dtype=np.int64), n_cols))
        cols_parts.append(np.tile(np.arange(view.col_lo, view.col_hi,
                                            dtype=np.int64), n_rows))
        vals_parts.append(np.asarray(own_residuals, dtype=np.float64).ravel())
    for sender in sorted(shards):
        sh = shards[sender]
        if sh.n_cells:
            rows_parts.append(_rows_to_local(view, sh.cell_rows))
            cols_parts.append(sh.cell_cols)
            vals_parts.append(sh.cell_vals)
        if sh.rect_vals.size:
            local_r = _rows_to_local(view, sh.rect_rows)
            rows_parts.append(np.repeat(local_r, len(sh.rect_cols)))
            cols_parts.append(np.tile(sh.rect_cols, len(sh.rect_rows)))
            vals_parts.append(sh.rect_vals.ravel())
    try:
        return SparseRows.from_coo(
            (view.n_rows, view.width),
            np.concatenate(rows_parts), np.concatenate(cols_parts),
            np.concatenate(vals_parts), check_duplicates=True)
    except ValueError as exc:
        raise ProtocolError(f"domain {view.domain_id}: {exc}") from None


def make_prediction_shards(view: DomainView, yhat, pt: MaskedMatrix,
                           round_t: int) -> dict:
    """Per-peer predicted outputs for one round.

    Explicit feedback sends a dense block over the receiver's own columns
    plus values at this round's residual cells in other columns; implicit
    feedback sends one dense block over the full width (its residual mask is
    already dense).  Rows are restricted to the entities shared with the
    receiver.
    """
    shards = {}
    if view.kind is FeedbackKind.IMPLICIT:
        cols = np.arange(view.width, dtype=np.int64)
        for peer, local_rows in view.shared_local.items():
            shards[peer] = Shard(kind=KIND_PREDICTION, sender=view.domain_id,
                                 receiver=peer, round_t=round_t,
                                 rect_rows=view.row_globals[local_rows],
                                 rect_cols=cols, rect_vals=yhat[local_rows])
        return shards
    pt_rows = pt.row_coo()
    pt_cols = pt.cols.astype(np.int64)
    g_rows = view.row_globals[pt_rows]
    for peer, local_rows in view.shared_local.items():
        lo, hi = view.peer_col_range(peer)
        lut = np.zeros(view.n_rows, dtype=bool)
        lut[local_rows] = True
        sel = lut[pt_rows] & ((pt_cols < lo) | (pt_cols >= hi))
        shards[peer] = Shard(
            kind=KIND_PREDICTION, sender=view.domain_id, receiver=peer,
            round_t=round_t,
            cell_rows=g_rows[sel], cell_cols=pt_cols[sel],
            cell_vals=yhat[pt_rows[sel], pt_cols[sel]],
            rect_rows=view.row_globals[local_rows],
            rect_cols=np.arange(lo, hi, dtype=np.int64),
            rect_vals=yhat[local_rows][:, lo:hi])
    return shards


def gather_shard_values(shard: Shard, g_rows, g_cols, width) -> np.ndarray:
    """Shard values at global (row, col) positions; absent cells give 0.

    The dense block is consulted first, then the sparse cells, so the same
    cell resolves identically whether or not the cells part is present.
    """
    g_rows = np.asarray(g_rows, dtype=np.int64)
    g_cols = np.asarray(g_cols, dtype=np.int64)
    out = np.zeros(len(g_rows))
    filled = np.zeros(len(g_rows), dtype=bool)
    if shard.rect_vals.size:
        rp = np.searchsorted(shard.rect_rows, g_rows)
        rp_c = rp.clip(max=len(shard.rect_rows) - 1)
        r_ok = shard.rect_rows[rp_c] == g_rows
        cp = np.searchsorted(shard.rect_cols, g_cols)
        cp_c = cp.clip(max=len(shard.rect_cols) - 1)
        c_ok = shard.rect_cols[cp_c] == g_cols
        ok = r_ok & c_ok
        out[ok] = shard.rect_vals[rp_c[ok], cp_c[ok]]
        filled |= ok
    if shard.n_cells and not filled.all():
        keys = shard.cell_rows * width + shard.cell_cols
        want = np.flatnonzero(~filled)
        q = g_rows[want] * width + g_cols[want]
        pos = np.searchsorted(keys, q)
        pos_c = pos.clip(max=len(keys) - 1)
        ok = keys[pos_c] == q
        out[want[ok]] = shard.cell_vals[pos_c[ok]]
    return out


def build_sender_matrix(view: DomainView, pt: MaskedMatrix, yhat_own,
                        pred_shards: dict) -> np.ndarray:
    """K x nnz matrix: every sender's predicted values on the pseudo-target mask."""
    n_domains = len(view.col_offsets) - 1
    rows_l = pt.row_coo()
    g_rows = view.row_globals[rows_l]
    cols = pt.cols.astype(np.int64)
    y = np.zeros((n_domains, pt.nnz))
    for j in range(n_domains):
        if j == view.domain_id:
            y[j] = yhat_own[rows_l, cols]
        else:
            y[j] = gather_shard_values(pred_shards[j], g_rows, cols, view.width)
    return y


def optimize_assistance_weights(sender_values, pseudo_targets: MaskedMatrix,
                                enabled=True, iters=10) -> np.ndarray:
    """Simplex weights minimizing the masked fit of the weighted combination.

    Works on the Gram matrix of the sender values, so the objective is the
    exact masked mean squared error without rematerializing combinations.
    Softmax reparameterization keeps iterates on the simplex; disabled mode
    returns the uniform vector (a direct average).
    """
    k = sender_values.shape[0]
    if not enabled or k == 1:
        return np.full(k, 1.0 / k)
    n = pseudo_targets.nnz
    # einsum keeps the reductions on fixed single-threaded loops, so the
    # optimized weights do not wobble in the last bit under thread contention
    gram = np.einsum("kn,ln->kl", sender_values, sender_values)
    lin = np.einsum("kn,n->k", sender_values, pseudo_targets.vals)
    const = float(np.einsum("n,n->", pseudo_targets.vals, pseudo_targets.vals))

    def objective(theta):
        w = _softmax(theta)
        gw = gram @ w
        f = 0.5 * (float(w @ gw) - 2.0 * float(w @ lin) + const) / n
        grad_w = (gw - lin) / n
        grad = w * (grad_w - float(w @ grad_w))
        return f, grad

    theta = nn.quasi_newton_minimize(objective, np.zeros(k), iters=iters)
    return _softmax(theta)


def _softmax(theta):
    e = np.exp(theta - theta.max())
    return e / e.sum()


def optimize_learning_rate(view: DomainView, y_combined, cfg: ProtocolConfig) -> float:
    """Constant rate, or a line search on the overarching training loss.

    The optimized mode starts at 0.1 and never returns a rate whose loss is
    worse than eta = 0.
    """
    if cfg.eta_mode == "constant":
        return float(cfg.eta_value)
    if view.kind is FeedbackKind.EXPLICIT:
        f_cur = view.F_train
        target = view.train.vals
        y = y_combined

        def objective(x):
            z = f_cur + x[0] * y
            d = z - target
            return 0.5 * float(np.mean(d * d)), np.array([float(np.mean(d * y))])
    else:
        f_cur = view.F_dense.ravel()
        target = view.target01.ravel()
        y = y_combined.ravel()

        def objective(x):
            z = f_cur + x[0] * y
            f = float(np.mean(np.logaddexp(0.0, z) - target * z))
            return f, np.array([float(np.mean((_sigmoid(z) - target) * y))])

    f_zero = objective(np.zeros(1))[0]
    try:
        best = nn.quasi_newton_minimize(objective, np.array([0.1]), iters=cfg.qn_iters)
    except ValueError:
        warnings.warn(f"domain {view.domain_id}: non-finite line-search "
                      "objective; eta set to 0")
        return 0.0
    eta = float(best[0])
    return eta if objective(best)[0] <= f_zero else 0.0


def combine_values(weights, per_sender) -> np.ndarray:
    """Weighted sum over senders, ascending id order.

    Accumulated elementwise (no BLAS reduction) so the result is bit-stable
    under thread contention; the prediction stage relies on replaying this
    arithmetic exactly.
    """
    out = weights[0] * np.asarray(per_sender[0], dtype=np.float64)
    for w, vals in zip(weights[1:], per_sender[1:]):
        out += w * np.asarray(vals, dtype=np.float64)
    return out


def apply_round(view: DomainView, record: RoundRecord, y_train, y_test, y_dense):
    """Fold the weighted combination into the running ensemble prediction."""
    if view.kind is FeedbackKind.EXPLICIT:
        view.F_train += record.eta * y_train
        view.F_test += record.eta * y_test
    else:
        view.F_dense += record.eta * y_dense
    return view


def _sender_test_values(view, yhat_own, pred_shards, n_domains):
    g_rows = view.row_globals[view.test_rows]
    g_cols = view.col_lo + view.test_cols
    vals = []
    for j in range(n_domains):
        if j == view.domain_id:
            vals.append(yhat_own[view.test_rows, g_cols])
        else:
            vals.append(gather_shard_values(pred_shards[j], g_rows, g_cols,
                                            view.width))
    return vals


def _peer_dense_block(view, shard) -> np.ndarray:
    """A peer's predictions over this domain's own column range, dense."""
    lo, hi = view.col_lo, view.col_hi
    own_cols = np.arange(lo, hi, dtype=np.int64)
    block = np.zeros((view.n_rows, hi - lo))
    if shard.rect_vals.size:
        rows_local = _rows_to_local(view, shard.rect_rows)
        cp = np.searchsorted(shard.rect_cols, own_cols)
        cp_c = cp.clip(max=len(shard.rect_cols) - 1)
        ok = shard.rect_cols[cp_c] == own_cols
        block[np.ix_(rows_local, np.flatnonzero(ok))] = shard.rect_vals[:, cp_c[ok]]
    return block


def _sender_dense_blocks(view, yhat_own, pred_shards, n_domains):
    blocks = []
    for j in range(n_domains):
        if j == view.domain_id:
            blocks.append(yhat_own[:, view.col_lo:view.col_hi])
        else:
            blocks.append(_peer_dense_block(view, pred_shards[j]))
    return blocks


# ---------------------------------------------------------------------------
# Learning stage
# ---------------------------------------------------------------------------

def run_learning(views, bus, cfg: ProtocolConfig,
                 model_factory=default_model_factory, aligned_count=None):
    """Execute T synchronized assistance rounds over the bus.

    Returns ``(ensembles, metric_rows)`` where ensembles maps domain id to an
    EnsemblePredictor and metric_rows carry per-round train/test metrics for
    every domain plus the pooled overall line.
    """
    n = len(views)
    if cfg.n_domains != n:
        raise ValueError("config domain count must match the views")
    endpoints = {v.domain_id: bus.endpoint(v.domain_id) for v in views}
    gate = threading.BoundedSemaphore(cfg.worker_cap())
    barrier = threading.Barrier(n)
    agg = MetricsAggregator(views, aligned_count)
    logs, log_lock = [], threading.Lock()
    ensembles, errors = {}, {}

    def log_rows(rows):
        with log_lock:
            logs.extend(rows)

    def sync_metrics(view, t):
        agg.deposit(view, t)
        idx = barrier.wait()
        if idx == 0:
            log_rows(agg.overall_rows(t))

    def worker(view: DomainView):
        ep = endpoints[view.domain_id]
        peers = [v.domain_id for v in views if v.domain_id != view.domain_id]
        records = []
        current_round = 0
        try:
            log_rows(agg.domain_rows(view, 0))
            sync_metrics(view, 0)
            for t in range(1, cfg.rounds + 1):
                current_round = t
                own, out_shards = compute_round_residuals(view, t, cfg.privacy)
                ep.broadcast(t, KIND_RESIDUAL,
                             {p: [s] for p, s in out_shards.items()})
                rin = ep.collect(t, KIND_RESIDUAL, peers, cfg.timeout)
                with gate:
                    pt = assemble_pseudo_targets(
                        view, own, {j: sh[0] for j, sh in rin.items()})
                    rng = np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, view.domain_id, t]))
                    model = model_factory(view, rng)
                    model.fit(view.train, pt)
                    yhat = model.predict_all(view.train)
                    pout = make_prediction_shards(view, yhat, pt, t)
                ep.broadcast(t, KIND_PREDICTION,
                             {p: [s] for p, s in pout.items()})
                pin = ep.collect(t, KIND_PREDICTION, peers, cfg.timeout)
                with gate:
                    pshards = {j: sh[0] for j, sh in pin.items()}
                    sender_vals = build_sender_matrix(view, pt, yhat, pshards)
                    w = optimize_assistance_weights(
                        sender_vals, pt, enabled=cfg.optimize_weights,
                        iters=cfg.qn_iters)
                    if view.kind is FeedbackKind.EXPLICIT:
                        tr_keys = _train_positions_in_mask(view, pt)
                        y_tr = combine_values(w, sender_vals[:, tr_keys])
                        y_te = combine_values(
                            w, _sender_test_values(view, yhat, pshards, n))
                        y_dense = None
                        record = RoundRecord(t, model, w,
                                             optimize_learning_rate(view, y_tr, cfg))
                    else:
                        blocks = _sender_dense_blocks(view, yhat, pshards, n)
                        y_dense = combine_values(w, blocks)
                        y_tr = y_te = None
                        record = RoundRecord(t, model, w,
                                             optimize_learning_rate(view, y_dense, cfg))
                    del sender_vals
                    apply_round(view, record, y_tr, y_te, y_dense)
                    records.append(record)
                    log_rows(agg.domain_rows(view, t))
                sync_metrics(view, t)
            ensembles[view.domain_id] = EnsemblePredictor(
                domain_id=view.domain_id, kind=view.kind, base=view.base,
                records=records)
        except Exception as exc:  # noqa: BLE001 - reported via ProtocolAbort
            errors[view.domain_id] = (current_round, exc)
            ep.send_abort(f"round {current_round}: {exc}")
            barrier.abort()

    threads = [threading.Thread(target=worker, args=(v,), name=f"domain-{v.domain_id}")
               for v in views]
    # Domain workers are the parallelism; pin BLAS to one thread so results
    # do not depend on how the BLAS pool happens to split under contention.
    with threadpool_limits(limits=1, user_api="blas"):
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        parts = [f"domain {k} failed in round {r}: {e}"
                 for k, (r, e) in sorted(errors.items())
                 if not isinstance(e, (ProtocolAbort, threading.BrokenBarrierError))]
        parts = parts or [f"domain {k}: {e}" for k, (r, e) in sorted(errors.items())]
        raise ProtocolAbort("; ".join(parts))
    logs.sort(key=_row_key)
    return ensembles, logs


def _train_positions_in_mask(view: DomainView, pt: MaskedMatrix):
    """Indices of the domain's own training cells inside the mask's cell list."""
    pt_keys = view.row_globals[pt.row_coo()] * view.width + pt.cols
    tr_keys = (view.row_globals[view.train.row_coo()] * view.width
               + view.col_lo + view.train.cols)
    pos = np.searchsorted(pt_keys, tr_keys)
    pos_c = pos.clip(max=max(len(pt_keys) - 1, 0))
    if len(tr_keys) and not np.array_equal(pt_keys[pos_c], tr_keys):
        raise ProtocolError("training cells missing from the pseudo-target mask")
    return pos_c


def _row_key(row):
    domain = row["domain"]
    return (row["round"], 1 if domain == "overall" else 0,
            -1 if domain == "overall" else domain, row["split"], row["metric"])


# ---------------------------------------------------------------------------
# Prediction stage
# ---------------------------------------------------------------------------

def predict(ensembles: dict, views, bus, cfg: ProtocolConfig) -> dict:
    """Replay all rounds in one batched exchange (one bus round-trip per pair).

    On training inputs the result equals the learning stage's final
    prediction bit for bit.
    """
    n = len(views)
    endpoints = {v.domain_id: bus.endpoint(v.domain_id) for v in views}
    outputs, errors = {}, {}

    def worker(view: DomainView):
        ep = endpoints[view.domain_id]
        peers = [v.domain_id for v in views if v.domain_id != view.domain_id]
        ens: EnsemblePredictor = ensembles[view.domain_id]
        try:
            if ens.rounds == 0 and cfg.rounds > 0:
                raise ProtocolError(f"domain {view.domain_id}: missing round records")
            g_rows_tr = view.row_globals[view.train.row_coo()]
            g_cols_tr = view.col_lo + view.train.cols.astype(np.int64)
            # Run every stored model locally, keeping only the slices needed
            # for our own ensemble; blocks for peers go into one batch each.
            own_tr, own_te, own_dense = [], [], []
            batches = {p: [] for p in peers}
            for rec in ens.records:
                yhat = rec.model.predict_all(view.train)
                for peer in peers:
                    lo, hi = view.peer_col_range(peer)
                    local_rows = view.shared_local[peer]
                    batches[peer].append(Shard(
                        kind=KIND_PREDICTION, sender=view.domain_id,
                        receiver=peer, round_t=rec.round_t,
                        rect_rows=view.row_globals[local_rows],
                        rect_cols=np.arange(lo, hi, dtype=np.int64),
                        rect_vals=yhat[local_rows][:, lo:hi]))
                if view.kind is FeedbackKind.EXPLICIT:
                    own_tr.append(yhat[view.train.row_coo(), g_cols_tr])
                    own_te.append(yhat[view.test_rows, view.col_lo + view.test_cols])
                else:
                    own_dense.append(yhat[:, view.col_lo:view.col_hi].copy())
                del yhat
            ep.broadcast(0, KIND_PREDICTION, batches)
            pin = ep.collect(0, KIND_PREDICTION, peers, cfg.timeout)
            for sender, shards in pin.items():
                if len(shards) != ens.rounds:
                    raise ProtocolError(
                        f"domain {view.domain_id}: expected {ens.rounds} round "
                        f"records from {sender}, got {len(shards)}")
            f_train, f_test, f_dense = view.fresh_state()
            for idx, rec in enumerate(ens.records):
                pshards = {j: pin[j][idx] for j in peers}
                if view.kind is FeedbackKind.EXPLICIT:
                    tr_vals, te_vals = [], []
                    for j in range(n):
                        if j == view.domain_id:
                            tr_vals.append(own_tr[idx])
                            te_vals.append(own_te[idx])
                        else:
                            tr_vals.append(gather_shard_values(
                                pshards[j], g_rows_tr, g_cols_tr, view.width))
                            te_vals.append(gather_shard_values(
                                pshards[j], view.row_globals[view.test_rows],
                                view.col_lo + view.test_cols, view.width))
                    f_train += rec.eta * combine_values(rec.weights, tr_vals)
                    f_test += rec.eta * combine_values(rec.weights, te_vals)
                else:
                    blocks = []
                    for j in range(n):
                        if j == view.domain_id:
                            blocks.append(own_dense[idx])
                        else:
                            blocks.append(_peer_dense_block(view, pshards[j]))
                    f_dense += rec.eta * combine_values(rec.weights, blocks)
            outputs[view.domain_id] = PredictOutput(f_train, f_test, f_dense)
        except Exception as exc:  # noqa: BLE001
            errors[view.domain_id] = exc
            ep.send_abort(f"prediction stage: {exc}")

    threads = [threading.Thread(target=worker, args=(v,)) for v in views]
    with threadpool_limits(limits=1, user_api="blas"):
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        raise ProtocolAbort("; ".join(
            f"domain {k}: {e}" for k, e in sorted(errors.items())
            if not isinstance(e, ProtocolAbort)) or "aborted")
    return outputs


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _bce_mean(logits, targets):
    return float(np.mean(np.logaddexp(0.0, logits) - targets * logits))


class MetricsAggregator:
    """Per-round metric rows: one per domain plus a pooled overall line.

    Explicit feedback pools squared errors; implicit feedback computes MAP,
    globally ranked across domains for user-aligned systems and pooled over
    each domain's own users for item-aligned ones.
    """

    def __init__(self, views, aligned_count=None):
        self.views = {v.domain_id: v for v in views}
        self.kind = views[0].kind
        self.mode = views[0].mode
        self.aligned_count = aligned_count if aligned_count is not None else (
            max(int(v.row_globals.max(initial=-1)) for v in views) + 1)
        self.width = views[0].width
        self._lock = threading.Lock()
        self._deposits = {}
        if self.kind is FeedbackKind.IMPLICIT:
            self._positives = {
                v.domain_id: (_positives_by_row(v.train.row_coo(), v.train.cols, v.n_rows),
                              _positives_by_row(v.test_rows, v.test_cols, v.n_rows))
                for v in views}
            if self.mode is AlignmentMode.USER_ALIGNED:
                self._global_train = [[] for _ in range(self.aligned_count)]
                self._global_test = [[] for _ in range(self.aligned_count)]
                for v in views:
                    for local_r, (tr, te) in enumerate(zip(*self._positives[v.domain_id])):
                        g = v.row_globals[local_r]
                        if len(tr):
                            self._global_train[g].append(tr + v.col_lo)
                        if len(te):
                            self._global_test[g].append(te + v.col_lo)
                self._global_train = [np.concatenate(x) if x else np.empty(0, np.int64)
                                      for x in self._global_train]
                self._global_test = [np.concatenate(x) if x else np.empty(0, np.int64)
                                     for x in self._global_test]

    # -- per-domain rows -------------------------------------------------
    def domain_rows(self, view: DomainView, t):
        rows = []
        if self.kind is FeedbackKind.EXPLICIT:
            tr = _safe_rmse(view.F_train, view.train.vals)
            te = _safe_rmse(view.F_test, view.test_vals)
            rows.append(_row(t, view.domain_id, "train", "rmse", tr))
            rows.append(_row(t, view.domain_id, "test", "rmse", te))
        else:
            rows.append(_row(t, view.domain_id, "train", "bce",
                             _bce_mean(view.F_dense, view.target01)))
            rows.append(_row(t, view.domain_id, "test", "map",
                             self._domain_map(view, view.F_dense)))
        return rows

    def _domain_map(self, view, scores):
        train_pos, test_pos = self._positives[view.domain_id]
        if not any(len(p) for p in test_pos):
            return float("nan")
        if self.mode is AlignmentMode.USER_ALIGNED:
            return map_metric(scores, train_pos, test_pos)
        return map_metric(scores.T,
                          _transpose_positives(train_pos, view.n_cols, view.train.row_coo(), view.train.cols),
                          _transpose_positives(test_pos, view.n_cols, view.test_rows, view.test_cols))

    # -- pooled overall rows ----------------------------------------------
    def deposit(self, view: DomainView, t):
        if self.kind is FeedbackKind.EXPLICIT:
            payload = (
                float(np.sum((view.F_train - view.train.vals) ** 2)), view.train.nnz,
                float(np.sum((view.F_test - view.test_vals) ** 2)), len(view.test_vals))
        elif self.mode is AlignmentMode.USER_ALIGNED:
            payload = (view.row_globals, view.col_lo, view.F_dense.copy(),
                       _bce_mean(view.F_dense, view.target01) * view.F_dense.size,
                       view.F_dense.size)
        else:
            ap_sum, ap_n = self._item_aligned_ap(view)
            payload = (ap_sum, ap_n,
                       _bce_mean(view.F_dense, view.target01) * view.F_dense.size,
                       view.F_dense.size)
        with self._lock:
            self._deposits.setdefault(t, {})[view.domain_id] = payload

    def _item_aligned_ap(self, view):
        train_pos, test_pos = self._positives[view.domain_id]
        t_train = _transpose_positives(train_pos, view.n_cols,
                                       view.train.row_coo(), view.train.cols)
        t_test = _transpose_positives(test_pos, view.n_cols,
                                      view.test_rows, view.test_cols)
        if not any(len(p) for p in t_test):
            return 0.0, 0
        value = map_metric(view.F_dense.T, t_train, t_test)
        n_users = sum(1 for p in t_test if len(p))
        return value * n_users, n_users

    def overall_rows(self, t):
        with self._lock:
            by_domain = self._deposits.pop(t)
        # fixed domain order: float sums must not depend on thread arrival
        deposits = [by_domain[k] for k in sorted(by_domain)]
        if self.kind is FeedbackKind.EXPLICIT:
            sse_tr = sum(d[0] for d in deposits)
            n_tr = sum(d[1] for d in deposits)
            sse_te = sum(d[2] for d in deposits)
            n_te = sum(d[3] for d in deposits)
            return [_row(t, "overall", "train", "rmse",
                         float(np.sqrt(sse_tr / n_tr)) if n_tr else float("nan")),
                    _row(t, "overall", "test", "rmse",
                         float(np.sqrt(sse_te / n_te)) if n_te else float("nan"))]
        bce_num = sum(d[-2] for d in deposits)
        bce_den = sum(d[-1] for d in deposits)
        rows = [_row(t, "overall", "train", "bce", bce_num / bce_den)]
        if self.mode is AlignmentMode.USER_ALIGNED:
            scores = np.zeros((self.aligned_count, self.width))
            for row_globals, col_lo, block, _, _ in deposits:
                scores[row_globals, col_lo:col_lo + block.shape[1]] = block
            rows.append(_row(t, "overall", "test", "map",
                             map_metric(scores, self._global_train, self._global_test)))
        else:
            ap_sum = sum(d[0] for d in deposits)
            ap_n = sum(d[1] for d in deposits)
            rows.append(_row(t, "overall", "test", "map",
                             ap_sum / ap_n if ap_n else float("nan")))
        return rows


def _positives_by_row(rows, cols, n_rows):
    out = [np.empty(0, dtype=np.int64)] * n_rows
    order = np.argsort(rows, kind="stable")
    rows, cols = np.asarray(rows)[order], np.asarray(cols)[order]
    for r, lo, count in zip(*_run_lengths(rows)):
        out[r] = cols[lo:lo + count].astype(np.int64)
    return out


def _run_lengths(sorted_vals):
    if len(sorted_vals) == 0:
        return [], [], []
    change = np.r_[True, sorted_vals[1:] != sorted_vals[:-1]]
    starts = np.flatnonzero(change)
    counts = np.diff(np.r_[starts, len(sorted_vals)])
    return sorted_vals[starts], starts, counts


def _transpose_positives(row_positives, n_cols, rows, cols):
    out = [np.empty(0, dtype=np.int64)] * n_cols
    order = np.argsort(cols, kind="stable")
    rows, cols = np.asarray(rows)[order], np.asarray(cols)[order]
    for c, lo, count in zip(*_run_lengths(cols)):
        out[c] = rows[lo:lo + count].astype(np.int64)
    return out


def _safe_rmse(pred, truth):
    if len(truth) == 0:
        return float("nan")
    d = np.asarray(pred) - np.asarray(truth)
    return float(np.sqrt(np.mean(d * d)))


def _row(t, domain, split, metric, value):
    return {"round": t, "domain": domain, "split": split,
            "metric": metric, "value": value}


def evaluate(views, outputs: dict, kind: FeedbackKind, aligned_count=None):
    """Metric report for prediction-stage outputs: overall plus per domain."""
    agg = MetricsAggregator(views, aligned_count)
    rows = []
    for view in views:
        out = outputs[view.domain_id]
        if kind is FeedbackKind.EXPLICIT:
            rows.append(_row(0, view.domain_id, "test", "rmse",
                             _safe_rmse(out.F_test, view.test_vals)))
        else:
            rows.append(_row(0, view.domain_id, "test", "map",
                             agg._domain_map(view, out.F_dense)))
        saved = (view.F_train, view.F_test, view.F_dense)
        view.F_train, view.F_test, view.F_dense = out.F_train, out.F_test, out.F_dense
        agg.deposit(view, 0)
        view.F_train, view.F_test, view.F_dense = saved
    overall = [r for r in agg.overall_rows(0) if r["split"] == "test"]
    return overall + rows


# ---------------------------------------------------------------------------
# Ensemble checkpoints
# ---------------------------------------------------------------------------

def save_ensemble(ens: EnsemblePredictor, path):
    """Header (T, K, weights, rates) then the per-round model checkpoints."""
    t_rounds = ens.rounds
    k = len(ens.records[0].weights) if t_rounds else 0
    with open(path, "wb") as fh:
        fh.write(ENSEMBLE_MAGIC)
        fh.write(struct.pack("<IIIB", t_rounds, k, ens.domain_id,
                             0 if ens.kind is FeedbackKind.EXPLICIT else 1))
        for rec in ens.records:
            fh.write(np.asarray(rec.weights, dtype="<f8").tobytes())
        fh.write(np.asarray([rec.eta for rec in ens.records], dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(ens.base)))
        fh.write(ens.base.astype("<f4").tobytes())
        for rec in ens.records:
            blob = rec.model.to_bytes()
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_ensemble(path, view: DomainView) -> EnsemblePredictor:
    with open(path, "rb") as fh:
        if fh.read(8) != ENSEMBLE_MAGIC:
            raise ValueError("not an ensemble checkpoint (bad magic)")
        t_rounds, k, domain_id, kind_code = struct.unpack("<IIIB", fh.read(13))
        weights = np.frombuffer(fh.read(8 * t_rounds * k), "<f8").reshape(t_rounds, k)
        etas = np.frombuffer(fh.read(8 * t_rounds), "<f8")
        (base_len,) = struct.unpack("<Q", fh.read(8))
        base = np.frombuffer(fh.read(4 * base_len), "<f4").astype(np.float64)
        records = []
        for i in range(t_rounds):
            (blob_len,) = struct.unpack("<Q", fh.read(8))
            params = nn.model_from_bytes(fh.read(blob_len))
            records.append(RoundRecord(i + 1, AaeModel(view, None, params=params),
                                       weights[i].copy(), float(etas[i])))
    kind = FeedbackKind.EXPLICIT if kind_code == 0 else FeedbackKind.IMPLICIT
    return EnsemblePredictor(domain_id=domain_id, kind=kind, base=base,
                             records=records)
