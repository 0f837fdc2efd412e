"""Assisted autoencoder with hand-written forward/backward passes.

The network is a tanh stack: encoder ``d_in -> hidden[0] -> ... -> hidden[-1]``,
decoder mirroring the hidden widths back out to ``d_out``, with a linear final
layer so outputs can leave [-1, 1].  Optional side encoders (one affine + tanh
each) map row-entity features and summed column-entity features into the code
space; codes are summed before decoding.  Dropout acts on the summed code only,
in inverted form, so evaluation needs no rescaling.

``d_out`` is deliberately decoupled from ``d_in``: a domain's model reads its
local columns but predicts over the concatenated global column space.
"""
from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .sparse import SparseRows

# Input batches are sparse rating rows; the type is shared with the mask code.
SparseRowBatch = SparseRows

MODEL_MAGIC = b"MTALAE1\x00"


@dataclass
class AaeParams:
    d_in: int
    d_out: int
    hidden: tuple
    dropout_rate: float
    enc_w: list = field(default_factory=list)
    enc_b: list = field(default_factory=list)
    dec_w: list = field(default_factory=list)
    dec_b: list = field(default_factory=list)
    side_user_w: np.ndarray | None = None
    side_user_b: np.ndarray | None = None
    side_item_w: np.ndarray | None = None
    side_item_b: np.ndarray | None = None

    def named_tensors(self):
        """(name, array) pairs in declaration order; order defines the checkpoint."""
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            yield f"enc_w{i}", w
            yield f"enc_b{i}", b
        for i, (w, b) in enumerate(zip(self.dec_w, self.dec_b)):
            yield f"dec_w{i}", w
            yield f"dec_b{i}", b
        if self.side_user_w is not None:
            yield "side_user_w", self.side_user_w
            yield "side_user_b", self.side_user_b
        if self.side_item_w is not None:
            yield "side_item_w", self.side_item_w
            yield "side_item_b", self.side_item_b

    def set_tensor(self, name, value):
        if name.startswith("enc_w"):
            self.enc_w[int(name[5:])] = value
        elif name.startswith("enc_b"):
            self.enc_b[int(name[5:])] = value
        elif name.startswith("dec_w"):
            self.dec_w[int(name[5:])] = value
        elif name.startswith("dec_b"):
            self.dec_b[int(name[5:])] = value
        else:
            setattr(self, name, value)

    def freeze_f32(self):
        """Round every tensor to float32 precision (kept as float64 storage).

        Snapshots are written as float32; doing the rounding in memory too makes
        a reloaded checkpoint reproduce the live model bit for bit.
        """
        for name, t in self.named_tensors():
            self.set_tensor(name, t.astype(np.float32).astype(np.float64))
        return self


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def aae_init(d_in, d_out, hidden=(256, 128), side_dims=None, dropout_rate=0.5,
             rng=None) -> AaeParams:
    """Fresh parameters; symmetric fan-scaled uniform weights, zero biases.

    ``side_dims`` is an optional ``(d_side_user, d_side_item)`` pair; either
    entry may be None.
    """
    if d_in < 1 or d_out < 1 or any(h < 1 for h in hidden):
        raise ValueError("all layer dimensions must be >= 1")
    rng = np.random.default_rng(rng)
    p = AaeParams(d_in=int(d_in), d_out=int(d_out), hidden=tuple(int(h) for h in hidden),
                  dropout_rate=float(dropout_rate))
    enc_dims = [p.d_in, *p.hidden]
    for a, b in zip(enc_dims[:-1], enc_dims[1:]):
        p.enc_w.append(_glorot(rng, a, b))
        p.enc_b.append(np.zeros(b))
    dec_dims = [*p.hidden[::-1], p.d_out]
    for a, b in zip(dec_dims[:-1], dec_dims[1:]):
        p.dec_w.append(_glorot(rng, a, b))
        p.dec_b.append(np.zeros(b))
    d_su, d_sv = side_dims if side_dims is not None else (None, None)
    code = p.hidden[-1]
    if d_su:
        p.side_user_w = _glorot(rng, d_su, code)
        p.side_user_b = np.zeros(code)
    if d_sv:
        p.side_item_w = _glorot(rng, d_sv, code)
        p.side_item_b = np.zeros(code)
    return p


class ForwardCache:
    """Intermediates one forward pass leaves behind for the matching backward."""

    __slots__ = ("x", "side_user", "side_item", "enc_acts", "side_act_u",
                 "side_act_v", "drop_mask", "keep_prob", "zd", "dec_acts", "complete")

    def __init__(self):
        self.complete = False


def aae_forward(params: AaeParams, batch, side_user=None, side_item_sum=None,
                training=False, rng=None, cache: ForwardCache | None = None):
    """Run the network on a batch; returns a dense (batch, d_out) matrix.

    ``batch`` is a SparseRowBatch or a dense array whose width is d_in.
    Dropout fires only when ``training`` is true (requires ``rng``).
    """
    if isinstance(batch, SparseRows):
        if batch.shape[1] != params.d_in:
            raise ValueError(f"batch width {batch.shape[1]} != d_in {params.d_in}")
        x = batch.to_dense()
    else:
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[1] != params.d_in:
            raise ValueError(f"batch width {x.shape[1]} != d_in {params.d_in}")

    enc_acts = []
    h = x
    for w, b in zip(params.enc_w, params.enc_b):
        h = np.tanh(h @ w + b)
        enc_acts.append(h)
    z = h
    side_act_u = side_act_v = None
    if params.side_user_w is not None:
        if side_user is None:
            raise ValueError("model expects side_user features")
        side_act_u = np.tanh(np.asarray(side_user, dtype=np.float64)
                             @ params.side_user_w + params.side_user_b)
        z = z + side_act_u
    if params.side_item_w is not None:
        if side_item_sum is None:
            raise ValueError("model expects side_item_sum features")
        side_act_v = np.tanh(np.asarray(side_item_sum, dtype=np.float64)
                             @ params.side_item_w + params.side_item_b)
        z = z + side_act_v

    drop_mask = None
    keep_prob = 1.0 - params.dropout_rate
    if training and params.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        drop_mask = rng.random(z.shape) < keep_prob
        zd = z * drop_mask / keep_prob
    else:
        zd = z

    dec_acts = []
    d = zd
    for w, b in zip(params.dec_w[:-1], params.dec_b[:-1]):
        d = np.tanh(d @ w + b)
        dec_acts.append(d)
    out = d @ params.dec_w[-1] + params.dec_b[-1]

    if cache is not None:
        cache.x = x
        cache.side_user = side_user
        cache.side_item = side_item_sum
        cache.enc_acts = enc_acts
        cache.side_act_u = side_act_u
        cache.side_act_v = side_act_v
        cache.drop_mask = drop_mask
        cache.keep_prob = keep_prob
        cache.zd = zd
        cache.dec_acts = dec_acts
        cache.complete = True
    return out


def aae_backward(params: AaeParams, cache: ForwardCache, grad_out):
    """Exact gradients of every parameter given dLoss/dOutput.

    Requires the cache produced by the matching forward call (same batch and
    dropout mask).
    """
    if cache is None or not cache.complete:
        raise ValueError("stale or missing forward cache")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grads = {}

    dec_inputs = [cache.zd, *cache.dec_acts]
    g = grad_out
    grads[f"dec_w{len(params.dec_w) - 1}"] = dec_inputs[-1].T @ g
    grads[f"dec_b{len(params.dec_w) - 1}"] = g.sum(axis=0)
    g = g @ params.dec_w[-1].T
    for i in range(len(params.dec_w) - 2, -1, -1):
        act = cache.dec_acts[i]
        g = g * (1.0 - act * act)
        grads[f"dec_w{i}"] = dec_inputs[i].T @ g
        grads[f"dec_b{i}"] = g.sum(axis=0)
        g = g @ params.dec_w[i].T

    if cache.drop_mask is not None:
        g = g * cache.drop_mask / cache.keep_prob

    if params.side_user_w is not None:
        a = cache.side_act_u
        gu = g * (1.0 - a * a)
        grads["side_user_w"] = np.asarray(cache.side_user, dtype=np.float64).T @ gu
        grads["side_user_b"] = gu.sum(axis=0)
    if params.side_item_w is not None:
        a = cache.side_act_v
        gv = g * (1.0 - a * a)
        grads["side_item_w"] = np.asarray(cache.side_item, dtype=np.float64).T @ gv
        grads["side_item_b"] = gv.sum(axis=0)

    enc_inputs = [cache.x, *cache.enc_acts[:-1]]
    for i in range(len(params.enc_w) - 1, -1, -1):
        act = cache.enc_acts[i]
        g = g * (1.0 - act * act)
        grads[f"enc_w{i}"] = enc_inputs[i].T @ g
        grads[f"enc_b{i}"] = g.sum(axis=0)
        if i > 0:
            g = g @ params.enc_w[i].T
    return grads


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: AaeParams, lr=1e-3, weight_decay=5e-4,
                   beta1=0.9, beta2=0.999, eps=1e-8):
        st = cls(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)
        for name, t in params.named_tensors():
            st.m[name] = np.zeros_like(t)
            st.v[name] = np.zeros_like(t)
        return st


def adam_step(state: AdamState, params: AaeParams, grads: dict):
    """One Adam update with bias correction and decoupled weight decay."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.named_tensors():
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in tensor {name}")
        if state.weight_decay:
            t *= 1.0 - state.lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def _epoch_batches(n_rows, batch_size, rng):
    perm = rng.permutation(n_rows)
    for lo in range(0, n_rows, batch_size):
        yield perm[lo:lo + batch_size]


def fit_pseudo_targets(params: AaeParams, inputs: SparseRowBatch,
                       targets: SparseRows, epochs=20, batch_size=100,
                       adam: AdamState | None = None, rng=None,
                       side_user=None, side_item_sum=None):
    """Train on masked squared error against sparse targets.

    Row i of ``targets`` is the pseudo-target row for input row i; the loss is
    the mean of 0.5*(out-target)^2 over a batch's masked cells.  Returns
    ``(params, epoch_losses)``.
    """
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets must have the same row count")
    if targets.shape[1] != params.d_out:
        raise ValueError("target width must equal the model's output width")
    if targets.nnz == 0:
        warnings.warn("empty pseudo-target matrix; model left untouched")
        return params, []
    rng = np.random.default_rng(rng)
    state = adam if adam is not None else AdamState.for_params(params)
    epoch_losses = []
    for _ in range(epochs):
        sq_sum = 0.0
        cells = 0
        for rows in _epoch_batches(inputs.shape[0], batch_size, rng):
            tvals, tmask = targets.scatter_batch(rows, width=params.d_out)
            n_masked = int(tmask.sum())
            if n_masked == 0:
                continue
            cache = ForwardCache()
            out = aae_forward(
                params, inputs.take_rows(rows),
                side_user=None if side_user is None else side_user[rows],
                side_item_sum=None if side_item_sum is None else side_item_sum[rows],
                training=True, rng=rng, cache=cache)
            diff = np.where(tmask, out - tvals, 0.0)
            sq_sum += 0.5 * float((diff * diff).sum())
            cells += n_masked
            grads = aae_backward(params, cache, diff / n_masked)
            adam_step(state, params, grads)
        epoch_losses.append(sq_sum / max(cells, 1))
    return params, epoch_losses


def fit_reconstruction(params: AaeParams, inputs: SparseRowBatch, kind,
                       epochs=20, batch_size=100, adam: AdamState | None = None,
                       rng=None, side_user=None, side_item_sum=None,
                       eval_every=None, eval_fn=None):
    """Train a conventional autoencoder baseline directly on its own ratings.

    Explicit feedback fits masked squared error on the observed cells;
    implicit fits binary cross-entropy against the dense 0/1 universe.
    ``eval_fn`` is invoked after every ``eval_every`` epochs (for per-stage
    metric logging).
    """
    from .objectives import FeedbackKind, _sigmoid

    rng = np.random.default_rng(rng)
    state = adam if adam is not None else AdamState.for_params(params)
    for epoch in range(1, epochs + 1):
        for rows in _epoch_batches(inputs.shape[0], batch_size, rng):
            sub = inputs.take_rows(rows)
            su = None if side_user is None else side_user[rows]
            sv = None if side_item_sum is None else side_item_sum[rows]
            cache = ForwardCache()
            out = aae_forward(params, sub, side_user=su, side_item_sum=sv,
                              training=True, rng=rng, cache=cache)
            if kind is FeedbackKind.EXPLICIT:
                tvals, tmask = sub.scatter_batch(np.arange(len(rows)),
                                                 width=params.d_out)
                n_masked = int(tmask.sum())
                if n_masked == 0:
                    continue
                grad = np.where(tmask, out - tvals, 0.0) / n_masked
            else:
                tvals = sub.to_dense()
                grad = (_sigmoid(out) - tvals) / out.size
            grads = aae_backward(params, cache, grad)
            adam_step(state, params, grads)
        if eval_fn is not None and eval_every and epoch % eval_every == 0:
            eval_fn(epoch // eval_every, params)
    return params


def quasi_newton_minimize(objective, x0, iters=10):
    """BFGS with backtracking line search; returns the best iterate seen.

    ``objective(x)`` must return ``(value, gradient)``.  Non-finite trial
    values reject the step and halve it; if every trial fails the best point
    so far is returned, so the result is never worse than x0.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    f, g = objective(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at x0")
    g = np.atleast_1d(np.asarray(g, dtype=np.float64))
    best_x, best_f = x.copy(), f
    n = len(x)
    h_inv = np.eye(n)
    for _ in range(iters):
        d = -(h_inv @ g)
        slope = float(d @ g)
        if not np.isfinite(d).all() or slope >= 0.0:
            d = -g
            slope = float(d @ g)
            if slope >= 0.0:
                break  # zero gradient: nothing to improve
        step = 1.0
        accepted = False
        for _ in range(30):
            x_new = x + step * d
            f_new, g_new = objective(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        g_new = np.atleast_1d(np.asarray(g_new, dtype=np.float64))
        s = x_new - x
        y = g_new - g
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_f, best_x = f, x.copy()
        sy = float(s @ y)
        if sy > 1e-12 * max(1.0, float(np.linalg.norm(s) * np.linalg.norm(y))):
            rho = 1.0 / sy
            sy_outer = np.outer(s, y)
            h_inv = (h_inv - rho * (sy_outer @ h_inv + h_inv @ sy_outer.T)
                     + rho * rho * float(y @ h_inv @ y) * np.outer(s, s)
                     + rho * np.outer(s, s))
    return best_x


def save_model(params: AaeParams, fileobj):
    """Write the checkpoint: dims header then float32 tensors in order."""
    close = False
    if isinstance(fileobj, (str, bytes)) or hasattr(fileobj, "__fspath__"):
        fileobj = open(fileobj, "wb")
        close = True
    try:
        w = fileobj.write
        w(MODEL_MAGIC)
        w(struct.pack("<III", params.d_in, params.d_out, len(params.hidden)))
        for h in params.hidden:
            w(struct.pack("<I", h))
        d_su = params.side_user_w.shape[0] if params.side_user_w is not None else 0
        d_sv = params.side_item_w.shape[0] if params.side_item_w is not None else 0
        w(struct.pack("<IIf", d_su, d_sv, params.dropout_rate))
        for _, t in params.named_tensors():
            w(t.astype("<f4").tobytes())
    finally:
        if close:
            fileobj.close()


def load_model(fileobj) -> AaeParams:
    close = False
    if isinstance(fileobj, (str, bytes)) or hasattr(fileobj, "__fspath__"):
        fileobj = open(fileobj, "rb")
        close = True
    try:
        if fileobj.read(8) != MODEL_MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        d_in, d_out, n_hidden = struct.unpack("<III", fileobj.read(12))
        hidden = struct.unpack(f"<{n_hidden}I", fileobj.read(4 * n_hidden))
        d_su, d_sv, dropout = struct.unpack("<IIf", fileobj.read(12))
        params = aae_init(d_in, d_out, hidden,
                          side_dims=(d_su or None, d_sv or None),
                          dropout_rate=dropout, rng=0)
        for name, t in params.named_tensors():
            raw = fileobj.read(4 * t.size)
            if len(raw) != 4 * t.size:
                raise ValueError("truncated model checkpoint")
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            params.set_tensor(name, arr.reshape(t.shape))
        return params
    finally:
        if close:
            fileobj.close()


def model_to_bytes(params: AaeParams) -> bytes:
    buf = io.BytesIO()
    save_model(params, buf)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> AaeParams:
    return load_model(io.BytesIO(data))
