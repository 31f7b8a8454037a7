"""Forward/backward passes over DENSE samples, decoders, losses and metrics.

Everything is plain numpy with hand-written reverse mode.  Arrays keep the
dtype of the model parameters, so a float64 :class:`ModelState` gives
float64 gradients (used by the finite-difference checks).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dense import DenseSample, advance_layer, build_repr_map

ADAGRAD_EPS = 1e-10


# ---------------------------------------------------------------------------
# segment kernels


def segment_sum(values: np.ndarray, starts: np.ndarray, total: Optional[int] = None) -> np.ndarray:
    """Sum contiguous row segments of ``values`` strictly left to right.

    Segment ``j`` is ``values[starts[j]:starts[j+1]]`` (the last one runs to
    ``total``, default ``len(values)``); empty segments give zero rows.  The
    accumulation order is fixed, so results are reproducible bit for bit.
    """
    values = np.asarray(values)
    starts = np.asarray(starts, dtype=np.int64)
    total = len(values) if total is None else total
    n = len(starts)
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    if n == 0 or total == 0:
        return out
    lengths = np.diff(np.append(starts, total))
    order = np.argsort(-lengths, kind="stable")
    sorted_len = lengths[order]
    sorted_start = starts[order]
    acc = np.zeros_like(out)
    neg_len = -sorted_len
    for j in range(int(sorted_len[0])):
        # segments are sorted by length, so the ones longer than j form a prefix
        active = int(np.searchsorted(neg_len, -j, side="left"))
        acc[:active] += values[sorted_start[:active] + j]
    out[order] = acc
    return out


def segment_ids(starts: np.ndarray, total: int) -> np.ndarray:
    lengths = np.diff(np.append(starts, total))
    return np.repeat(np.arange(len(starts)), lengths)


def scatter_rows(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[index[t]] += rows[t]`` as a sparse product (transpose of a gather)."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) == 0:
        return np.zeros((n,) + rows.shape[1:], dtype=rows.dtype)
    m = sp.csr_matrix(
        (np.ones(len(index), dtype=rows.dtype), (index, np.arange(len(index)))), shape=(n, len(index))
    )
    return np.asarray(m @ rows.reshape(len(index), -1)).reshape((n,) + rows.shape[1:])


def _check_rows(d: DenseSample, H: np.ndarray):
    if H.ndim != 2 or H.shape[0] != len(d.node_ids):
        raise ValueError(f"H has {H.shape[0] if H.ndim else 0} rows, sample has {len(d.node_ids)} node ids")
    if d.repr_map is None:
        raise ValueError("sample has no repr_map; call build_repr_map first")


# ---------------------------------------------------------------------------
# layers


def layer_forward_additive(d: DenseSample, H_in: np.ndarray) -> np.ndarray:
    """``h_i + sum_{j in nbrs(i)} h_j`` for every node that owns a neighbor list."""
    _check_rows(d, H_in)
    nbr_repr = H_in[d.repr_map]
    nbr_aggr = segment_sum(nbr_repr, d.nbr_offsets, len(d.nbrs))
    self_repr = H_in[d.node_id_offsets[1]:]
    return nbr_aggr + self_repr


def _mean_neighbors(d: DenseSample, H_in: np.ndarray):
    agg = segment_sum(H_in[d.repr_map], d.nbr_offsets, len(d.nbrs))
    counts = np.diff(np.append(d.nbr_offsets, len(d.nbrs)))
    mean = agg / np.maximum(counts, 1)[:, None].astype(H_in.dtype)
    return mean, counts


def layer_forward_sage(d: DenseSample, H_in, W_self, W_nbr, bias, activation: bool = True) -> np.ndarray:
    """GraphSage layer with a mean aggregator; empty neighborhoods contribute zeros."""
    return _sage_forward(d, H_in, W_self, W_nbr, bias, activation)[0]


def _sage_forward(d, H_in, W_self, W_nbr, bias, activation):
    _check_rows(d, H_in)
    if W_self.shape[0] != H_in.shape[1] or W_nbr.shape[0] != H_in.shape[1]:
        raise ValueError("weight shape does not match representation width")
    mean, counts = _mean_neighbors(d, H_in)
    self_repr = H_in[d.node_id_offsets[1]:]
    z = self_repr @ W_self + mean @ W_nbr + bias
    out = np.maximum(z, 0) if activation else z
    return out, (d, H_in.shape[0], self_repr, mean, counts, z, activation)


# ---------------------------------------------------------------------------
# model state


@dataclass
class LayerParams:
    W_self: np.ndarray
    W_nbr: np.ndarray
    bias: np.ndarray


@dataclass
class ModelState:
    """Dense parameters.  Node embeddings live in the partition buffer."""

    task: str  # "lp" or "nc"
    dim: int
    layer_kind: str = "none"  # none | sage | additive
    num_layers: int = 0
    relations: Optional[np.ndarray] = None
    relations_acc: Optional[np.ndarray] = None
    layers: list = field(default_factory=list)
    cls_W: Optional[np.ndarray] = None
    cls_b: Optional[np.ndarray] = None

    @property
    def dtype(self):
        if self.relations is not None:
            return self.relations.dtype
        if self.cls_W is not None:
            return self.cls_W.dtype
        return np.float32

    @property
    def num_relations(self) -> int:
        return 0 if self.relations is None else len(self.relations)

    @property
    def num_classes(self) -> int:
        return 0 if self.cls_W is None else self.cls_W.shape[1]

    def params(self) -> dict:
        """Flat name -> array view of every dense parameter."""
        out = {}
        if self.relations is not None:
            out["relations"] = self.relations
        for i, lp in enumerate(self.layers):
            out[f"layer{i}.W_self"] = lp.W_self
            out[f"layer{i}.W_nbr"] = lp.W_nbr
            out[f"layer{i}.bias"] = lp.bias
        if self.cls_W is not None:
            out["cls_W"] = self.cls_W
            out["cls_b"] = self.cls_b
        return out

    def check_finite(self):
        for name, arr in self.params().items():
            if not np.isfinite(arr).all():
                raise FloatingPointError(f"parameter {name} is not finite")


def init_model(task: str, dim: int, num_relations: int = 0, num_classes: int = 0,
               layer_kind: str = "none", num_layers: int = 0, seed: int = 0,
               dtype=np.float32) -> ModelState:
    rng = np.random.default_rng(seed)
    if layer_kind == "none" and num_layers:
        raise ValueError("decoder-only model cannot have GNN layers")
    m = ModelState(task=task, dim=dim, layer_kind=layer_kind, num_layers=num_layers)
    if task == "lp":
        bound = 0.5 / dim
        m.relations = rng.uniform(-bound, bound, size=(num_relations, dim)).astype(dtype)
        m.relations_acc = np.zeros_like(m.relations)
    if layer_kind == "sage":
        g = np.sqrt(6.0 / (2 * dim))
        for _ in range(num_layers):
            m.layers.append(LayerParams(
                rng.uniform(-g, g, (dim, dim)).astype(dtype),
                rng.uniform(-g, g, (dim, dim)).astype(dtype),
                np.zeros(dim, dtype),
            ))
    if task == "nc":
        g = np.sqrt(6.0 / (dim + num_classes))
        m.cls_W = rng.uniform(-g, g, (dim, num_classes)).astype(dtype)
        m.cls_b = np.zeros(num_classes, dtype)
    return m


# ---------------------------------------------------------------------------
# encoder forward / backward


def gnn_forward(dense: DenseSample, H0: np.ndarray, model: ModelState):
    """Run all layers; returns (target representations, per-layer caches)."""
    if dense.k != model.num_layers:
        raise ValueError(f"sample has {dense.k} hops but the model has {model.num_layers} layers")
    d = dense if dense.repr_map is not None else build_repr_map(dense)
    H = H0
    caches = []
    for i in range(model.num_layers):
        if model.layer_kind == "additive":
            _check_rows(d, H)
            out = layer_forward_additive(d, H)
            caches.append(("additive", d, H.shape[0]))
        else:
            lp = model.layers[i]
            out, cache = _sage_forward(d, H, lp.W_self, lp.W_nbr, lp.bias, i < model.num_layers - 1)
            caches.append(("sage", cache))
        d = advance_layer(d)
        H = out
    return H, caches


def gnn_backward(caches, dH: np.ndarray, model: ModelState):
    """Backpropagate ``dH`` (gradient w.r.t. target rows) to H0; returns (dH0, layer grads)."""
    grads = [None] * len(caches)
    for i in range(len(caches) - 1, -1, -1):
        kind = caches[i][0]
        if kind == "additive":
            _, d, n_in = caches[i]
            seg = segment_ids(d.nbr_offsets, len(d.nbrs))
            dH_in = scatter_rows(d.repr_map, dH[seg], n_in)
            dH_in[d.node_id_offsets[1]:] += dH
        else:
            d, n_in, self_repr, mean, counts, z, activation = caches[i][1]
            lp = model.layers[i]
            dz = dH * (z > 0) if activation else dH
            grads[i] = LayerParams(self_repr.T @ dz, mean.T @ dz, dz.sum(axis=0))
            dmean = dz @ lp.W_nbr.T
            seg = segment_ids(d.nbr_offsets, len(d.nbrs))
            dnbr = dmean[seg] / np.maximum(counts, 1)[seg][:, None].astype(dz.dtype)
            dH_in = scatter_rows(d.repr_map, dnbr, n_in)
            dH_in[d.node_id_offsets[1]:] += dz @ lp.W_self.T
        dH = dH_in
    return dH, grads


# ---------------------------------------------------------------------------
# decoders and losses


def distmult_score(h_src, rel_emb, h_dst):
    """sum_k h_src[k] * rel[k] * h_dst[k] over the last axis."""
    h_src, rel_emb, h_dst = np.asarray(h_src), np.asarray(rel_emb), np.asarray(h_dst)
    if h_src.shape[-1] != rel_emb.shape[-1] or h_src.shape[-1] != h_dst.shape[-1]:
        raise ValueError("DistMult inputs must share the embedding dimension")
    return np.sum(h_src * rel_emb * h_dst, axis=-1)


def _logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def lp_loss(pos_scores, neg_scores, return_grad: bool = False):
    """Softmax cross-entropy of each positive against its own negatives, batch mean."""
    pos = np.asarray(pos_scores, dtype=float) if not hasattr(pos_scores, "dtype") else pos_scores
    neg = np.asarray(neg_scores) if hasattr(neg_scores, "dtype") else np.asarray(neg_scores, dtype=float)
    pos = np.atleast_1d(pos)
    neg = neg.reshape(len(pos), -1)
    if neg.shape[1] == 0:
        raise ValueError("link prediction loss needs at least one negative per positive")
    logits = np.concatenate([pos[:, None], neg], axis=1)
    lse = _logsumexp(logits)
    loss = float(np.mean(lse - pos))
    if not return_grad:
        return loss
    prob = np.exp(logits - lse[:, None])
    prob[:, 0] -= 1.0
    prob /= len(pos)
    return loss, prob[:, 0], prob[:, 1:]


def nc_loss(logits, labels, return_grad: bool = False):
    """Mean softmax cross-entropy."""
    logits = np.atleast_2d(np.asarray(logits, dtype=getattr(logits, "dtype", float)))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    lse = _logsumexp(logits)
    rows = np.arange(len(labels))
    loss = float(np.mean(lse - logits[rows, labels]))
    if not return_grad:
        return loss
    prob = np.exp(logits - lse[:, None])
    prob[rows, labels] -= 1.0
    return loss, prob / len(labels)


# ---------------------------------------------------------------------------
# batches, training step


@dataclass
class Batch:
    """One mini batch.  ``H0`` rows follow ``dense.node_ids``.

    Link prediction: ``edges`` (B, 3) positives and ``negatives`` (B, N) node ids.
    Node classification: ``labels`` for ``dense.targets``.
    """

    dense: DenseSample
    H0: np.ndarray
    H0_state: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None
    negatives: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    # positions of src/dst/negatives inside dense.targets
    src_idx: Optional[np.ndarray] = None
    dst_idx: Optional[np.ndarray] = None
    neg_idx: Optional[np.ndarray] = None


def lp_targets(edges: np.ndarray, negatives: np.ndarray):
    """Unique target nodes of a link-prediction batch and the index of every endpoint."""
    allnodes = np.concatenate([edges[:, 0], edges[:, 2], negatives.ravel()])
    targets, inv = np.unique(allnodes, return_inverse=True)
    b = len(edges)
    return targets, inv[:b], inv[b:2 * b], inv[2 * b:].reshape(negatives.shape)


def forward_backward(batch: Batch, model: ModelState, need_grad: bool = True):
    """Loss, dense-parameter gradients and the gradient w.r.t. ``batch.H0``."""
    H, caches = gnn_forward(batch.dense, batch.H0, model)
    grads = {}
    if model.task == "lp":
        s = H[batch.src_idx]
        o = H[batch.dst_idx]
        n = H[batch.neg_idx]  # (B, N, d)
        r = model.relations[batch.edges[:, 1]]
        sr = s * r
        pos = np.sum(sr * o, axis=1)
        neg = np.einsum("bd,bnd->bn", sr, n)
        if not need_grad:
            return lp_loss(pos, neg), None, None
        loss, dpos, dneg = lp_loss(pos, neg, return_grad=True)
        dpos = dpos.astype(H.dtype)
        dneg = dneg.astype(H.dtype)
        dsr = dpos[:, None] * o + np.einsum("bn,bnd->bd", dneg, n)
        ds = dsr * r
        dr = dsr * s
        do = dpos[:, None] * sr
        dn = dneg[:, :, None] * sr[:, None, :]
        idx = np.concatenate([batch.src_idx, batch.dst_idx, batch.neg_idx.ravel()])
        rows = np.concatenate([ds, do, dn.reshape(-1, H.shape[1])])
        dH = scatter_rows(idx, rows, H.shape[0])
        grads["relations"] = (batch.edges[:, 1], dr)
    else:
        logits = H @ model.cls_W + model.cls_b
        if not need_grad:
            return nc_loss(logits, batch.labels), None, None
        loss, dlogits = nc_loss(logits, batch.labels, return_grad=True)
        dlogits = dlogits.astype(H.dtype)
        grads["cls_W"] = H.T @ dlogits
        grads["cls_b"] = dlogits.sum(axis=0)
        dH = dlogits @ model.cls_W.T
    dH0, layer_grads = gnn_backward(caches, dH, model)
    for i, g in enumerate(layer_grads):
        if g is not None:
            grads[f"layer{i}.W_self"] = g.W_self
            grads[f"layer{i}.W_nbr"] = g.W_nbr
            grads[f"layer{i}.bias"] = g.bias
    return loss, grads, dH0


def dense_relation_grad(model: ModelState, sparse_grad) -> np.ndarray:
    rel_ids, dr = sparse_grad
    return scatter_rows(rel_ids, dr, model.num_relations)


@dataclass
class EmbeddingUpdate:
    node_ids: np.ndarray
    rows: np.ndarray
    state: np.ndarray


def adagrad(param, acc, grad, lr):
    """In-place Adagrad step; returns (param, acc)."""
    acc += grad * grad
    param -= lr * grad / (np.sqrt(acc) + ADAGRAD_EPS)
    return param, acc


def backward_and_step(batch: Batch, model: ModelState, lr: float, learn_embeddings: bool = True):
    """One optimizer step.

    Relations and node embeddings use Adagrad, GNN and classifier weights plain
    SGD.  Returns (loss, EmbeddingUpdate or None); the update carries the new
    rows and accumulators for ``batch.dense.node_ids``.
    """
    loss, grads, dH0 = forward_backward(batch, model)
    for name, g in grads.items():
        arr = g[1] if name == "relations" else g
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite gradient for {name} (loss={loss})")
    if not np.all(np.isfinite(dH0)):
        raise FloatingPointError(f"non-finite embedding gradient (loss={loss})")
    if "relations" in grads:
        rel_ids, dr = grads.pop("relations")
        uniq, inv = np.unique(rel_ids, return_inverse=True)
        g = scatter_rows(inv, dr, len(uniq))
        p, a = model.relations[uniq], model.relations_acc[uniq]
        adagrad(p, a, g, lr)
        model.relations[uniq] = p
        model.relations_acc[uniq] = a
    params = model.params()
    for name, g in grads.items():
        params[name] -= (lr * g).astype(params[name].dtype)
    update = None
    if learn_embeddings:
        rows = batch.H0.copy()
        state = batch.H0_state.copy() if batch.H0_state is not None else np.zeros_like(rows)
        adagrad(rows, state, dH0.astype(rows.dtype), lr)
        update = EmbeddingUpdate(batch.dense.node_ids, rows, state)
    return loss, update


# ---------------------------------------------------------------------------
# evaluation


def rank_against(true_scores: np.ndarray, cand_scores: np.ndarray, mask: Optional[np.ndarray] = None):
    """Rank of each true score among its candidates; ties share the mean rank.

    ``mask`` (same shape as ``cand_scores``) marks candidates to ignore.
    """
    t = true_scores[:, None]
    greater = cand_scores > t
    equal = cand_scores == t
    if mask is not None:
        greater &= ~mask
        equal &= ~mask
    return 1.0 + greater.sum(axis=1) + 0.5 * equal.sum(axis=1)


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=float)
    return float(np.mean(1.0 / ranks)) if len(ranks) else 0.0


def build_filter_index(*edge_sets) -> dict:
    """(src, rel) -> sorted array of known true destinations."""
    e = np.concatenate([x for x in edge_sets if x is not None and len(x)])
    order = np.lexsort((e[:, 2], e[:, 1], e[:, 0]))
    e = e[order]
    keys = e[:, 0] * (int(e[:, 1].max()) + 1) + e[:, 1]
    out = {}
    bounds = np.flatnonzero(np.diff(keys)) + 1
    for chunk in np.split(np.arange(len(e)), bounds):
        s, r = e[chunk[0], 0], e[chunk[0], 1]
        out[(int(s), int(r))] = np.unique(e[chunk, 2])
    return out


def evaluate_lp(model: ModelState, reps: np.ndarray, edges: np.ndarray, mode="all",
                filter_index: Optional[dict] = None, seed: int = 0, chunk: int = 512) -> float:
    """MRR of ``edges`` under destination corruption.

    ``reps`` are final node representations in node-id order.  ``mode`` is
    ``"all"`` (every entity is a candidate) or ``("sampled", N)`` (N uniform
    candidates per edge).  In all-entities mode ``filter_index`` removes other
    known true destinations from the candidate set.
    """
    edges = np.asarray(edges, dtype=np.int64)
    if not len(edges):
        return 0.0
    rng = np.random.default_rng(seed)
    ranks = []
    n = len(reps)
    for start in range(0, len(edges), chunk):
        e = edges[start:start + chunk]
        sr = reps[e[:, 0]] * model.relations[e[:, 1]]
        true = np.sum(sr * reps[e[:, 2]], axis=1)
        if mode == "all":
            scores = sr @ reps.T
            mask = np.zeros(scores.shape, bool)
            mask[np.arange(len(e)), e[:, 2]] = True
            if filter_index is not None:
                for t, (s, r, _) in enumerate(e):
                    known = filter_index.get((int(s), int(r)))
                    if known is not None:
                        mask[t, known] = True
        else:
            _, num = mode
            cand = rng.integers(0, n, size=(len(e), num))
            scores = np.einsum("bd,bnd->bn", sr, reps[cand])
            mask = cand == e[:, 2:3]
        ranks.append(rank_against(true, scores, mask))
    return mrr(np.concatenate(ranks))


def evaluate_nc(logits: np.ndarray, labels) -> float:
    """Accuracy of argmax predictions (ties go to the lowest class id)."""
    labels = np.asarray(labels)
    if not len(labels):
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def parse_eval_mode(text):
    if text in ("all", "all-entities"):
        return "all"
    if isinstance(text, str) and text.startswith("sampled:"):
        return ("sampled", int(text.split(":", 1)[1]))
    if isinstance(text, tuple):
        return text
    raise ValueError(f"eval mode must be 'all' or 'sampled:N', got {text!r}")


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"DGNNCKPT"
_HDR = struct.Struct("<9I")
_KINDS = {"none": 0, "sage": 1, "additive": 2}
_TASKS = {"lp": 0, "nc": 1}


def save_checkpoint(path, model: ModelState, embeddings: np.ndarray, embeddings_state: np.ndarray) -> None:
    """Header then float32 blobs in a fixed order (embeddings in node-id order first)."""
    hdr = _HDR.pack(
        1, _TASKS[model.task], _KINDS[model.layer_kind], model.num_layers, model.dim,
        model.num_relations, len(embeddings), model.num_classes, 0,
    )
    blobs = [embeddings, embeddings_state]
    if model.relations is not None:
        blobs += [model.relations, model.relations_acc]
    for lp in model.layers:
        blobs += [lp.W_self, lp.W_nbr, lp.bias]
    if model.cls_W is not None:
        blobs += [model.cls_W, model.cls_b]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(hdr)
        for b in blobs:
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (model, embeddings, embeddings_state)."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, task, kind, layers, dim, nrel, nnodes, ncls, _ = _HDR.unpack_from(raw, 8)
    pos = 8 + _HDR.size
    floats = np.frombuffer(raw, dtype="<f4", offset=pos)
    cursor = [0]

    def take(*shape):
        size = int(np.prod(shape))
        out = floats[cursor[0]:cursor[0] + size].reshape(shape).astype(np.float32)
        cursor[0] += size
        return out

    task_name = {v: k for k, v in _TASKS.items()}[task]
    kind_name = {v: k for k, v in _KINDS.items()}[kind]
    emb = take(nnodes, dim)
    emb_state = take(nnodes, dim)
    m = ModelState(task=task_name, dim=dim, layer_kind=kind_name, num_layers=layers)
    if task_name == "lp":
        m.relations = take(nrel, dim)
        m.relations_acc = take(nrel, dim)
    if kind_name == "sage":
        for _ in range(layers):
            m.layers.append(LayerParams(take(dim, dim), take(dim, dim), take(dim)))
    if task_name == "nc":
        m.cls_W = take(dim, ncls)
        m.cls_b = take(ncls)
    if cursor[0] != len(floats):
        raise ValueError("checkpoint has trailing or missing data")
    return m, emb, emb_state
