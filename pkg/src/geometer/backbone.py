"""Two-layer graph-attention encoder mapping node features into the metric space.

Each node attends over its neighbors plus itself; attention scores are
leaky-rectified linear forms of the transformed endpoint states, normalized
per neighborhood.  Layer one applies an exponential-linear nonlinearity and
concatenates heads; the output layer is linear (identity) and averages heads
so embeddings live in an unconstrained metric space.

The per-graph edge structure (neighborhoods sorted by center node, plus the
reverse permutation used by the backward scatter) is computed once and cached
on the graph.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .graph_store import Graph

LEAKY_SLOPE = 0.2

__all__ = ["HeadParams", "BackboneParams", "init_backbone", "attention_coefficients",
           "gat_layer", "encode", "backbone_to_arrays", "arrays_to_backbone"]

try:
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def _sddmm_kernel(gmat, zmat, dst, src):
        n_edges = dst.shape[0]
        out = np.empty(n_edges, dtype=gmat.dtype)
        for e in prange(n_edges):
            gr = gmat[dst[e]]
            zr = zmat[src[e]]
            acc = gr[0] * zr[0]
            for d in range(1, gr.shape[0]):
                acc += gr[d] * zr[d]
            out[e] = acc
        return out

    _HAVE_NUMBA = True
except ImportError:      # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


def _sddmm(gmat, zmat, dst, src):
    """Per-edge row dot product gmat[dst[e]] . zmat[src[e]] without materializing gathers."""
    if _HAVE_NUMBA:
        import warnings
        with warnings.catch_warnings():
            # first call compiles; numba's threading-layer probe may warn
            warnings.filterwarnings("ignore", message=".*TBB threading layer.*")
            return _sddmm_kernel(gmat, zmat, dst, src)
    return np.einsum("ed,ed->e", gmat[dst], zmat[src])


@dataclass
class HeadParams:
    weight: Tensor   # [out_h x in]
    attn: Tensor     # [2 * out_h]


@dataclass
class BackboneParams:
    layers: tuple            # two tuples of HeadParams
    feature_dim: int
    hidden_dim: int
    out_dim: int

    @property
    def heads(self):
        return tuple(len(layer) for layer in self.layers)

    def tensors(self):
        return [t for layer in self.layers for hp in layer for t in (hp.weight, hp.attn)]

    @property
    def dtype(self):
        return self.layers[0][0].weight.dtype


def _glorot(rng, shape, dtype):
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0] if len(shape) > 1 else 1
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return dm.tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


def init_backbone(feature_dim: int, hidden: int, out_dim: int, seed: int,
                  heads=(1, 1), dtype=np.float32) -> BackboneParams:
    """Glorot-uniform initialization, deterministic under ``seed``."""
    if min(feature_dim, hidden, out_dim) <= 0:
        raise ValueError("all backbone dimensions must be positive")
    h1, h2 = heads
    if hidden % h1 != 0:
        raise ValueError(f"hidden dim {hidden} not divisible by {h1} heads")
    layer_specs = [(feature_dim, hidden // h1, h1), (hidden, out_dim, h2)]
    layers = []
    for li, (in_dim, out_h, n_heads) in enumerate(layer_specs):
        heads_p = []
        for hi in range(n_heads):
            rng = np.random.default_rng([seed, li, hi])
            heads_p.append(HeadParams(
                weight=_glorot(rng, (out_h, in_dim), dtype),
                attn=_glorot(rng, (2 * out_h,), dtype),
            ))
        layers.append(tuple(heads_p))
    return BackboneParams(tuple(layers), feature_dim, hidden, out_dim)


# ---------------------------------------------------------------------------
# cached self-inclusive neighborhood structure

@dataclass
class _EdgeStructure:
    src: np.ndarray          # incident source per entry, grouped by center
    dst: np.ndarray
    starts: np.ndarray       # segment starts per center node
    lens: np.ndarray
    src_order: np.ndarray    # stable sort of src, for the backward scatter
    src_i32: np.ndarray      # int32 CSR (indices, indptr) of the attention matrix
    indptr_i32: np.ndarray
    dst_t_i32: np.ndarray    # int32 CSR of its transpose
    indptr_t_i32: np.ndarray


def _edge_structure(g: Graph) -> _EdgeStructure:
    cached = getattr(g, "_op_cache", None)
    if cached is not None and "gat_edges" in cached:
        return cached["gat_edges"]
    n = g.node_count
    e = g.edges
    loop = np.arange(n, dtype=np.int64)
    src = np.concatenate([e[:, 0], e[:, 1], loop])
    dst = np.concatenate([e[:, 1], e[:, 0], loop])
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    lens = np.bincount(dst, minlength=n)
    indptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    starts = indptr[:-1]
    src_order = np.argsort(src, kind="stable")
    src_lens = np.bincount(src, minlength=n)
    src_indptr = np.concatenate([[0], np.cumsum(src_lens)]).astype(np.int64)
    struct = _EdgeStructure(
        src, dst, starts, lens, src_order,
        src.astype(np.int32), indptr.astype(np.int32),
        dst[src_order].astype(np.int32), src_indptr.astype(np.int32))
    if cached is not None:
        cached["gat_edges"] = struct
    return struct


def _segment_softmax(scores: Tensor, struct: _EdgeStructure) -> Tensor:
    """Stable softmax over each center node's incident-edge segment."""
    s = scores.data
    m = np.maximum.reduceat(s, struct.starts)
    e = np.exp(s - np.repeat(m, struct.lens))
    z = np.add.reduceat(e, struct.starts)
    alpha = e / np.repeat(z, struct.lens)

    def vjp(g):
        inner = np.add.reduceat(g * alpha, struct.starts)
        return (alpha * (g - np.repeat(inner, struct.lens)),)

    return dm.Tensor(alpha.astype(s.dtype, copy=False), requires_grad=scores.requires_grad,
                     _parents=(scores,), _vjp=vjp)


def _attend_aggregate(z: Tensor, alpha: Tensor, struct: _EdgeStructure) -> Tensor:
    """out[i] = sum over incident entries (alpha * z[src]).

    The aggregation is a sparse matrix product with the per-edge attention
    weights as values, which keeps both directions in C kernels; the
    transposed structure for the backward scatter is precomputed per graph.
    """
    from scipy import sparse

    zd, ad = z.data, alpha.data
    n = zd.shape[0]
    att = sparse.csr_matrix((ad, struct.src_i32, struct.indptr_i32),
                            shape=(n, n), copy=False)
    out = att @ zd

    def vjp(g):
        att_t = sparse.csr_matrix(
            (ad[struct.src_order], struct.dst_t_i32, struct.indptr_t_i32),
            shape=(n, n), copy=False)
        g_z = (att_t @ g).astype(zd.dtype, copy=False)
        g_alpha = _sddmm(np.ascontiguousarray(g), zd, struct.dst, struct.src)
        return g_z, g_alpha

    needs = z.requires_grad or alpha.requires_grad
    return dm.Tensor(out.astype(zd.dtype, copy=False), requires_grad=needs,
                     _parents=(z, alpha), _vjp=vjp)


def _sparse_matmul(sp, w_t: Tensor) -> Tensor:
    """Constant CSR matrix times a parameter matrix, with gradient to the dense side."""
    out = sp @ w_t.data
    if out.size and not np.all(np.isfinite(out)):
        raise dm.NonFiniteError("sparse_matmul: non-finite result")

    def vjp(g):
        return ((sp.T @ g).astype(w_t.dtype, copy=False),)

    return dm.Tensor(out.astype(w_t.dtype, copy=False), requires_grad=w_t.requires_grad,
                     _parents=(w_t,), _vjp=vjp)


# ---------------------------------------------------------------------------
# layers

def _head_attention(hp: HeadParams, g: Graph, states: Tensor, use_sparse_input=False):
    """Per-edge attention weights and transformed states for one head."""
    struct = _edge_structure(g)
    out_h = hp.weight.shape[0]
    sp = g.features_sparse() if use_sparse_input else None
    if sp is not None:
        z = _sparse_matmul(sp, dm.transpose(hp.weight))
    else:
        z = dm.matmul(states, dm.transpose(hp.weight))
    a_center = dm.take_rows(hp.attn, np.arange(out_h))
    a_neigh = dm.take_rows(hp.attn, np.arange(out_h, 2 * out_h))
    s_center = dm.matmul(z, a_center)
    s_neigh = dm.matmul(z, a_neigh)
    scores = dm.add(dm.take_rows(s_center, struct.dst), dm.take_rows(s_neigh, struct.src))
    alpha = _segment_softmax(dm.leaky_relu(scores, LEAKY_SLOPE), struct)
    return z, alpha, struct


def _as_states(g: Graph, node_states, dtype) -> Tensor:
    if isinstance(node_states, Tensor):
        return node_states
    return dm.tensor(np.asarray(node_states, dtype=dtype), dtype=dtype)


def attention_coefficients(params: BackboneParams, g: Graph, node_states, layer: int,
                           head: int = 0) -> dict:
    """Attention weights as {node_id: {incident node_id: alpha}}, self included."""
    states = _as_states(g, node_states, params.dtype)
    if states.shape[0] != g.node_count:
        raise dm.ShapeError(f"states rows {states.shape[0]} != node count {g.node_count}")
    hp = params.layers[layer][head]
    _, alpha, struct = _head_attention(hp, g, states)
    a = alpha.data
    result = {}
    for row in range(g.node_count):
        lo = struct.starts[row]
        seg = slice(lo, lo + struct.lens[row])
        center = int(g.node_ids[row])
        result[center] = {int(g.node_ids[s]): float(v)
                          for s, v in zip(struct.src[seg], a[seg])}
    return result


def gat_layer(params: BackboneParams, g: Graph, node_states, layer: int,
              use_sparse_input: bool = False) -> Tensor:
    """One attention layer over the self-inclusive neighborhoods."""
    states = _as_states(g, node_states, params.dtype)
    head_outs = []
    for hp in params.layers[layer]:
        z, alpha, struct = _head_attention(hp, g, states, use_sparse_input)
        head_outs.append(_attend_aggregate(z, alpha, struct))
    if len(head_outs) == 1:
        combined = head_outs[0]
    elif layer == 0:
        combined = dm.concat(head_outs, axis=1)
    else:
        acc = head_outs[0]
        for h in head_outs[1:]:
            acc = dm.add(acc, h)
        combined = dm.scale(acc, 1.0 / len(head_outs))
    return dm.elu(combined) if layer == 0 else combined


def encode(params: BackboneParams, g: Graph, dropout_rate: float = 0.0,
           rng: np.random.Generator | None = None) -> Tensor:
    """Node embeddings [node_count x out_dim]; differentiable end-to-end."""
    if g.feature_dim != params.feature_dim:
        raise dm.ShapeError(
            f"graph feature dim {g.feature_dim} != backbone input {params.feature_dim}")
    dtype = params.dtype
    if g.node_count == 0:
        return dm.tensor(np.zeros((0, params.out_dim), dtype=dtype), dtype=dtype)
    cache_key = f"features_{np.dtype(dtype).name}"
    h = g._op_cache.get(cache_key)
    if h is None:
        h = dm.tensor(g.features.astype(dtype, copy=False), dtype=dtype)
        g._op_cache[cache_key] = h
    use_sparse = dtype == np.float32 and dropout_rate == 0.0
    if dropout_rate > 0.0:
        h = dm.dropout(h, dropout_rate, rng)
    h = gat_layer(params, g, h, 0, use_sparse_input=use_sparse)
    if dropout_rate > 0.0:
        h = dm.dropout(h, dropout_rate, rng)
    return gat_layer(params, g, h, 1)


# ---------------------------------------------------------------------------
# checkpoint plumbing

def backbone_to_arrays(params: BackboneParams) -> dict:
    arrays = {
        "backbone/meta": np.array(
            [params.feature_dim, params.hidden_dim, params.out_dim, *params.heads],
            dtype=np.float32),
    }
    for li, layer in enumerate(params.layers):
        for hi, hp in enumerate(layer):
            arrays[f"backbone/l{li}/h{hi}/weight"] = hp.weight.data
            arrays[f"backbone/l{li}/h{hi}/attn"] = hp.attn.data
    return arrays


def arrays_to_backbone(arrays: dict) -> BackboneParams:
    meta = arrays["backbone/meta"].astype(np.int64)
    feature_dim, hidden, out_dim, h1, h2 = (int(v) for v in meta)
    layers = []
    for li, n_heads in enumerate((h1, h2)):
        heads_p = []
        for hi in range(n_heads):
            heads_p.append(HeadParams(
                weight=dm.tensor(arrays[f"backbone/l{li}/h{hi}/weight"], requires_grad=True),
                attn=dm.tensor(arrays[f"backbone/l{li}/h{hi}/attn"], requires_grad=True),
            ))
        layers.append(tuple(heads_p))
    return BackboneParams(tuple(layers), feature_dim, hidden, out_dim)
