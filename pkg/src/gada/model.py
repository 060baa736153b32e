"""Edge-aware multi-head graph attention network over detection graphs.

Layer update for destination node ``v`` (per head, then concatenated)::

    a_uv   = softmax_{u -> v}( q_v . k_u / sqrt(d) + psi(e_uv) )
    m_v    = sum_u a_uv * phi(h_u, e_uv)
    h'_v   = Wself h_v + Wout [m_v^1 .. m_v^H] + bout          (ReLU between layers)

Node scores are ``tanh(read.w . h_v + read.b)``. The readout weight of a node is
the final-layer attention it hands out as a key (summed over the edges it
sources, averaged over heads), normalized over the graph; the graph logit is
the weighted sum of node scores, and an empty graph has the fixed logit -1.

All arithmetic is float64. Many graphs are processed together as one disjoint
union (:class:`GraphBatch`); every per-graph quantity is identical to running
the graphs one at a time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ._config import from_mapping, require, to_mapping
from .exceptions import CheckpointError, ShapeMismatchError
from .graph import EDGE_DIM, VideoGraph

Parameters = dict  # name -> np.ndarray, in canonical order

EMPTY_GRAPH_LOGIT = -1.0
CHECKPOINT_FORMAT = "gada-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    num_heads: int = 4
    hidden_dim: int = 64
    node_in_dim: int = 3
    edge_in_dim: int = EDGE_DIM
    phi_hidden: int = 32
    normalize_beta: bool = True

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "hidden_dim", "node_in_dim", "edge_in_dim", "phi_hidden"):
            value = getattr(self, name)
            require(isinstance(value, (int, np.integer)) and not isinstance(value, bool) and value >= 1,
                    f"{name} must be a positive integer, got {value!r}")
        require(self.hidden_dim % self.num_heads == 0, "hidden_dim must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return to_mapping(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return from_mapping(cls, data)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes. Weight matrices are stored ``(in, out)``."""
    D, d, P, E = cfg.hidden_dim, cfg.head_dim, cfg.phi_hidden, cfg.edge_in_dim
    shapes = {"embed.W": (cfg.node_in_dim, D), "embed.b": (D,)}
    for layer in range(1, cfg.num_layers + 1):
        for head in range(1, cfg.num_heads + 1):
            p = f"{layer}.{head}."
            shapes.update({
                p + "Wq": (D, d), p + "Wk": (D, d),
                p + "phi.W1": (D + E, P), p + "phi.b1": (P,),
                p + "phi.W2": (P, d), p + "phi.b2": (d,),
                p + "psi.w": (E,), p + "psi.b": (1,),
            })
        shapes.update({f"{layer}.Wself": (D, D), f"{layer}.Wout": (cfg.num_heads * d, D), f"{layer}.bout": (D,)})
    shapes.update({"read.w": (D,), "read.b": (1,)})
    return shapes


def _is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("b", "b1", "b2", "bout")


def init_params(cfg: ModelConfig, seed: int) -> Parameters:
    """Glorot-uniform weights, ``a = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if _is_bias(name):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)
            a = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def count_params(params: Parameters) -> int:
    return int(sum(p.size for p in params.values()))


def check_params(params: Parameters, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    missing = [n for n in expected if n not in params]
    if missing:
        raise ShapeMismatchError(f"missing tensor '{missing[0]}'")
    extra = [n for n in params if n not in expected]
    if extra:
        raise ShapeMismatchError(f"unexpected tensor '{extra[0]}'")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ShapeMismatchError(
                f"tensor '{name}' has shape {tuple(np.shape(params[name]))}, expected {shape}")


class GraphBatch:
    """Disjoint union of graphs with edges sorted by destination."""

    def __init__(self, graphs: Sequence[VideoGraph], node_in_dim: int | None = None):
        self.graphs = list(graphs)
        sizes = np.array([g.n_nodes for g in self.graphs], dtype=np.int64)
        esizes = np.array([g.n_edges for g in self.graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_graphs = len(self.graphs)
        self.sizes = sizes
        self.n_nodes = int(offsets[-1])
        width = node_in_dim if node_in_dim is not None else (
            self.graphs[0].features.shape[1] if self.graphs else 0)
        for g in self.graphs:
            if g.features.shape[1] != width:
                raise ShapeMismatchError(
                    f"graph {g.video_id} has node features of length {g.features.shape[1]}, "
                    f"model expects {width}")
        self.x = np.concatenate([g.features for g in self.graphs] or [np.zeros((0, width))], axis=0)
        self.node_labels = np.concatenate(
            [g.node_labels for g in self.graphs] or [np.zeros(0)]).astype(float)
        self.labels = np.array([g.label for g in self.graphs], dtype=float)
        self.gid = np.repeat(np.arange(self.n_graphs), sizes)

        src = np.concatenate([g.src + o for g, o in zip(self.graphs, offsets)] or [np.zeros(0, np.int64)])
        dst = np.concatenate([g.dst + o for g, o in zip(self.graphs, offsets)] or [np.zeros(0, np.int64)])
        ef = np.concatenate([g.edge_inputs for g in self.graphs] or [np.zeros((0, EDGE_DIM))], axis=0)
        order = np.argsort(dst, kind="stable")
        self.edge_order = order
        self.edge_offsets = np.concatenate([[0], np.cumsum(esizes)])
        self.src, self.dst, self.ef = src[order].astype(np.int64), dst[order].astype(np.int64), ef[order]
        self.n_edges = len(self.src)
        self.has_edges = esizes > 0

        E, N = self.n_edges, self.n_nodes
        if E:
            self.seg_starts = np.flatnonzero(np.r_[True, self.dst[1:] != self.dst[:-1]])
            self.seg_counts = np.diff(np.r_[self.seg_starts, E])
            self.seg_nodes = self.dst[self.seg_starts]
        self.membership = sp.csr_matrix((np.ones(N), (self.gid, np.arange(N))), shape=(self.n_graphs, N))
        ones = np.ones(E)
        self.scatter_src = sp.csr_matrix((ones, (self.src, np.arange(E))), shape=(N, E))
        self.scatter_dst = sp.csr_matrix((ones, (self.dst, np.arange(E))), shape=(N, E))

    def astype(self, dtype) -> "GraphBatch":
        """Shallow copy whose numeric inputs use ``dtype`` (e.g. ``np.longdouble``)."""
        other = object.__new__(GraphBatch)
        other.__dict__.update(self.__dict__)
        for name in ("x", "ef", "node_labels", "labels"):
            setattr(other, name, getattr(self, name).astype(dtype))
        other.membership = self.membership.astype(dtype)
        other.scatter_src = self.scatter_src.astype(dtype)
        other.scatter_dst = self.scatter_dst.astype(dtype)
        return other

    def seg_expand(self, per_segment: np.ndarray) -> np.ndarray:
        return np.repeat(per_segment, self.seg_counts, axis=0)

    def seg_softmax(self, logits: np.ndarray) -> np.ndarray:
        shifted = logits - self.seg_expand(np.maximum.reduceat(logits, self.seg_starts, axis=0))
        ex = np.exp(shifted)
        return ex / self.seg_expand(np.add.reduceat(ex, self.seg_starts, axis=0))

    def seg_sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.seg_starts, axis=0)

    def graph_sum(self, values: np.ndarray) -> np.ndarray:
        return self.membership @ values

    def split_nodes(self, values: np.ndarray) -> list[np.ndarray]:
        return np.split(values, np.cumsum(self.sizes)[:-1]) if self.n_graphs else []

    def unsort_edges(self, values: np.ndarray) -> np.ndarray:
        """Map edge-axis-0 values from sorted order back to concatenated graph order."""
        out = np.empty_like(values)
        out[self.edge_order] = values
        return out


def _stacked(params: Parameters, cfg: ModelConfig, layer: int) -> dict[str, np.ndarray]:
    """Per-head tensors of one layer laid side by side (head-major columns)."""
    D, H, P, d = cfg.hidden_dim, cfg.num_heads, cfg.phi_hidden, cfg.head_dim
    heads = [f"{layer}.{h}." for h in range(1, H + 1)]
    w2 = [params[p + "phi.W2"] for p in heads]
    W2 = np.zeros((H * P, H * d), dtype=w2[0].dtype)
    for i, block in enumerate(w2):
        W2[i * P:(i + 1) * P, i * d:(i + 1) * d] = block
    return {
        "Wq": np.hstack([params[p + "Wq"] for p in heads]),
        "Wk": np.hstack([params[p + "Wk"] for p in heads]),
        "W1h": np.hstack([params[p + "phi.W1"][:D] for p in heads]),
        "W1e": np.hstack([params[p + "phi.W1"][D:] for p in heads]),
        "b1": np.concatenate([params[p + "phi.b1"] for p in heads]),
        "W2": W2,  # block diagonal: one GEMM for all heads
        "b2": np.concatenate([params[p + "phi.b2"] for p in heads]),
        "psi": np.column_stack([params[p + "psi.w"] for p in heads]),
        "Wself": params[f"{layer}.Wself"],
        "Wout": params[f"{layer}.Wout"],
        "bout": params[f"{layer}.bout"],
    }


@dataclass
class BatchOutput:
    node_scores: np.ndarray      # (N,)
    node_weights: np.ndarray     # (N,) normalized readout weights
    graph_logits: np.ndarray     # (B,)
    attention: list[np.ndarray]  # per layer, (E, H) in sorted edge order
    cache: dict


def forward_batch(batch: GraphBatch, params: Parameters, cfg: ModelConfig) -> BatchOutput:
    if batch.x.shape[1] != cfg.node_in_dim:
        raise ShapeMismatchError(
            f"node features have length {batch.x.shape[1]} but the model expects node_in_dim={cfg.node_in_dim}")
    N, E, H, d = batch.n_nodes, batch.n_edges, cfg.num_heads, cfg.head_dim
    D = cfg.hidden_dim
    src, dst, ef = batch.src, batch.dst, batch.ef
    scale = 1.0 / math.sqrt(d)

    h = batch.x @ params["embed.W"] + params["embed.b"]
    layers, attention = [], []
    for layer in range(1, cfg.num_layers + 1):
        w = _stacked(params, cfg, layer)
        c = {"h": h, "w": w}
        if E:
            qe = (h @ w["Wq"]).reshape(N, H, d)[dst]
            ke = (h @ w["Wk"]).reshape(N, H, d)[src]
            # psi.b shifts every logit of a destination equally and cancels in the softmax
            logits = np.einsum("ehd,ehd->eh", qe, ke) * scale + ef @ w["psi"]
            alpha = batch.seg_softmax(logits)
            r1 = (h @ w["W1h"] + w["b1"])[src]
            r1 += ef @ w["W1e"]
            np.maximum(r1, 0.0, out=r1)
            val = r1 @ w["W2"] + w["b2"]                                    # (E, H*d)
            msg = batch.scatter_dst @ (val.reshape(E, H, d) * alpha[:, :, None]).reshape(E, D)
            c.update(qe=qe, ke=ke, alpha=alpha, r1=r1, val=val)
            attention.append(alpha)
        else:
            msg = np.zeros((N, D))
            attention.append(np.zeros((0, H)))
        c["msg"] = msg
        pre = h @ w["Wself"] + msg @ w["Wout"] + w["bout"]
        c["pre"] = pre
        h = np.maximum(pre, 0.0) if layer < cfg.num_layers else pre
        layers.append(c)

    y = np.tanh(h @ params["read.w"] + params["read.b"][0])

    if E:
        beta_raw = (batch.scatter_src @ attention[-1]).mean(axis=1)
    else:
        beta_raw = np.zeros(N)
    totals = batch.graph_sum(beta_raw)
    sizes = np.maximum(batch.sizes, 1)
    edged = batch.has_edges[batch.gid]
    if cfg.normalize_beta:
        beta = np.where(edged, beta_raw / np.where(totals > 0, totals, 1.0)[batch.gid], 0.0)
    else:
        beta = np.where(edged, beta_raw, 0.0)
    beta = np.where(edged, beta, 1.0 / sizes[batch.gid])
    logits = batch.graph_sum(beta * y)
    logits[batch.sizes == 0] = EMPTY_GRAPH_LOGIT

    cache = {"layers": layers, "h_last": h, "y": y, "beta": beta, "totals": totals, "edged": edged}
    return BatchOutput(y, beta, logits, attention, cache)


def backward_batch(batch: GraphBatch, params: Parameters, cfg: ModelConfig, out: BatchOutput,
                   d_scores: np.ndarray, d_logits: np.ndarray) -> Parameters:
    """Reverse pass: gradients of a loss given its derivatives w.r.t. node scores and graph logits."""
    E, H, d, P = batch.n_edges, cfg.num_heads, cfg.head_dim, cfg.phi_hidden
    D = cfg.hidden_dim
    src, dst, ef = batch.src, batch.dst, batch.ef
    scale = 1.0 / math.sqrt(d)
    c = out.cache
    y, beta, edged = c["y"], c["beta"], c["edged"]
    grads = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}

    d_logits = np.where(batch.sizes == 0, 0.0, d_logits)
    dz = d_logits[batch.gid]
    dy = d_scores + dz * beta
    dbeta = np.where(edged, dz * y, 0.0)
    if cfg.normalize_beta:
        totals = c["totals"]
        inner = batch.graph_sum(dbeta * beta)
        dbeta_raw = np.where(edged, (dbeta - inner[batch.gid]) / np.where(totals > 0, totals, 1.0)[batch.gid], 0.0)
    else:
        dbeta_raw = dbeta

    ds = dy * (1.0 - y ** 2)
    grads["read.w"] = c["h_last"].T @ ds
    grads["read.b"] = np.array([ds.sum()])
    dh = np.outer(ds, params["read.w"])

    for layer in range(cfg.num_layers, 0, -1):
        lc = c["layers"][layer - 1]
        w, h = lc["w"], lc["h"]
        dpre = dh * (lc["pre"] > 0) if layer < cfg.num_layers else dh
        grads[f"{layer}.Wself"] = h.T @ dpre
        grads[f"{layer}.Wout"] = lc["msg"].T @ dpre
        grads[f"{layer}.bout"] = dpre.sum(axis=0)
        dh = dpre @ w["Wself"].T
        if not E:
            continue
        alpha, val, qe, ke, r1 = lc["alpha"], lc["val"], lc["qe"], lc["ke"], lc["r1"]
        dme = (dpre @ w["Wout"].T)[dst]                                     # (E, H*d)
        dalpha = (dme * val).reshape(E, H, d).sum(axis=2)
        if layer == cfg.num_layers:
            dalpha += (dbeta_raw[src] / H)[:, None]
        dval = (dme.reshape(E, H, d) * alpha[:, :, None]).reshape(E, D)
        stacked = {"W2": r1.T @ dval, "b2": dval.sum(axis=0)}
        dr1 = dval @ w["W2"].T
        dr1 *= r1 > 0
        stacked["W1e"] = ef.T @ dr1
        stacked["b1"] = dr1.sum(axis=0)
        dA = batch.scatter_src @ dr1
        stacked["W1h"] = h.T @ dA
        dh += dA @ w["W1h"].T

        dlogit = alpha * (dalpha - batch.seg_expand(batch.seg_sum(alpha * dalpha)))
        stacked["psi"] = ef.T @ dlogit
        dlogit *= scale
        dq = batch.scatter_dst @ (dlogit[:, :, None] * ke).reshape(E, D)
        dk = batch.scatter_src @ (dlogit[:, :, None] * qe).reshape(E, D)
        stacked["Wq"] = h.T @ dq
        stacked["Wk"] = h.T @ dk
        dh += dq @ w["Wq"].T + dk @ w["Wk"].T

        for i in range(H):
            p = f"{layer}.{i + 1}."
            cols = slice(i * d, (i + 1) * d)
            pcols = slice(i * P, (i + 1) * P)
            grads[p + "Wq"] = stacked["Wq"][:, cols]
            grads[p + "Wk"] = stacked["Wk"][:, cols]
            grads[p + "phi.W1"] = np.vstack([stacked["W1h"][:, pcols], stacked["W1e"][:, pcols]])
            grads[p + "phi.b1"] = stacked["b1"][pcols]
            grads[p + "phi.W2"] = stacked["W2"][pcols, cols]
            grads[p + "phi.b2"] = stacked["b2"][cols]
            grads[p + "psi.w"] = stacked["psi"][:, i]

    grads["embed.W"] = batch.x.T @ dh
    grads["embed.b"] = dh.sum(axis=0)
    return grads


@dataclass(frozen=True)
class GraphOutput:
    """Forward-pass result for one graph.

    ``attention`` has shape ``(num_layers, num_heads, n_edges)`` in the graph's
    own edge order.
    """

    node_scores: np.ndarray
    attention: np.ndarray
    node_weights: np.ndarray
    graph_logit: float
    probability: float


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def forward(graph: VideoGraph, params: Parameters, cfg: ModelConfig) -> GraphOutput:
    batch = GraphBatch([graph], cfg.node_in_dim)
    out = forward_batch(batch, params, cfg)
    att = np.stack([batch.unsort_edges(a) for a in out.attention]).transpose(0, 2, 1) if batch.n_edges else \
        np.zeros((cfg.num_layers, cfg.num_heads, 0))
    logit = float(out.graph_logits[0])
    return GraphOutput(out.node_scores, att, out.node_weights, logit, float(sigmoid(logit)))


def graph_logits(graphs: Sequence[VideoGraph], params: Parameters, cfg: ModelConfig,
                 chunk: int = 128) -> np.ndarray:
    """Graph logits for many graphs, evaluated in batches of ``chunk``."""
    parts = [forward_batch(GraphBatch(graphs[i:i + chunk], cfg.node_in_dim), params, cfg).graph_logits
             for i in range(0, len(graphs), chunk)]
    return np.concatenate(parts) if parts else np.zeros(0)


def save_checkpoint(params: Parameters, cfg: ModelConfig, path: str | Path, graph_config: dict | None = None) -> None:
    check_params(params, cfg)
    doc = {"format": CHECKPOINT_FORMAT, "config": cfg.to_dict()}
    if graph_config is not None:
        doc["graph"] = graph_config
    doc["tensors"] = {
        name: {"shape": list(shape), "data": np.asarray(params[name], dtype=float).ravel().tolist()}
        for name, shape in param_shapes(cfg).items()
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None,
                    with_graph_config: bool = False):
    """Read a checkpoint; returns ``(params, cfg)`` or ``(params, cfg, graph_config)``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc.msg} at char {exc.pos})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT or "tensors" not in doc:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    try:
        cfg = ModelConfig.from_dict(doc["config"])
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from None
    tensors = doc["tensors"]
    params = {}
    for name, shape in param_shapes(cfg).items():
        entry = tensors.get(name)
        if entry is None:
            raise ShapeMismatchError(f"{path}: missing tensor '{name}'")
        data = np.asarray(entry.get("data", []), dtype=float)
        if tuple(entry.get("shape", ())) != shape or data.size != math.prod(shape):
            raise ShapeMismatchError(f"{path}: tensor '{name}' does not match its declared shape {shape}")
        params[name] = data.reshape(shape)
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise ShapeMismatchError(f"{path}: unexpected tensor '{extra[0]}'")
    if expected is not None and expected != cfg:
        want = param_shapes(expected)
        for name, shape in want.items():
            if name not in params or params[name].shape != shape:
                got = params[name].shape if name in params else "missing"
                raise ShapeMismatchError(f"{path}: tensor '{name}' is {got}, expected {shape}")
        raise ShapeMismatchError(f"{path}: checkpoint config {cfg} differs from expected {expected}")
    if with_graph_config:
        return params, cfg, doc.get("graph")
    return params, cfg
