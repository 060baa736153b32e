"""Joint node/graph loss, exact gradients, Adam, and the balanced-batch training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._config import require
from .detections import Dataset
from .graph import GraphConfig, VideoGraph, build_graph
from .metrics import auc_score
from .model import (
    GraphBatch,
    ModelConfig,
    Parameters,
    backward_batch,
    check_params,
    forward_batch,
    graph_logits,
    init_params,
)
from .synthetic import PerturbConfig, perturb_dataset

log = logging.getLogger(__name__)


def node_loss(node_scores, node_labels) -> float:
    """Mean squared error between node scores and their +/-1 labels (0 for no nodes)."""
    scores = np.asarray(node_scores, dtype=float)
    labels = np.asarray(node_labels, dtype=float)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        return 0.0
    return float(np.mean((labels - scores) ** 2))


def _bce(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log(1 + exp(-|z|)) form of -y log s(z) - (1-y) log(1 - s(z))
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def graph_loss(graph_logit: float, video_label: int) -> float:
    """Binary cross-entropy with logits."""
    if not math.isfinite(graph_logit):
        raise ValueError("graph logit must be finite")
    return float(_bce(np.float64(graph_logit), np.float64(video_label)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def batch_objective(batch: GraphBatch, params: Parameters, cfg: ModelConfig, with_grad: bool = True):
    """Mean over graphs of node MSE + graph BCE.

    Returns ``(loss, node_term, graph_term, grads)`` with the loss terms as
    numpy scalars of the batch dtype; ``grads`` is None when ``with_grad`` is
    false.
    """
    out = forward_batch(batch, params, cfg)
    B = max(batch.n_graphs, 1)
    sizes = np.maximum(batch.sizes, 1)
    resid = out.node_scores - batch.node_labels
    per_node = batch.graph_sum(resid ** 2) / sizes
    per_graph = _bce(out.graph_logits, batch.labels)
    node_term = per_node.sum() / B
    graph_term = per_graph.sum() / B
    grads = None
    if with_grad:
        d_scores = 2.0 * resid / sizes[batch.gid] / B
        d_logits = (_sigmoid(out.graph_logits) - batch.labels) / B
        grads = backward_batch(batch, params, cfg, out, d_scores, d_logits)
    return node_term + graph_term, node_term, graph_term, grads


def total_loss(graph: VideoGraph, params: Parameters, mcfg: ModelConfig) -> tuple[float, dict]:
    total, node, graph_term, _ = batch_objective(GraphBatch([graph], mcfg.node_in_dim), params, mcfg,
                                                 with_grad=False)
    return float(total), {"node": float(node), "graph": float(graph_term)}


def backward(graph: VideoGraph, params: Parameters, mcfg: ModelConfig, video_label: int | None = None) -> Parameters:
    """Gradient of the single-graph total loss with respect to every parameter."""
    if video_label is not None and video_label != graph.label:
        graph = VideoGraph(graph.video_id, int(video_label), graph.frame_index, graph.boxes, graph.features,
                           graph.node_labels, graph.src, graph.dst, graph.edge_features,
                           graph.use_edge_features, graph.feature_mask)
    return batch_objective(GraphBatch([graph], mcfg.node_in_dim), params, mcfg)[3]


@dataclass
class GradCheckResult:
    max_rel_error: float
    passed: bool
    worst: tuple[str, tuple[int, ...]]
    n_checked: int
    tensors: tuple[str, ...]

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max relative error {self.max_rel_error:.3e} over {self.n_checked} coordinates "
                f"(worst {self.worst[0]}{list(self.worst[1])})")


def sample_coordinates(params: Parameters, n: int, rng: np.random.Generator) -> list[tuple[str, tuple[int, ...]]]:
    """At least one coordinate from every tensor, then uniform draws up to ``n``."""
    names = list(params)
    coords = [(name, tuple(int(i) for i in np.unravel_index(rng.integers(params[name].size), params[name].shape)))
              for name in names]
    sizes = np.array([params[nm].size for nm in names], dtype=float)
    while len(coords) < n:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = int(rng.integers(params[name].size))
        coords.append((name, tuple(int(i) for i in np.unravel_index(flat, params[name].shape))))
    return coords


def grad_check(graph: VideoGraph | Sequence[VideoGraph], params: Parameters, mcfg: ModelConfig,
               fd_step: float = 1e-5, tolerance: float = 1e-4, n_coords: int = 200, seed: int = 0,
               grads: Parameters | None = None, fd_dtype=np.longdouble,
               fd_cutoff: float = 1e-5) -> GradCheckResult:
    """Compare float64 analytic gradients with central finite differences.

    Relative error per coordinate is ``|g - g_fd| / max(1e-8, |g| + |g_fd|)``.
    In float64 the cancellation error of ``(L(p + s) - L(p - s)) / 2s`` is about
    ``1e-16 * L / s``, which swamps coordinates whose gradient is below ~1e-6.
    Coordinates where the two disagree while both lie below
    ``fd_cutoff * max(1, L)`` are therefore re-differenced in ``fd_dtype``.
    ``grads`` may be supplied to check an externally computed gradient.
    """
    require(1e-6 <= fd_step <= 1e-4, "fd_step must lie in [1e-6, 1e-4]")
    graphs = [graph] if isinstance(graph, VideoGraph) else list(graph)
    batch = GraphBatch(graphs, mcfg.node_in_dim)
    loss, *_, analytic = batch_objective(batch, params, mcfg)
    grads = analytic if grads is None else grads
    cutoff = fd_cutoff * max(1.0, abs(loss))
    precise_batch = batch.astype(fd_dtype)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    precise = {k: np.asarray(v, dtype=fd_dtype).copy() for k, v in params.items()}
    coords = sample_coordinates(work, n_coords, np.random.default_rng(seed))

    def central(b, w, name, idx) -> float:
        orig = w[name][idx]
        w[name][idx] = orig + fd_step
        plus = batch_objective(b, w, mcfg, with_grad=False)[0]
        w[name][idx] = orig - fd_step
        minus = batch_objective(b, w, mcfg, with_grad=False)[0]
        w[name][idx] = orig
        return float((plus - minus) / (2 * fd_step))

    worst, worst_err = coords[0], -1.0
    for name, idx in coords:
        g = float(grads[name][idx])
        fd = central(batch, work, name, idx)
        if fd != g and max(abs(g), abs(fd)) < cutoff:
            fd = central(precise_batch, precise, name, idx)
        err = abs(g - fd) / max(1e-8, abs(g) + abs(fd))
        if err > worst_err:
            worst, worst_err = (name, idx), err
    return GradCheckResult(worst_err, worst_err <= tolerance, worst, len(coords),
                           tuple(sorted({c[0] for c in coords})))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 2000
    batch_size: int = 100
    regen_interval: int = 50
    warmup_exclusion: int = 0
    eval_interval: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        require(self.learning_rate >= 0, "learning_rate must be >= 0")
        require(isinstance(self.epochs, int) and self.epochs >= 1, "epochs must be >= 1")
        require(isinstance(self.batch_size, int) and self.batch_size >= 2 and self.batch_size % 2 == 0,
                "batch_size must be an even integer >= 2")
        require(self.regen_interval >= 1 and self.eval_interval >= 1, "intervals must be >= 1")
        require(self.warmup_exclusion >= 0, "warmup_exclusion must be >= 0")
        require(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "Adam betas must lie in [0, 1)")
        require(self.adam_eps > 0, "adam_eps must be > 0")


@dataclass
class AdamState:
    m: Parameters
    v: Parameters
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Parameters, grads: Parameters, state: AdamState, cfg: TrainConfig) -> tuple[Parameters, AdamState]:
    """One bias-corrected Adam update; returns new parameter and state objects."""
    for name, p in params.items():
        if grads[name].shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"shape mismatch for '{name}': param {p.shape}, grad {grads[name].shape}")
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new_params, AdamState(m, v, t)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    node_loss: float
    graph_loss: float
    val_auc: float | None = None
    noise_level: int | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    initial_val_auc: float | None = None
    best_val_auc: float | None = None
    best_epoch: int | None = None

    def as_dicts(self) -> list[dict]:
        return [vars(r).copy() for r in self.records]


def balanced_indices(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """``batch_size / 2`` positives then ``batch_size / 2`` negatives, drawn uniformly."""
    half = batch_size // 2
    picks = []
    for cls in (1, 0):
        pool = np.flatnonzero(labels == cls)
        picks.append(rng.choice(pool, size=half, replace=len(pool) < half))
    return np.concatenate(picks)


def active_schedule(noise_schedule: Sequence[PerturbConfig], warmup_exclusion: int) -> list[PerturbConfig]:
    return list(noise_schedule)[warmup_exclusion:]


def train(train_dataset: Dataset, val_dataset: Dataset | None, gcfg: GraphConfig, mcfg: ModelConfig,
          tcfg: TrainConfig, noise_schedule: Sequence[PerturbConfig] = (),
          init: Parameters | None = None,
          callback: Callable[[EpochRecord], None] | None = None) -> tuple[Parameters, TrainHistory]:
    """Train on class-balanced batches, one Adam step per epoch.

    Every ``regen_interval`` epochs the training graphs are rebuilt from a
    perturbed copy of the training set, cycling through ``noise_schedule``
    after dropping its first ``warmup_exclusion`` (noisiest) levels. The
    returned parameters are those with the best validation AUC (latest on ties).
    """
    labels = np.array([r.label for r in train_dataset.records])
    if len(set(labels.tolist())) < 2:
        raise ValueError("training set must contain both classes")
    require(gcfg.node_in_dim == mcfg.node_in_dim,
            f"graph features have {gcfg.node_in_dim} dims but model expects {mcfg.node_in_dim}")
    if val_dataset is None:
        val_dataset = train_dataset
    seeds = np.random.SeedSequence(tcfg.seed).generate_state(3)
    init_seed, batch_seed, noise_seed = (int(s) for s in seeds)
    params = init if init is not None else init_params(mcfg, init_seed)
    check_params(params, mcfg)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    state = AdamState.zeros_like(params)
    rng = np.random.Generator(np.random.PCG64(batch_seed))
    levels = active_schedule(noise_schedule, tcfg.warmup_exclusion)

    val_graphs = [build_graph(r, gcfg) for r in val_dataset.records]
    val_labels = np.array([g.label for g in val_graphs])

    def val_auc(p):
        if len(set(val_labels.tolist())) < 2:
            return None
        return auc_score(val_labels, graph_logits(val_graphs, p, mcfg))

    history = TrainHistory(initial_val_auc=val_auc(params))
    best = (history.initial_val_auc if history.initial_val_auc is not None else -np.inf, 0, params)
    graphs: list[VideoGraph] = []
    level_index = None
    for epoch in range(1, tcfg.epochs + 1):
        if (epoch - 1) % tcfg.regen_interval == 0 and (levels or not graphs):
            regen = (epoch - 1) // tcfg.regen_interval
            source = train_dataset
            if levels:
                level_index = tcfg.warmup_exclusion + regen % len(levels)
                source = perturb_dataset(train_dataset, levels[regen % len(levels)], noise_seed + regen)
            graphs = [build_graph(r, gcfg) for r in source.records]
        idx = balanced_indices(labels, tcfg.batch_size, rng)
        batch = GraphBatch([graphs[i] for i in idx], mcfg.node_in_dim)
        loss, nl, gl, grads = batch_objective(batch, params, mcfg)
        params, state = adam_step(params, grads, state, tcfg)
        record = EpochRecord(epoch, float(loss), float(nl), float(gl), noise_level=level_index)
        if epoch % tcfg.eval_interval == 0 or epoch == tcfg.epochs:
            record.val_auc = val_auc(params)
            if record.val_auc is not None and record.val_auc >= best[0]:
                best = (record.val_auc, epoch, params)
            log.info("epoch %d loss %.4f (node %.4f graph %.4f) val AUC %s", epoch, loss, nl, gl, record.val_auc)
        history.records.append(record)
        if callback is not None:
            callback(record)
    if best[0] == -np.inf:
        best = (None, tcfg.epochs, params)
    history.best_val_auc, history.best_epoch = best[0], best[1]
    return best[2], history
