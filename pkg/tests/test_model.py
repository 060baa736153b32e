import json

import numpy as np
import pytest

from conftest import make_record
from gada.exceptions import CheckpointError, ConfigError, ShapeMismatchError
from gada.graph import GraphConfig, build_graph
from gada.model import (
    EMPTY_GRAPH_LOGIT, GraphBatch, ModelConfig, count_params, forward, forward_batch, init_params,
    load_checkpoint, param_shapes, save_checkpoint, sigmoid,
)
from gada.testing import random_graph
from reference import reference_forward

SMALL = ModelConfig(num_layers=2, num_heads=2, hidden_dim=4, phi_hidden=3)


def path_graph():
    """Three nodes on consecutive frames; the outer two do not overlap."""
    rec = make_record({0: [[0.10, 0.1, 0.2, 0.2, 0.9]],
                       1: [[0.25, 0.1, 0.2, 0.2, 0.6]],
                       2: [[0.40, 0.1, 0.2, 0.2, 0.3]]})
    g = build_graph(rec)
    assert {(s, d) for s, d in zip(g.src.tolist(), g.dst.tolist())} == {(0, 1), (1, 0), (1, 2), (2, 1)}
    return g


def constant_params(cfg, weight=0.1):
    return {name: np.zeros(shape) if name.rsplit(".", 1)[-1] in ("b", "b1", "b2", "bout") else np.full(shape, weight)
            for name, shape in param_shapes(cfg).items()}


def _reference(graph, params, cfg):
    edges = list(zip(graph.src.tolist(), graph.dst.tolist(), graph.edge_inputs.tolist()))
    return reference_forward(graph.features.tolist(), edges, params, cfg.num_layers, cfg.num_heads,
                             cfg.normalize_beta)


@pytest.mark.parametrize("cfg", [SMALL, ModelConfig()], ids=["small", "default"])
def test_path_graph_matches_reference_with_constant_weights(cfg):
    g = path_graph()
    params = constant_params(cfg)
    ref_logit, ref_scores, ref_weights = _reference(g, params, cfg)
    out = forward(g, params, cfg)
    assert abs(out.graph_logit - ref_logit) <= 1e-12
    np.testing.assert_allclose(out.node_scores, ref_scores, atol=1e-12)
    np.testing.assert_allclose(out.node_weights, ref_weights, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("normalize", [True, False])
def test_random_graphs_match_reference(seed, normalize):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_layers=2, num_heads=2, hidden_dim=6, phi_hidden=4, normalize_beta=normalize)
    g = random_graph(rng, int(rng.integers(3, 10)))
    params = init_params(cfg, seed)
    # nonzero biases everywhere, including the attention bias that cancels in the softmax
    params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in params.items()}
    ref_logit, ref_scores, _ = _reference(g, params, cfg)
    out = forward(g, params, cfg)
    assert abs(out.graph_logit - ref_logit) <= 1e-12
    np.testing.assert_allclose(out.node_scores, ref_scores, atol=1e-12)


def test_parameter_count_and_shapes():
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    assert count_params(params) == 82161
    assert all(params[n].shape == s for n, s in param_shapes(cfg).items())
    assert list(params) == list(param_shapes(cfg))


def test_init_is_deterministic_and_bounded():
    cfg = ModelConfig()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["embed.W"], init_params(cfg, 4)["embed.W"])
    limit = np.sqrt(6 / (cfg.hidden_dim + cfg.hidden_dim))
    assert np.abs(a["1.Wself"]).max() <= limit
    assert not a["read.b"].any() and not a["1.bout"].any()


def test_invalid_model_config():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(num_layers=0)


def test_empty_graph_has_fixed_negative_logit():
    g = build_graph(make_record({0: [], 1: []}))
    out = forward(g, init_params(ModelConfig(), 0), ModelConfig())
    assert out.graph_logit == EMPTY_GRAPH_LOGIT
    assert out.probability == pytest.approx(0.2689414213699951, abs=1e-15)
    assert out.node_scores.shape == (0,) and out.attention.shape == (3, 4, 0)


def test_edgeless_graph_uses_uniform_weights():
    rec = make_record({0: [[0.1, 0.1, 0.1, 0.1, 0.5], [0.6, 0.6, 0.1, 0.1, 0.7]]})
    g = build_graph(rec)
    assert g.n_nodes == 2 and g.n_edges == 0
    out = forward(g, init_params(ModelConfig(), 1), ModelConfig())
    np.testing.assert_allclose(out.node_weights, [0.5, 0.5])
    assert out.graph_logit == pytest.approx(out.node_scores.mean(), abs=1e-15)


def _per_destination_sums(graph, attention):
    sums = np.zeros((attention.shape[0], attention.shape[1], graph.n_nodes))
    np.add.at(sums, (slice(None), slice(None), graph.dst), attention)
    return sums[:, :, np.unique(graph.dst)]


@pytest.mark.parametrize("seed", range(8))
def test_output_invariants(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig()
    g = random_graph(rng, int(rng.integers(2, 30)))
    out = forward(g, init_params(cfg, seed), cfg)
    if g.n_edges:
        np.testing.assert_allclose(_per_destination_sums(g, out.attention), 1.0, atol=1e-9)
    assert np.all((out.attention >= 0) & (out.attention <= 1))
    assert np.all(out.node_weights >= 0)
    assert abs(out.node_weights.sum() - 1.0) <= 1e-9
    assert np.all(np.abs(out.node_scores) < 1)
    assert -1 <= out.graph_logit <= 1
    assert out.probability == pytest.approx(float(sigmoid(out.graph_logit)), abs=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_node_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig()
    g = random_graph(rng, int(rng.integers(3, 25)))
    params = init_params(cfg, seed)
    perm = rng.permutation(g.n_nodes)
    h = g.permuted(perm, rng.permutation(g.n_edges))
    a, b = forward(g, params, cfg), forward(h, params, cfg)
    assert abs(a.graph_logit - b.graph_logit) <= 1e-9
    np.testing.assert_allclose(b.node_scores, a.node_scores[perm], atol=1e-9)
    np.testing.assert_allclose(b.node_weights, a.node_weights[perm], atol=1e-9)


def test_isolated_node_does_not_influence_others():
    connected = [[0.10, 0.1, 0.2, 0.2, 0.9]], [[0.15, 0.1, 0.2, 0.2, 0.6]]
    iso = lambda c: [0.7, 0.7, 0.1, 0.1, c]
    cfg = ModelConfig()
    params = init_params(cfg, 2)
    outs = []
    for c in (0.2, 0.95):
        g = build_graph(make_record({0: connected[0] + [iso(c)], 1: connected[1]}))
        assert g.n_nodes == 3 and g.n_edges == 2
        outs.append(forward(g, params, cfg))
    iso_index = 1  # frame 0 holds the connected box then the isolated one
    others = [0, 2]
    np.testing.assert_array_equal(outs[0].node_scores[others], outs[1].node_scores[others])
    assert outs[0].node_weights[iso_index] == 0.0
    assert outs[0].graph_logit == outs[1].graph_logit


def test_batch_equals_one_graph_at_a_time():
    rng = np.random.default_rng(7)
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    graphs = [random_graph(rng, int(n)) for n in (5, 0, 12, 1, 8)]
    batched = forward_batch(GraphBatch(graphs, 3), params, cfg).graph_logits
    single = [forward(g, params, cfg).graph_logit for g in graphs]
    np.testing.assert_allclose(batched, single, atol=1e-13)


def test_forward_is_deterministic():
    g = random_graph(np.random.default_rng(1), 10)
    params = init_params(ModelConfig(), 0)
    a, b = forward(g, params, ModelConfig()), forward(g, params, ModelConfig())
    assert a.graph_logit == b.graph_logit and np.array_equal(a.attention, b.attention)


def test_feature_width_mismatch():
    g = build_graph(make_record({0: [[0.1, 0.1, 0.2, 0.2, 0.5]]}), GraphConfig(feature_mask=("confidence",)))
    with pytest.raises(ShapeMismatchError, match="node_in_dim|node features"):
        forward(g, init_params(ModelConfig(), 0), ModelConfig())


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig()
    params = init_params(cfg, 5)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, cfg, path, graph_config={"frame_window": 5})
    loaded, cfg2, graph_doc = load_checkpoint(path, with_graph_config=True)
    assert cfg2 == cfg and graph_doc == {"frame_window": 5}
    assert all(np.array_equal(params[k], loaded[k]) for k in params)
    g = random_graph(np.random.default_rng(0), 9)
    assert forward(g, params, cfg).graph_logit == forward(g, loaded, cfg2).graph_logit
    assert list(json.loads(path.read_text())["tensors"]) == list(param_shapes(cfg))


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "ckpt.json"
    save_checkpoint(init_params(ModelConfig(), 0), ModelConfig(), path)
    path.write_text(path.read_text()[:500])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_names_tensor(tmp_path):
    path = tmp_path / "ckpt.json"
    save_checkpoint(init_params(ModelConfig(), 0), ModelConfig(), path)
    with pytest.raises(ShapeMismatchError, match="embed.W"):
        load_checkpoint(path, expected=ModelConfig(node_in_dim=5))


def test_corrupted_tensor_shape(tmp_path):
    path = tmp_path / "ckpt.json"
    save_checkpoint(init_params(ModelConfig(), 0), ModelConfig(), path)
    doc = json.loads(path.read_text())
    doc["tensors"]["2.Wout"]["data"] = doc["tensors"]["2.Wout"]["data"][:-1]
    path.write_text(json.dumps(doc))
    with pytest.raises(ShapeMismatchError, match="2.Wout"):
        load_checkpoint(path)
