from dataclasses import replace

import pytest
import torch

from lowdim_feedback.errors import DimensionError, DivergenceError, MisuseError
from lowdim_feedback.feedback import FeedbackPathway
from lowdim_feedback.linalg import DTYPE, Rng, sample_gaussian
from lowdim_feedback.network import (
    Activation, Layer, Network, PathwaySpec, TrainConfig, TrainState, accuracy, apply_updates,
    backward, build_network, forward, load_checkpoint, loss_value, save_checkpoint, train,
)
from lowdim_feedback.tasks import (
    input_covariance, input_output_covariance, make_class_task, make_linear_task, one_hot,
)


@pytest.mark.parametrize("act", list(Activation))
def test_activation_derivative(act):
    a = sample_gaussian(Rng(0), 4, 50)
    a = a[a.abs() > 1e-3].reshape(1, -1)
    h = 1e-6
    numeric = (act.apply(a + h) - act.apply(a - h)) / (2 * h)
    assert torch.allclose(act.derivative(a), numeric, atol=1e-6)


def test_activation_serializes_by_name():
    assert Activation.RELU.value == "relu"
    assert Activation("tanh") is Activation.TANH


def test_identity_forward():
    net = Network(layers=[Layer(w=torch.eye(3, dtype=DTYPE))])
    x = sample_gaussian(Rng(1), 3, 5)
    assert torch.equal(forward(net, x).output, x)


def test_linear_composition(rng):
    net = build_network([5, 4, 3], rng)
    x = sample_gaussian(rng.spawn("x"), 5, 6)
    expected = net.layers[1].w @ net.layers[0].w @ x
    assert torch.allclose(forward(net, x).output, expected, atol=1e-12)
    assert torch.allclose(net.end_to_end(), net.layers[1].w @ net.layers[0].w)


def test_relu_of_zero_input(rng):
    net = build_network([3, 4, 2], rng, activations=["relu", "linear"])
    cache = forward(net, torch.zeros(3, 2, dtype=DTYPE))
    assert torch.equal(cache.post[1], torch.zeros(4, 2, dtype=DTYPE))


def _net_away_from_kinks(loss):
    for seed in range(50):
        net = build_network([5, 7, 6, 4], Rng(seed), activations=["tanh", "relu", "linear"], loss=loss)
        x = sample_gaussian(Rng(seed).spawn("x"), 5, 3)
        if forward(net, x).pre[2].abs().min() > 1e-3:
            return net, x
    raise AssertionError("no seed without relu kinks")


@pytest.mark.parametrize("loss", ["squared", "cross-entropy"])
def test_transpose_feedback_is_the_gradient(loss):
    net, x = _net_away_from_kinks(loss)
    if loss == "squared":
        y = sample_gaussian(Rng(99), 4, 3)
    else:
        y = one_hot(torch.tensor([0, 3, 1]), 4)
    cache = forward(net, x)
    deltas = backward(net, cache, y)
    h = 1e-6
    for l, layer in enumerate(net.layers):
        analytic = deltas[l + 1] @ cache.post[l].T
        numeric = torch.zeros_like(layer.w)
        original = layer.w
        for i in range(original.shape[0]):
            for j in range(original.shape[1]):
                bump = torch.zeros_like(original)
                bump[i, j] = h
                layer.w = original + bump
                up = loss_value(net, forward(net, x), y)
                layer.w = original - bump
                down = loss_value(net, forward(net, x), y)
                numeric[i, j] = (up - down) / (2 * h)
        layer.w = original
        rel = torch.linalg.matrix_norm(analytic - numeric) / torch.linalg.matrix_norm(numeric)
        assert rel <= 1e-5


def test_full_rank_normative_matches_backprop(rng):
    net = build_network([6, 5, 4, 3], rng)
    pathways = {
        l: FeedbackPathway(kind="normative", layer=l, source_layer=l + 1, n_in=net.widths[l],
                           n_src=net.widths[l + 1], rank=net.widths[l + 1],
                           q=net.layers[l].w.T.clone(), p=torch.eye(net.widths[l + 1], dtype=DTYPE))
        for l in (1, 2)
    }
    factored = Network(layers=net.layers, pathways=pathways)
    x = sample_gaussian(rng.spawn("x"), 6, 4)
    y = sample_gaussian(rng.spawn("y"), 3, 4)
    bp = backward(net, forward(net, x), y)
    fa = backward(factored, forward(factored, x), y)
    for l in (1, 2, 3):
        assert torch.allclose(bp[l], fa[l], atol=1e-12)


def _broadcast_net(layers_with_pathways):
    specs = [PathwaySpec(layer=l, kind="local", rank=2, source=3) for l in layers_with_pathways]
    return build_network([4, 6, 5, 3], Rng(5), activations=["tanh", "tanh", "linear"], pathways=specs)


def test_broadcast_deltas():
    net = _broadcast_net([1, 2])
    x = sample_gaussian(Rng(6), 4, 3)
    y = sample_gaussian(Rng(7), 3, 3)
    cache = forward(net, x)
    deltas = backward(net, cache, y)
    for l in (1, 2):
        pw = net.pathways[l]
        expected = (pw.q @ (pw.p @ deltas[3])) * (1 - torch.tanh(cache.pre[l]) ** 2)
        assert torch.allclose(deltas[l], expected, atol=1e-14)


def test_broadcast_delta_ignores_other_layers():
    both, only_first = _broadcast_net([1, 2]), _broadcast_net([1])
    x = sample_gaussian(Rng(6), 4, 3)
    y = sample_gaussian(Rng(7), 3, 3)
    d_both = backward(both, forward(both, x), y)
    d_first = backward(only_first, forward(only_first, x), y)
    assert torch.equal(d_both[1], d_first[1])
    assert d_first[2] is None


def test_layer_without_delta_is_frozen():
    net = _broadcast_net([1])
    w1 = net.layers[1].w.clone()
    x = sample_gaussian(Rng(6), 4, 3)
    cache = forward(net, x)
    deltas = backward(net, cache, sample_gaussian(Rng(7), 3, 3))
    apply_updates(net, cache, deltas, TrainConfig(eta=0.1))
    assert torch.equal(net.layers[1].w, w1)


def test_chain_breaks_without_upstream_pathway(rng):
    net = build_network([4, 5, 5, 3], rng, pathways=[PathwaySpec(layer=1)])
    deltas = backward(net, forward(net, torch.ones(4, 2, dtype=DTYPE)), torch.zeros(3, 2, dtype=DTYPE))
    assert deltas[2] is None and deltas[1] is None


def test_zero_deltas_only_decay(rng):
    net = build_network([4, 3, 2], rng)
    w0 = [layer.w.clone() for layer in net.layers]
    cache = forward(net, sample_gaussian(rng, 4, 5))
    deltas = [None, torch.zeros(3, 5, dtype=DTYPE), torch.zeros(2, 5, dtype=DTYPE)]
    apply_updates(net, cache, deltas, TrainConfig(eta=0.1, weight_decay=0.01))
    for layer, w in zip(net.layers, w0):
        assert torch.allclose(layer.w, (1 - 0.1 * 0.01) * w, atol=1e-15)


def test_single_layer_update_is_covariance_gradient(small_linear_task):
    task = small_linear_task
    w0 = sample_gaussian(Rng(2), 4, 8)
    net = Network(layers=[Layer(w=w0.clone())])
    cache = forward(net, task.inputs)
    apply_updates(net, cache, backward(net, cache, task.targets), TrainConfig(eta=0.1))
    expected = 0.1 * (input_output_covariance(task) - w0 @ input_covariance(task))
    assert torch.allclose(net.layers[0].w - w0, expected, atol=1e-12)


def test_zero_learning_rate_is_flat(small_linear_task):
    net = build_network([8, 4, 4], Rng(0))
    w0 = [layer.w.clone() for layer in net.layers]
    traj = train(net, small_linear_task, TrainConfig(eta=0.0, weight_decay=0.1, steps=5, record_every=1))
    assert len(traj) == 6
    assert len(set(traj.column("loss"))) == 1
    assert len(set(traj.column("lambda_1"))) == 1
    for layer, w in zip(net.layers, w0):
        assert torch.equal(layer.w, w)


def test_backprop_learns_every_mode():
    task = make_linear_task(n=8, m=4, d=2, p=400, noise_std=0.1, seed=1, whiten=True)
    net = build_network([8, 4, 4], Rng(1), init="gaussian", init_std=1e-3)
    traj = train(net, task, TrainConfig(eta=0.02, steps=4000, record_every=100))
    assert traj.final.overlaps[0] == pytest.approx(1.0, abs=0.01)
    assert traj.final.overlaps[1] == pytest.approx(1.0, abs=0.01)
    assert traj.final.loss < traj.rows[0].loss


def test_trajectory_records(small_linear_task):
    net = build_network([8, 6, 4], Rng(0), pathways=[PathwaySpec(layer=1, kind="local", rank=2, source=2)])
    traj = train(net, small_linear_task, TrainConfig(eta=0.01, steps=30, record_every=10, batch=100))
    assert traj.steps == [0, 10, 20, 30]
    assert traj.n_modes == 2
    macs = traj.column("cum_macs")
    assert macs[0] == 0 and all(b > a for a, b in zip(macs, macs[1:]))
    assert all(x is not None for x in traj.column("pp_orth_err"))
    assert traj.final.time == pytest.approx(0.3)


def test_training_is_deterministic(small_linear_task):
    cfg = TrainConfig(eta=0.01, batch=50, steps=40, seed=4, record_every=10)
    specs = [PathwaySpec(layer=1, kind="local", rank=2, update_q=True)]
    a = train(build_network([8, 6, 4], Rng(3), pathways=specs), small_linear_task, cfg)
    b = train(build_network([8, 6, 4], Rng(3), pathways=specs), small_linear_task, cfg)
    assert a.rows == b.rows


def test_checkpoint_resume_is_bit_exact(small_linear_task, tmp_path):
    specs = [PathwaySpec(layer=1, kind="local", rank=2, update_q=True)]
    cfg = TrainConfig(eta=0.01, batch=50, steps=20, seed=1, record_every=5)

    straight = build_network([8, 6, 4], Rng(2), activations=["tanh", "linear"], pathways=specs)
    train(straight, small_linear_task, cfg)

    first = build_network([8, 6, 4], Rng(2), activations=["tanh", "linear"], pathways=specs)
    state = TrainState()
    train(first, small_linear_task, replace(cfg, steps=10), state)
    save_checkpoint(first, tmp_path, state)
    resumed, resumed_state = load_checkpoint(tmp_path)
    train(resumed, small_linear_task, cfg, resumed_state)

    for a, b in zip(straight.layers, resumed.layers):
        assert torch.equal(a.w, b.w)
    assert torch.equal(straight.pathways[1].p, resumed.pathways[1].p)
    assert torch.equal(straight.pathways[1].q, resumed.pathways[1].q)
    assert resumed_state.step == 20


def test_checkpoint_round_trip(tmp_path):
    specs = [PathwaySpec(layer=1, kind="fixed-random", rank=2), PathwaySpec(layer=2, kind="normative")]
    net = build_network([5, 4, 3, 2], Rng(8), activations=["relu", "tanh", "linear"], pathways=specs, bias=True)
    save_checkpoint(net, tmp_path)
    loaded, state = load_checkpoint(tmp_path)
    assert state is None
    assert [l.activation for l in loaded.layers] == [Activation.RELU, Activation.TANH, Activation.LINEAR]
    for a, b in zip(net.layers, loaded.layers):
        assert torch.equal(a.w, b.w) and torch.equal(a.b, b.b)
    assert torch.equal(net.pathways[1].b, loaded.pathways[1].b)
    assert torch.equal(net.pathways[2].q, loaded.pathways[2].q)
    assert torch.equal(net.pathways[2].p, loaded.pathways[2].p)


def test_divergence_is_reported(small_linear_task):
    net = build_network([8, 4, 4], Rng(0))
    with pytest.raises(DivergenceError) as info:
        train(net, small_linear_task, TrainConfig(eta=10.0, steps=500))
    assert info.value.step is not None


def test_class_task_accuracy_is_recorded():
    task = make_class_task(n=6, d=3, per_class=20, spread=0.2, seed=0, test_per_class=5)
    net = build_network([6, 8, 3], Rng(0), activations=["relu", "linear"], loss="cross-entropy")
    traj = train(net, task, TrainConfig(eta=0.1, batch=10, epochs=2, record_every=3))
    assert traj.n_modes == 0
    assert traj.final.step == 12
    assert 0.0 <= traj.final.accuracy <= 1.0


def test_accuracy():
    out = torch.tensor([[0.9, 0.1, 0.3], [0.1, 0.8, 0.6]], dtype=DTYPE)
    assert accuracy(out, torch.tensor([0, 1, 0])) == pytest.approx(2 / 3)


def test_normative_must_be_chained():
    with pytest.raises(MisuseError):
        build_network([4, 5, 5, 3], Rng(0), pathways=[PathwaySpec(layer=1, kind="normative", source=3)])


def test_cross_entropy_needs_linear_output():
    with pytest.raises(MisuseError):
        build_network([4, 3], Rng(0), activations=["relu"], loss="cross-entropy")


def test_targets_driven_pathway_must_read_output():
    with pytest.raises(MisuseError):
        build_network([4, 5, 5, 3], Rng(0), pathways=[PathwaySpec(layer=1, kind="local", use_targets=True)])


def test_layer_widths_must_chain():
    with pytest.raises(DimensionError):
        Network(layers=[Layer(w=torch.ones(3, 4, dtype=DTYPE)), Layer(w=torch.ones(2, 5, dtype=DTYPE))])


def test_task_and_network_must_agree(small_linear_task):
    with pytest.raises(DimensionError):
        train(build_network([7, 4, 4], Rng(0)), small_linear_task, TrainConfig(steps=1))
