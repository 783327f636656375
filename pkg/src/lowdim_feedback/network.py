"""Multilayer perceptron with a decoupled backward pass.

Indexing: h_0 = x, a_{l+1} = W_l h_l (+ b_l), h_{l+1} = f_{l+1}(a_{l+1}) for
l = 0..L-1. The output error delta_L comes from the loss; every hidden layer
l = 1..L-1 gets its delta_l from the FeedbackPathway stored under key l.

Sign convention: delta_l = dLoss/da_l (gradient direction, batch mean
folded into delta_L). Updates subtract:

    W_l <- W_l - eta * (delta_{l+1} h_l^T + lambda * W_l)

A hidden layer without a pathway (or whose source carries no delta) has
delta_l = None and its incoming weight is left untouched.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch
from tqdm import tqdm

from lowdim_feedback.errors import DimensionError, DivergenceError, InvalidInputError, MisuseError
from lowdim_feedback.feedback import (
    FeedbackHyper, FeedbackPathway, PathwayKind, make_pathway, pp_orthogonality_error,
    propagate_error, update_local, update_normative,
)
from lowdim_feedback.ledger import FORWARD, WEIGHT_UPDATE, MacLedger, charge, matmul_macs
from lowdim_feedback.linalg import (
    DTYPE, Matrix, Rng, check_shape, dump_matrix, kaiming_uniform, load_matrix, sample_gaussian,
)
from lowdim_feedback.metrics import subspace_alignment
from lowdim_feedback.tasks import ClassTask, LinearTask, task_svd
from lowdim_feedback.theory import overlaps_of_map
from lowdim_feedback.trajectory import Trajectory, TrajectoryRow

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e8


# === BUILDING BLOCKS ===

class Activation(str, Enum):
    LINEAR = "linear"
    RELU = "relu"
    TANH = "tanh"

    def apply(self, a: Matrix) -> Matrix:
        if self == Activation.RELU:
            return torch.relu(a)
        if self == Activation.TANH:
            return torch.tanh(a)
        return a

    def derivative(self, a: Matrix) -> Matrix:
        if self == Activation.RELU:
            return (a > 0).to(DTYPE)
        if self == Activation.TANH:
            return 1.0 - torch.tanh(a) ** 2
        return torch.ones_like(a)


class Loss(str, Enum):
    SQUARED = "squared"
    CROSS_ENTROPY = "cross-entropy"


@dataclass
class Layer:
    w: Matrix  # n_{l+1} x n_l
    activation: Activation = Activation.LINEAR
    b: Matrix | None = None  # n_{l+1} x 1

    @property
    def n_in(self) -> int:
        return self.w.shape[1]

    @property
    def n_out(self) -> int:
        return self.w.shape[0]


@dataclass
class Network:
    layers: list[Layer]
    pathways: dict[int, FeedbackPathway] = field(default_factory=dict)
    loss: Loss = Loss.SQUARED

    def __post_init__(self):
        self.loss = Loss(self.loss)
        for layer in self.layers:
            layer.activation = Activation(layer.activation)
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def validate(self) -> None:
        if not self.layers:
            raise DimensionError("network needs at least one layer")
        for l in range(1, self.depth):
            if self.layers[l].n_in != self.layers[l - 1].n_out:
                raise DimensionError(
                    f"W_{l} has {self.layers[l].n_in} columns but W_{l - 1} has {self.layers[l - 1].n_out} rows"
                )
        widths = self.widths
        for key, pw in self.pathways.items():
            if not 1 <= key < self.depth:
                raise DimensionError(f"pathway key {key} is not a hidden layer (1..{self.depth - 1})")
            if pw.layer != key:
                raise DimensionError(f"pathway stored under layer {key} belongs to layer {pw.layer}")
            if pw.source_layer > self.depth:
                raise DimensionError(
                    f"layer {key} pathway source_layer {pw.source_layer} is past the output layer {self.depth}"
                )
            if pw.n_in != widths[key] or pw.n_src != widths[pw.source_layer]:
                raise DimensionError(
                    f"layer {key} pathway is {pw.n_in}x{pw.n_src}, layers are "
                    f"{widths[key]}x{widths[pw.source_layer]}"
                )
            if pw.kind == PathwayKind.NORMATIVE and pw.is_broadcast:
                raise MisuseError(f"layer {key}: normative feedback needs source_layer = layer + 1")
            if pw.use_targets and pw.source_layer != self.depth:
                raise MisuseError(f"layer {key}: use_targets needs the output layer as source")
        if self.loss == Loss.CROSS_ENTROPY and self.layers[-1].activation != Activation.LINEAR:
            raise MisuseError("cross-entropy applies its own softmax; output activation must be linear")

    def end_to_end(self) -> Matrix:
        """W_{L-1} ... W_0. The input-output map when every activation is linear."""
        product = self.layers[0].w
        for layer in self.layers[1:]:
            product = layer.w @ product
        return product


@dataclass(frozen=True)
class PathwaySpec:
    layer: int
    kind: PathwayKind | str = PathwayKind.TRANSPOSE
    rank: int | None = None
    source: int | None = None  # None -> layer + 1
    update_q: bool = False
    update_p: bool = True
    use_targets: bool = False


def build_network(
    widths: list[int],
    rng: Rng,
    activations: list[Activation | str] | None = None,
    pathways: list[PathwaySpec] | None = None,
    loss: Loss | str = Loss.SQUARED,
    bias: bool = False,
    init: str = "kaiming",
    init_std: float = 1e-3,
) -> Network:
    """Fresh network; pathways=None gives transpose feedback everywhere."""
    depth = len(widths) - 1
    if depth < 1:
        raise DimensionError(f"need at least two widths, got {widths}")
    if activations is None:
        activations = [Activation.LINEAR] * depth
    if len(activations) != depth:
        raise DimensionError(f"{depth} layers but {len(activations)} activations")

    layers = []
    for l in range(depth):
        stream = rng.spawn(f"weight{l}")
        if init == "kaiming":
            w = kaiming_uniform(stream, widths[l + 1], widths[l])
        elif init == "gaussian":
            w = sample_gaussian(stream, widths[l + 1], widths[l], init_std)
        else:
            raise ValueError(f"Unknown init: {init}. Available: ['kaiming', 'gaussian']")
        b = torch.zeros(widths[l + 1], 1, dtype=DTYPE) if bias else None
        layers.append(Layer(w=w, activation=Activation(activations[l]), b=b))

    if pathways is None:
        pathways = [PathwaySpec(layer=l) for l in range(1, depth)]
    built = {}
    for spec in pathways:
        source = spec.layer + 1 if spec.source is None else spec.source
        if not 1 <= spec.layer < depth or not spec.layer < source <= depth:
            raise DimensionError(f"pathway layer {spec.layer} / source {source} outside a {depth}-layer net")
        built[spec.layer] = make_pathway(
            spec.kind, spec.layer, source, widths[spec.layer], widths[source],
            rng.spawn(f"feedback{spec.layer}"), rank=spec.rank,
            update_q=spec.update_q, update_p=spec.update_p, use_targets=spec.use_targets,
        )
    return Network(layers=layers, pathways=built, loss=Loss(loss))


# === FORWARD / BACKWARD ===

@dataclass
class ForwardCache:
    pre: list[Matrix | None]  # a_l, index 0 unused
    post: list[Matrix]  # h_l, h_0 = x

    @property
    def output(self) -> Matrix:
        return self.post[-1]


def forward(net: Network, x: Matrix, ledger: MacLedger | None = None) -> ForwardCache:
    check_shape(x, net.widths[0], None, "input batch")
    batch = x.shape[1]
    pre, post = [None], [x]
    h = x
    for layer in net.layers:
        a = layer.w @ h
        charge(ledger, FORWARD, matmul_macs(layer.n_out, layer.n_in, batch))
        if layer.b is not None:
            a = a + layer.b
        h = layer.activation.apply(a)
        pre.append(a)
        post.append(h)
    return ForwardCache(pre=pre, post=post)


def output_error(net: Network, cache: ForwardCache, target: Matrix) -> Matrix:
    """delta_L, batch mean folded in."""
    a_out = cache.pre[-1]
    check_shape(target, a_out.shape[0], a_out.shape[1], "target batch")
    batch = a_out.shape[1]
    if net.loss == Loss.CROSS_ENTROPY:
        return (torch.softmax(a_out, dim=0) - target) / batch
    deriv = net.layers[-1].activation.derivative(a_out)
    return (cache.output - target) * deriv / batch


def backward(net: Network, cache: ForwardCache, target: Matrix,
             ledger: MacLedger | None = None) -> list[Matrix | None]:
    """Deltas indexed 0..L; index 0 is always None."""
    deltas: list[Matrix | None] = [None] * (net.depth + 1)
    deltas[net.depth] = output_error(net, cache, target)
    for l in range(net.depth - 1, 0, -1):
        pw = net.pathways.get(l)
        if pw is None or deltas[pw.source_layer] is None:
            continue
        deriv = net.layers[l - 1].activation.derivative(cache.pre[l])
        forward_w = net.layers[l].w if pw.kind == PathwayKind.TRANSPOSE else None
        deltas[l] = propagate_error(pw, deltas[pw.source_layer], deriv, forward_w, ledger)
    return deltas


def loss_value(net: Network, cache: ForwardCache, target: Matrix) -> float:
    """Batch mean of 1/2 ||y_hat - y||^2, or of the softmax cross-entropy."""
    batch = target.shape[1]
    if net.loss == Loss.CROSS_ENTROPY:
        log_probs = torch.log_softmax(cache.pre[-1], dim=0)
        return float(-(target * log_probs).sum() / batch)
    return float(0.5 * ((cache.output - target) ** 2).sum() / batch)


def accuracy(output: Matrix, labels: torch.Tensor) -> float:
    return float((output.argmax(dim=0) == labels).to(DTYPE).mean())


@dataclass
class TrainConfig:
    eta: float = 1e-3
    weight_decay: float = 0.0  # forward lambda, distinct from the feedback decay
    batch: int | None = None  # None -> full batch
    steps: int = 1000
    epochs: int | None = None  # overrides steps when set
    seed: int = 0
    feedback: FeedbackHyper = field(default_factory=FeedbackHyper)
    record_every: int = 10
    n_modes: int | None = None  # None -> task rank d
    progress: bool = False

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch is not None and self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")

    def batch_size(self, p: int) -> int:
        return p if self.batch is None else min(self.batch, p)

    def total_steps(self, p: int) -> int:
        if self.epochs is None:
            return self.steps
        return self.epochs * (p // self.batch_size(p))


def apply_updates(net: Network, cache: ForwardCache, deltas: list[Matrix | None], cfg: TrainConfig,
                  ledger: MacLedger | None = None) -> None:
    if cfg.eta == 0:
        return
    for l, layer in enumerate(net.layers):
        delta = deltas[l + 1]
        if delta is None:
            continue
        h = cache.post[l]
        grad = delta @ h.T
        charge(ledger, WEIGHT_UPDATE, matmul_macs(layer.n_out, h.shape[1], layer.n_in))
        layer.w = layer.w - cfg.eta * (grad + cfg.weight_decay * layer.w)
        if layer.b is not None:
            layer.b = layer.b - cfg.eta * delta.sum(dim=1, keepdim=True)


def update_feedback(net: Network, cache: ForwardCache, deltas: list[Matrix | None],
                    targets: Matrix, hyper: FeedbackHyper, ledger: MacLedger | None = None) -> None:
    """One plasticity step for every learnable pathway. Reads forward weights before they move."""
    for l, pw in net.pathways.items():
        if pw.kind == PathwayKind.NORMATIVE:
            update_normative(pw, net.layers[l].w, hyper, ledger)
        elif pw.kind == PathwayKind.LOCAL:
            delta_src = deltas[pw.source_layer]
            if delta_src is None:
                continue
            update_local(pw, delta_src, cache.post[l], targets, hyper, ledger)


# === TRAINING LOOP ===

@dataclass
class TrainState:
    step: int = 0
    order: list[int] | None = None  # current epoch's sample permutation
    cursor: int = 0
    rng_state: list[int] | None = None
    ledger: MacLedger = field(default_factory=MacLedger)


def _next_indices(state: TrainState, rng: Rng, p: int, batch: int) -> list[int] | None:
    if batch >= p:
        return None
    if state.order is None or state.cursor + batch > p:
        state.order = torch.randperm(p, generator=rng.generator).tolist()
        state.cursor = 0
    idx = state.order[state.cursor:state.cursor + batch]
    state.cursor += batch
    return idx


def _evaluate(net: Network, task: LinearTask | ClassTask, step: int, time: float,
              n_modes: int, svd_io, ledger: MacLedger) -> TrajectoryRow:
    cache = forward(net, task.inputs)
    row = TrajectoryRow(step=step, time=time, loss=loss_value(net, cache, task.targets),
                        cum_macs=ledger.total)

    if isinstance(task, ClassTask):
        if task.test_inputs is not None:
            row.accuracy = accuracy(forward(net, task.test_inputs).output, task.test_labels)
        else:
            row.accuracy = accuracy(cache.output, task.labels)

    if svd_io is not None:
        lam = overlaps_of_map(net.end_to_end(), svd_io, n_modes)
        row.overlaps = [None if math.isnan(x) else x for x in lam.tolist()]

    local = [pw for pw in net.pathways.values() if pw.kind == PathwayKind.LOCAL]
    if local:
        row.pp_orth_err = max(pp_orthogonality_error(pw) for pw in local)

    if svd_io is not None:
        angles = []
        for pw in net.pathways.values():
            if pw.kind.factored and pw.source_layer == net.depth:
                top = svd_io.u[:, :min(pw.rank, svd_io.u.shape[1])]
                angles.append(subspace_alignment(pw.p, top).max_angle)
        if angles:
            row.subspace_angle_max = max(angles)
    return row


def train(
    net: Network,
    task: LinearTask | ClassTask,
    cfg: TrainConfig,
    state: TrainState | None = None,
) -> Trajectory:
    """Run cfg's steps (resuming from state if given) and record a Trajectory.

    state is advanced in place, so a caller can checkpoint it afterwards.
    Feedback factors are updated before the forward weights, from the same
    batch and the pre-update weights.
    """
    if task.inputs.shape[0] != net.widths[0] or task.output_dim != net.widths[-1]:
        raise DimensionError(
            f"task is {task.inputs.shape[0]} -> {task.output_dim}, network is {net.widths[0]} -> {net.widths[-1]}"
        )

    is_linear = isinstance(task, LinearTask)
    svd_io = task_svd(task) if is_linear else None
    if not is_linear:
        n_modes = 0
    elif cfg.n_modes is None:
        n_modes = task.d
    else:
        n_modes = cfg.n_modes

    state = state if state is not None else TrainState()
    rng = Rng(cfg.seed).spawn("batches")
    if state.rng_state is not None:
        rng.set_state(state.rng_state)
    ledger = state.ledger

    batch = cfg.batch_size(task.p)
    total = cfg.total_steps(task.p)
    hyper = cfg.feedback
    traj = Trajectory(n_modes=n_modes)

    if state.step == 0:
        traj.append(_evaluate(net, task, 0, 0.0, n_modes, svd_io, ledger))

    start = state.step
    for step in tqdm(range(start, total), desc="Training", disable=not cfg.progress):
        idx = _next_indices(state, rng, task.p, batch)
        if idx is None:
            x, y = task.inputs, task.targets
        else:
            x, y = task.inputs[:, idx], task.targets[:, idx]

        cache = forward(net, x, ledger)
        batch_loss = loss_value(net, cache, y)
        if not math.isfinite(batch_loss) or batch_loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss became {batch_loss} at step {step}", step=step)

        deltas = backward(net, cache, y, ledger)
        if step % hyper.update_interval == 0:
            update_feedback(net, cache, deltas, y, hyper, ledger)
        apply_updates(net, cache, deltas, cfg, ledger)
        state.step = step + 1

        if state.step % cfg.record_every == 0 or state.step == total:
            traj.append(_evaluate(net, task, state.step, state.step * cfg.eta, n_modes, svd_io, ledger))

    state.rng_state = rng.get_state()
    if traj.rows:
        final = traj.final
        logger.info(f"Trained {state.step} steps: loss={final.loss:.6g}"
                    + (f" accuracy={final.accuracy:.4f}" if final.accuracy is not None else ""))
    return traj


# === CHECKPOINTS ===

def save_checkpoint(net: Network, directory: str | Path, state: TrainState | None = None) -> Path:
    """network.json + matrix dumps for every W, b, Q, P, B; state.json if given."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "loss": net.loss.value,
        "activations": [layer.activation.value for layer in net.layers],
        "bias": [layer.b is not None for layer in net.layers],
        "pathways": [
            {
                "layer": pw.layer, "kind": pw.kind.value, "source_layer": pw.source_layer,
                "rank": pw.rank, "update_q": pw.update_q, "update_p": pw.update_p,
                "use_targets": pw.use_targets,
            }
            for pw in net.pathways.values()
        ],
    }
    for l, layer in enumerate(net.layers):
        dump_matrix(layer.w, directory / f"w{l}.txt")
        if layer.b is not None:
            dump_matrix(layer.b, directory / f"b{l}.txt")
    for pw in net.pathways.values():
        for name in ("q", "p", "b"):
            m = getattr(pw, name)
            if m is not None:
                dump_matrix(m, directory / f"fb{pw.layer}_{name}.txt")
    (directory / "network.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")

    if state is not None:
        state_meta = {
            "step": state.step, "order": state.order, "cursor": state.cursor,
            "rng_state": state.rng_state, "macs": state.ledger.snapshot(),
        }
        (directory / "state.json").write_text(json.dumps(state_meta), encoding="utf-8")
    logger.debug(f"Checkpoint saved to {directory}")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[Network, TrainState | None]:
    directory = Path(directory)
    if not (directory / "network.json").exists():
        raise InvalidInputError(f"no checkpoint in {directory}")
    meta = json.loads((directory / "network.json").read_text(encoding="utf-8"))

    layers = []
    for l, act in enumerate(meta["activations"]):
        b = load_matrix(directory / f"b{l}.txt") if meta["bias"][l] else None
        layers.append(Layer(w=load_matrix(directory / f"w{l}.txt"), activation=Activation(act), b=b))

    pathways = {}
    for pm in meta["pathways"]:
        mats = {}
        for name in ("q", "p", "b"):
            path = directory / f"fb{pm['layer']}_{name}.txt"
            mats[name] = load_matrix(path) if path.exists() else None
        widths = [layers[0].n_in] + [layer.n_out for layer in layers]
        pathways[pm["layer"]] = FeedbackPathway(
            kind=PathwayKind(pm["kind"]), layer=pm["layer"], source_layer=pm["source_layer"],
            n_in=widths[pm["layer"]], n_src=widths[pm["source_layer"]], rank=pm["rank"],
            update_q=pm["update_q"], update_p=pm["update_p"], use_targets=pm["use_targets"],
            **mats,
        )
    net = Network(layers=layers, pathways=pathways, loss=Loss(meta["loss"]))

    state = None
    state_path = directory / "state.json"
    if state_path.exists():
        sm = json.loads(state_path.read_text(encoding="utf-8"))
        state = TrainState(
            step=sm["step"], order=sm["order"], cursor=sm["cursor"], rng_state=sm["rng_state"],
            ledger=MacLedger(counts=dict(sm["macs"])),
        )
    return net, state
