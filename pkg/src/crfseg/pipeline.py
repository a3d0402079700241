"""End-to-end composition: image -> unary/pairwise features -> region
pooling -> CRF smoothing -> per-pixel softmax, the full manual backward
chain, and the SGD training loop.

The CRF operates on region features; class scores are broadcast back to
pixels by superpixel membership before the softmax, so predictions are
constant within each superpixel by construction.
"""

import sys
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import crf, networks, pooling
from .errors import InvalidArgumentError, PipelineStageError
from .networks import Architecture
from .superpixels import SuperpixelGraph, SuperpixelMap, build_graph, oversegment


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the training loop and the CRF head."""

    arch: Architecture = Architecture()
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 1
    lam: float = 1.0
    superpixel_regions: int = 256
    superpixel_compactness: float = 10.0
    seed: int = 0
    lr_decay: float = 0.5
    lr_decay_every: int = 20
    solver_tolerance: float = crf.DEFAULT_TOLERANCE
    solver_max_sweeps: int = crf.DEFAULT_MAX_SWEEPS
    pairwise: bool = True                 # False freezes W at 0 (unary-only)
    averaged_pool_backward: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.arch.n_classes < 2:
            raise InvalidArgumentError("need at least 2 classes")


@dataclass
class ForwardPass:
    """Forward outputs plus everything the backward chain needs."""

    probabilities: np.ndarray           # (H, W, K)
    loss: float | None
    z: np.ndarray                       # unary output (H, W, K)
    z_s: np.ndarray                     # pooled (N, K)
    z_c: np.ndarray                     # CRF-smoothed (N, K)
    system: crf.CrfSystem
    solver_iterations: np.ndarray
    d_logits: np.ndarray | None = None
    _ctx: dict = field(default_factory=dict, repr=False)


@contextmanager
def _stage(name):
    try:
        yield
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def broadcast_to_pixels(z_c, spmap: SuperpixelMap):
    """Give every pixel its region's feature vector."""
    z_c = np.asarray(z_c, dtype=np.float64)
    if z_c.shape[0] != spmap.region_count:
        raise InvalidArgumentError("region count mismatch")
    return z_c[spmap.assignment]


def broadcast_backward(d_pixels, spmap: SuperpixelMap):
    """Adjoint of broadcast: sum pixel gradients per region."""
    d_pixels = np.asarray(d_pixels, dtype=np.float64)
    if d_pixels.shape[:2] != (spmap.height, spmap.width):
        raise InvalidArgumentError("gradient dims do not match map")
    c = d_pixels.shape[2]
    out = np.zeros((spmap.region_count, c))
    np.add.at(out, spmap.assignment.ravel(), d_pixels.reshape(-1, c))
    return out


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean per-pixel cross-entropy.  Returns (loss, dL/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    h, w, k = logits.shape
    if labels.shape != (h, w):
        raise InvalidArgumentError("labels dims do not match logits")
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidArgumentError(f"label ids must lie in [0, {k})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_prob, labels[..., None], axis=-1)[..., 0]
    loss = float(-picked.mean())
    grad = np.exp(log_prob)
    np.subtract.at(grad, (*np.indices((h, w)), labels), 1.0)
    return loss, grad / (h * w)


def forward(
    image,
    labels,
    params,
    spmap: SuperpixelMap,
    graph: SuperpixelGraph,
    config: TrainConfig,
) -> ForwardPass:
    """Full forward pass; pass labels=None for inference (no loss)."""
    arch = config.arch
    with _stage("unary_forward"):
        z, unary_cache = networks.unary_forward(image, params, arch)
    with _stage("pool_unary"):
        z_s = pooling.pool_unary(z, spmap)
    if config.pairwise:
        with _stage("pairwise_forward"):
            wp_h, wp_v, pair_cache = networks.pairwise_forward(image, params, arch)
        with _stage("pool_pairwise"):
            affinity = pooling.pool_pairwise(wp_h, wp_v, graph)
    else:
        pair_cache = None
        affinity = pooling.RegionAffinity(
            graph.n_regions, graph.edges, np.zeros(graph.n_edges)
        )
    with _stage("assemble_system"):
        system = crf.assemble_system(
            affinity,
            config.lam,
            tolerance=config.solver_tolerance,
            max_sweeps=config.solver_max_sweeps,
        )
    with _stage("ccrf_forward"):
        out = crf.ccrf_forward(z_s, system)
    with _stage("broadcast"):
        scores = broadcast_to_pixels(out.z_c, spmap)
    probs = softmax(scores)
    loss = d_logits = None
    if labels is not None:
        with _stage("softmax_xent"):
            loss, d_logits = softmax_xent(scores, labels)
    return ForwardPass(
        probabilities=probs,
        loss=loss,
        z=z,
        z_s=z_s,
        z_c=out.z_c,
        system=system,
        solver_iterations=out.iterations,
        d_logits=d_logits,
        _ctx={
            "image": image,
            "params": params,
            "config": config,
            "spmap": spmap,
            "graph": graph,
            "unary_cache": unary_cache,
            "pair_cache": pair_cache,
        },
    )


def backward(fp: ForwardPass):
    """Backward chain from the softmax loss to all parameter gradients.

    Pairwise-only parameters receive zero gradients when the pairwise
    branch is ablated."""
    if fp.d_logits is None:
        raise InvalidArgumentError("forward pass was run without labels")
    ctx = fp._ctx
    config: TrainConfig = ctx["config"]
    arch = config.arch
    params = ctx["params"]
    spmap, graph = ctx["spmap"], ctx["graph"]

    with _stage("broadcast_backward"):
        d_zc = broadcast_backward(fp.d_logits, spmap)
    with _stage("ccrf_backward_zs"):
        d_zs = crf.ccrf_backward_zs(d_zc, fp.system)
    with _stage("pool_unary_backward"):
        d_z = pooling.pool_unary_backward(
            d_zs, spmap, averaged=config.averaged_pool_backward
        )
    with _stage("unary_backward"):
        grads = networks.unary_backward(d_z, ctx["unary_cache"], params, arch)

    if config.pairwise:
        with _stage("ccrf_backward_w"):
            d_phi = crf.ccrf_backward_phi(d_zs, fp.z_c, fp.system.edges)
            d_w = crf.ccrf_backward_w(d_phi)
        with _stage("pool_pairwise_backward"):
            dwp_h, dwp_v = pooling.pool_pairwise_backward(d_w, graph)
        with _stage("pairwise_backward"):
            pair_grads = networks.pairwise_backward(
                dwp_h, dwp_v, ctx["pair_cache"], params, arch
            )
        for name, g in pair_grads.items():
            grads[name] = grads[name] + g if name in grads else g
    else:
        _, _, pairwise_keys = arch.partition()
        for name in pairwise_keys:
            grads[name] = np.zeros_like(params[name])
    return grads


def sgd_step(params, grads, velocity, learning_rate, momentum):
    """v <- momentum*v - lr*g;  theta <- theta + v  (in place)."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise InvalidArgumentError(f"gradient shape mismatch for '{name}'")
        velocity[name] = momentum * velocity[name] - learning_rate * g
        params[name] += velocity[name]
    return params


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    pixel_accuracy: float
    mean_f: float

    def line(self):
        return (
            f"epoch={self.epoch} loss={self.loss:.6f} "
            f"pixel_acc={self.pixel_accuracy:.6f} mean_f={self.mean_f:.6f}"
        )


def _mean_f_from_counts(tp, fp_, fn):
    fs = []
    for k in range(tp.size):
        p = tp[k] / (tp[k] + fp_[k]) if tp[k] + fp_[k] else 0.0
        r = tp[k] / (tp[k] + fn[k]) if tp[k] + fn[k] else 0.0
        fs.append(2 * p * r / (p + r) if p + r else 0.0)
    return float(np.mean(fs))


def prepare_examples(examples, config: TrainConfig):
    """Oversegment every example once; returns [(image, labels, spmap, graph)]."""
    prepared = []
    for image, labels in examples:
        spmap = oversegment(
            image, config.superpixel_regions, config.superpixel_compactness
        )
        prepared.append((image, labels, spmap, build_graph(spmap)))
    return prepared


def train(examples, config: TrainConfig, log_stream=None, echo=True, on_epoch=None):
    """SGD over shuffled examples; returns (params, [EpochMetrics]).

    Superpixel maps and graphs are computed once per example up front.
    Metric lines go to stdout (echo=True) and to log_stream when given;
    on_epoch(params, metrics) runs after every epoch (checkpointing).
    """
    if not examples:
        raise InvalidArgumentError("dataset is empty")
    k = config.arch.n_classes
    prepared = examples if _is_prepared(examples) else prepare_examples(examples, config)
    rng = np.random.default_rng(config.seed)
    params = networks.init_params(config.arch, config.seed)
    velocity = {name: np.zeros_like(v) for name, v in params.items()}
    history = []
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate * config.lr_decay ** (
            (epoch - 1) // config.lr_decay_every
        )
        order = rng.permutation(len(prepared))
        total_loss = 0.0
        correct = 0
        tp = np.zeros(k)
        fp_ = np.zeros(k)
        fn = np.zeros(k)
        total_px = 0
        batch_grads = None
        batch_count = 0
        for pos, idx in enumerate(order):
            image, labels, spmap, graph = prepared[idx]
            fp = forward(image, labels, params, spmap, graph, config)
            grads = backward(fp)
            if batch_grads is None:
                batch_grads = grads
            else:
                for name in grads:
                    batch_grads[name] += grads[name]
            batch_count += 1
            if batch_count == config.batch_size or pos == len(order) - 1:
                for name in batch_grads:
                    batch_grads[name] /= batch_count
                sgd_step(params, batch_grads, velocity, lr, config.momentum)
                batch_grads = None
                batch_count = 0
            total_loss += fp.loss
            pred = fp.probabilities.argmax(axis=-1)
            correct += int((pred == labels).sum())
            total_px += labels.size
            for cls in range(k):
                tp[cls] += np.sum((pred == cls) & (labels == cls))
                fp_[cls] += np.sum((pred == cls) & (labels != cls))
                fn[cls] += np.sum((pred != cls) & (labels == cls))
        metrics = EpochMetrics(
            epoch=epoch,
            loss=total_loss / len(prepared),
            pixel_accuracy=correct / total_px,
            mean_f=_mean_f_from_counts(tp, fp_, fn),
        )
        history.append(metrics)
        if echo:
            print(metrics.line(), file=sys.stdout)
        if log_stream is not None:
            log_stream.write(metrics.line() + "\n")
        if on_epoch is not None:
            on_epoch(params, metrics)
    return params, history


def _is_prepared(examples):
    return bool(examples) and len(examples[0]) == 4


def infer(image, params, config: TrainConfig):
    """Predict a per-pixel label map (argmax class); labels are constant
    within each superpixel."""
    spmap = oversegment(
        image, config.superpixel_regions, config.superpixel_compactness
    )
    graph = build_graph(spmap)
    fp = forward(image, None, params, spmap, graph, config)
    return fp.probabilities.argmax(axis=-1).astype(np.int32)
