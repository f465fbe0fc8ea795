"""Training loop, evaluation metrics and representation export."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, capture, restore, save_checkpoint
from .config import TrainConfig
from .curriculum import episodic_loss
from .data import LabeledImages, generate_dataset, load_cifar_binary, load_dataset
from .errors import CheckpointError, ContractError, NumericError
from .module import sgd_step
from .network import FeedbackNet, FeedbackNetSpec, FeedforwardNet, FeedforwardSpec
from .taxonomy import Taxonomy, coarse_distribution, compliance_metric
from .tensor import Rng, Tensor, backward, no_grad, softmax, softmax_cross_entropy

EVAL_BATCH = 200


@dataclass
class MetricsReport:
    fine_accuracy: list  # per iteration, length T
    coarse_accuracy: list  # argmax of the child-summed coarse distribution
    parent_accuracy: list  # parent of the fine argmax is the true coarse label
    compliance: list  # P(coarse right | fine wrong); None where no fine error exists
    top1: float
    top5: float
    loss_history: list = field(default_factory=list)  # mean training loss per epoch so far
    test_loss: float = float("nan")  # final-iteration cross-entropy on the evaluated set

    @property
    def iterations(self):
        return len(self.fine_accuracy)


@dataclass
class TrainResult:
    net: FeedbackNet
    checkpoint: Checkpoint
    history: list  # MetricsReport per evaluated epoch; the last one is the final epoch
    step_losses: list  # training loss of every step

    @property
    def final(self) -> MetricsReport:
        return self.history[-1]

    @property
    def loss_history(self):
        return self.history[-1].loss_history


def load_data(config: TrainConfig):
    """(train, test, taxonomy) for the configured source."""
    if config.data_source == "synthetic":
        return generate_dataset(config.synthetic_spec())
    load = load_dataset if config.data_source == "fbds" else load_cifar_binary
    train = load(config.data_path)
    if not config.data_test_path:
        raise ContractError(f"data.source = {config.data_source} needs data.test_path")
    test = load(config.data_test_path)
    tax = Taxonomy.from_pairs(zip(np.concatenate([train.fine, test.fine]).tolist(),
                                  np.concatenate([train.coarse, test.coarse]).tolist()))
    return train, test, tax


def _augment(x: np.ndarray, config: TrainConfig, rng: Rng) -> np.ndarray:
    if not (config.flip or config.crop):
        return x
    g = rng.generator()
    x = x.copy()
    if config.flip:
        flip = g.random(len(x)) < 0.5
        x[flip] = x[flip, :, :, ::-1]
    if config.crop:
        pad = 2
        h, w = x.shape[2:]
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offsets = g.integers(0, 2 * pad + 1, (len(x), 2))
        for i, (dy, dx) in enumerate(offsets):
            x[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return x


def _epoch_order(train: LabeledImages, config: TrainConfig, rng: Rng):
    order = rng.permutation(len(train))
    if config.order == "coarse_sorted":
        order = order[np.argsort(train.coarse[order], kind="stable")]
    batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def train(config: TrainConfig, data=None, checkpoint_dir=None, log: Optional[Callable[[str], None]] = None,
          log_path=None) -> TrainResult:
    """Train a feedback network; deterministic given ``config`` (and ``data``).

    ``data`` is an optional (train, test, taxonomy) triple; otherwise it is
    loaded from the configuration. A non-finite loss raises NumericError whose
    ``checkpoint`` attribute holds the state at the start of the failing epoch.
    Wall-clock timestamps only ever go to ``log_path``.
    """
    train_set, test_set, tax = data if data is not None else load_data(config)
    root = Rng(config.seed)
    spec = config.net_spec(tax.fine_count, train_set.images.shape[-1])
    net = FeedbackNet(spec, root.child(1))
    shuffle = root.child(2)
    schedule = config.schedule(spec.iterations)
    params = net.parameters()
    decay = net.decay_parameter_names()
    velocity = {}
    inputs = train_set.inputs()
    history, step_losses, epoch_losses = [], [], []
    sidecar = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            good = capture(net, velocity, epoch, shuffle)
            lr = config.learning_rate(epoch)
            total = 0.0
            batches = _epoch_order(train_set, config, shuffle)
            for idx in batches:
                x = _augment(inputs[idx], config, shuffle)
                try:
                    loss = _step_loss(net, x, train_set.fine[idx], train_set.coarse[idx], tax, spec, schedule)
                except NumericError as exc:
                    exc.checkpoint = good
                    raise
                value = float(loss.data)
                if not math.isfinite(value):
                    exc = NumericError(f"non-finite training loss at epoch {epoch}")
                    exc.checkpoint = good
                    raise exc
                for p in params.values():
                    p.grad = None
                backward(loss)
                sgd_step(params, lr, config.momentum, config.weight_decay, velocity, decay)
                step_losses.append(value)
                total += value
            epoch_losses.append(total / len(batches))
            line = f"epoch {epoch + 1}/{config.epochs} lr {lr:.4g} loss {epoch_losses[-1]:.4f}"
            last = epoch + 1 == config.epochs
            if last or (config.eval_every and (epoch + 1) % config.eval_every == 0):
                report = evaluate(net, test_set, tax)
                report.loss_history = list(epoch_losses)
                history.append(report)
                line += f" fine {' '.join(f'{a:.3f}' for a in report.fine_accuracy)}"
            if log:
                log(line)
            if sidecar:
                sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {line}\n")
            if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(capture(net, velocity, epoch + 1, shuffle),
                                os.path.join(checkpoint_dir, f"epoch-{epoch + 1:04d}.fbnc"))
    finally:
        if sidecar:
            sidecar.close()
    final = capture(net, velocity, config.epochs, shuffle)
    if checkpoint_dir:
        save_checkpoint(final, os.path.join(checkpoint_dir, "final.fbnc"))
    return TrainResult(net, final, history, step_losses)


def _step_loss(net, x, fine, coarse, tax, spec, schedule) -> Tensor:
    trace = net(x, "train", targets=fine)
    if schedule is None:
        return trace.loss
    return episodic_loss(trace, fine, coarse, tax, schedule, spec.gamma)


def build_net(ckpt: Checkpoint) -> FeedbackNet:
    """Instantiate the checkpoint's architecture and load its state."""
    net = FeedbackNet(ckpt.spec(), Rng(0))
    restore(ckpt, net)
    return net


def iteration_logits(net: FeedbackNet, images: np.ndarray, with_features=False):
    """Eval-mode logits (and pooled features) per iteration, as numpy arrays."""
    logits = [[] for _ in range(net.spec.iterations)]
    feats = [[] for _ in range(net.spec.iterations)]
    with no_grad():
        for start in range(0, len(images), EVAL_BATCH):
            trace = net(images[start : start + EVAL_BATCH], "eval")
            for t in range(trace.iterations):
                logits[t].append(trace.logits[t].data)
                if with_features:
                    feats[t].append(trace.pooled[t].data)
    logits = [np.concatenate(z) for z in logits]
    if with_features:
        return logits, [np.concatenate(f) for f in feats]
    return logits


def evaluate(model, data: LabeledImages, tax: Taxonomy, spec: Optional[FeedbackNetSpec] = None) -> MetricsReport:
    """Eval-mode metrics of a network or checkpoint on ``data``.

    For a checkpoint, ``spec`` (when given) must match its fingerprint.
    """
    if isinstance(model, Checkpoint):
        if spec is not None and spec.fingerprint() != model.fingerprint:
            raise CheckpointError("checkpoint fingerprint does not match the requested architecture")
        model = build_net(model)
    if model.spec.num_classes != tax.fine_count:
        raise ContractError(f"network predicts {model.spec.num_classes} classes, taxonomy has {tax.fine_count}")
    logits = iteration_logits(model, data.inputs())
    fine_acc, coarse_acc, parent_acc, comp = [], [], [], []
    parent = np.asarray(tax.parent)
    for z in logits:
        pred = z.argmax(axis=1)
        probs = softmax(z.astype(np.float64))
        coarse_pred = coarse_distribution(probs, tax).argmax(axis=1)
        fine_acc.append(float(np.mean(pred == data.fine)))
        coarse_acc.append(float(np.mean(coarse_pred == data.coarse)))
        parent_acc.append(float(np.mean(parent[pred] == data.coarse)))
        comp.append(compliance_metric(pred, data.fine, tax))
    final = logits[-1]
    k = min(5, final.shape[1])
    top = np.argsort(-final, axis=1, kind="stable")[:, :k]
    with no_grad():
        test_loss = float(softmax_cross_entropy(Tensor(final), data.fine).data)
    return MetricsReport(fine_acc, coarse_acc, parent_acc, comp, top1=fine_acc[-1],
                         top5=float(np.mean((top == data.fine[:, None]).any(axis=1))), test_loss=test_loss)


def export_representations(model, data: LabeledImages, path):
    """Write one whitespace-separated row per (sample, iteration).

    Columns: sample id, iteration (1-based), fine label, coarse label, then the
    pooled feature vector fed to the classifier, formatted with ``%.9g`` so
    float32 values survive a text round trip.
    """
    net = build_net(model) if isinstance(model, Checkpoint) else model
    _, feats = iteration_logits(net, data.inputs(), with_features=True)
    lines = []
    for i in range(len(data)):
        for t, f in enumerate(feats, start=1):
            values = " ".join("%.9g" % v for v in f[i])
            lines.append(f"{i} {t} {data.fine[i]} {data.coarse[i]} {values}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_representations(path):
    """(ids, iterations, fine, coarse, features) arrays from an export file."""
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    ids, its, fine, coarse = (rows[:, j].astype(np.int64) for j in range(4))
    return ids, its, fine, coarse, rows[:, 4:]


def centroid_separation(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean inter-centroid distance over mean distance of samples to their own centroid."""
    classes = np.unique(labels)
    centroids = np.stack([features[labels == c].mean(axis=0) for c in classes])
    intra = np.mean([np.linalg.norm(features[labels == c] - centroids[i], axis=1).mean()
                     for i, c in enumerate(classes)])
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    inter = dist[np.triu_indices(len(classes), 1)].mean()
    return float(inter / intra)


# ---------------------------------------------------------------- feedforward baselines


def train_feedforward(spec: FeedforwardSpec, train_set: LabeledImages, seed: int, epochs=12, batch_size=32,
                      lr=0.1, momentum=0.9, weight_decay=1e-4, log=None) -> FeedforwardNet:
    """Train a feedforward baseline endpoint with the same schedule convention as :func:`train`."""
    root = Rng(seed)
    net = FeedforwardNet(spec, root.child(1))
    shuffle = root.child(2)
    params = net.parameters()
    decay = net.decay_parameter_names()
    velocity = {}
    inputs = train_set.inputs()
    milestones = (epochs // 2, (3 * epochs) // 4)
    for epoch in range(epochs):
        rate = lr * 0.1 ** sum(1 for m in milestones if 0 < m <= epoch)
        order = shuffle.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            loss = softmax_cross_entropy(net(inputs[idx], "train")["endpoint"], train_set.fine[idx])
            for p in params.values():
                p.grad = None
            backward(loss)
            sgd_step(params, rate, momentum, weight_decay, velocity, decay)
            total += float(loss.data)
            count += 1
        if log:
            log(f"feedforward epoch {epoch + 1}/{epochs} loss {total / count:.4f}")
    net.trained = True
    return net


def feedforward_accuracy(net: FeedforwardNet, data: LabeledImages) -> dict:
    """Top-1 accuracy per head (``"endpoint"`` and each aux depth)."""
    inputs = data.inputs()
    correct = {}
    with no_grad():
        for start in range(0, len(inputs), EVAL_BATCH):
            out = net(inputs[start : start + EVAL_BATCH], "eval")
            for key, z in out.items():
                hits = int(np.sum(z.data.argmax(axis=1) == data.fine[start : start + EVAL_BATCH]))
                correct[key] = correct.get(key, 0) + hits
    return {key: c / len(data) for key, c in correct.items()}
