"""Mini-batch training loop and the pretrain/finetune transfer workflow.

Every epoch draws one fresh mini-batch of random bit vectors, a transmit power from
the configured policy, a channel realization from the provider (statistical mode
redraws on a configurable cadence, instantaneous mode is frozen), runs the traced
forward, accumulates BCE loss over users, backpropagates and steps all four
trainable groups. The learning rate decays by a fixed factor on an epoch cadence.
"""

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DegenerateSignalError, DivergenceError
from .network import forward
from .optim import make_optimizer
from .channel import dbm_to_watts


@dataclass(frozen=True)
class PowerPolicy:
    """Fixed transmit power, or a Beta(a, b) draw mapped onto a dBm interval.

    Randomized policies draw one power per batch sample by default: training
    batches then contain the whole power mixture, so the batch-norm statistics the
    receiver DNNs train against match the running statistics used at evaluation.
    draw="per_epoch" falls back to a single draw shared by the batch.
    """

    kind: str = "fixed"           # "fixed" | "beta"
    dbm: float = 30.0             # fixed mode
    a: float = 2.0                # beta mode
    b: float = 2.0
    lo_dbm: float = 0.0
    hi_dbm: float = 30.0
    draw: str = "per_sample"      # "per_sample" | "per_epoch" (beta mode only)

    def __post_init__(self):
        if self.kind not in ("fixed", "beta"):
            raise ConfigError(f"unknown power policy {self.kind!r}")
        if self.kind == "beta" and self.lo_dbm >= self.hi_dbm:
            raise ConfigError("beta power policy needs lo_dbm < hi_dbm")
        if self.draw not in ("per_sample", "per_epoch"):
            raise ConfigError(f"unknown power draw mode {self.draw!r}")


def sample_power(policy, rng=None):
    """One transmit power draw in watts."""
    if policy.kind == "fixed":
        return dbm_to_watts(policy.dbm)
    if rng is None:
        raise ConfigError("beta power policy needs a random stream")
    u = rng.beta(policy.a, policy.b)
    return dbm_to_watts(policy.lo_dbm + (policy.hi_dbm - policy.lo_dbm) * u)


def sample_power_batch(policy, rng, batch_size):
    """Per-sample power vector (batch,) in watts, or a scalar for shared draws."""
    if policy.kind == "fixed":
        return dbm_to_watts(policy.dbm)
    if policy.draw == "per_epoch":
        return sample_power(policy, rng)
    u = rng.beta(policy.a, policy.b, size=batch_size)
    return dbm_to_watts(policy.lo_dbm + (policy.hi_dbm - policy.lo_dbm) * u)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int
    batch_size: int
    learning_rate: float
    optimizer: str = "adamw"
    lr_decay: float = 1.0
    decay_every: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    power: PowerPolicy = field(default_factory=PowerPolicy)
    channel_redraw_every: int = 1     # batches between statistical redraws
    checkpoint_every: int = 0         # 0 = no checkpoints
    soft_clamp: float = 1e-12
    phase_label: str = "train"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")


@dataclass
class TrainMetrics:
    """Per-epoch training trace. Wall-clock stays out of the CSV on purpose."""

    phase: str
    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)   # dict group -> float per epoch
    power_dbm: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def csv_rows(self, groups):
        for i, epoch in enumerate(self.epochs):
            row = [epoch, self.phase, repr(self.loss[i]), repr(self.lr[i]),
                   repr(self.power_dbm[i])]
            row.extend(repr(self.grad_norms[i].get(gr, 0.0)) for gr in groups)
            yield row


def metrics_header(groups):
    return ["epoch", "phase", "loss", "lr", "power_dbm"] + [f"grad_norm_{g}" for g in groups]


def write_metrics_csv(path, metrics_list, groups, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(metrics_header(groups))
        for metrics in metrics_list:
            for row in metrics.csv_rows(groups):
                writer.writerow(row)


def bce_loss(graph, soft_nodes, bits, offsets, clamp=1e-12):
    """Total BCE node: per-user sums over bits, averaged over the batch."""
    total = None
    for j, soft in enumerate(soft_nodes):
        lo, hi = offsets[j]
        term = graph.bce(soft, bits[:, lo:hi], clamp=clamp)
        total = term if total is None else graph.add(total, term)
    return total


def grad_group_norms(model, grads):
    out = {}
    for name, g in grads.items():
        group = model.group_of(name)
        out[group] = out.get(group, 0.0) + float(np.sum(np.square(g)))
    return {g: float(np.sqrt(v)) for g, v in out.items()}


def train(model, provider, settings, hub, epoch_offset=0, checkpoint_cb=None):
    """Run `settings.epochs` mini-batch updates on `model` in place.

    Returns TrainMetrics. Raises DivergenceError on a non-finite loss or gradient,
    carrying the last good parameter snapshot; the model is restored to it first.
    """
    spec = model.spec
    opt = make_optimizer(settings.optimizer, model.kinds, settings.learning_rate,
                         settings.lr_decay, settings.decay_every,
                         beta1=settings.adam_beta1, beta2=settings.adam_beta2,
                         eps=settings.adam_eps, weight_decay=settings.weight_decay)
    metrics = TrainMetrics(phase=settings.phase_label)
    offsets = spec.bit_offsets()
    label = settings.phase_label
    realization = None
    snapshot = _snapshot(model)
    started = time.perf_counter()

    for e in range(settings.epochs):
        epoch = epoch_offset + e
        if realization is None or (provider.mode == "statistical"
                                   and e % settings.channel_redraw_every == 0):
            realization = provider.provide()
        bits_rng = hub.stream(label, "bits", epoch)
        bits = bits_rng.integers(0, 2, size=(settings.batch_size, spec.total_bits))
        p_watts = sample_power_batch(settings.power, hub.stream(label, "power", epoch),
                                     settings.batch_size)
        noise_rng = hub.stream(label, "noise", epoch)

        try:
            out = _forward_with_resample(model, bits, realization, p_watts,
                                         noise_rng, bits_rng)
            loss_node = bce_loss(out.graph, out.soft_nodes, bits, offsets,
                                 clamp=settings.soft_clamp)
            loss = float(loss_node.value)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            grads = out.graph.backward(loss_node)
            opt.step(model.params, grads, epoch=epoch)
        except DivergenceError as err:
            _restore(model, snapshot)
            err.checkpoint = snapshot
            metrics.wall_seconds = time.perf_counter() - started
            err.metrics = metrics
            raise
        opt.end_epoch()

        metrics.epochs.append(epoch)
        metrics.loss.append(loss)
        metrics.lr.append(opt.lr)
        metrics.grad_norms.append(grad_group_norms(model, grads))
        metrics.power_dbm.append(float(np.mean(10.0 * np.log10(np.asarray(p_watts) * 1000.0))))

        if settings.checkpoint_every and (e + 1) % settings.checkpoint_every == 0:
            snapshot = _snapshot(model)
            if checkpoint_cb is not None:
                checkpoint_cb(model, epoch)

    metrics.wall_seconds = time.perf_counter() - started
    return metrics


def _forward_with_resample(model, bits, realization, p_watts, noise_rng, bits_rng,
                           max_tries=5):
    """Redraw the bits of degenerate (all-zero transmit) samples and retry."""
    for _ in range(max_tries):
        try:
            return forward(model, bits, realization, p_watts, noise_rng, train=True)
        except DegenerateSignalError as err:
            for idx in err.sample_indices:
                bits[idx] = bits_rng.integers(0, 2, size=bits.shape[1])
    raise DivergenceError(f"degenerate transmit signal persisted after {max_tries} redraws")


def _snapshot(model):
    return ({k: v.copy() for k, v in model.params.items()},
            {k: v.copy() for k, v in model.bn_state.items()})


def _restore(model, snapshot):
    params, bn_state = snapshot
    model.params = {k: v.copy() for k, v in params.items()}
    model.bn_state = {k: v.copy() for k, v in bn_state.items()}


def pretrain_then_finetune(model, statistical_provider, instantaneous_provider,
                           settings_pre, settings_fine, hub):
    """Statistical pretraining followed by fine-tuning on one frozen realization.

    The fine-tune stage keeps the pretrained parameters but starts a fresh optimizer
    (stale adaptive moments would reflect the old channel statistics). Returns the
    two metric traces, tagged with their phase labels.
    """
    settings_pre = replace(settings_pre, phase_label="pretrain")
    settings_fine = replace(settings_fine, phase_label="finetune")
    pre = train(model, statistical_provider, settings_pre, hub)
    fine = train(model, instantaneous_provider, settings_fine, hub,
                 epoch_offset=settings_pre.epochs)
    return model, (pre, fine)
