"""Parameter initialization and optimizer steps (plain SGD and AdamW).

Parameters live in a flat dict name -> float64 array. Each name has a kind:
"weight" (dense matrices), "bias", "bn" (batch-norm scale/shift) or "phase"
(metasurface angles). Phases are wrapped back into [0, 2*pi) after every step, so
the corresponding transmission coefficients keep modulus exactly 1. AdamW's
decoupled weight decay is applied to dense weights only; decaying biases,
batch-norm parameters or angles has no regularizing meaning here.
"""

import numpy as np

from .errors import ConfigError, DivergenceError

TWO_PI = 2.0 * np.pi


def xavier_uniform(fan_in, fan_out, rng, shape=None):
    """Xavier/Glorot uniform draw on +-sqrt(6/(fan_in+fan_out)).

    Default shape is (fan_out, fan_in), matching the affine layer's weight layout.
    """
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"xavier_uniform needs positive fans, got ({fan_in}, {fan_out})")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_out, fan_in)
    return rng.uniform(-bound, bound, size=shape)


def wrap_phase(theta):
    return np.mod(theta, TWO_PI)


class Optimizer:
    """Shared stepping logic: NaN guard, per-kind updates, phase wrapping, lr decay."""

    def __init__(self, kinds, learning_rate, lr_decay=1.0, decay_every=1):
        if learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < lr_decay <= 1.0:
            raise ConfigError("lr decay factor must be in (0, 1]")
        self.kinds = dict(kinds)
        self.lr = float(learning_rate)
        self.lr_decay = float(lr_decay)
        self.decay_every = int(decay_every)
        self._epochs_seen = 0

    def step(self, params, grads, epoch=None):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name!r}", epoch=epoch)
            if params[name].shape != np.shape(g):
                raise ConfigError(f"gradient shape {np.shape(g)} does not match {name!r}")
        for name, g in grads.items():
            params[name] = self._update(name, params[name], np.asarray(g, dtype=float))
            if self.kinds.get(name) == "phase":
                params[name] = wrap_phase(params[name])

    def end_epoch(self):
        self._epochs_seen += 1
        if self._epochs_seen % self.decay_every == 0:
            self.lr *= self.lr_decay

    def _update(self, name, value, grad):
        raise NotImplementedError


class Sgd(Optimizer):
    """Literal gradient-descent update: p <- p - lr * g."""

    def _update(self, name, value, grad):
        return value - self.lr * grad


class AdamW(Optimizer):
    """Adam with decoupled weight decay (applied to dense weights only)."""

    def __init__(self, kinds, learning_rate, lr_decay=1.0, decay_every=1,
                 beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        super().__init__(kinds, learning_rate, lr_decay, decay_every)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = {}

    def _update(self, name, value, grad):
        m = self.m.get(name)
        if m is None:
            m = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
            self.t[name] = 0
        v = self.v[name]
        t = self.t[name] + 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.m[name], self.v[name], self.t[name] = m, v, t
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        new = value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if self.weight_decay and self.kinds.get(name) == "weight":
            new = new - self.lr * self.weight_decay * value
        return new


def make_optimizer(kind, param_kinds, learning_rate, lr_decay=1.0, decay_every=1,
                   beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    if kind == "sgd":
        return Sgd(param_kinds, learning_rate, lr_decay, decay_every)
    if kind == "adamw":
        return AdamW(param_kinds, learning_rate, lr_decay, decay_every,
                     beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adamw')")
