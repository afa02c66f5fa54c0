"""Reverse-mode autodiff over the fixed set of operations the wave-domain link needs.

The graph is a tape: nodes are appended in creation order, so the tape itself is a
topological order and the backward pass is a single reverse walk. Values are numpy
arrays; complex matrices are complex128, real activations float64.

Complex convention: the adjoint carried for a complex node z is
    g = dL/dRe(z) + 1j * dL/dIm(z),
i.e. the loss is treated as a function of the real and imaginary parts. Phase
parameters are real angles theta; the unit-modulus transmission coefficients
exp(1j*theta) are produced inside `phase_rotate`, so their modulus is exactly 1 by
construction and theta receives an ordinary real gradient.

Only the node kinds below exist: complex matrix product, batched matrix apply,
diagonal phase multiply, re/im split and merge, affine, ReLU, sigmoid, batch norm,
power scaling, noise add, 1-D concat, scalar add, and BCE reduction. This is not a
general-purpose autodiff engine and does not try to be.
"""

import numpy as np

from .errors import ConfigError, DegenerateSignalError, GraphStateError

# Batch samples whose total transmit power falls below this are considered all-zero.
DEGENERATE_POWER_FLOOR = 1e-60


class Node:
    """One recorded value. Leaves carry parameters or constants; ops carry results."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "name", "graph")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None, graph=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.graph = graph


class Graph:
    """Tape of recorded operations for one forward pass.

    With ``recording=False`` the same op methods compute values but keep no parents,
    so evaluation-mode forwards cost no graph memory and cannot be differentiated.
    """

    def __init__(self, recording=True):
        self.recording = recording
        self.nodes = []
        self._leaf_names = set()

    # ---------------------------------------------------------------- leaves

    def leaf(self, value, trainable=False, name=None):
        value = np.asarray(value)
        if trainable:
            if name is None:
                raise ConfigError("trainable leaves must be named")
            if name in self._leaf_names:
                raise ConfigError(f"duplicate trainable leaf name {name!r}")
            self._leaf_names.add(name)
        node = Node(value, requires_grad=trainable and self.recording, name=name, graph=self)
        if self.recording:
            self.nodes.append(node)
        return node

    def constant(self, value):
        return self.leaf(value, trainable=False)

    def _op(self, value, parents, vjp):
        needs = self.recording and any(p.requires_grad for p in parents)
        node = Node(
            value,
            parents=tuple(parents) if needs else (),
            vjp=vjp if needs else None,
            requires_grad=needs,
            graph=self,
        )
        if self.recording:
            self.nodes.append(node)
        return node

    # ------------------------------------------------------------ linear ops

    def cmatmul(self, a, b):
        """Complex matrix product of two 2-D nodes."""
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ConfigError(f"cmatmul shape mismatch: {av.shape} x {bv.shape}")
        val = av @ bv

        def vjp(g):
            ga = g @ bv.conj().T if a.requires_grad else None
            gb = av.conj().T @ g if b.requires_grad else None
            return ga, gb

        return self._op(val, (a, b), vjp)

    def apply_matrix(self, mat, x):
        """Apply a fixed or trainable matrix stack to a batched signal.

        mat: (out, in) shared across subcarriers, or (Nc, out, in) per subcarrier.
        x:   (batch, Nc, in) complex.
        """
        mv, xv = mat.value, x.value
        if xv.ndim != 3:
            raise ConfigError(f"apply_matrix expects (batch, Nc, in) signal, got {xv.shape}")
        if mv.ndim == 2:
            if mv.shape[1] != xv.shape[2]:
                raise ConfigError(f"apply_matrix shape mismatch: {mv.shape} on {xv.shape}")
        elif mv.ndim == 3:
            if mv.shape[0] != xv.shape[1] or mv.shape[2] != xv.shape[2]:
                raise ConfigError(f"apply_matrix shape mismatch: {mv.shape} on {xv.shape}")
        else:
            raise ConfigError(f"apply_matrix expects a 2-D or 3-D matrix stack, got {mv.shape}")
        # (.., out, in) @ (batch, Nc, in, 1) broadcasts over batch and subcarrier.
        val = (mv @ xv[..., None])[..., 0]
        mh = mv.conj().swapaxes(-1, -2)

        def vjp(g):
            gm = None
            if mat.requires_grad:
                sub = "bci,bcj->ij" if mv.ndim == 2 else "bci,bcj->cij"
                gm = np.einsum(sub, g, xv.conj())
            gx = (mh @ g[..., None])[..., 0] if x.requires_grad else None
            return gm, gx

        return self._op(val, (mat, x), vjp)

    def phase_rotate(self, theta, x, axis=-1):
        """Multiply x by exp(1j*theta) along one axis (diagonal phase layer)."""
        tv = theta.value
        xv = x.value
        ax = axis % xv.ndim
        if tv.ndim != 1 or xv.shape[ax] != tv.shape[0]:
            raise ConfigError(f"phase_rotate: theta {tv.shape} does not fit axis {axis} of {xv.shape}")
        shape = [1] * xv.ndim
        shape[ax] = tv.shape[0]
        coef = np.exp(1j * tv).reshape(shape)
        val = coef * xv
        sum_axes = tuple(i for i in range(xv.ndim) if i != ax)

        def vjp(g):
            gt = None
            if theta.requires_grad:
                gt = np.real(np.conj(g) * (1j * val)).sum(axis=sum_axes)
            gx = np.conj(coef) * g if x.requires_grad else None
            return gt, gx

        return self._op(val, (theta, x), vjp)

    def affine(self, w, b, x):
        """Real dense layer: x @ w.T + b, with x (batch, in), w (out, in), b (out,)."""
        wv, bv, xv = w.value, b.value, x.value
        if wv.shape[1] != xv.shape[1] or bv.shape[0] != wv.shape[0]:
            raise ConfigError(f"affine shape mismatch: w{wv.shape} b{bv.shape} x{xv.shape}")
        val = xv @ wv.T + bv

        def vjp(g):
            gw = g.T @ xv if w.requires_grad else None
            gb = g.sum(axis=0) if b.requires_grad else None
            gx = g @ wv if x.requires_grad else None
            return gw, gb, gx

        return self._op(val, (w, b, x), vjp)

    # -------------------------------------------------------- nonlinearities

    def relu(self, x):
        mask = x.value > 0
        val = np.where(mask, x.value, 0.0)

        def vjp(g):
            return (g * mask,)

        return self._op(val, (x,), vjp)

    def sigmoid(self, x):
        val = 1.0 / (1.0 + np.exp(-x.value))

        def vjp(g):
            return (g * val * (1.0 - val),)

        return self._op(val, (x,), vjp)

    def batch_norm(self, x, gamma, beta, mean, var, eps, batch_mode):
        """Normalize features of x (batch, width) with given statistics.

        batch_mode=True means mean/var are this batch's own statistics, so the
        backward pass accounts for their dependence on x. batch_mode=False treats
        them as fixed running statistics (evaluation).
        """
        xv = x.value
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean) * inv
        val = gamma.value * xhat + beta.value
        n = xv.shape[0]

        def vjp(g):
            gg = (g * xhat).sum(axis=0) if gamma.requires_grad else None
            gb = g.sum(axis=0) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                gxhat = g * gamma.value
                if batch_mode:
                    gx = inv / n * (
                        n * gxhat
                        - gxhat.sum(axis=0)
                        - xhat * (gxhat * xhat).sum(axis=0)
                    )
                else:
                    gx = gxhat * inv
            return gg, gb, gx

        return self._op(val, (gamma, beta, x), vjp)

    # ----------------------------------------------------- complex bridging

    def real_to_complex(self, x, nc, dim):
        """(batch, 2*Nc*dim) real -> (batch, Nc, dim) complex.

        Layout: subcarrier-major blocks; within a block each complex entry
        occupies two consecutive real slots (re, im).
        """
        xv = x.value
        if xv.shape[1] != 2 * nc * dim:
            raise ConfigError(f"real_to_complex: width {xv.shape[1]} != 2*{nc}*{dim}")
        pairs = xv.reshape(xv.shape[0], nc, dim, 2)
        val = pairs[..., 0] + 1j * pairs[..., 1]

        def vjp(g):
            out = np.stack([g.real, g.imag], axis=-1)
            return (out.reshape(xv.shape),)

        return self._op(val, (x,), vjp)

    def complex_to_real(self, x):
        """(batch, Nc, dim) complex -> (batch, 2*Nc*dim) real, inverse layout of above."""
        xv = x.value
        b, nc, dim = xv.shape
        val = np.stack([xv.real, xv.imag], axis=-1).reshape(b, 2 * nc * dim)

        def vjp(g):
            pairs = g.reshape(b, nc, dim, 2)
            return (pairs[..., 0] + 1j * pairs[..., 1],)

        return self._op(val, (x,), vjp)

    def concat1d(self, parts):
        """Concatenate 1-D real leaves (used to join per-polarization phase vectors)."""
        sizes = [p.value.shape[0] for p in parts]
        val = np.concatenate([p.value for p in parts])
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(
                g[offsets[i]:offsets[i + 1]] if parts[i].requires_grad else None
                for i in range(len(parts))
            )

        return self._op(val, tuple(parts), vjp)

    # ------------------------------------------------------------ link ops

    def power_scale(self, x, p_total, per_subcarrier=False):
        """Scale the complex transmit signal to the exact power budget.

        p_total is the symbol power in watts: a scalar, or a (batch,) vector when
        each sample carries its own budget. per_subcarrier=False: one scale per
        batch sample so the whole symbol has total power p_total.
        per_subcarrier=True: each subcarrier scaled to p_total / Nc.
        """
        xv = x.value
        b, nc, _ = xv.shape
        p_total = np.asarray(p_total, dtype=float)
        if p_total.ndim == 1:
            if p_total.shape[0] != b:
                raise ConfigError(f"per-sample power vector length {p_total.shape[0]} != batch {b}")
            p_total = p_total[:, None, None]
        if per_subcarrier:
            power = np.sum(np.abs(xv) ** 2, axis=2, keepdims=True)  # (b, nc, 1)
            target = p_total / nc
        else:
            power = np.sum(np.abs(xv) ** 2, axis=(1, 2), keepdims=True)  # (b, 1, 1)
            target = p_total
        bad = np.nonzero(power.min(axis=tuple(range(1, power.ndim))) < DEGENERATE_POWER_FLOOR)[0]
        if bad.size:
            raise DegenerateSignalError(bad.tolist())
        scale = np.sqrt(target / power)
        val = scale * xv

        def vjp(g):
            if not x.requires_grad:
                return (None,)
            axes = (2,) if per_subcarrier else (1, 2)
            c = np.real(np.conj(g) * xv).sum(axis=axes, keepdims=True)
            return (scale * g - (scale * c / power) * xv,)

        return self._op(val, (x,), vjp)

    def add_noise(self, x, noise):
        """Add a fixed (already drawn) noise array."""
        if noise.requires_grad:
            raise ConfigError("noise must be a fixed leaf")
        val = x.value + noise.value

        def vjp(g):
            return g, None

        return self._op(val, (x, noise), vjp)

    # ------------------------------------------------------------ reductions

    def add(self, a, b):
        val = a.value + b.value

        def vjp(g):
            return (g if a.requires_grad else None, g if b.requires_grad else None)

        return self._op(val, (a, b), vjp)

    def bce(self, soft, targets, clamp=1e-12):
        """Binary cross-entropy, natural log: summed over bits, averaged over batch."""
        t = np.asarray(targets, dtype=float)
        s = soft.value
        if s.shape != t.shape:
            raise ConfigError(f"bce shape mismatch: soft {s.shape} vs targets {t.shape}")
        sc = np.clip(s, clamp, 1.0 - clamp)
        n = s.shape[0]
        val = -(t * np.log(sc) + (1.0 - t) * np.log(1.0 - sc)).sum() / n
        inside = (s > clamp) & (s < 1.0 - clamp)

        def vjp(g):
            gs = np.where(inside, (sc - t) / (sc * (1.0 - sc)), 0.0) * (g / n)
            return (gs,)

        return self._op(np.float64(val), (soft,), vjp)

    # ------------------------------------------------------------- backward

    def backward(self, loss):
        """Accumulate dL/d(leaf) for every trainable leaf reachable from `loss`.

        Returns a dict name -> real gradient array. Fixed leaves never appear.
        """
        if not self.recording:
            raise GraphStateError("backward on a non-recording graph")
        if loss.graph is not self:
            raise GraphStateError("loss node does not belong to this graph")
        lv = np.asarray(loss.value)
        if lv.ndim != 0 or np.iscomplexobj(lv):
            raise GraphStateError(f"loss must be a real scalar, got shape {lv.shape}")

        adjoint = {id(loss): np.float64(1.0)}
        grads = {}
        try:
            stop = self.nodes.index(loss)
        except ValueError:
            raise GraphStateError("loss node was not recorded on this graph") from None
        for node in reversed(self.nodes[: stop + 1]):
            g = adjoint.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            if node.vjp is None:  # trainable leaf
                grads[node.name] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg
        return grads


def cmatmul(a, b):
    """Plain (untraced) checked complex matrix product."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"cmatmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def as_cmat(x, rows=None, cols=None, what="matrix"):
    """Validate a 2-D finite complex matrix, optionally checking its shape."""
    m = np.asarray(x, dtype=np.complex128)
    if m.ndim != 2:
        raise ConfigError(f"{what} must be 2-D, got shape {m.shape}")
    if rows is not None and m.shape != (rows, cols):
        raise ConfigError(f"{what} must be {rows}x{cols}, got {m.shape[0]}x{m.shape[1]}")
    if not np.all(np.isfinite(m.view(np.float64))):
        raise ConfigError(f"{what} contains non-finite entries")
    return m
