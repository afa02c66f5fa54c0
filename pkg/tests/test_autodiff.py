"""Autodiff engine: op-level gradient checks against central finite differences,
plus the tape/backward mechanics."""

import numpy as np
import pytest

from simofdm.autodiff import Graph, cmatmul
from simofdm.errors import ConfigError, DegenerateSignalError, GraphStateError

RNG = np.random.default_rng(20240811)


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


# ------------------------------------------------------------------ cmatmul

def test_cmatmul_identity():
    a = crandn(RNG, 3, 3)
    assert np.array_equal(cmatmul(np.eye(3), a), a)


def test_cmatmul_j_times_j():
    out = cmatmul(np.array([[1j]]), np.array([[1j]]))
    assert out[0, 0] == -1 + 0j


def test_cmatmul_matches_triple_loop_oracle():
    a = crandn(RNG, 4, 5)
    b = crandn(RNG, 5, 3)
    expected = np.zeros((4, 3), dtype=complex)
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    got = cmatmul(a, b)
    assert np.max(np.abs(got - expected)) / np.max(np.abs(expected)) < 1e-12


def test_cmatmul_associativity():
    for _ in range(20):
        a = crandn(RNG, 4, 6)
        b = crandn(RNG, 6, 5)
        c = crandn(RNG, 5, 3)
        left = cmatmul(cmatmul(a, b), c)
        right = cmatmul(a, cmatmul(b, c))
        rel = np.linalg.norm(left - right) / np.linalg.norm(left)
        assert rel < 1e-10


def test_cmatmul_dimension_mismatch():
    with pytest.raises(ConfigError):
        cmatmul(np.ones((2, 3)), np.ones((2, 3)))


# -------------------------------------------------- generic FD gradient check

def scalar_loss(g, node):
    """Reduce a node ((batch, Nc, dim) complex or (batch, width) real) to a smooth
    real scalar through sigmoid + BCE-vs-zeros."""
    if np.iscomplexobj(node.value):
        node = g.complex_to_real(node)
    s = g.sigmoid(node)
    return g.bce(s, np.zeros_like(s.value), clamp=1e-12)


def fd_check(build, params, h=1e-6, tol=2e-5):
    """build(graph, leaf_dict) -> loss node. Checks every leaf gradient by FD."""
    g = Graph(recording=True)
    leaves = {k: g.leaf(v.copy(), trainable=True, name=k) for k, v in params.items()}
    loss = build(g, leaves)
    grads = g.backward(loss)
    for name, base in params.items():
        analytic = grads[name]
        flat = base.ravel()
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            for sign in (+1, -1):
                perturbed = {k: v.copy() for k, v in params.items()}
                perturbed[name].ravel()[i] += sign * h
                g2 = Graph(recording=False)
                leaves2 = {k: g2.leaf(v, trainable=False) for k, v in perturbed.items()}
                fd[i] += sign * float(build(g2, leaves2).value)
        fd /= 2 * h
        fd = fd.reshape(base.shape)
        err = np.abs(analytic - fd) / np.maximum.reduce([np.abs(analytic), np.abs(fd),
                                                         np.full(base.shape, 1e-4)])
        assert err.max() < tol, f"{name}: max rel err {err.max():.2e}"


def test_affine_relu_gradients():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    params = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=3)}

    def build(g, leaves):
        h = g.affine(leaves["w"], leaves["b"], g.constant(x))
        return scalar_loss(g, g.relu(h))

    fd_check(build, params)


def test_apply_matrix_and_phase_rotate_gradients():
    rng = np.random.default_rng(2)
    mat = crandn(rng, 2, 3, 4)            # (Nc, out, in)
    x = crandn(rng, 5, 2, 4)              # (batch, Nc, in)
    params = {"theta": rng.uniform(0, 2 * np.pi, size=3),
              "xr": x.real.copy(), "xi": x.imag.copy()}

    def build(g, leaves):
        # promote the real/imag parts to a complex signal through the bridge op
        stacked = np.stack  # signal assembled outside autodiff would hide gradients
        width = 2 * 2 * 4
        interleaved = g.affine(
            g.constant(_interleave_matrix(5, 2, 4)), g.constant(np.zeros(width)),
            _concat_batch(g, leaves["xr"], leaves["xi"]))
        z = g.real_to_complex(interleaved, 2, 4)
        z = g.apply_matrix(g.constant(mat), z)
        z = g.phase_rotate(leaves["theta"], z, axis=-1)
        return scalar_loss(g, z)

    fd_check(build, params)


def _interleave_matrix(b, nc, dim):
    """Permutation sending [re..., im...] (2*nc*dim) to interleaved (re, im) pairs."""
    n = nc * dim
    perm = np.zeros((2 * n, 2 * n))
    for k in range(n):
        perm[2 * k, k] = 1.0
        perm[2 * k + 1, n + k] = 1.0
    return perm


def _concat_batch(g, a, b):
    """Concatenate two (batch, nc, dim) real leaves into (batch, 2*nc*dim)."""
    bsz, nc, dim = a.value.shape
    n = nc * dim
    lift = np.zeros((2 * n, n))
    lift[:n] = np.eye(n)
    lift2 = np.zeros((2 * n, n))
    lift2[n:] = np.eye(n)
    ar = g.affine(g.constant(lift), g.constant(np.zeros(2 * n)), _reshape2(g, a))
    br = g.affine(g.constant(lift2), g.constant(np.zeros(2 * n)), _reshape2(g, b))
    return g.add(ar, br)


def _reshape2(g, node):
    b, nc, dim = node.value.shape
    # complex_to_real on a real array is not defined; emulate reshape via the
    # identity affine on the flattened view (leaves are already (b, nc, dim)).
    flat = node.value.reshape(b, nc * dim)
    out = g._op(flat, (node,), lambda grad: (grad.reshape(b, nc, dim),))
    return out


def test_phase_rotate_row_axis_gradient():
    rng = np.random.default_rng(3)
    base = crandn(rng, 3, 2)
    params = {"theta": rng.uniform(0, 2 * np.pi, size=3)}

    def build(g, leaves):
        m = g.phase_rotate(leaves["theta"], g.constant(base), axis=0)
        sig = g.apply_matrix(m, g.constant(crandn(np.random.default_rng(7), 4, 1, 2)))
        return scalar_loss(g, sig)

    fd_check(build, params)


def test_batch_norm_gradients_batch_mode():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3)) * 2 + 1
    params = {"gamma": rng.uniform(0.5, 1.5, size=3), "beta": rng.normal(size=3),
              "w": rng.normal(size=(3, 3))}

    def build(g, leaves):
        h = g.affine(leaves["w"], g.constant(np.zeros(3)), g.constant(x))
        mu = h.value.mean(axis=0)
        var = h.value.var(axis=0)
        out = g.batch_norm(h, leaves["gamma"], leaves["beta"], mu, var, 1e-5, batch_mode=True)
        return scalar_loss(g, out)

    fd_check(build, params)


def test_batch_norm_eval_mode_is_affine():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    g = Graph(recording=True)
    gamma = g.leaf(np.array([1.0, 2.0, 0.5]), trainable=True, name="gamma")
    beta = g.leaf(np.zeros(3), trainable=True, name="beta")
    xn = g.leaf(x, trainable=True, name="x")
    mean = np.array([0.1, -0.2, 0.3])
    var = np.array([1.0, 4.0, 0.25])
    out = g.batch_norm(xn, gamma, beta, mean, var, 0.0, batch_mode=False)
    expected = gamma.value * (x - mean) / np.sqrt(var) + beta.value
    assert np.allclose(out.value, expected, rtol=0, atol=1e-15)
    loss = scalar_loss(g, out)
    grads = g.backward(loss)
    assert set(grads) == {"gamma", "beta", "x"}


def test_power_scale_gradients_per_symbol_and_per_subcarrier():
    rng = np.random.default_rng(6)
    x = crandn(rng, 3, 2, 2)
    params = {"xr": x.real.copy(), "xi": x.imag.copy()}
    for per_sub in (False, True):
        def build(g, leaves, per_sub=per_sub):
            interleaved = g.affine(
                g.constant(_interleave_matrix(3, 2, 2)), g.constant(np.zeros(8)),
                _concat_batch(g, leaves["xr"], leaves["xi"]))
            z = g.real_to_complex(interleaved, 2, 2)
            z = g.power_scale(z, 2.5, per_subcarrier=per_sub)
            return scalar_loss(g, z)

        fd_check(build, params)


def test_power_scale_per_sample_budget_vector():
    rng = np.random.default_rng(16)
    x = crandn(rng, 4, 2, 3)
    budgets = np.array([0.5, 1.0, 2.0, 4.0])
    g = Graph(recording=False)
    out = g.power_scale(g.constant(x), budgets)
    power = np.sum(np.abs(out.value) ** 2, axis=(1, 2))
    assert np.allclose(power, budgets, rtol=1e-12)


def test_power_scale_rejects_all_zero_sample():
    g = Graph(recording=False)
    x = np.ones((3, 2, 2), dtype=complex)
    x[1] = 0.0
    with pytest.raises(DegenerateSignalError) as err:
        g.power_scale(g.constant(x), 1.0)
    assert err.value.sample_indices == [1]


def test_bce_and_concat_gradients():
    rng = np.random.default_rng(8)
    params = {"a": rng.uniform(0, 2 * np.pi, size=3),
              "b": rng.uniform(0, 2 * np.pi, size=2)}
    base = crandn(rng, 5, 1, 5)
    targets = rng.integers(0, 2, size=(5, 10)).astype(float)

    def build(g, leaves):
        theta = g.concat1d([leaves["a"], leaves["b"]])
        z = g.phase_rotate(theta, g.constant(base), axis=-1)
        r = g.complex_to_real(z)
        return g.bce(g.sigmoid(r), targets)

    fd_check(build, params)


def test_add_noise_passes_gradient_and_rejects_trainable_noise():
    rng = np.random.default_rng(9)
    base = crandn(rng, 2, 1, 3)
    params = {"theta": rng.uniform(0, 2 * np.pi, size=3)}
    noise = crandn(rng, 2, 1, 3)

    def build(g, leaves):
        z = g.phase_rotate(leaves["theta"], g.constant(base), axis=-1)
        z = g.add_noise(z, g.constant(noise))
        return scalar_loss(g, z)

    fd_check(build, params)
    g = Graph()
    t = g.leaf(np.zeros(3), trainable=True, name="n")
    with pytest.raises(ConfigError):
        g.add_noise(g.constant(base), t)


# ------------------------------------------------ adjoint convention examples

def test_unit_modulus_loss_has_zero_phase_gradient():
    # L = |e^{j theta}|^2 summed: modulus is theta-invariant, so dL/dtheta = 0.
    theta = np.array([0.3, 1.7, 4.0])
    g = Graph(recording=True)
    t = g.leaf(theta, trainable=True, name="theta")
    z = g.phase_rotate(t, g.constant(np.ones((1, 1, 3), dtype=complex)), axis=-1)
    loss = g._op(np.float64(np.sum(np.abs(z.value) ** 2)), (z,), lambda grad: (2.0 * z.value * grad,))
    grads = g.backward(loss)
    assert np.allclose(grads["theta"], 0.0, atol=1e-14)


def test_real_part_loss_gradient_is_minus_sine():
    # L = Re(e^{j theta}) at theta = pi/2 gives dL/dtheta = -sin(pi/2) = -1.
    theta = np.array([np.pi / 2])
    g = Graph(recording=True)
    t = g.leaf(theta, trainable=True, name="theta")
    z = g.phase_rotate(t, g.constant(np.ones((1, 1, 1), dtype=complex)), axis=-1)
    loss = g._op(np.float64(z.value.real.sum()), (z,),
                 lambda grad: (np.full_like(z.value, grad + 0j),))
    grads = g.backward(loss)
    assert abs(grads["theta"][0] + 1.0) < 1e-12


# ------------------------------------------------------------ tape mechanics

def test_fixed_leaves_get_no_gradient_entry():
    g = Graph(recording=True)
    w = g.leaf(np.ones((2, 2)), trainable=True, name="w")
    x = g.constant(np.ones((3, 2)))
    h = g.affine(w, g.constant(np.zeros(2)), x)
    loss = g.bce(g.sigmoid(h), np.zeros((3, 2)))
    grads = g.backward(loss)
    assert set(grads) == {"w"}


def test_leaf_used_twice_accumulates():
    rng = np.random.default_rng(10)
    params = {"w": rng.normal(size=(2, 2))}

    def build(g, leaves):
        x = g.constant(rng.normal(size=(3, 2)) * 0 + 1.0)
        h1 = g.affine(leaves["w"], g.constant(np.zeros(2)), x)
        h2 = g.affine(leaves["w"], g.constant(np.zeros(2)), g.relu(h1))
        return scalar_loss(g, h2)

    fd_check(build, params)


def test_backward_requires_recording_graph():
    g = Graph(recording=False)
    x = g.constant(np.ones((2, 2)))
    h = g.relu(x)
    with pytest.raises(GraphStateError):
        g.backward(h)


def test_backward_rejects_nonscalar_and_foreign_loss():
    g = Graph(recording=True)
    w = g.leaf(np.ones(3), trainable=True, name="w")
    with pytest.raises(GraphStateError):
        g.backward(w)  # not scalar
    g2 = Graph(recording=True)
    s = g2.bce(g2.sigmoid(g2.constant(np.zeros((1, 2)))), np.zeros((1, 2)))
    with pytest.raises(GraphStateError):
        g.backward(s)  # node from another graph


def test_duplicate_trainable_leaf_name_rejected():
    g = Graph(recording=True)
    g.leaf(np.ones(2), trainable=True, name="w")
    with pytest.raises(ConfigError):
        g.leaf(np.ones(2), trainable=True, name="w")


def test_nodes_recorded_in_topological_order():
    g = Graph(recording=True)
    a = g.leaf(np.ones((1, 2)), trainable=True, name="a")
    b = g.relu(a)
    c = g.sigmoid(b)
    order = {id(n): i for i, n in enumerate(g.nodes)}
    for node in g.nodes:
        for parent in node.parents:
            assert order[id(parent)] < order[id(node)]
