"""End-to-end trainable link: bit vector in, per-user soft bits out.

Five stages, mirroring the physical hardware: a transmit-side DNN maps bits to
per-subcarrier complex antenna signals (three ReLU linear layers, then a fixed
power-control layer); the transmit metasurface stack applies alternating fixed
diffraction matrices and trainable phase layers; the fixed channel layer applies
the per-user multipath matrices and adds receiver noise; the receive stacks run
the mirrored phase/diffraction cascade down to the antennas; and one DNN per user
(batch norm / linear+ReLU alternation, sigmoid head) recovers soft bits.

All complex signals travel as (batch, Nc, dim) arrays. Real<->complex bridging uses
two consecutive real slots (re, im) per antenna, subcarrier-major, fixed here and in
`autodiff.real_to_complex`. Dual-polarized devices double every wave dimension;
per-polarization phase vectors stay separate trainable leaves and are concatenated
in the graph, so the block-diagonal chains mix no polarizations.
"""

import json
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import metasurface
from .autodiff import Graph
from .errors import ConfigError, DivergenceError
from .metasurface import PanelLayout, PropagationSet, block_diag_stack
from .optim import TWO_PI, xavier_uniform
from .rng import SeedHub

CHECKPOINT_FORMAT = "simofdm/checkpoint/v1"


@dataclass(frozen=True)
class LinkSpec:
    """Everything the network shape depends on."""

    dual: bool
    bits_per_user: tuple
    subcarriers: int
    tx_layout: PanelLayout
    rx_layout: PanelLayout
    noise_power_w: float
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    power_per_subcarrier: bool = False

    def __post_init__(self):
        if any(b < 1 for b in self.bits_per_user):
            raise ConfigError("every user needs at least one bit per symbol")
        if self.subcarriers < 1:
            raise ConfigError("need at least one subcarrier")
        if self.tx_layout.role != "tx" or self.rx_layout.role != "rx":
            raise ConfigError("LinkSpec needs a tx-role and an rx-role layout")

    @property
    def users(self):
        return len(self.bits_per_user)

    @property
    def total_bits(self):
        return int(sum(self.bits_per_user))

    @property
    def pol(self):
        return 2 if self.dual else 1

    # Signal dimensions (complex entries) at each wave-domain stage.
    @property
    def tx_streams(self):
        return self.pol * self.tx_layout.antennas

    @property
    def rx_streams(self):
        return self.pol * self.rx_layout.antennas

    @property
    def tx_units(self):
        return self.pol * self.tx_layout.units

    @property
    def rx_units(self):
        return self.pol * self.rx_layout.units

    def bs_widths(self):
        nb, nc = self.total_bits, self.subcarriers
        return [nb, nb * nc, nb * nc, 2 * self.tx_streams * nc]

    def ue_widths(self, user):
        nc = self.subcarriers
        return [2 * self.rx_streams * nc, self.bits_per_user[user] * nc,
                self.bits_per_user[user]]

    def bit_offsets(self):
        offs = np.cumsum([0] + list(self.bits_per_user))
        return [(int(offs[j]), int(offs[j + 1])) for j in range(self.users)]


class EndToEndModel:
    """Parameter store plus the fixed wave-propagation matrices."""

    def __init__(self, spec, params, kinds, bn_state, tx_prop, rx_prop):
        self.spec = spec
        self.params = params
        self.kinds = kinds
        self.bn_state = bn_state
        self.tx_prop = tx_prop
        self.rx_prop = rx_prop
        self.refresh_fixed()

    def refresh_fixed(self):
        """Rebuild the per-gap matrix stacks (called after calibration overrides)."""
        if self.spec.dual:
            self.tx_mats = [block_diag_stack(g) for g in self.tx_prop.gaps]
            self.rx_mats = [block_diag_stack(g) for g in self.rx_prop.gaps]
        else:
            self.tx_mats = list(self.tx_prop.gaps)
            self.rx_mats = list(self.rx_prop.gaps)

    # ------------------------------------------------------------- grouping

    def group_of(self, name):
        """Which trainable sub-network a parameter belongs to."""
        if name.startswith("bs."):
            return "bs"
        if name.startswith("tx."):
            return "tx"
        if name.startswith(("rx.", "ue.")):
            prefix, user = name.split(".")[0:2]
            return f"{prefix}.{user}"
        raise ConfigError(f"unknown parameter {name!r}")

    def groups(self):
        out = {}
        for name in self.params:
            out.setdefault(self.group_of(name), []).append(name)
        return out

    def phase_names(self):
        return [n for n, k in self.kinds.items() if k == "phase"]

    def clone(self):
        model = EndToEndModel(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.kinds),
            {k: v.copy() for k, v in self.bn_state.items()},
            self.tx_prop, self.rx_prop,
        )
        return model

    def tx_phase_stack(self):
        return _stack_from_params(self, "tx", self.spec.tx_layout)

    def rx_phase_stack(self, user):
        return _stack_from_params(self, f"rx.u{user}", self.spec.rx_layout)


def _stack_from_params(model, prefix, layout):
    phases = []
    for l in range(1, layout.layers + 1):
        if model.spec.dual:
            phases.append(np.stack([model.params[f"{prefix}.l{l}.p{p}.phase"] for p in (0, 1)]))
        else:
            phases.append(model.params[f"{prefix}.l{l}.phase"].copy())
    return metasurface.MetasurfaceStack(layout, phases, dual=model.spec.dual)


def build_model(spec, tx_prop, rx_prop, hub):
    """Fresh model: Xavier DNN weights, uniform random phases, identity batch norm."""
    if tx_prop.layout != spec.tx_layout or rx_prop.layout != spec.rx_layout:
        raise ConfigError("propagation sets do not match the link layouts")
    if len(tx_prop.freqs) != spec.subcarriers or len(rx_prop.freqs) != spec.subcarriers:
        raise ConfigError("propagation sets were built for a different subcarrier count")
    _audit_dimensions(spec, tx_prop, rx_prop)

    params = {}
    kinds = {}
    bn_state = {}

    widths = spec.bs_widths()
    for i in range(3):
        rng = hub.stream("init", "bs", i)
        params[f"bs.w{i + 1}"] = xavier_uniform(widths[i], widths[i + 1], rng)
        params[f"bs.b{i + 1}"] = np.zeros(widths[i + 1])
        kinds[f"bs.w{i + 1}"] = "weight"
        kinds[f"bs.b{i + 1}"] = "bias"

    pols = (0, 1) if spec.dual else (None,)
    for l in range(1, spec.tx_layout.layers + 1):
        for p in pols:
            name = f"tx.l{l}.phase" if p is None else f"tx.l{l}.p{p}.phase"
            rng = hub.stream("init", "tx-phase", l, -1 if p is None else p)
            params[name] = rng.uniform(0.0, TWO_PI, size=spec.tx_layout.units)
            kinds[name] = "phase"

    for j in range(spec.users):
        for k in range(1, spec.rx_layout.layers + 1):
            for p in pols:
                name = f"rx.u{j}.l{k}.phase" if p is None else f"rx.u{j}.l{k}.p{p}.phase"
                rng = hub.stream("init", "rx-phase", j, k, -1 if p is None else p)
                params[name] = rng.uniform(0.0, TWO_PI, size=spec.rx_layout.units)
                kinds[name] = "phase"

        uw = spec.ue_widths(j)
        for m, width in enumerate(uw, start=1):
            params[f"ue.u{j}.bn{m}.gamma"] = np.ones(width)
            params[f"ue.u{j}.bn{m}.beta"] = np.zeros(width)
            kinds[f"ue.u{j}.bn{m}.gamma"] = "bn"
            kinds[f"ue.u{j}.bn{m}.beta"] = "bn"
            bn_state[f"ue.u{j}.bn{m}.mean"] = np.zeros(width)
            bn_state[f"ue.u{j}.bn{m}.var"] = np.ones(width)
        for i in range(2):
            rng = hub.stream("init", "ue", j, i)
            params[f"ue.u{j}.w{i + 1}"] = xavier_uniform(uw[i], uw[i + 1], rng)
            params[f"ue.u{j}.b{i + 1}"] = np.zeros(uw[i + 1])
            kinds[f"ue.u{j}.w{i + 1}"] = "weight"
            kinds[f"ue.u{j}.b{i + 1}"] = "bias"

    return EndToEndModel(spec, params, kinds, bn_state, tx_prop, rx_prop)


def _audit_dimensions(spec, tx_prop, rx_prop):
    """Check every fixed layer against its expected output width, naming the layer."""
    m, a_t = spec.tx_layout.units, spec.tx_layout.antennas
    n, a_r = spec.rx_layout.units, spec.rx_layout.antennas
    nc = spec.subcarriers
    rows = [("transmit transmission layer 1", tx_prop.gaps[0].shape, (nc, m, a_t))]
    for l in range(2, spec.tx_layout.layers + 1):
        rows.append((f"transmit transmission layer {l}", tx_prop.gaps[l - 1].shape, (nc, m, m)))
    rows.append(("receive transmission layer 1", rx_prop.gaps[0].shape, (nc, a_r, n)))
    for k in range(2, spec.rx_layout.layers + 1):
        rows.append((f"receive transmission layer {k}", rx_prop.gaps[k - 1].shape, (nc, n, n)))
    for label, got, want in rows:
        if tuple(got) != tuple(want):
            raise ConfigError(f"{label}: expected shape {want}, got {tuple(got)}")


@dataclass
class ForwardOutput:
    """Soft bits plus detached diagnostics for one forward pass."""

    graph: Graph
    soft_nodes: list
    soft: list                      # per user (batch, bits_j) arrays in [0, 1]
    tx_power: np.ndarray            # (batch, Nc) transmit power after power control
    rx_power: list                  # per user (batch, Nc) received signal power
    snr_db: list                    # per user scalar estimate
    leaves: dict = field(default_factory=dict)


def _check_finite(stage, arr):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values first appeared at stage: {stage}")


def forward(model, bits, realization, p_total_w, noise_rng=None, train=False, record=None):
    """Run the full link for a batch of bit vectors.

    bits: (batch, total_bits) in {0,1}. realization: ChannelRealization matching the
    model's polarization mode. noise_rng: generator for the additive receiver noise
    (unused when the spec's noise power is zero). train=True uses batch statistics
    in the batch-norm layers and updates their running averages; evaluation uses the
    running statistics and touches nothing. record defaults to `train` and controls
    whether the pass is traced for backward().
    """
    spec = model.spec
    bits = np.asarray(bits, dtype=float)
    if bits.ndim != 2 or bits.shape[1] != spec.total_bits:
        raise ConfigError(f"bits must be (batch, {spec.total_bits}), got {bits.shape}")
    if realization.dual != spec.dual:
        raise ConfigError("channel realization polarization mode does not match the model")
    if realization.users < spec.users:
        raise ConfigError(f"realization has {realization.users} users, model needs {spec.users}")
    want = (spec.subcarriers, spec.rx_units, spec.tx_units)
    got = realization.matrices.shape[1:]
    if tuple(got) != want:
        raise ConfigError(f"channel layer: expected per-user shape {want}, got {tuple(got)}")
    if np.any(np.asarray(p_total_w) <= 0):
        raise ConfigError("transmit power must be positive")

    g = Graph(recording=train if record is None else record)
    leaves = {name: g.leaf(value, trainable=True, name=name) for name, value in model.params.items()}

    # Transmit DNN.
    h = g.constant(bits)
    for i in (1, 2, 3):
        h = g.relu(g.affine(leaves[f"bs.w{i}"], leaves[f"bs.b{i}"], h))
    _check_finite("transmit DNN", h.value)
    x = g.real_to_complex(h, spec.subcarriers, spec.tx_streams)
    x = g.power_scale(x, p_total_w, per_subcarrier=spec.power_per_subcarrier)
    tx_power = np.sum(np.abs(x.value) ** 2, axis=2)
    _check_finite("power control", x.value)

    # Transmit metasurface cascade.
    field_ = x
    for l in range(1, spec.tx_layout.layers + 1):
        field_ = g.apply_matrix(g.constant(model.tx_mats[l - 1]), field_)
        field_ = g.phase_rotate(_phase_node(g, leaves, "tx", None, l, spec), field_)
    _check_finite("transmit metasurface cascade", field_.value)

    sigma2 = spec.noise_power_w
    noise_scale = np.sqrt(sigma2 / 2.0) if sigma2 > 0 else 0.0
    if noise_scale > 0 and noise_rng is None:
        raise ConfigError("noise power is positive but no noise stream was supplied")

    offsets = spec.bit_offsets()
    soft_nodes = []
    rx_power = []
    snr_db = []
    for j in range(spec.users):
        w = g.apply_matrix(g.constant(realization.matrices[j]), field_)
        for k in range(spec.rx_layout.layers, 0, -1):
            w = g.phase_rotate(_phase_node(g, leaves, "rx", j, k, spec), w)
            w = g.apply_matrix(g.constant(model.rx_mats[k - 1]), w)
        _check_finite(f"receive metasurface cascade (user {j})", w.value)
        rx_power.append(np.sum(np.abs(w.value) ** 2, axis=2))
        mean_rx = float(rx_power[-1].mean()) if rx_power[-1].size else 0.0
        snr_db.append(10.0 * np.log10(mean_rx / sigma2) if sigma2 > 0 and mean_rx > 0 else np.inf)

        shape = (bits.shape[0], spec.subcarriers, spec.rx_streams)
        if noise_scale > 0:
            noise = noise_scale * (noise_rng.normal(size=shape) + 1j * noise_rng.normal(size=shape))
        else:
            noise = np.zeros(shape, dtype=np.complex128)
        y = g.add_noise(w, g.constant(noise))

        h = g.complex_to_real(y)
        h = _batch_norm(g, model, leaves, j, 1, h, train)
        h = g.relu(g.affine(leaves[f"ue.u{j}.w1"], leaves[f"ue.u{j}.b1"], h))
        h = _batch_norm(g, model, leaves, j, 2, h, train)
        h = g.relu(g.affine(leaves[f"ue.u{j}.w2"], leaves[f"ue.u{j}.b2"], h))
        h = _batch_norm(g, model, leaves, j, 3, h, train)
        soft = g.sigmoid(h)
        _check_finite(f"receive DNN (user {j})", soft.value)
        soft_nodes.append(soft)

    return ForwardOutput(
        graph=g,
        soft_nodes=soft_nodes,
        soft=[s.value for s in soft_nodes],
        tx_power=tx_power,
        rx_power=rx_power,
        snr_db=snr_db,
        leaves=leaves,
    )


def _phase_node(g, leaves, side, user, layer, spec):
    prefix = "tx" if side == "tx" else f"rx.u{user}"
    if spec.dual:
        return g.concat1d([leaves[f"{prefix}.l{layer}.p{p}.phase"] for p in (0, 1)])
    return leaves[f"{prefix}.l{layer}.phase"]


def _batch_norm(g, model, leaves, user, m, x, train):
    base = f"ue.u{user}.bn{m}"
    gamma, beta = leaves[f"{base}.gamma"], leaves[f"{base}.beta"]
    if train:
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        n = x.value.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        mom = model.spec.bn_momentum
        model.bn_state[f"{base}.mean"] = (1 - mom) * model.bn_state[f"{base}.mean"] + mom * mu
        model.bn_state[f"{base}.var"] = (1 - mom) * model.bn_state[f"{base}.var"] + mom * unbiased
        return g.batch_norm(x, gamma, beta, mu, var, model.spec.bn_eps, batch_mode=True)
    return g.batch_norm(x, gamma, beta, model.bn_state[f"{base}.mean"],
                        model.bn_state[f"{base}.var"], model.spec.bn_eps, batch_mode=False)


def hard_decision(soft):
    """Threshold soft bits at 0.5; exactly 0.5 decides 1."""
    return [(np.asarray(s) >= 0.5).astype(np.uint8) for s in soft]


# --------------------------------------------------------------- checkpoints

def _layout_dict(layout):
    return {k: getattr(layout, k) for k in
            ("units_x", "units_y", "unit_spacing", "layer_spacing", "layers",
             "antennas_x", "antennas_y", "role")}


def spec_to_dict(spec):
    d = asdict(spec)
    d["bits_per_user"] = list(spec.bits_per_user)
    d["tx_layout"] = _layout_dict(spec.tx_layout)
    d["rx_layout"] = _layout_dict(spec.rx_layout)
    return d


def spec_from_dict(d):
    d = dict(d)
    d["bits_per_user"] = tuple(d["bits_per_user"])
    d["tx_layout"] = PanelLayout(**d["tx_layout"])
    d["rx_layout"] = PanelLayout(**d["rx_layout"])
    return LinkSpec(**d)


def save_checkpoint(model, path, meta=None):
    """Self-contained npz: spec, parameters, batch-norm state, fixed matrices, meta."""
    payload = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__meta__": np.array(json.dumps(meta or {}, sort_keys=True)),
        "__spec__": np.array(json.dumps(spec_to_dict(model.spec), sort_keys=True)),
        "__freqs__": model.tx_prop.freqs,
        "__kinds__": np.array(json.dumps(model.kinds, sort_keys=True)),
    }
    for name, value in model.params.items():
        payload[f"param:{name}"] = value
    for name, value in model.bn_state.items():
        payload[f"state:{name}"] = value
    for i, gap in enumerate(model.tx_prop.gaps):
        payload[f"fixed:tx:{i}"] = gap
    for i, gap in enumerate(model.rx_prop.gaps):
        payload[f"fixed:rx:{i}"] = gap
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        if str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a {CHECKPOINT_FORMAT} file: {path}")
        meta = json.loads(str(data["__meta__"]))
        spec = spec_from_dict(json.loads(str(data["__spec__"])))
        kinds = json.loads(str(data["__kinds__"]))
        freqs = data["__freqs__"]
        params = {}
        bn_state = {}
        tx_gaps = {}
        rx_gaps = {}
        for key in data.files:
            if key.startswith("param:"):
                params[key[len("param:"):]] = data[key]
            elif key.startswith("state:"):
                bn_state[key[len("state:"):]] = data[key]
            elif key.startswith("fixed:tx:"):
                tx_gaps[int(key.rsplit(":", 1)[1])] = data[key]
            elif key.startswith("fixed:rx:"):
                rx_gaps[int(key.rsplit(":", 1)[1])] = data[key]
    tx_prop = PropagationSet(layout=spec.tx_layout, freqs=freqs,
                             gaps=[tx_gaps[i] for i in sorted(tx_gaps)])
    rx_prop = PropagationSet(layout=spec.rx_layout, freqs=freqs,
                             gaps=[rx_gaps[i] for i in sorted(rx_gaps)])
    model = EndToEndModel(spec, params, kinds, bn_state, tx_prop, rx_prop)
    return model, meta
