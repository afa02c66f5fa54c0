"""Geometric multipath channel between the outer metasurface layers.

Per user the channel is a sum over one line-of-sight path (s=0) and S scattered
paths of rank-one terms g_s * exp(-j*2*pi*f*tau_s) * a_rx(angles) a_tx(angles)^H,
evaluated per subcarrier. Steering vectors are Kronecker products of x/y phase
progressions over the rectangular unit grid with phase constant 2*pi*f*d/c; the
x progression uses sin(elev)*sin(azim) and the y progression cos(elev).

Large-scale gain follows log-distance path loss with lognormal shadowing; scattered
paths get i.i.d. circular Gaussian gains normalized so that their aggregate power is
the line-of-sight power divided by the Rician factor, plus exponential excess delays.
Dual-polarized channels replicate the base matrix into four blocks: co-polarized
blocks keep full amplitude, cross-polarized blocks are attenuated by 1/sqrt(XPD)
with XPD = (1-eps)/eps, each block rotated by its own uniform random phase.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .metasurface import SPEED_OF_LIGHT


def path_loss_db(distance, ref_distance, exponent, shadow_std_db, wavelength, rng=None):
    """Log-distance path loss in dB at `distance`, with optional lognormal shadowing."""
    if ref_distance <= 0:
        raise DomainError("reference distance must be positive")
    if distance < ref_distance:
        raise DomainError(f"distance {distance} below reference distance {ref_distance}")
    free_space = 20.0 * np.log10(4.0 * np.pi * ref_distance / wavelength)
    loss = free_space + 10.0 * exponent * np.log10(distance / ref_distance)
    if shadow_std_db > 0:
        if rng is None:
            raise ConfigError("shadowing requested but no random stream supplied")
        loss += rng.normal(0.0, shadow_std_db)
    return loss


def steering_vector(nx, ny, spacing, elevation, azimuth, freq):
    """Array response over an nx*ny grid, x-major, as a length nx*ny column."""
    k = 2.0 * np.pi * freq * spacing / SPEED_OF_LIGHT
    arg_x = k * np.sin(elevation) * np.sin(azimuth)
    arg_y = k * np.cos(elevation)
    ax = np.exp(1j * arg_x * np.arange(nx))
    ay = np.exp(1j * arg_y * np.arange(ny))
    return np.kron(ax, ay)


@dataclass
class PathSet:
    """All propagation paths from the BS to one user. Index 0 is the LoS path."""

    gains: np.ndarray        # (S+1,) complex
    delays: np.ndarray       # (S+1,) seconds, delays[0] minimal
    tx_elevation: np.ndarray
    tx_azimuth: np.ndarray
    rx_elevation: np.ndarray
    rx_azimuth: np.ndarray

    def __post_init__(self):
        n = len(self.gains)
        for name in ("delays", "tx_elevation", "tx_azimuth", "rx_elevation", "rx_azimuth"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"PathSet field {name} length mismatch")
        if np.any(self.delays < 0) or np.any(self.delays[1:] < self.delays[0]):
            raise ConfigError("LoS delay must be the smallest, all delays nonnegative")


@dataclass
class Scene:
    """Static propagation environment shared by all realizations of one run."""

    bs_position: np.ndarray
    ue_positions: np.ndarray          # (J, 3)
    scatterers: int
    rician_k_db: float
    nlos_delay_mean_s: float
    pathloss_ref_distance_m: float
    pathloss_exponent: float
    shadowing_std_db: float
    noise_power_dbm: float
    xpd_epsilon: float
    wavelength_m: float

    def __post_init__(self):
        self.bs_position = np.asarray(self.bs_position, dtype=float)
        self.ue_positions = np.atleast_2d(np.asarray(self.ue_positions, dtype=float))
        if self.scatterers < 0:
            raise ConfigError("scatterer count must be >= 0")
        if not 0.0 < self.xpd_epsilon <= 1.0:
            raise DomainError(f"polarization conversion ratio must be in (0, 1], got {self.xpd_epsilon}")

    @property
    def users(self):
        return self.ue_positions.shape[0]

    @property
    def noise_power_w(self):
        return dbm_to_watts(self.noise_power_dbm)


def dbm_to_watts(dbm):
    return 10.0 ** (dbm / 10.0) / 1000.0


def _los_angles(direction):
    """Elevation from the z axis and azimuth in the x-y plane from the x axis."""
    w = direction / np.linalg.norm(direction)
    if w[2] <= 0:
        raise DomainError("user must lie in front of the transmit aperture (z > 0)")
    elevation = np.arccos(min(w[2], 1.0))
    azimuth = np.arctan2(w[1], w[0]) % (2.0 * np.pi)
    return elevation, azimuth


def sample_paths(scene, user, rng_paths, rng_shadow):
    """Draw the PathSet for one user: deterministic LoS plus random scattered paths."""
    d_vec = scene.ue_positions[user] - scene.bs_position
    dist = np.linalg.norm(d_vec)
    if dist == 0:
        raise DomainError("user placed on top of the base station")
    tx_el, tx_az = _los_angles(d_vec)
    # Receive panels face the transmitter; receive-side angles are taken in a frame
    # rotated pi about the y axis, so the back-propagating direction stays in domain.
    rx_local = np.array([d_vec[0], -d_vec[1], d_vec[2]])
    rx_el, rx_az = _los_angles(rx_local)

    loss_db = path_loss_db(dist, scene.pathloss_ref_distance_m, scene.pathloss_exponent,
                           scene.shadowing_std_db, scene.wavelength_m, rng_shadow)
    los_amp = 10.0 ** (-loss_db / 20.0)
    los_delay = dist / SPEED_OF_LIGHT

    s = scene.scatterers
    gains = np.empty(s + 1, dtype=np.complex128)
    gains[0] = los_amp
    delays = np.empty(s + 1)
    delays[0] = los_delay
    tx_els = np.empty(s + 1)
    tx_azs = np.empty(s + 1)
    rx_els = np.empty(s + 1)
    rx_azs = np.empty(s + 1)
    tx_els[0], tx_azs[0], rx_els[0], rx_azs[0] = tx_el, tx_az, rx_el, rx_az
    if s > 0:
        kappa = 10.0 ** (scene.rician_k_db / 10.0)
        raw = rng_paths.normal(size=(s, 2)) @ np.array([1.0, 1j]) / np.sqrt(2.0)
        raw *= np.sqrt(los_amp ** 2 / kappa / np.sum(np.abs(raw) ** 2))
        gains[1:] = raw
        delays[1:] = los_delay + rng_paths.exponential(scene.nlos_delay_mean_s, size=s)
        tx_els[1:] = rng_paths.uniform(0.0, np.pi / 2, size=s)
        tx_azs[1:] = rng_paths.uniform(0.0, 2 * np.pi, size=s)
        rx_els[1:] = rng_paths.uniform(0.0, np.pi / 2, size=s)
        rx_azs[1:] = rng_paths.uniform(0.0, 2 * np.pi, size=s)
    return PathSet(gains, delays, tx_els, tx_azs, rx_els, rx_azs)


def channel_matrix(paths, freq, tx_nx, tx_ny, tx_spacing, rx_nx, rx_ny, rx_spacing):
    """Sum of rank-one path contributions at one frequency, (N, M)."""
    coef = paths.gains * np.exp(-1j * 2.0 * np.pi * freq * paths.delays)
    a_tx = np.stack([
        steering_vector(tx_nx, tx_ny, tx_spacing, el, az, freq)
        for el, az in zip(paths.tx_elevation, paths.tx_azimuth)
    ])  # (S+1, M)
    a_rx = np.stack([
        steering_vector(rx_nx, rx_ny, rx_spacing, el, az, freq)
        for el, az in zip(paths.rx_elevation, paths.rx_azimuth)
    ])  # (S+1, N)
    return (a_rx.T * coef) @ np.conj(a_tx)


def dp_channel(base, epsilon, psi):
    """Four-block dual-polarized matrix from one base matrix and four phase shifts.

    psi holds (psi00, psi01, psi10, psi11). Cross blocks are scaled by
    1/sqrt(XPD) with XPD = (1-eps)/eps.
    """
    if not 0.0 < epsilon <= 1.0:
        raise DomainError(f"polarization conversion ratio must be in (0, 1], got {epsilon}")
    xpd = (1.0 - epsilon) / epsilon if epsilon < 1.0 else 1.0
    cross = 1.0 / np.sqrt(xpd)
    n, m = base.shape
    out = np.empty((2 * n, 2 * m), dtype=np.complex128)
    out[:n, :m] = np.exp(1j * psi[0]) * base
    out[:n, m:] = cross * np.exp(1j * psi[1]) * base
    out[n:, :m] = cross * np.exp(1j * psi[2]) * base
    out[n:, m:] = np.exp(1j * psi[3]) * base
    return out


def xpd_from_epsilon(epsilon):
    if not 0.0 < epsilon <= 1.0:
        raise DomainError(f"polarization conversion ratio must be in (0, 1], got {epsilon}")
    return (1.0 - epsilon) / epsilon if epsilon < 1.0 else 1.0


@dataclass
class ChannelRealization:
    """Per-user, per-subcarrier channel matrices plus the parameters that made them."""

    dual: bool
    freqs: np.ndarray
    matrices: np.ndarray              # (J, Nc, rows, cols) complex
    path_sets: list                   # one PathSet per user
    psi: np.ndarray = None            # (J, 4) dual-pol block phases, dual mode only
    epsilon: float = None
    seed_label: tuple = ()            # provenance: (master_seed, realization index)
    tx_grid: tuple = None             # (nx, ny, spacing) used for steering
    rx_grid: tuple = None

    @property
    def users(self):
        return self.matrices.shape[0]


def draw_realization(scene, tx_grid, rx_grid, freqs, hub, index, dual=False):
    """Build realization `index` of the scene; same (hub, index) always reproduces it.

    tx_grid/rx_grid: (nx, ny, spacing) of the outer metasurface layers the channel
    connects.
    """
    freqs = np.asarray(freqs, dtype=float)
    j_users = scene.users
    path_sets = []
    psi = None
    rows = rx_grid[0] * rx_grid[1]
    cols = tx_grid[0] * tx_grid[1]
    if dual:
        rows, cols = 2 * rows, 2 * cols
        psi = np.empty((j_users, 4))
    mats = np.empty((j_users, len(freqs), rows, cols), dtype=np.complex128)
    for j in range(j_users):
        paths = sample_paths(
            scene, j,
            hub.stream("channel", index, "scatterers", j),
            hub.stream("channel", index, "shadowing", j),
        )
        path_sets.append(paths)
        if dual:
            psi[j] = hub.stream("channel", index, "xpd-phase", j).uniform(0.0, 2 * np.pi, size=4)
        for i, f in enumerate(freqs):
            base = channel_matrix(paths, f, tx_grid[0], tx_grid[1], tx_grid[2],
                                  rx_grid[0], rx_grid[1], rx_grid[2])
            mats[j, i] = dp_channel(base, scene.xpd_epsilon, psi[j]) if dual else base
    return ChannelRealization(
        dual=dual, freqs=freqs, matrices=mats, path_sets=path_sets, psi=psi,
        epsilon=scene.xpd_epsilon if dual else None,
        seed_label=(hub.master_seed, index), tx_grid=tuple(tx_grid), rx_grid=tuple(rx_grid),
    )


class StatisticalChannelProvider:
    """Fresh i.i.d. realization per call, reproducible from (hub, call index)."""

    mode = "statistical"

    def __init__(self, scene, tx_grid, rx_grid, freqs, hub, dual=False):
        self.scene = scene
        self.tx_grid = tuple(tx_grid)
        self.rx_grid = tuple(rx_grid)
        self.freqs = np.asarray(freqs, dtype=float)
        self.hub = hub
        self.dual = dual
        self.calls = 0

    def provide(self):
        real = draw_realization(self.scene, self.tx_grid, self.rx_grid, self.freqs,
                                self.hub, self.calls, dual=self.dual)
        self.calls += 1
        return real


class InstantaneousChannelProvider:
    """Always returns the one frozen realization it was given."""

    mode = "instantaneous"

    def __init__(self, realization):
        self.realization = realization

    def provide(self):
        return self.realization


# ----------------------------------------------------------- text round-trip

_FORMAT_HEADER = "simofdm/channel/v1"


def _write_array(out, label, arr):
    arr = np.asarray(arr)
    flat = arr.ravel()
    if np.iscomplexobj(arr):
        body = " ".join(f"{v.real!r} {v.imag!r}" for v in flat)
        kind = "c"
    else:
        body = " ".join(repr(float(v)) for v in flat)
        kind = "f"
    shape = ",".join(str(s) for s in arr.shape)
    out.write(f"array {label} {kind} {shape}\n{body}\n")


def _read_array(lines):
    head = next(lines).split()
    if head[0] != "array":
        raise ConfigError(f"expected array record, got {head[0]!r}")
    label, kind = head[1], head[2]
    shape = tuple(int(s) for s in head[3].split(",")) if head[3] else ()
    vals = [float(t) for t in next(lines).split()]
    if kind == "c":
        data = np.asarray(vals[0::2]) + 1j * np.asarray(vals[1::2])
    else:
        data = np.asarray(vals)
    return label, data.reshape(shape)


def save_realization(realization, path):
    """Versioned plain-text dump: scene provenance, path parameters, full matrices."""
    r = realization
    with open(path, "w") as fh:
        fh.write(f"{_FORMAT_HEADER}\n")
        fh.write(f"dual {int(r.dual)}\n")
        fh.write(f"users {r.users}\n")
        fh.write(f"seed {r.seed_label[0] if r.seed_label else ''} "
                 f"{r.seed_label[1] if r.seed_label else ''}\n")
        fh.write(f"epsilon {'' if r.epsilon is None else repr(float(r.epsilon))}\n")
        fh.write(f"tx_grid {r.tx_grid[0]} {r.tx_grid[1]} {r.tx_grid[2]!r}\n")
        fh.write(f"rx_grid {r.rx_grid[0]} {r.rx_grid[1]} {r.rx_grid[2]!r}\n")
        _write_array(fh, "freqs", r.freqs)
        for j, p in enumerate(r.path_sets):
            _write_array(fh, f"gains.{j}", p.gains)
            _write_array(fh, f"delays.{j}", p.delays)
            _write_array(fh, f"tx_elevation.{j}", p.tx_elevation)
            _write_array(fh, f"tx_azimuth.{j}", p.tx_azimuth)
            _write_array(fh, f"rx_elevation.{j}", p.rx_elevation)
            _write_array(fh, f"rx_azimuth.{j}", p.rx_azimuth)
        if r.dual:
            _write_array(fh, "psi", r.psi)
        _write_array(fh, "matrices", r.matrices)


def load_realization(path):
    with open(path) as fh:
        text = fh.read()
    lines = iter(text.splitlines())
    if next(lines) != _FORMAT_HEADER:
        raise ConfigError(f"not a {_FORMAT_HEADER} file: {path}")
    dual = bool(int(next(lines).split()[1]))
    users = int(next(lines).split()[1])
    seed_parts = next(lines).split()[1:]
    seed_label = tuple(int(s) for s in seed_parts) if seed_parts else ()
    eps_parts = next(lines).split()[1:]
    epsilon = float(eps_parts[0]) if eps_parts else None
    tg = next(lines).split()[1:]
    tx_grid = (int(tg[0]), int(tg[1]), float(tg[2]))
    rg = next(lines).split()[1:]
    rx_grid = (int(rg[0]), int(rg[1]), float(rg[2]))
    arrays = {}
    while True:
        try:
            label, arr = _read_array(lines)
        except StopIteration:
            break
        arrays[label] = arr
    path_sets = [
        PathSet(arrays[f"gains.{j}"], arrays[f"delays.{j}"],
                arrays[f"tx_elevation.{j}"], arrays[f"tx_azimuth.{j}"],
                arrays[f"rx_elevation.{j}"], arrays[f"rx_azimuth.{j}"])
        for j in range(users)
    ]
    return ChannelRealization(
        dual=dual, freqs=arrays["freqs"], matrices=arrays["matrices"],
        path_sets=path_sets, psi=arrays.get("psi"), epsilon=epsilon,
        seed_label=seed_label, tx_grid=tx_grid, rx_grid=rx_grid,
    )


def rebuild_from_paths(realization):
    """Recompute the single-polarization matrices from the stored PathSets."""
    r = realization
    if r.dual:
        raise ConfigError("rebuild_from_paths covers the single-polarization format")
    mats = np.empty_like(r.matrices)
    for j, paths in enumerate(r.path_sets):
        for i, f in enumerate(r.freqs):
            mats[j, i] = channel_matrix(paths, f, r.tx_grid[0], r.tx_grid[1], r.tx_grid[2],
                                        r.rx_grid[0], r.rx_grid[1], r.rx_grid[2])
    return mats
