"""Metasurface stack geometry and inter-layer diffraction propagation.

A stack is a sequence of parallel, axis-aligned rectangular layers: layer 0 is the
antenna plane, layers 1..L the programmable metasurfaces. Units sit on a centered
grid in each layer; layers are spaced `layer_spacing` apart along z. The coupling
from unit m~ on one layer to unit m on the next is

    (S * cos(chi) / r) * (1/(2*pi*r) - 1j*f/c) * exp(1j*2*pi*r*f/c)

with r the center-to-center distance, chi the angle to the source layer's normal
(cos chi = layer_spacing / r for parallel layers) and S the unit area. Because all
metasurface layers of one device are identical, every inner gap shares one matrix
per subcarrier; only the antenna-adjacent gap differs.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .optim import TWO_PI

SPEED_OF_LIGHT = 299792458.0


def subcarrier_frequencies(f0, bandwidth, n_subcarriers):
    """Center frequencies of n_subcarriers bins evenly tiling [f0-B/2, f0+B/2]."""
    if n_subcarriers < 1:
        raise ConfigError("need at least one subcarrier")
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    step = bandwidth / n_subcarriers
    i = np.arange(n_subcarriers)
    return f0 - bandwidth / 2 + (i + 0.5) * step


def unit_grid(nx, ny, spacing):
    """Centered rectangular grid of nx*ny unit positions, x-major ordering, (n, 2)."""
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    x = (ix.ravel() - (nx - 1) / 2.0) * spacing
    y = (iy.ravel() - (ny - 1) / 2.0) * spacing
    return np.stack([x, y], axis=1)


@dataclass(frozen=True)
class PanelLayout:
    """Geometry of one SIM/DPSIM device (either the transmit or a receive side)."""

    units_x: int
    units_y: int
    unit_spacing: float
    layer_spacing: float
    layers: int
    antennas_x: int
    antennas_y: int
    role: str = "tx"  # "tx" or "rx"

    def __post_init__(self):
        for label, n in (("units_x", self.units_x), ("units_y", self.units_y),
                         ("layers", self.layers), ("antennas_x", self.antennas_x),
                         ("antennas_y", self.antennas_y)):
            if n < 1:
                raise ConfigError(f"{label} must be >= 1, got {n}")
        if self.unit_spacing <= 0 or self.layer_spacing <= 0:
            raise ConfigError("spacings must be positive")
        if self.role not in ("tx", "rx"):
            raise ConfigError(f"role must be 'tx' or 'rx', got {self.role!r}")

    @property
    def units(self):
        return self.units_x * self.units_y

    @property
    def antennas(self):
        return self.antennas_x * self.antennas_y

    def unit_positions(self):
        return unit_grid(self.units_x, self.units_y, self.unit_spacing)

    def antenna_positions(self):
        return unit_grid(self.antennas_x, self.antennas_y, self.unit_spacing)


@dataclass
class MetasurfaceStack:
    """A layout plus its per-layer phase vectors.

    phases: single polarization -> list of L arrays (units,);
            dual polarization   -> list of L arrays (2, units), row p = polarization p.
    """

    layout: PanelLayout
    phases: list
    dual: bool = False

    def __post_init__(self):
        if len(self.phases) != self.layout.layers:
            raise ConfigError(
                f"{len(self.phases)} phase vectors for {self.layout.layers} layers"
            )
        expected = (2, self.layout.units) if self.dual else (self.layout.units,)
        for l, theta in enumerate(self.phases):
            theta = np.asarray(theta, dtype=float)
            if theta.shape != expected:
                raise ConfigError(
                    f"layer {l + 1} phases have shape {theta.shape}, expected {expected}"
                )
            self.phases[l] = np.mod(theta, TWO_PI)

    @staticmethod
    def random(layout, rng, dual=False):
        shape = (2, layout.units) if dual else (layout.units,)
        phases = [rng.uniform(0.0, TWO_PI, size=shape) for _ in range(layout.layers)]
        return MetasurfaceStack(layout, phases, dual=dual)


def diffraction_matrix(dest_positions, src_positions, gap, unit_area, freq):
    """Coupling matrix (n_dest, n_src) between two parallel planes `gap` apart."""
    if gap <= 0:
        raise ConfigError("layer gap must be positive (degenerate geometry)")
    delta = dest_positions[:, None, :] - src_positions[None, :, :]
    r = np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + gap ** 2)
    cos_chi = gap / r
    k_over_c = freq / SPEED_OF_LIGHT
    mat = (unit_area * cos_chi / r) * (1.0 / (2 * np.pi * r) - 1j * k_over_c) \
        * np.exp(1j * 2 * np.pi * r * k_over_c)
    return mat


@dataclass
class PropagationSet:
    """Fixed inter-layer matrices for one device across all subcarriers.

    tx role: gaps[0] is antenna plane -> layer 1 with shape (Nc, M, A); deeper gaps
    are (Nc, M, M) and alias one shared array while the geometry is untouched.
    rx role: gaps[k-1] is the matrix taking layer k to layer k-1; gaps[0] lands on
    the antenna plane with shape (Nc, A, N). Calibration may replace individual
    entries with measured matrices (see simofdm.deploy).
    """

    layout: PanelLayout
    freqs: np.ndarray
    gaps: list = field(default_factory=list)

    @staticmethod
    def build(layout, freqs):
        freqs = np.asarray(freqs, dtype=float)
        units = layout.unit_positions()
        ants = layout.antenna_positions()
        area = layout.unit_spacing ** 2
        gap = layout.layer_spacing
        if layout.role == "tx":
            first = np.stack([diffraction_matrix(units, ants, gap, area, f) for f in freqs])
        else:
            first = np.stack([diffraction_matrix(ants, units, gap, area, f) for f in freqs])
        gaps = [first]
        if layout.layers > 1:
            inner = np.stack([diffraction_matrix(units, units, gap, area, f) for f in freqs])
            gaps.extend([inner] * (layout.layers - 1))  # identical geometry => one array
        return PropagationSet(layout=layout, freqs=freqs, gaps=gaps)

    def gap_matrix(self, gap_index, subcarrier):
        """Matrix for one gap (1-based, counted from the antenna plane) and subcarrier."""
        if not 1 <= gap_index <= self.layout.layers:
            raise ConfigError(f"gap index {gap_index} outside 1..{self.layout.layers}")
        return self.gaps[gap_index - 1][subcarrier]


def _check_pairing(stack, prop, dual):
    if stack.dual != dual:
        mode = "dual" if dual else "single"
        raise ConfigError(f"stack polarization mode does not match requested {mode} chain")
    if stack.layout != prop.layout:
        raise ConfigError("stack and propagation set were built from different layouts")


def tx_chain(stack, prop, subcarrier):
    """Transmit-side cascade for one subcarrier: Phi_L V_L ... Phi_1 V_1, (M, A)."""
    _check_pairing(stack, prop, dual=False)
    if stack.layout.role != "tx":
        raise ConfigError("tx_chain needs a tx-role stack")
    t = None
    for l in range(1, stack.layout.layers + 1):
        v = prop.gaps[l - 1][subcarrier]
        step = np.exp(1j * stack.phases[l - 1])[:, None] * v
        t = step if t is None else step @ t
    return t


def rx_chain(stack, prop, subcarrier):
    """Receive-side cascade for one subcarrier: U_1 Psi_1 U_2 Psi_2 ... U_K Psi_K, (A, N)."""
    _check_pairing(stack, prop, dual=False)
    if stack.layout.role != "rx":
        raise ConfigError("rx_chain needs an rx-role stack")
    r = None
    for k in range(1, stack.layout.layers + 1):
        u = prop.gaps[k - 1][subcarrier]
        step = u * np.exp(1j * stack.phases[k - 1])[None, :]
        r = step if r is None else r @ step
    return r


def _block_diag2(a, b):
    rows, cols = a.shape
    out = np.zeros((2 * rows, 2 * cols), dtype=np.complex128)
    out[:rows, :cols] = a
    out[rows:, cols:] = b
    return out


def dp_chain(stack, prop, subcarrier, side):
    """Dual-polarized cascade: block-diagonal pairing of the two polarization chains.

    TX output is (2M, 2A), RX output (2A, 2N); off-diagonal blocks are exactly zero
    because the device does not mix polarizations.
    """
    _check_pairing(stack, prop, dual=True)
    if side not in ("tx", "rx"):
        raise ConfigError(f"side must be 'tx' or 'rx', got {side!r}")
    if stack.layout.role != side:
        raise ConfigError(f"dp_chain side {side!r} does not match stack role {stack.layout.role!r}")
    blocks = []
    for p in (0, 1):
        single = MetasurfaceStack(stack.layout, [th[p] for th in stack.phases], dual=False)
        if side == "tx":
            blocks.append(tx_chain(single, prop, subcarrier))
        else:
            blocks.append(rx_chain(single, prop, subcarrier))
    return _block_diag2(blocks[0], blocks[1])


def block_diag_stack(mats):
    """Per-subcarrier block-diagonal doubling: (Nc, r, c) -> (Nc, 2r, 2c)."""
    nc, rows, cols = mats.shape
    out = np.zeros((nc, 2 * rows, 2 * cols), dtype=np.complex128)
    out[:, :rows, :cols] = mats
    out[:, rows:, cols:] = mats
    return out
