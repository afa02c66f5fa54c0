"""Deployment side: weight partitioning, phase quantization, device phase maps,
and measured-calibration import.

After training, the parameters split into one base-station bundle (transmit DNN
weights plus transmit phase maps) and one bundle per user (that user's receive DNN
weights, batch-norm state and receive phase maps). Bundles carry a sha256 integrity
hash over their canonical JSON payload. Metasurface phases may be quantized to 2^b
uniform levels on [0, 2*pi); DNN weights stay at full precision. Measured
transmission matrices can replace the analytic diffraction matrices of any layer
gap; the model keeps training against them as fixed layers.
"""

import hashlib
import json

import numpy as np

from .autodiff import as_cmat
from .errors import ConfigError
from .optim import TWO_PI

BUNDLE_FORMAT = "simofdm/bundle/v1"
PHASE_MAP_FORMAT = "simofdm/phase-map/v1"
CALIBRATION_FORMAT = "simofdm/calibration/v1"


# ------------------------------------------------------------------ bundles

def _canonical_payload(payload):
    def enc(a):
        a = np.asarray(a)
        return {"shape": list(a.shape), "data": [repr(float(v)) for v in a.ravel()]}
    return json.dumps({k: enc(v) for k, v in sorted(payload.items())}, sort_keys=True)


def _payload_hash(payload):
    return hashlib.sha256(_canonical_payload(payload).encode()).hexdigest()


class DeployBundle:
    """One distributable parameter set, integrity-hashed."""

    def __init__(self, role, payload, quant_bits=None, version=""):
        self.role = role                  # "bs" or "ue{j}"
        self.payload = dict(payload)      # name -> array
        self.quant_bits = quant_bits      # None = float phases
        self.version = version
        self.digest = _payload_hash(self.payload)

    def verify(self):
        return _payload_hash(self.payload) == self.digest

    def to_json(self, path):
        doc = {
            "format": BUNDLE_FORMAT,
            "role": self.role,
            "quant_bits": self.quant_bits,
            "version": self.version,
            "sha256": self.digest,
            "payload": {
                k: {"shape": list(np.asarray(v).shape),
                    "data": [float(x) for x in np.asarray(v).ravel()]}
                for k, v in sorted(self.payload.items())
            },
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)

    @staticmethod
    def from_json(path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != BUNDLE_FORMAT:
            raise ConfigError(f"not a {BUNDLE_FORMAT} file: {path}")
        payload = {k: np.asarray(v["data"]).reshape(v["shape"])
                   for k, v in doc["payload"].items()}
        bundle = DeployBundle(doc["role"], payload, doc["quant_bits"], doc["version"])
        if bundle.digest != doc["sha256"]:
            raise ConfigError(f"bundle {path} failed its integrity check")
        return bundle


def partition(model, version=""):
    """Split a trained model into 1 BS bundle + J user bundles, covering all
    deployable parameters exactly once (batch-norm running state rides with its
    user bundle)."""
    bundles = []
    bs_payload = {n: v for n, v in model.params.items() if n.startswith(("bs.", "tx."))}
    bundles.append(DeployBundle("bs", bs_payload, version=version))
    for j in range(model.spec.users):
        prefix_rx = f"rx.u{j}."
        prefix_ue = f"ue.u{j}."
        payload = {n: v for n, v in model.params.items()
                   if n.startswith((prefix_rx, prefix_ue))}
        for n, v in model.bn_state.items():
            if n.startswith(prefix_ue):
                payload[f"state:{n}"] = v
        bundles.append(DeployBundle(f"ue{j}", payload, version=version))
    return bundles


def reassemble(model_template, bundles):
    """Merge bundles back into a clone of the template model."""
    model = model_template.clone()
    seen = set()
    for bundle in bundles:
        if not bundle.verify():
            raise ConfigError(f"bundle {bundle.role} failed its integrity check")
        for name, value in bundle.payload.items():
            if name.startswith("state:"):
                model.bn_state[name[len("state:"):]] = np.asarray(value, dtype=float)
                continue
            if name in seen:
                raise ConfigError(f"parameter {name} appears in two bundles")
            seen.add(name)
            model.params[name] = np.asarray(value, dtype=float)
    missing = set(model.params) - seen
    if missing:
        raise ConfigError(f"bundles do not cover parameters: {sorted(missing)[:5]} ...")
    return model


# --------------------------------------------------------------- quantization

def quantize_phases(phases, bits):
    """Snap each angle to the nearest of 2^b uniform levels on [0, 2*pi).

    Nearest is taken modulo 2*pi, so angles just below 2*pi snap to level 0 and the
    worst-case error is half a step, pi / 2^b.
    """
    if bits < 1:
        raise ConfigError("quantization needs at least one bit")
    levels = 2 ** bits
    step = TWO_PI / levels
    idx = np.mod(np.rint(np.asarray(phases, dtype=float) / step), levels).astype(int)
    return idx * step, {"bits": int(bits), "levels": int(levels), "step": step}


def quantize_model_phases(model, bits):
    """Clone the model with every metasurface phase quantized to b bits."""
    out = model.clone()
    for name in out.phase_names():
        out.params[name], _ = quantize_phases(out.params[name], bits)
    return out


# ---------------------------------------------------------------- phase maps

def export_phase_map(stack, path, quant_bits=None):
    """Device control file: one record per unit, layer-major then row-major.

    Quantized maps store the level index; float maps store the exact angle.
    """
    layout = stack.layout
    pols = (0, 1) if stack.dual else (None,)
    with open(path, "w") as fh:
        fh.write(f"{PHASE_MAP_FORMAT}\n")
        fh.write(f"layers {layout.layers}\n")
        fh.write(f"grid {layout.units_x} {layout.units_y}\n")
        fh.write(f"dual {int(stack.dual)}\n")
        fh.write(f"quant_bits {'' if quant_bits is None else int(quant_bits)}\n")
        step = TWO_PI / (2 ** quant_bits) if quant_bits else None
        for l in range(1, layout.layers + 1):
            for p in pols:
                theta = stack.phases[l - 1] if p is None else stack.phases[l - 1][p]
                for ux in range(layout.units_x):
                    for uy in range(layout.units_y):
                        value = theta[ux * layout.units_y + uy]
                        pol_tag = "-" if p is None else str(p)
                        if step is not None:
                            fh.write(f"{l} {pol_tag} {ux} {uy} {int(round(value / step))}\n")
                        else:
                            fh.write(f"{l} {pol_tag} {ux} {uy} {value!r}\n")


def import_phase_map(path):
    """Read a phase map back into per-layer phase vectors (list, as in a stack)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines[0] != PHASE_MAP_FORMAT:
        raise ConfigError(f"not a {PHASE_MAP_FORMAT} file: {path}")
    layers = int(lines[1].split()[1])
    ux_n, uy_n = (int(t) for t in lines[2].split()[1:])
    dual = bool(int(lines[3].split()[1]))
    quant_parts = lines[4].split()[1:]
    quant_bits = int(quant_parts[0]) if quant_parts else None
    step = TWO_PI / (2 ** quant_bits) if quant_bits else None
    units = ux_n * uy_n
    shape = (2, units) if dual else (units,)
    phases = [np.zeros(shape) for _ in range(layers)]
    for line in lines[5:]:
        if not line.strip():
            continue
        l, pol_tag, ux, uy, raw = line.split()
        value = int(raw) * step if step is not None else float(raw)
        idx = int(ux) * uy_n + int(uy)
        if dual:
            phases[int(l) - 1][int(pol_tag), idx] = value
        else:
            phases[int(l) - 1][idx] = value
    return phases, quant_bits


# --------------------------------------------------------------- calibration

class CalibrationSet:
    """Measured transmission matrices overriding the analytic ones.

    entries: {(side, gap_index): (Nc, rows, cols) complex array}, side in
    {"tx", "rx"}, gap_index 1-based from the antenna plane.
    """

    def __init__(self, entries, provenance=""):
        self.entries = dict(entries)
        self.provenance = provenance


def save_calibration(calset, path):
    with open(path, "w") as fh:
        fh.write(f"{CALIBRATION_FORMAT}\n")
        fh.write(f"provenance {calset.provenance}\n")
        for (side, gap), mats in sorted(calset.entries.items()):
            nc, rows, cols = mats.shape
            fh.write(f"gap {side} {gap} {nc} {rows} {cols}\n")
            for i in range(nc):
                flat = mats[i].ravel()
                fh.write(" ".join(f"{v.real!r} {v.imag!r}" for v in flat) + "\n")


def import_calibration(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CALIBRATION_FORMAT:
        raise ConfigError(f"not a {CALIBRATION_FORMAT} file: {path}")
    provenance = lines[1].split(" ", 1)[1] if len(lines) > 1 and " " in lines[1] else ""
    entries = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "gap":
            raise ConfigError(f"malformed calibration record at line {i + 1}")
        side, gap, nc, rows, cols = head[1], int(head[2]), int(head[3]), int(head[4]), int(head[5])
        mats = np.empty((nc, rows, cols), dtype=np.complex128)
        for c in range(nc):
            vals = [float(t) for t in lines[i + 1 + c].split()]
            if len(vals) != 2 * rows * cols:
                raise ConfigError(f"calibration gap {side}/{gap}: wrong entry count")
            mats[c] = (np.asarray(vals[0::2]) + 1j * np.asarray(vals[1::2])).reshape(rows, cols)
        entries[(side, gap)] = mats
        i += 1 + nc
    return CalibrationSet(entries, provenance)


def apply_calibration(model, calset):
    """Replace the model's fixed transmission layers with measured matrices.

    Validates every entry before touching the model, so a malformed set leaves the
    model unchanged.
    """
    staged = {"tx": {}, "rx": {}}
    for (side, gap), mats in calset.entries.items():
        if side not in ("tx", "rx"):
            raise ConfigError(f"calibration side must be tx or rx, got {side!r}")
        prop = model.tx_prop if side == "tx" else model.rx_prop
        if not 1 <= gap <= prop.layout.layers:
            raise ConfigError(f"calibration gap {gap} outside 1..{prop.layout.layers}")
        want = prop.gaps[gap - 1].shape
        mats = np.asarray(mats, dtype=np.complex128)
        if mats.shape != want:
            raise ConfigError(
                f"calibration {side} gap {gap}: expected shape {tuple(want)}, found {mats.shape}")
        for i in range(mats.shape[0]):
            as_cmat(mats[i], what=f"calibration {side} gap {gap} subcarrier {i}")
        staged[side][gap] = mats
    for side, updates in staged.items():
        prop = model.tx_prop if side == "tx" else model.rx_prop
        for gap, mats in updates.items():
            prop.gaps[gap - 1] = mats
    model.refresh_fixed()
    return model
