"""Monte-Carlo BER measurement, replica aggregation, and one-variable sweeps.

BER is measured in evaluation mode: random bit vectors, fresh noise, hard decision,
error fraction per user. A Monte-Carlo point draws an instantaneous channel per
replica, optionally fine-tunes a copy of the base model on it, and averages the
replica BERs. A sweep repeats that along one axis; sweeping transmit power reuses
one trained model per replica and only re-measures, other axes rebuild per point.
"""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import InstantaneousChannelProvider, dbm_to_watts, draw_realization
from .errors import ConfigError, DivergenceError
from .network import forward, hard_decision
from .trainer import TrainSettings, train


def wald_half_width(errors, bits, confidence_z=1.96):
    """95% normal-approximation half-width of an error-count estimate."""
    if bits <= 0:
        return 0.0
    p = errors / bits
    return confidence_z * np.sqrt(max(p * (1.0 - p), 0.0) / bits)


@dataclass
class BerMeasurement:
    """Raw per-user counts from one measurement run."""

    errors: np.ndarray          # (J,) int
    bits: np.ndarray            # (J,) int

    @property
    def per_user(self):
        return self.errors / self.bits

    @property
    def aggregate(self):
        return float(self.errors.sum() / self.bits.sum())

    @property
    def half_width(self):
        return wald_half_width(int(self.errors.sum()), int(self.bits.sum()))


def measure_ber(model, provider_or_realization, p_dbm, n_symbols, hub,
                batch=4096, transcript=False):
    """Evaluation-mode BER over n_symbols random symbols with fresh noise.

    A provider is sampled once at the start (the instantaneous provider returns its
    frozen realization). transcript=True additionally returns the transmitted and
    decided bits for independent re-counting.
    """
    realization = (provider_or_realization.provide()
                   if hasattr(provider_or_realization, "provide")
                   else provider_or_realization)
    spec = model.spec
    p_watts = dbm_to_watts(p_dbm)
    offsets = spec.bit_offsets()
    errors = np.zeros(spec.users, dtype=np.int64)
    bits_count = np.zeros(spec.users, dtype=np.int64)
    sent_log, decided_log = [], []
    done = 0
    chunk_index = 0
    while done < n_symbols:
        n = min(batch, n_symbols - done)
        bits = hub.stream("test-bits", chunk_index).integers(0, 2, size=(n, spec.total_bits))
        noise_rng = hub.stream("test-noise", chunk_index)
        out = forward(model, bits, realization, p_watts, noise_rng, train=False)
        decided = hard_decision(out.soft)
        for j in range(spec.users):
            lo, hi = offsets[j]
            errors[j] += int(np.sum(decided[j] != bits[:, lo:hi]))
            bits_count[j] += n * spec.bits_per_user[j]
        if transcript:
            sent_log.append(bits)
            decided_log.append(np.concatenate(decided, axis=1))
        done += n
        chunk_index += 1
    result = BerMeasurement(errors=errors, bits=bits_count)
    if transcript:
        return result, np.concatenate(sent_log), np.concatenate(decided_log)
    return result


@dataclass
class BerPoint:
    """One aggregated sweep point."""

    axis_value: object
    mode: str                          # "sim" | "dpsim"
    per_user: list                     # mean BER per user over replicas
    aggregate: float
    half_width: float
    bits_tested: int
    errors: int
    replicas: int
    dropped_replicas: int = 0
    replica_aggregates: list = field(default_factory=list)


@dataclass
class BerReport:
    axis_name: str
    points: list
    users: int
    config_hash: str = ""
    master_seed: int = 0
    notes: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "axis_value", "mode", "user", "ber", "half_width",
                        "bits_tested", "errors", "replicas", "dropped"])
            for p in self.points:
                for j, ber in enumerate(p.per_user):
                    w.writerow([self.axis_name, p.axis_value, p.mode, f"u{j}",
                                repr(float(ber)), "", "", "", p.replicas, p.dropped_replicas])
                w.writerow([self.axis_name, p.axis_value, p.mode, "all",
                            repr(p.aggregate), repr(p.half_width),
                            p.bits_tested, p.errors, p.replicas, p.dropped_replicas])

    def to_meta(self, path):
        meta = {
            "format": "simofdm/report/v1",
            "axis": self.axis_name,
            "users": self.users,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "notes": self.notes,
            "points": [
                {
                    "axis_value": p.axis_value, "mode": p.mode,
                    "per_user": [float(v) for v in p.per_user],
                    "aggregate": p.aggregate, "half_width": p.half_width,
                    "bits_tested": p.bits_tested, "errors": p.errors,
                    "replicas": p.replicas, "dropped_replicas": p.dropped_replicas,
                    "replica_aggregates": [float(v) for v in p.replica_aggregates],
                }
                for p in self.points
            ],
        }
        with open(path, "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @staticmethod
    def from_meta(path):
        with open(path) as fh:
            meta = json.load(fh)
        if meta.get("format") != "simofdm/report/v1":
            raise ConfigError(f"not a simofdm report metadata file: {path}")
        points = [BerPoint(
            axis_value=d["axis_value"], mode=d["mode"], per_user=d["per_user"],
            aggregate=d["aggregate"], half_width=d["half_width"],
            bits_tested=d["bits_tested"], errors=d["errors"], replicas=d["replicas"],
            dropped_replicas=d["dropped_replicas"],
            replica_aggregates=d.get("replica_aggregates", []),
        ) for d in meta["points"]]
        return BerReport(axis_name=meta["axis"], points=points, users=meta["users"],
                         config_hash=meta["config_hash"], master_seed=meta["master_seed"],
                         notes=meta.get("notes", []))


def monte_carlo_ber(base_model, scene, tx_grid, rx_grid, freqs, p_dbm, n_symbols,
                    replicas, hub, finetune=None, axis_value=None, mode=None):
    """Average BER over instantaneous channel replicas.

    Each replica draws its own realization, optionally fine-tunes a clone of
    base_model on it (finetune: TrainSettings or None), then measures. Replicas
    whose training diverges are dropped and noted.
    """
    if replicas < 1:
        raise ConfigError("need at least one replica")
    spec = base_model.spec
    per_user = []
    aggregates = []
    errors_total = 0
    bits_total = 0
    dropped = 0
    for r in range(replicas):
        sub = hub.child("replica", r)
        realization = draw_realization(scene, tx_grid, rx_grid, freqs, sub, 0, dual=spec.dual)
        model = base_model.clone()
        if finetune is not None and finetune.epochs > 0:
            try:
                train(model, InstantaneousChannelProvider(realization),
                      replace(finetune, phase_label="finetune"), sub.child("ft"))
            except DivergenceError:
                dropped += 1
                continue
        meas = measure_ber(model, realization, p_dbm, n_symbols, sub.child("measure"))
        per_user.append(meas.per_user)
        aggregates.append(meas.aggregate)
        errors_total += int(meas.errors.sum())
        bits_total += int(meas.bits.sum())
    if not per_user:
        raise DivergenceError("every Monte-Carlo replica diverged")
    return BerPoint(
        axis_value=axis_value if axis_value is not None else p_dbm,
        mode=mode or ("dpsim" if spec.dual else "sim"),
        per_user=list(np.mean(per_user, axis=0)),
        aggregate=float(np.mean(aggregates)),
        half_width=wald_half_width(errors_total, bits_total),
        bits_tested=bits_total,
        errors=errors_total,
        replicas=replicas,
        dropped_replicas=dropped,
        replica_aggregates=aggregates,
    )


SWEEP_AXES = ("transmit_power_dbm", "tx_units", "layers", "tx_antennas",
              "subcarriers", "bits_per_user", "xpd_epsilon")


def sweep(build_point, axis, values, modes, hub, notes=None):
    """Evaluate one swept variable; one BerPoint per (mode, value).

    build_point(mode, value, sub_hub) -> BerPoint does the per-point work (training
    per the configured Monte-Carlo recipe); infeasible points may raise ConfigError
    and are recorded as skipped.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep grid is empty")
    points = []
    skip_notes = list(notes or [])
    users = None
    for mode in modes:
        for value in values:
            sub = hub.child("sweep", mode, str(value))
            try:
                point = build_point(mode, value, sub)
            except ConfigError as err:
                skip_notes.append(f"skipped {mode} {axis}={value}: {err}")
                continue
            users = len(point.per_user)
            points.append(point)
    if not points:
        raise ConfigError("sweep produced no feasible points: " + "; ".join(skip_notes))
    return BerReport(axis_name=axis, points=points, users=users,
                     master_seed=hub.master_seed, notes=skip_notes)
