"""Command orchestration: each CLI command maps to one run_* function here.

Every command materializes a run directory named <config-hash>-<timestamp>
containing the resolved config snapshot and the command's artifacts. Reruns from
the snapshot with the same master seed reproduce the metrics and report CSVs
byte for byte (wall-clock never enters those files).
"""

import copy
import dataclasses
import datetime
import os

import numpy as np

from . import config as cfgmod
from .channel import InstantaneousChannelProvider, draw_realization
from .deploy import export_phase_map, partition, quantize_model_phases
from .errors import ConfigError
from .evaluator import BerPoint, BerReport, measure_ber, monte_carlo_ber, wald_half_width
from .network import load_checkpoint, save_checkpoint
from .plotting import plot_report
from .rng import SeedHub
from .trainer import train, write_metrics_csv

SWEEP_AXES = ("transmit_power_dbm", "units", "layers", "antennas",
              "subcarriers", "bits_per_user", "xpd_epsilon")


def make_run_dir(cfg, command):
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    run_dir = os.path.join(cfg.output_dir, f"{cfgmod.config_hash(cfg)}-{command}-{stamp}")
    os.makedirs(run_dir, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(run_dir, "config.yaml"))
    return run_dir


def _metric_groups(model):
    return sorted(model.groups())


def _frozen_realization(scene, cfg, hub, mode=None):
    tx_grid, rx_grid = cfgmod.channel_grids(cfg, mode)
    freqs = cfgmod.frequencies_from_config(cfg)
    dual = (mode or cfg.device.mode) == "dpsim"
    return draw_realization(scene, tx_grid, rx_grid, freqs, hub, 0, dual=dual)


def run_train(cfg, run_dir, hub):
    model, scene, provider = cfgmod.build_link(cfg, hub)
    if cfg.training.channel_mode == "instantaneous":
        provider = InstantaneousChannelProvider(
            _frozen_realization(scene, cfg, hub.child("frozen-channel")))
    settings = cfgmod.train_settings_from_config(cfg)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    meta = {"config_hash": cfgmod.config_hash(cfg), "seed": cfg.seed}

    def checkpoint_cb(m, epoch):
        save_checkpoint(m, os.path.join(ckpt_dir, f"epoch{epoch + 1}.npz"),
                        meta={**meta, "epoch": epoch + 1})

    metrics = train(model, provider, settings, hub.child("train"),
                    checkpoint_cb=checkpoint_cb)
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), [metrics], _metric_groups(model))
    final = os.path.join(ckpt_dir, "final.npz")
    save_checkpoint(model, final, meta={**meta, "epoch": settings.epochs})
    return {"checkpoint": final, "metrics": os.path.join(run_dir, "metrics.csv")}


def run_finetune(cfg, run_dir, hub, from_checkpoint):
    model, meta = load_checkpoint(from_checkpoint)
    scene = cfgmod.scene_from_config(cfg)
    mode = "dpsim" if model.spec.dual else "sim"
    provider = InstantaneousChannelProvider(
        _frozen_realization(scene, cfg, hub.child("frozen-channel"), mode))
    settings = cfgmod.train_settings_from_config(
        cfg, epochs=cfg.evaluation.finetune_epochs,
        learning_rate=cfg.evaluation.finetune_learning_rate, label="finetune")
    metrics = train(model, provider, settings, hub.child("finetune"))
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), [metrics], _metric_groups(model))
    final = os.path.join(run_dir, "checkpoints")
    os.makedirs(final, exist_ok=True)
    final = os.path.join(final, "final.npz")
    save_checkpoint(model, final, meta={**meta, "finetuned": True, "seed": cfg.seed})
    return {"checkpoint": final, "metrics": os.path.join(run_dir, "metrics.csv")}


def run_evaluate(cfg, run_dir, hub, from_checkpoint=None):
    if from_checkpoint:
        model, _ = load_checkpoint(from_checkpoint)
        mode = "dpsim" if model.spec.dual else "sim"
        scene = cfgmod.scene_from_config(cfg)
    else:
        model, scene, _ = cfgmod.build_link(cfg, hub)   # untrained baseline
        mode = cfg.device.mode
    realization = _frozen_realization(scene, cfg, hub.child("eval-channel"), mode)
    meas = measure_ber(model, realization, cfg.evaluation.power_dbm,
                       cfg.evaluation.test_symbols, hub.child("measure"),
                       batch=cfg.evaluation.eval_batch)
    point = BerPoint(
        axis_value=cfg.evaluation.power_dbm, mode=mode,
        per_user=list(meas.per_user), aggregate=meas.aggregate,
        half_width=meas.half_width, bits_tested=int(meas.bits.sum()),
        errors=int(meas.errors.sum()), replicas=1,
        replica_aggregates=[meas.aggregate],
    )
    report = BerReport(axis_name="transmit_power_dbm", points=[point],
                       users=model.spec.users, config_hash=cfgmod.config_hash(cfg),
                       master_seed=cfg.seed)
    csv_path = os.path.join(run_dir, "report.csv")
    report.to_csv(csv_path)
    report.to_meta(os.path.join(run_dir, "report_meta.json"))
    return {"report": csv_path, "aggregate_ber": meas.aggregate}


def _apply_axis(cfg, axis, value, mode):
    out = copy.deepcopy(cfg)
    geo = out.device.sim if mode == "sim" else out.device.dpsim
    if axis == "transmit_power_dbm":
        out.evaluation.power_dbm = float(value)
    elif axis == "units":
        geo.tx_units = list(value)
        geo.rx_units = list(value)
    elif axis == "layers":
        geo.tx_layers = int(value)
        geo.rx_layers = int(value)
    elif axis == "antennas":
        geo.tx_antennas = list(value[0])
        geo.rx_antennas = list(value[1])
    elif axis == "subcarriers":
        out.system.subcarriers = int(value)
    elif axis == "bits_per_user":
        out.system.bits_per_user = list(value)
    elif axis == "xpd_epsilon":
        out.scene.xpd_epsilon = float(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    out.device.mode = mode
    return cfgmod.validate(out)


def _pretrain_for_point(cfg, mode, hub):
    model, scene, provider = cfgmod.build_link(cfg, hub.child("base"), mode)
    settings = cfgmod.train_settings_from_config(cfg, label="pretrain")
    if settings.epochs > 0:
        train(model, provider, settings, hub.child("pretrain"))
    return model, scene


def _finetune_settings(cfg):
    return cfgmod.train_settings_from_config(
        cfg, epochs=cfg.evaluation.finetune_epochs,
        learning_rate=cfg.evaluation.finetune_learning_rate, label="finetune")


def _power_axis_points(cfg, mode, values, hub):
    """Train once per replica, then measure every power on the same models."""
    model, scene = _pretrain_for_point(cfg, mode, hub)
    tx_grid, rx_grid = cfgmod.channel_grids(cfg, mode)
    freqs = cfgmod.frequencies_from_config(cfg)
    fine = _finetune_settings(cfg)
    replicas = cfg.evaluation.monte_carlo
    per_power = {v: [] for v in values}
    counts = {v: [0, 0] for v in values}   # errors, bits
    dropped = 0
    for r in range(replicas):
        sub = hub.child("replica", r)
        realization = draw_realization(scene, tx_grid, rx_grid, freqs, sub, 0,
                                       dual=model.spec.dual)
        clone = model.clone()
        if fine.epochs > 0:
            from .errors import DivergenceError
            from .trainer import train as _train
            try:
                _train(clone, InstantaneousChannelProvider(realization), fine, sub.child("ft"))
            except DivergenceError:
                dropped += 1
                continue
        for v in values:
            meas = measure_ber(clone, realization, float(v), cfg.evaluation.test_symbols,
                               sub.child("measure", str(v)), batch=cfg.evaluation.eval_batch)
            per_power[v].append(meas)
            counts[v][0] += int(meas.errors.sum())
            counts[v][1] += int(meas.bits.sum())
    points = []
    for v in values:
        if not per_power[v]:
            raise ConfigError(f"every replica diverged for {mode} at {v} dBm")
        aggs = [m.aggregate for m in per_power[v]]
        points.append(BerPoint(
            axis_value=v, mode=mode,
            per_user=list(np.mean([m.per_user for m in per_power[v]], axis=0)),
            aggregate=float(np.mean(aggs)),
            half_width=wald_half_width(counts[v][0], counts[v][1]),
            bits_tested=counts[v][1], errors=counts[v][0],
            replicas=replicas, dropped_replicas=dropped,
            replica_aggregates=aggs,
        ))
    return points


def run_sweep(cfg, run_dir, hub):
    axis = cfg.sweep.axis
    values = cfg.sweep.values
    modes = cfg.sweep.modes
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep grid is empty")
    points = []
    notes = []
    users = cfg.system.users
    for mode in modes:
        if axis == "transmit_power_dbm":
            points.extend(_power_axis_points(cfg, mode, values, hub.child("sweep", mode)))
            continue
        for value in values:
            sub = hub.child("sweep", mode, str(value))
            try:
                point_cfg = _apply_axis(cfg, axis, value, mode)
            except ConfigError as err:
                notes.append(f"skipped {mode} {axis}={value}: {err}")
                continue
            model, scene = _pretrain_for_point(point_cfg, mode, sub)
            tx_grid, rx_grid = cfgmod.channel_grids(point_cfg, mode)
            freqs = cfgmod.frequencies_from_config(point_cfg)
            point = monte_carlo_ber(
                model, scene, tx_grid, rx_grid, freqs,
                p_dbm=point_cfg.evaluation.power_dbm,
                n_symbols=point_cfg.evaluation.test_symbols,
                replicas=point_cfg.evaluation.monte_carlo,
                hub=sub.child("mc"), finetune=_finetune_settings(point_cfg),
                axis_value=value, mode=mode)
            points.append(point)
    if not points:
        raise ConfigError("sweep produced no feasible points: " + "; ".join(notes))
    report = BerReport(axis_name=axis, points=points, users=users,
                       config_hash=cfgmod.config_hash(cfg), master_seed=cfg.seed,
                       notes=notes)
    csv_path = os.path.join(run_dir, "report.csv")
    report.to_csv(csv_path)
    report.to_meta(os.path.join(run_dir, "report_meta.json"))
    return {"report": csv_path, "points": len(points)}


def run_export(cfg, run_dir, hub, from_checkpoint, quant_bits=None):
    model, meta = load_checkpoint(from_checkpoint)
    if quant_bits is not None:
        model = quantize_model_phases(model, quant_bits)
    bundles = partition(model, version=str(meta.get("config_hash", "")))
    bundle_dir = os.path.join(run_dir, "bundles")
    maps_dir = os.path.join(run_dir, "phase_maps")
    os.makedirs(bundle_dir, exist_ok=True)
    os.makedirs(maps_dir, exist_ok=True)
    for bundle in bundles:
        bundle.quant_bits = quant_bits
        bundle.to_json(os.path.join(bundle_dir, f"{bundle.role}.json"))
    export_phase_map(model.tx_phase_stack(), os.path.join(maps_dir, "tx.txt"),
                     quant_bits=quant_bits)
    for j in range(model.spec.users):
        export_phase_map(model.rx_phase_stack(j), os.path.join(maps_dir, f"rx_u{j}.txt"),
                         quant_bits=quant_bits)
    return {"bundles": len(bundles), "bundle_dir": bundle_dir, "phase_maps": maps_dir}


def run_plot(report_csv, out_path):
    return {"figure": plot_report(report_csv, out_path)}
