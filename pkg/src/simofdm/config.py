"""Run configuration: schema, defaults, YAML round-trip, and domain-object builders.

The shipped defaults are the full-scale simulation settings; the desk-scale example
config under configs/ overrides them for laptop-sized runs. Loading rejects unknown
keys outright so a typo cannot silently fall back to a default. `--set a.b.c=value`
overrides parse values as YAML.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

import numpy as np

from .channel import Scene, StatisticalChannelProvider, dbm_to_watts
from .errors import ConfigError
from .metasurface import PanelLayout, PropagationSet, subcarrier_frequencies
from .network import LinkSpec, build_model
from .trainer import PowerPolicy, TrainSettings


@dataclass
class SystemConfig:
    center_frequency_hz: float = 28.0e9
    wavelength_m: float = 10.7e-3
    bandwidth_hz: float = 100.0e6
    subcarriers: int = 32
    users: int = 3
    bits_per_user: list = field(default_factory=lambda: [32, 16, 8])


@dataclass
class SceneConfig:
    bs_position: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    ue_positions: list = field(default_factory=lambda: [[10.0, 0.0, 20.0],
                                                        [20.0, 0.0, 20.0],
                                                        [0.0, 0.0, 30.0]])
    scatterers: int = 100
    rician_k_db: float = 10.0
    nlos_delay_mean_ns: float = 100.0
    pathloss_ref_distance_m: float = 1.0
    pathloss_exponent: float = 3.5
    shadowing_std_db: float = 9.0
    noise_power_dbm: float = -110.0
    xpd_epsilon: float = 0.2


_HALF_WAVE = 10.7e-3 / 2


@dataclass
class DeviceGeometry:
    tx_layers: int = 3
    rx_layers: int = 3
    tx_units: list = field(default_factory=lambda: [10, 10])
    rx_units: list = field(default_factory=lambda: [10, 10])
    tx_antennas: list = field(default_factory=lambda: [4, 4])
    rx_antennas: list = field(default_factory=lambda: [3, 3])
    tx_unit_spacing_m: float = _HALF_WAVE
    rx_unit_spacing_m: float = _HALF_WAVE
    tx_layer_spacing_m: float = _HALF_WAVE
    rx_layer_spacing_m: float = _HALF_WAVE


def _dpsim_geometry():
    return DeviceGeometry(tx_antennas=[3, 3], rx_antennas=[2, 2])


@dataclass
class DeviceConfig:
    mode: str = "sim"  # "sim" | "dpsim"
    sim: DeviceGeometry = field(default_factory=DeviceGeometry)
    dpsim: DeviceGeometry = field(default_factory=_dpsim_geometry)


@dataclass
class PowerPolicyConfig:
    kind: str = "fixed"
    dbm: float = 30.0
    a: float = 2.0
    b: float = 2.0
    lo_dbm: float = 0.0
    hi_dbm: float = 30.0
    draw: str = "per_sample"


@dataclass
class TrainingConfig:
    loss: str = "bce"
    initialization: str = "xavier"
    optimizer: str = "adamw"
    epochs: int = 2000
    learning_rate: float = 0.005
    batch_size: int = 1000
    lr_decay: float = 1.0 / 1.05
    decay_every_epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    soft_clamp: float = 1e-12
    power_policy: PowerPolicyConfig = field(default_factory=PowerPolicyConfig)
    power_control: str = "per_symbol"     # "per_symbol" | "per_subcarrier"
    channel_mode: str = "statistical"     # "statistical" | "instantaneous"
    channel_redraw_every: int = 1
    checkpoint_every: int = 500


@dataclass
class EvaluationConfig:
    metric: str = "ber"
    test_symbols: int = 100000
    monte_carlo: int = 100
    finetune_epochs: int = 200
    finetune_learning_rate: float = 0.005
    eval_batch: int = 4096
    power_dbm: float = 30.0


@dataclass
class SweepConfig:
    axis: str = "transmit_power_dbm"
    values: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    modes: list = field(default_factory=lambda: ["sim", "dpsim"])


@dataclass
class RunConfig:
    seed: int = 1
    output_dir: str = "runs"
    system: SystemConfig = field(default_factory=SystemConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


# --------------------------------------------------------- dict <-> dataclass

def _from_mapping(cls, data, path=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under '{path or '<root>'}'")
    kwargs = {}
    for name, f in names.items():
        here = f"{path}.{name}" if path else name
        if name not in data:
            continue
        value = data[name]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, type)
                                                and dataclasses.is_dataclass(f.type)):
            kwargs[name] = _from_mapping(f.type, value, here)
        else:
            kwargs[name] = value
    obj = cls()
    for name, value in kwargs.items():
        setattr(obj, name, value)
    return obj


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def validate(cfg):
    sysc, scn, dev, tr, ev = cfg.system, cfg.scene, cfg.device, cfg.training, cfg.evaluation
    if sysc.users != len(sysc.bits_per_user):
        raise ConfigError(f"system.users={sysc.users} but {len(sysc.bits_per_user)} bit allocations")
    if sysc.users != len(scn.ue_positions):
        raise ConfigError(f"system.users={sysc.users} but {len(scn.ue_positions)} user positions")
    if dev.mode not in ("sim", "dpsim"):
        raise ConfigError(f"device.mode must be sim or dpsim, got {dev.mode!r}")
    if tr.loss != "bce":
        raise ConfigError("training.loss: only 'bce' is implemented")
    if tr.initialization != "xavier":
        raise ConfigError("training.initialization: only 'xavier' is implemented")
    if tr.optimizer not in ("adamw", "sgd"):
        raise ConfigError("training.optimizer must be 'adamw' or 'sgd'")
    if tr.power_control not in ("per_symbol", "per_subcarrier"):
        raise ConfigError("training.power_control must be 'per_symbol' or 'per_subcarrier'")
    if tr.channel_mode not in ("statistical", "instantaneous"):
        raise ConfigError("training.channel_mode must be 'statistical' or 'instantaneous'")
    if ev.metric != "ber":
        raise ConfigError("evaluation.metric: only 'ber' is implemented")
    geo = dev.sim if dev.mode == "sim" else dev.dpsim
    if geo.tx_antennas[0] * geo.tx_antennas[1] > geo.tx_units[0] * geo.tx_units[1]:
        raise ConfigError("more transmit antennas than metasurface units per layer")
    if geo.rx_antennas[0] * geo.rx_antennas[1] > geo.rx_units[0] * geo.rx_units[1]:
        raise ConfigError("more receive antennas than metasurface units per layer")
    return cfg


def load_config(path, overrides=()):
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    cfg = _from_mapping(RunConfig, raw)
    apply_overrides(cfg, overrides)
    return validate(cfg)


def default_config():
    return RunConfig()


def apply_overrides(cfg, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, raw_value = item.split("=", 1)
        value = yaml.safe_load(raw_value)
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not hasattr(node, part):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = getattr(node, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(node) or leaf not in {f.name for f in dataclasses.fields(node)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(node, leaf)
        if dataclasses.is_dataclass(current):
            setattr(node, leaf, _from_mapping(type(current), value, dotted))
        else:
            setattr(node, leaf, value)
    return cfg


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True, default_flow_style=None)


def config_hash(cfg):
    doc = to_dict(cfg)
    doc.pop("output_dir", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


# ----------------------------------------------------------------- builders

def scene_from_config(cfg):
    s = cfg.scene
    return Scene(
        bs_position=s.bs_position,
        ue_positions=s.ue_positions,
        scatterers=s.scatterers,
        rician_k_db=s.rician_k_db,
        nlos_delay_mean_s=s.nlos_delay_mean_ns * 1e-9,
        pathloss_ref_distance_m=s.pathloss_ref_distance_m,
        pathloss_exponent=s.pathloss_exponent,
        shadowing_std_db=s.shadowing_std_db,
        noise_power_dbm=s.noise_power_dbm,
        xpd_epsilon=s.xpd_epsilon,
        wavelength_m=cfg.system.wavelength_m,
    )


def layouts_from_config(cfg, mode=None):
    mode = mode or cfg.device.mode
    geo = cfg.device.sim if mode == "sim" else cfg.device.dpsim
    tx = PanelLayout(units_x=geo.tx_units[0], units_y=geo.tx_units[1],
                     unit_spacing=geo.tx_unit_spacing_m, layer_spacing=geo.tx_layer_spacing_m,
                     layers=geo.tx_layers, antennas_x=geo.tx_antennas[0],
                     antennas_y=geo.tx_antennas[1], role="tx")
    rx = PanelLayout(units_x=geo.rx_units[0], units_y=geo.rx_units[1],
                     unit_spacing=geo.rx_unit_spacing_m, layer_spacing=geo.rx_layer_spacing_m,
                     layers=geo.rx_layers, antennas_x=geo.rx_antennas[0],
                     antennas_y=geo.rx_antennas[1], role="rx")
    return tx, rx


def frequencies_from_config(cfg):
    s = cfg.system
    return subcarrier_frequencies(s.center_frequency_hz, s.bandwidth_hz, s.subcarriers)


def link_spec_from_config(cfg, mode=None):
    mode = mode or cfg.device.mode
    tx, rx = layouts_from_config(cfg, mode)
    return LinkSpec(
        dual=(mode == "dpsim"),
        bits_per_user=tuple(cfg.system.bits_per_user),
        subcarriers=cfg.system.subcarriers,
        tx_layout=tx,
        rx_layout=rx,
        noise_power_w=dbm_to_watts(cfg.scene.noise_power_dbm),
        bn_momentum=cfg.training.bn_momentum,
        bn_eps=cfg.training.bn_eps,
        power_per_subcarrier=(cfg.training.power_control == "per_subcarrier"),
    )


def power_policy_from_config(cfg):
    p = cfg.training.power_policy
    return PowerPolicy(kind=p.kind, dbm=p.dbm, a=p.a, b=p.b,
                       lo_dbm=p.lo_dbm, hi_dbm=p.hi_dbm, draw=p.draw)


def train_settings_from_config(cfg, epochs=None, learning_rate=None, label="train"):
    t = cfg.training
    return TrainSettings(
        epochs=t.epochs if epochs is None else epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate if learning_rate is None else learning_rate,
        optimizer=t.optimizer,
        lr_decay=t.lr_decay,
        decay_every=t.decay_every_epochs,
        adam_beta1=t.adam_beta1,
        adam_beta2=t.adam_beta2,
        adam_eps=t.adam_eps,
        weight_decay=t.weight_decay,
        power=power_policy_from_config(cfg),
        channel_redraw_every=t.channel_redraw_every,
        checkpoint_every=t.checkpoint_every,
        soft_clamp=t.soft_clamp,
        phase_label=label,
    )


def channel_grids(cfg, mode=None):
    tx, rx = layouts_from_config(cfg, mode)
    return ((tx.units_x, tx.units_y, tx.unit_spacing),
            (rx.units_x, rx.units_y, rx.unit_spacing))


def build_link(cfg, hub, mode=None):
    """Model plus a statistical channel provider for the configured scene."""
    mode = mode or cfg.device.mode
    spec = link_spec_from_config(cfg, mode)
    freqs = frequencies_from_config(cfg)
    tx_prop = PropagationSet.build(spec.tx_layout, freqs)
    rx_prop = PropagationSet.build(spec.rx_layout, freqs)
    model = build_model(spec, tx_prop, rx_prop, hub.child("init"))
    scene = scene_from_config(cfg)
    tx_grid, rx_grid = channel_grids(cfg, mode)
    provider = StatisticalChannelProvider(scene, tx_grid, rx_grid, freqs,
                                          hub.child("channel"), dual=spec.dual)
    return model, scene, provider
