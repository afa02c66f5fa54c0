"""Render BER report CSVs as log-scale curves, byte-stable for identical inputs."""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError

# BER of 0 cannot sit on a log axis; clip to one decade under the smallest
# resolvable error fraction instead of dropping the point.
_LOG_FLOOR_SCALE = 0.1


def read_report_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"report {path} is empty")
    return rows


def plot_report(report_csv, out_path, title=None):
    """One figure: aggregate BER vs the swept axis, one series per mode."""
    rows = [r for r in read_report_csv(report_csv) if r["user"] == "all"]
    if not rows:
        raise ConfigError(f"report {report_csv} has no aggregate rows")
    axis_name = rows[0]["axis"]
    series = {}
    floor = None
    for r in rows:
        x = float(r["axis_value"]) if _is_number(r["axis_value"]) else r["axis_value"]
        ber = float(r["ber"])
        bits = int(r["bits_tested"]) if r["bits_tested"] else 0
        if bits:
            floor = min(floor or 1.0, _LOG_FLOOR_SCALE / bits)
        series.setdefault(r["mode"], []).append((x, ber))

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    markers = {"sim": "o", "dpsim": "s"}
    for mode in sorted(series):
        pts = series[mode]
        xs = [p[0] for p in pts]
        ys = np.asarray([p[1] for p in pts])
        if floor:
            ys = np.maximum(ys, floor)
        ax.semilogy(xs, ys, marker=markers.get(mode, "x"), label=mode.upper())
    ax.set_xlabel(axis_name)
    ax.set_ylabel("BER")
    ax.grid(True, which="both", alpha=0.3)
    if len(series) > 1:
        ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    # Pin the PNG metadata so identical inputs give identical bytes.
    fig.savefig(out_path, dpi=120, metadata={"Software": "simofdm"})
    plt.close(fig)
    return out_path


def _is_number(text):
    try:
        float(text)
        return True
    except (TypeError, ValueError):
        return False
