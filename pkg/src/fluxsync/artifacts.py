"""Run artifacts on disk: time-series CSV, metrics JSON and optional plots.

CSV layout::

    # fluxsync timeseries v1
    # values: %.17g (every float64 round-trips exactly)
    # <key>: <value>            (any further metadata, e.g. config_sha256)
    time_s [s],WPG1.v_dc [V],...
    0,1110,...

Every file is written to a temporary sibling first and moved into place,
so a failed write never leaves a partial file under the final name.
"""
from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CSV_FORMAT = "fluxsync timeseries v1"
FLOAT_FMT = "%.17g"


class ArtifactError(OSError):
    """An artifact could not be written or read."""


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temporary file and ``os.replace``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".part", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _header_name(name: str, unit: str) -> str:
    return f"{name} [{unit}]"


def render_csv(channels: dict, units: dict, meta: dict | None = None) -> bytes:
    """CSV bytes of a channel mapping whose first key is ``time_s``.

    Parameters
    ----------
    channels : dict of str -> ndarray
        Equal-length columns, ``time_s`` first.
    units : dict of str -> str
        Unit label per channel; ``time_s`` defaults to ``s``.
    meta : dict, optional
        Extra ``# key: value`` header lines, in the given order.
    """
    names = list(channels)
    if not names or names[0] != "time_s":
        raise ValueError("the first channel must be time_s")
    n = len(channels["time_s"])
    if any(len(channels[k]) != n for k in names):
        raise ValueError("channels differ in length")
    buf = io.StringIO()
    buf.write(f"# {CSV_FORMAT}\n")
    buf.write(f"# values: {FLOAT_FMT} (every float64 round-trips exactly)\n")
    for key, value in (meta or {}).items():
        text = str(value).replace("\n", " ")
        buf.write(f"# {key}: {text}\n")
    buf.write(",".join(_header_name(k, units.get(k, "s" if k == "time_s" else "")) for k in names))
    buf.write("\n")
    if n:
        data = np.column_stack([np.asarray(channels[k], dtype=float) for k in names])
        np.savetxt(buf, data, fmt=FLOAT_FMT, delimiter=",")
    return buf.getvalue().encode("ascii")


def parse_csv(text: str) -> tuple[dict, dict, dict]:
    """Inverse of :func:`render_csv`; returns ``(channels, units, meta)``."""
    lines = text.splitlines()
    meta = {}
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        body = lines[k][1:].strip()
        if ": " in body:
            key, value = body.split(": ", 1)
            meta[key] = value
        elif body:
            meta.setdefault("format", body)
        k += 1
    if k >= len(lines):
        raise ArtifactError("CSV has no header row")
    if meta.get("format") != CSV_FORMAT:
        raise ArtifactError(f"not a {CSV_FORMAT} file")
    names, units = [], {}
    for col in lines[k].split(","):
        name, _, unit = col.partition(" [")
        names.append(name)
        units[name] = unit[:-1] if unit.endswith("]") else unit
    body = "\n".join(lines[k + 1:])
    if body.strip():
        data = np.loadtxt(io.StringIO(body), delimiter=",", dtype=float, ndmin=2)
    else:
        data = np.zeros((0, len(names)))
    if data.shape[1] != len(names):
        raise ArtifactError("row width does not match the header")
    channels = {name: data[:, j].copy() for j, name in enumerate(names)}
    return channels, units, meta


def read_csv(path) -> tuple[dict, dict, dict]:
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise ArtifactError(f"{path}: {exc.strerror or exc}") from None
    return parse_csv(text)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def render_json(obj) -> bytes:
    return (json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n").encode()


def write_run(out_dir, art, cfg: dict, cfg_hash: str, plots: bool = False) -> list[Path]:
    """Write ``timeseries.csv`` and ``metrics.json`` (and plots) for one run.

    An incomplete run is flagged in both files (``status`` header line and
    ``completed`` field) rather than left looking like a finished one.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    status = "completed" if art.completed else f"FAILED: {art.error}"
    meta = {"scenario": cfg.get("name", ""), "config_sha256": cfg_hash,
            "dt_s": repr(float(cfg["sim"]["dt"])), "status": status}
    csv_path = out / "timeseries.csv"
    atomic_write(csv_path, render_csv(art.channels, art.units, meta))
    report = {
        "completed": art.completed,
        "error": art.error,
        "failed_step": art.failed_step,
        "config_sha256": cfg_hash,
        "metrics": art.metrics,
        "segments": art.segments,
        "config": cfg,
    }
    json_path = out / "metrics.json"
    atomic_write(json_path, render_json(report))
    written = [csv_path, json_path]
    if plots:
        written += plot_csv(csv_path, out)
    return written


# ------------------------------------------------------------------ plots
_FIGURES = (
    ("dc_link", "DC-link voltage", ".v_dc"),
    ("inverter_current", "inverter current", ".i_l_"),
    ("transformer_current", "transformer current", ".i_t_"),
    ("transformer_flux", "transformer flux", ".psi_t_"),
    ("power", "PCC power", (".p_out", ".q_out")),
    ("load_bus_voltage", "load bus voltage", "bus"),
)


def plot_csv(csv_path, out_dir) -> list[Path]:
    """One PNG per figure, drawn only from the CSV."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed, skipping plots")
        return []
    channels, units, _ = read_csv(csv_path)
    t = channels["time_s"]
    written = []
    for stem, title, key in _FIGURES:
        keys = key if isinstance(key, tuple) else (key,)
        cols = [c for c in channels if c != "time_s"
                and any((c.startswith(k) if k == "bus" else k in c) for k in keys)]
        if not cols:
            continue
        fig, ax = plt.subplots(figsize=(8, 4))
        for c in cols:
            ax.plot(t, channels[c], lw=0.7, label=f"{c} [{units.get(c, '')}]")
        ax.set_xlabel("time [s]")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        if len(cols) <= 12:
            ax.legend(fontsize=6, ncol=3)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=110)
        plt.close(fig)
        path = Path(out_dir) / f"{stem}.png"
        atomic_write(path, buf.getvalue())
        written.append(path)
    return written


# ---------------------------------------------------------------- compare
def compare_channels(a: dict, b: dict) -> dict:
    """Per-channel differences of run ``b`` against run ``a``.

    When the time grids differ, ``b`` is linearly interpolated onto the part
    of ``a``'s grid both runs cover.  For each common channel the result holds
    ``max_abs``, ``rms`` and ``max_rel`` (``max_abs`` over the peak of ``|a|``).
    """
    ta, tb = a["time_s"], b["time_s"]
    same_grid = len(ta) == len(tb) and np.array_equal(ta, tb)
    if same_grid:
        mask = np.ones(len(ta), dtype=bool)
    else:
        mask = (ta >= tb[0]) & (ta <= tb[-1]) if len(tb) else np.zeros(len(ta), bool)
    out = {}
    for name in a:
        if name == "time_s" or name not in b:
            continue
        xa = a[name][mask]
        xb = b[name][mask] if same_grid else np.interp(ta[mask], tb, b[name])
        d = xb - xa
        scale = float(np.max(np.abs(xa))) if len(xa) else 0.0
        max_abs = float(np.max(np.abs(d))) if len(d) else 0.0
        out[name] = {
            "max_abs": max_abs,
            "rms": float(np.sqrt(np.mean(d * d))) if len(d) else 0.0,
            "max_rel": max_abs / scale if scale > 0 else (0.0 if max_abs == 0 else float("inf")),
        }
    return {"same_time_grid": bool(same_grid), "samples": int(mask.sum()),
            "only_in_a": sorted(set(a) - set(b)), "only_in_b": sorted(set(b) - set(a)),
            "channels": out}
