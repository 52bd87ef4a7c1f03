"""File formats: binary PGM images, metric tables and run configuration."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

METRIC_COLUMNS = ("k", "sampled_fraction", "new_coverage", "psnr", "ssim", "dice", "eig_proxy", "oracle_eig", "analytic_entropy", "skipped_steps")


def write_pgm(path, image, vmin: Optional[float] = None, vmax: Optional[float] = None) -> None:
    """Write an 8-bit binary PGM, scaling ``[vmin, vmax]`` to ``[0, 255]``.

    Defaults to the image range; constant images map to zero.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2D image")
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    return np.frombuffer(raw[pos : pos + rows * cols], dtype=np.uint8).reshape(rows, cols)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> None:
    """CSV with a fixed column order; ``None`` becomes an empty cell."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_table(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics(path, trace) -> None:
    rows = [vars(e) for e in trace.entries]
    write_table(path, rows, METRIC_COLUMNS)


def write_ensemble(path, states) -> None:
    """One row per particle, one column per state coordinate."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    np.savetxt(path, states, delimiter=",", fmt="%.17g")


def read_ensemble(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def write_mask_csv(path, weights) -> None:
    """Soft mask weights as a rows x cols CSV grid."""
    np.savetxt(path, np.asarray(weights, dtype=float), delimiter=",", fmt="%.17g")


class ConfigError(ValueError):
    """Invalid run configuration; ``line`` points into the config file when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path, self.line = path, line
        where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; see the README for the key list."""

    seed: int
    shape: List[int] = field(default_factory=lambda: [16, 16])
    noise_sigma: float = 0.1
    prior: Dict[str, Any] = field(default_factory=lambda: {"source": "analytic", "kind": "power_law"})
    truth: Dict[str, Any] = field(default_factory=lambda: {"source": "prior"})
    schedule: Dict[str, Any] = field(default_factory=dict)
    optimizer: Dict[str, Any] = field(default_factory=dict)
    mask: Dict[str, Any] = field(default_factory=dict)
    sweep: Dict[str, Any] = field(default_factory=dict)
    training: Dict[str, Any] = field(default_factory=dict)
    output: Optional[str] = None
    figures: bool = True


def _key_line(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_config(path) -> RunConfig:
    """Parse a JSON run configuration, reporting problems with line numbers."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config not found", path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", path, e.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", path, 1)
    known = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", path, _key_line(text, key))
    if "seed" not in raw:
        raise ConfigError("missing required key 'seed'", path, 1)
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer", path, _key_line(text, "seed"))
    cfg = RunConfig(**raw)
    if len(cfg.shape) != 2 or min(cfg.shape) < 1:
        raise ConfigError("shape must be [rows, cols]", path, _key_line(text, "shape"))
    if not cfg.noise_sigma > 0:
        raise ConfigError("noise_sigma must be positive", path, _key_line(text, "noise_sigma"))
    src = cfg.prior.get("source", "analytic")
    if src not in ("analytic", "trained", "file"):
        raise ConfigError(f"unknown prior source {src!r}", path, _key_line(text, "source"))
    if src in ("trained", "file"):
        ref = cfg.prior.get("path")
        if ref is None:
            raise ConfigError("prior source needs a 'path'", path, _key_line(text, "prior"))
        ref_path = (path.parent / ref) if not Path(ref).is_absolute() else Path(ref)
        if not ref_path.is_file():
            raise ConfigError(f"prior file not found: {ref}", path, _key_line(text, "path"))
        cfg.prior = dict(cfg.prior, path=str(ref_path))
    fr = cfg.sweep.get("fractions")
    if fr is not None and (not fr or any(not (0 < f <= 1) for f in fr)):
        raise ConfigError("sweep fractions must be a non-empty list in (0, 1]", path, _key_line(text, "fractions"))
    return cfg
