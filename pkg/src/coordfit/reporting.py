"""Run outputs: CSV timelines, manifests with content hashes, simple raster overlays."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time

import numpy as np

from .errors import FormatError

ALIGN_COLUMNS = ["iter", "loss", "psnr", "ssim", "corner_err_px", "lr_theta", "lr_pose"]
NERF_COLUMNS = ["iter", "loss", "psnr", "ssim", "rot_err_deg", "trans_err", "lr_theta", "lr_pose"]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(value)


def write_csv(path, rows, columns):
    """Write rows (dicts) with a fixed column order; missing entries are left empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_csv(path):
    """Rows as dicts of floats (empty cells become None, text stays text)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                    continue
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
            out.append(parsed)
    return out


def timeline_columns(rows, base):
    """``base`` restricted to columns that occur in at least one row."""
    present = set().union(*(r.keys() for r in rows)) if rows else set()
    return [c for c in base if c in present]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Collects every emitted file and writes ``manifest.json`` at the end of a run."""

    def __init__(self, out_dir, command, config, seed, provenance):
        self.out_dir = os.path.abspath(out_dir)
        self.command = command
        self.config = config
        self.seed = seed
        self.provenance = provenance
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.files = []

    def path(self, *parts):
        p = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.files.append(p)
        return p

    def write(self, extra=None):
        entries = []
        for p in sorted(set(self.files)):
            if not os.path.exists(p):
                raise FormatError(f"declared output {p} was not written")
            entries.append({"path": os.path.relpath(p, self.out_dir), "sha256": sha256_file(p)})
        cfg = dataclasses.asdict(self.config) if dataclasses.is_dataclass(self.config) else self.config
        doc = {
            "command": self.command,
            "seed": self.seed,
            "config": cfg,
            "provenance": self.provenance,
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "output_dir": self.out_dir,
            "files": entries,
        }
        if extra:
            doc.update(extra)
        with open(os.path.join(self.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        return doc


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)


# -- raster helpers ------------------------------------------------------------


def draw_polygon(img, corners, color, samples_per_px=2):
    """Draw a closed polygon (K, 2) of (column, row) points onto an (H, W, 3) image copy."""
    out = np.array(img, dtype=np.float64, copy=True)
    if out.ndim == 2 or out.shape[-1] == 1:
        out = np.repeat(out.reshape(out.shape[0], out.shape[1], 1), 3, axis=-1)
    H, W = out.shape[:2]
    pts = np.asarray(corners, dtype=np.float64)
    for a, b in zip(pts, np.roll(pts, -1, axis=0)):
        n = int(np.ceil(np.linalg.norm(b - a) * samples_per_px)) + 1
        s = np.linspace(0.0, 1.0, n)[:, None]
        line = np.round(a + s * (b - a)).astype(int)
        ok = (line[:, 0] >= 0) & (line[:, 0] < W) & (line[:, 1] >= 0) & (line[:, 1] < H)
        out[line[ok, 1], line[ok, 0]] = color
    return out


def tile(images, cols=None, pad=2, fill=1.0):
    """Arrange equally sized (H, W, C) images on a grid."""
    images = [np.asarray(i, dtype=np.float64) for i in images]
    n = len(images)
    cols = n if cols is None else cols
    rows = int(math.ceil(n / cols))
    H, W, C = images[0].shape
    canvas = np.full((rows * H + (rows + 1) * pad, cols * W + (cols + 1) * pad, C), fill)
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        y, x = pad + r * (H + pad), pad + c * (W + pad)
        canvas[y:y + H, x:x + W] = im
    return canvas


def normalise(arr, lo=None, hi=None):
    """Linearly map to [0, 1]; constant arrays map to 0."""
    arr = np.asarray(arr, dtype=np.float64)
    lo = float(np.min(arr)) if lo is None else lo
    hi = float(np.max(arr)) if hi is None else hi
    if hi <= lo:
        return np.zeros_like(arr)
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
