"""Reconstruction quality metrics (NMSE, PSNR, SSIM, data-term NMSE) and the
per-slice report container with CSV/JSON serialization.

SSIM reuses the differentiable graph implementation so training losses and
reported numbers share one definition; here only values are extracted.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import ssim as ssim_graph

CSV_COLUMNS = ["case_id", "slice", "model", "R", "nmse", "psnr", "ssim", "dnmse"]
MASKED_COLUMNS = ["nmse_fg", "psnr_fg", "ssim_fg"]


def _magnitude(x) -> np.ndarray:
    x = np.asarray(x)
    return np.abs(x) if np.iscomplexobj(x) else x.astype(np.float64, copy=False)


def nmse(x_rec, x_ref) -> float:
    """Squared error normalized by the squared reference norm."""
    rec = _magnitude(x_rec)
    ref = _magnitude(x_ref)
    if rec.shape != ref.shape:
        raise ValueError(f"nmse shape mismatch: {rec.shape} vs {ref.shape}")
    denom = float(np.sum(ref**2))
    if denom == 0.0:
        raise ValueError("zero reference norm")
    return float(np.sum((rec - ref) ** 2)) / denom


def psnr(x_rec, x_ref, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    rec = _magnitude(x_rec)
    ref = _magnitude(x_ref)
    if rec.shape != ref.shape:
        raise ValueError(f"psnr shape mismatch: {rec.shape} vs {ref.shape}")
    dr = float(np.max(ref)) if data_range is None else float(data_range)
    if dr <= 0:
        raise ValueError(f"data_range must be positive, got {dr}")
    mse = float(np.mean((rec - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(dr**2 / mse)


def ssim_value(a, b, window: int = 7, data_range: float | None = None) -> float:
    return float(ssim_graph(_magnitude(a), _magnitude(b), window=window,
                            data_range=data_range).value)


def evaluate_metrics(x_rec, x_ref, m=None, data_range: float | None = None,
                     window: int = 7) -> dict:
    """NMSE/PSNR/SSIM of one image pair, magnitudes compared.

    ``data_range`` defaults to the reference maximum. When a binary foreground
    mask ``m`` is given, masked variants are reported alongside with the same
    data range.
    """
    rec = _magnitude(x_rec)
    ref = _magnitude(x_ref)
    if rec.shape != ref.shape:
        raise ValueError(f"evaluate_metrics shape mismatch: {rec.shape} vs {ref.shape}")
    if float(np.sum(ref**2)) == 0.0:
        raise ValueError("zero reference norm")
    dr = float(np.max(ref)) if data_range is None else float(data_range)
    entry = {
        "nmse": nmse(rec, ref),
        "psnr": psnr(rec, ref, data_range=dr),
        "ssim": ssim_value(rec, ref, window=window, data_range=dr),
    }
    if m is not None:
        fg = np.asarray(m, dtype=np.float64)
        if fg.shape != ref.shape:
            raise ValueError(f"foreground shape {fg.shape} does not match image {ref.shape}")
        entry["nmse_fg"] = nmse(rec * fg, ref * fg)
        entry["psnr_fg"] = psnr(rec * fg, ref * fg, data_range=dr)
        entry["ssim_fg"] = ssim_value(rec * fg, ref * fg, window=window, data_range=dr)
    return entry


def dnmse(slices) -> float:
    """Per-case mean of the normalized data-term residuals.

    ``slices`` is an iterable of (image_stack, measured_kspace, operator); each
    slice contributes ||A x - y||^2 / ||y||^2.
    """
    terms = []
    for x, y, op in slices:
        ny = float(np.sum(np.abs(y) ** 2))
        if ny == 0.0:
            raise ValueError("zero measurement norm")
        r = op.forward(x) - y
        terms.append(float(np.sum(np.abs(r) ** 2)) / ny)
    if not terms:
        raise ValueError("dnmse needs at least one slice")
    return float(np.mean(terms))


def stable_hash(obj) -> str:
    """Short deterministic hex digest of a JSON-serializable object."""
    text = obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _check_row(row: dict) -> None:
    if row["nmse"] < 0:
        raise ValueError(f"negative nmse {row['nmse']}")
    if not -1.0 <= row["ssim"] <= 1.0 + 1e-9:
        raise ValueError(f"ssim {row['ssim']} outside [-1, 1]")
    if row["nmse"] > 0 and not math.isfinite(row["psnr"]):
        raise ValueError("non-finite psnr for a non-identical pair")


@dataclass
class MetricReport:
    """Per-slice metric rows for one model, with per-case and overall means."""

    model: str
    config_hash: str = ""
    rows: list = field(default_factory=list)

    def add(self, case_id: str, slice_index: int, R: int, entry: dict,
            dnmse_term: float) -> None:
        row = {"case_id": case_id, "slice": int(slice_index), "model": self.model,
               "R": int(R), "nmse": entry["nmse"], "psnr": entry["psnr"],
               "ssim": entry["ssim"], "dnmse": float(dnmse_term)}
        for key in MASKED_COLUMNS:
            if key in entry:
                row[key] = entry[key]
        _check_row(row)
        self.rows.append(row)

    def _metric_columns(self) -> list:
        cols = ["nmse", "psnr", "ssim", "dnmse"]
        cols += [k for k in MASKED_COLUMNS if any(k in r for r in self.rows)]
        return cols

    def per_case(self) -> dict:
        cases: dict[str, list] = {}
        for row in self.rows:
            cases.setdefault(row["case_id"], []).append(row)
        out = {}
        for case_id, rows in cases.items():
            out[case_id] = {k: float(np.mean([r[k] for r in rows if k in r]))
                            for k in self._metric_columns()}
        return out

    def overall(self) -> dict:
        if not self.rows:
            return {}
        return {k: float(np.mean([r[k] for r in self.rows if k in r]))
                for k in self._metric_columns()}

    def to_csv(self, path) -> None:
        columns = CSV_COLUMNS + [k for k in MASKED_COLUMNS
                                 if any(k in r for r in self.rows)]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for row in self.rows:
                writer.writerow([row.get(c, "") for c in columns])

    def to_json(self, path) -> None:
        payload = {"model": self.model, "config_hash": self.config_hash,
                   "rows": self.rows, "per_case": self.per_case(),
                   "overall": self.overall()}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)

    @staticmethod
    def read_csv(path) -> list:
        """Parse rows written by :meth:`to_csv` back to typed dicts."""
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            rows = []
            for raw in reader:
                row = {"case_id": raw["case_id"], "slice": int(raw["slice"]),
                       "model": raw["model"], "R": int(raw["R"])}
                for key, val in raw.items():
                    if key not in row and val != "":
                        row[key] = float(val)
                rows.append(row)
        return rows
