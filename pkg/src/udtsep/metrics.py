"""Separation quality metrics: SI-SDR, projection-based SIR/SAR, box statistics."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EvalItem",
    "EvalReport",
    "Decomposition",
    "si_sdr",
    "bss_decompose",
    "sir_sar",
    "summarize",
    "evaluate_items",
    "CLAMP_DB",
]

CLAMP_DB = 200.0
# Components whose energy is below this fraction of the estimate's energy are
# roundoff residue of an exact zero (240 dB down, past the summary clamp).
NEGLIGIBLE = 1e-24


def _ratio_db(num: float, den: float) -> float:
    if num == 0.0:
        return -math.inf
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB; +inf for a perfect (scaled) estimate."""
    s = np.asarray(reference, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: reference {s.size}, estimate {e.size}")
    energy = float(s @ s)
    if energy == 0.0:
        raise ValueError("reference has zero energy")
    alpha = float(e @ s) / energy
    target = alpha * s
    err = target - e
    floor = NEGLIGIBLE * float(e @ e)
    t_energy = float(target @ target)
    if t_energy <= floor:
        return -math.inf
    err_energy = float(err @ err)
    return _ratio_db(t_energy, 0.0 if err_energy <= floor else err_energy)


@dataclass
class Decomposition:
    target: np.ndarray
    interference: np.ndarray
    artifacts: np.ndarray


def bss_decompose(estimate, target_ref, interferer_ref) -> Decomposition:
    """Split an estimate into target, interference and artifact parts.

    Uses instantaneous orthogonal projections (no distortion filters):
    ``target`` is the projection onto span(target_ref), ``interference`` the
    extra part captured by span(target_ref, interferer_ref), and
    ``artifacts`` the remainder.
    """
    e = np.asarray(estimate, dtype=np.float64).ravel()
    s1 = np.asarray(target_ref, dtype=np.float64).ravel()
    s2 = np.asarray(interferer_ref, dtype=np.float64).ravel()
    if not (e.size == s1.size == s2.size):
        raise ValueError("estimate and references must have equal lengths")
    e11, e22, e12 = float(s1 @ s1), float(s2 @ s2), float(s1 @ s2)
    if e11 == 0.0:
        raise ValueError("target reference has zero energy")
    det = e11 * e22 - e12 * e12
    if e22 == 0.0 or det <= 1e-12 * e11 * e22:
        raise ValueError("references are collinear")
    b1, b2 = float(s1 @ e), float(s2 @ e)
    s_target = (b1 / e11) * s1
    c1 = (e22 * b1 - e12 * b2) / det
    c2 = (e11 * b2 - e12 * b1) / det
    p_both = c1 * s1 + c2 * s2
    e_interf = p_both - s_target
    e_artif = e - p_both
    floor = NEGLIGIBLE * float(e @ e)
    parts = [np.zeros_like(v) if float(v @ v) <= floor else v for v in (s_target, e_interf, e_artif)]
    return Decomposition(*parts)


def sir_sar(dec: Decomposition) -> tuple[float, float]:
    t = float(dec.target @ dec.target)
    if t == 0.0:
        raise ValueError("SIR undefined: target component is zero")
    i = float(dec.interference @ dec.interference)
    a = float(dec.artifacts @ dec.artifacts)
    ti = dec.target + dec.interference
    return _ratio_db(t, i), _ratio_db(float(ti @ ti), a)


def summarize(values) -> tuple[float, float, float, int]:
    """Median, 25th and 75th percentile (linear interpolation).

    Infinite entries are clamped to +/-200 dB first. Returns
    ``(median, q25, q75, n_clamped)``.
    """
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty list")
    if np.any(np.isnan(v)):
        raise ValueError("cannot summarize NaN values")
    n_clamped = int(np.count_nonzero(np.isinf(v)))
    v = np.clip(v, -CLAMP_DB, CLAMP_DB)
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return float(med), float(q25), float(q75), n_clamped


@dataclass
class EvalItem:
    id: str
    target: np.ndarray
    interferer: np.ndarray
    estimate: np.ndarray


@dataclass
class EvalReport:
    ids: list[str] = field(default_factory=list)
    si_sdr: list[float] = field(default_factory=list)
    sir: list[float] = field(default_factory=list)
    sar: list[float] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def add(self, item_id: str, sdr: float, sir: float, sar: float) -> None:
        self.ids.append(item_id)
        self.si_sdr.append(sdr)
        self.sir.append(sir)
        self.sar.append(sar)

    def summary(self) -> dict:
        out = {"count": len(self.ids), "skipped": len(self.skipped), "clamped": 0}
        for name in ("si_sdr", "sir", "sar"):
            med, q25, q75, n = summarize(getattr(self, name))
            out[name] = {"median": med, "q25": q25, "q75": q75}
            out["clamped"] += n
        return out

    def write_csv(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "si_sdr", "sir", "sar"])
        for row in zip(self.ids, self.si_sdr, self.sir, self.sar):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        _write_atomic(path, buf.getvalue())

    def write_summary(self, path) -> None:
        _write_atomic(path, json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def evaluate_items(items) -> EvalReport:
    report = EvalReport()
    for it in items:
        dec = bss_decompose(it.estimate, it.target, it.interferer)
        try:
            sir, sar = sir_sar(dec)
        except ValueError:
            # no target component at all: report it as the worst possible SIR
            ti = dec.target + dec.interference
            sir = -math.inf
            sar = _ratio_db(float(ti @ ti), float(dec.artifacts @ dec.artifacts))
        report.add(it.id, si_sdr(it.target, it.estimate), sir, sar)
    return report
