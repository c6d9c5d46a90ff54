"""Audiograms, left/right symmetry screening, half-gain compensation filters and level limiting."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .io import atomic_path

AUDIOMETRIC_FREQS_HZ = (125, 250, 500, 1000, 2000, 4000, 8000)
FIR_ORDER = 300
SYMMETRY_LIMIT_DB = 10.0


class AudiogramError(ValueError):
    pass


@dataclass(frozen=True)
class Audiogram:
    """Hearing levels in dB HL per ear on the standard audiometric grid."""
    left: dict
    right: dict

    def __post_init__(self):
        ears = {}
        for ear in ("left", "right"):
            raw = getattr(self, ear)
            try:
                values = {float(k): float(v) for k, v in raw.items()}
            except (AttributeError, TypeError, ValueError) as exc:
                raise AudiogramError(f"{ear} ear must map frequency to dB HL") from exc
            missing = [f for f in AUDIOMETRIC_FREQS_HZ if f not in values]
            extra = sorted(set(values) - set(map(float, AUDIOMETRIC_FREQS_HZ)))
            if missing or extra:
                raise AudiogramError(
                    f"{ear} ear must cover exactly {AUDIOMETRIC_FREQS_HZ} Hz "
                    f"(missing {missing}, unexpected {extra})")
            if not all(np.isfinite(v) for v in values.values()):
                raise AudiogramError(f"{ear} ear has non-finite hearing levels")
            ears[ear] = values
        object.__setattr__(self, "left", ears["left"])
        object.__setattr__(self, "right", ears["right"])

    @classmethod
    def from_json(cls, path) -> "Audiogram":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(obj, dict) or not {"left", "right"} <= set(obj):
            raise AudiogramError(f"{path}: expected an object with 'left' and 'right'")
        return cls(obj["left"], obj["right"])

    @classmethod
    def symmetric(cls, levels) -> "Audiogram":
        """Both ears equal; ``levels`` is a sequence over AUDIOMETRIC_FREQS_HZ."""
        d = dict(zip(AUDIOMETRIC_FREQS_HZ, levels))
        return cls(d, dict(d))

    def as_arrays(self):
        f = np.array(AUDIOMETRIC_FREQS_HZ, dtype=np.float64)
        return (f, np.array([self.left[x] for x in f]), np.array([self.right[x] for x in f]))

    def average(self) -> np.ndarray:
        _, left, right = self.as_arrays()
        return 0.5 * (left + right)


def check_symmetry(a: Audiogram, limit_db=SYMMETRY_LIMIT_DB) -> dict:
    """Symmetric iff every |left - right| <= ``limit_db`` (inclusive)."""
    f, left, right = a.as_arrays()
    diff = np.abs(left - right)
    i = int(np.argmax(diff))
    return {"symmetric": bool(diff[i] <= limit_db), "worst_freq_hz": float(f[i]),
            "diff_db": float(diff[i])}


def half_gain_target_db(freqs_hz, hl_db) -> np.ndarray:
    """Target gain from octave-spaced Hann windows on a log2 axis.

    Each window peaks at HL/2 on its audiometric frequency and reaches zero
    one octave away, so neighbouring windows sum to a smooth curve that passes
    exactly through every HL/2 value. Negative HL gives zero gain. Outside
    125 Hz - 8 kHz the edge value is held.
    """
    gains = 0.5 * np.maximum(np.asarray(hl_db, dtype=np.float64), 0.0)
    centers = np.log2(np.array(AUDIOMETRIC_FREQS_HZ, dtype=np.float64))
    f = np.clip(np.asarray(freqs_hz, dtype=np.float64), AUDIOMETRIC_FREQS_HZ[0],
                AUDIOMETRIC_FREQS_HZ[-1])
    d = np.log2(f)[..., None] - centers
    w = np.where(np.abs(d) < 1.0, np.cos(0.5 * np.pi * d) ** 2, 0.0)
    return w @ gains


@dataclass(frozen=True)
class HalfGainFilter:
    coefficients: np.ndarray
    fs: int
    target_freqs_hz: np.ndarray
    target_gain_db: np.ndarray

    @property
    def order(self) -> int:
        return self.coefficients.size - 1

    @property
    def group_delay_samples(self) -> float:
        return self.order / 2

    def response(self, freqs_hz) -> np.ndarray:
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.fs
        n = np.arange(self.coefficients.size)
        return np.exp(-1j * np.outer(w, n)) @ self.coefficients

    def magnitude_db(self, freqs_hz) -> np.ndarray:
        return 20 * np.log10(np.abs(self.response(freqs_hz)))

    def to_csv(self, path):
        with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tap", "coefficient"])
            for i, c in enumerate(self.coefficients):
                writer.writerow([i, repr(float(c))])


def design_half_gain(a: Audiogram, fs=44100, order=FIR_ORDER) -> HalfGainFilter:
    """Linear-phase FIR (type I) matching the half-gain target.

    The zero-phase amplitude ``A(w) = sum_k a_k cos(k w)`` is fitted to the
    target on a dense grid by least squares, with equality constraints that
    pin the response to HL/2 at the seven audiometric frequencies. Residuals
    are weighted by 1/target so the fit approximates a dB-domain error and
    low-gain regions are not neglected.
    """
    if fs < 16000:
        raise AudiogramError(f"fs must be at least 16 kHz, got {fs}")
    if order % 2:
        raise AudiogramError("order must be even for a type I linear-phase filter")
    hl = a.average()
    half = order // 2
    k = np.arange(half + 1)
    grid = np.unique(np.concatenate([np.linspace(0.0, fs / 2, 8 * order),
                                     np.geomspace(20.0, fs / 2, 4 * order)]))
    anchors = np.array(AUDIOMETRIC_FREQS_HZ, dtype=np.float64)
    basis = np.cos(np.outer(2 * np.pi * grid / fs, k))
    target = 10 ** (half_gain_target_db(grid, hl) / 20)
    basis = basis / target[:, None]
    eq = np.cos(np.outer(2 * np.pi * anchors / fs, k))
    eq_target = 10 ** (half_gain_target_db(anchors, hl) / 20)
    n_eq = anchors.size
    kkt = np.block([[2 * basis.T @ basis, eq.T], [eq, np.zeros((n_eq, n_eq))]])
    rhs = np.concatenate([2 * basis.sum(axis=0), eq_target])
    amp = np.linalg.solve(kkt, rhs)[:half + 1]
    h = np.empty(order + 1)
    h[half] = amp[0]
    h[half + 1:] = amp[1:] / 2
    h[:half] = h[half + 1:][::-1]
    return HalfGainFilter(h, int(fs), anchors, half_gain_target_db(anchors, hl))


def level_db_spl(x, spl_ref_db=100.0) -> float:
    """SPL of the louder channel; 0 dBFS RMS corresponds to ``spl_ref_db``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rms = np.sqrt(np.mean(x ** 2, axis=-1)).max()
    return float(spl_ref_db + 20 * np.log10(rms)) if rms > 0 else float("-inf")


def filter_signal(x, filt: HalfGainFilter) -> np.ndarray:
    """Filter along the last axis, removing the group delay so the length is kept."""
    x = np.asarray(x, dtype=np.float64)
    y = fftconvolve(x, np.broadcast_to(filt.coefficients, x.shape[:-1] + filt.coefficients.shape),
                    axes=-1)
    d = filt.order // 2
    return y[..., d:d + x.shape[-1]]


def apply_with_limit(signal, filt: HalfGainFilter | None, level_cap_db_spl=85.0,
                     spl_ref_db=100.0):
    """Filter, then apply one broadband gain so the output stays at or below the cap.

    Returns
    -------
    out : np.ndarray
    reduction_db : float
        Applied attenuation (0 when the cap is not reached).
    """
    y = np.asarray(signal, dtype=np.float64) if filt is None else filter_signal(signal, filt)
    level = level_db_spl(y, spl_ref_db)
    if level <= level_cap_db_spl:
        return y, 0.0
    reduction = level - level_cap_db_spl
    return y * 10 ** (-reduction / 20), float(reduction)
