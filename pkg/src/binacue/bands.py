"""Third-octave band machinery and interaural cue measurement.

Band edges are computed from the exact base-2 midband frequencies
``1000 * 2**(n/3)`` so that adjacent bands tile without gaps; the ISO 266
nominal values (400, 500, 630, ...) are kept as labels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import HrtfDataset, sin_deg
from .io import atomic_path

ISO266_NOMINAL = (
    25, 31.5, 40, 50, 63, 80, 100, 125, 160, 200, 250, 315, 400, 500, 630, 800,
    1000, 1250, 1600, 2000, 2500, 3150, 4000, 5000, 6300, 8000, 10000, 12500,
    16000, 20000,
)
_INDEX_OF_1K = ISO266_NOMINAL.index(1000)

DEFAULT_SEARCH_US = 1500.0


class BandError(ValueError):
    pass


@dataclass(frozen=True)
class ThirdOctaveBand:
    index: int  # band number relative to 1 kHz

    @classmethod
    def from_nominal(cls, nominal_hz: float) -> "ThirdOctaveBand":
        for i, nom in enumerate(ISO266_NOMINAL):
            if np.isclose(nom, nominal_hz):
                return cls(i - _INDEX_OF_1K)
        raise BandError(f"{nominal_hz} Hz is not an ISO 266 third-octave centre")

    @property
    def nominal_hz(self) -> float:
        return float(ISO266_NOMINAL[self.index + _INDEX_OF_1K])

    @property
    def center_hz(self) -> float:
        return 1000.0 * 2.0 ** (self.index / 3)

    @property
    def lower_hz(self) -> float:
        return 1000.0 * 2.0 ** ((self.index - 0.5) / 3)

    @property
    def upper_hz(self) -> float:
        return 1000.0 * 2.0 ** ((self.index + 0.5) / 3)

    def __repr__(self):
        return f"ThirdOctaveBand({self.nominal_hz:g} Hz)"


def third_octave_bands(lo_hz=400, hi_hz=2000) -> list[ThirdOctaveBand]:
    """Bands whose nominal centre lies in [lo_hz, hi_hz]."""
    return [ThirdOctaveBand(i - _INDEX_OF_1K) for i, nom in enumerate(ISO266_NOMINAL)
            if lo_hz <= nom <= hi_hz]


ITD_BANDS = tuple(third_octave_bands(400, 2000))


def next_pow2(n) -> int:
    return 1 << int(np.ceil(np.log2(max(int(np.ceil(n)), 1))))


def analysis_nfft(n_samples, fs) -> int:
    """FFT size for band measurements: room for linear correlation and
    at least ~5 Hz bin spacing so the narrowest (400 Hz) band spans many bins."""
    return next_pow2(max(2 * n_samples, fs / 5.0))


def band_mask(freqs, band: ThirdOctaveBand) -> np.ndarray:
    return (freqs >= band.lower_hz) & (freqs <= band.upper_hz)


def band_filter(x, band: ThirdOctaveBand, fs) -> np.ndarray:
    """Zero-phase FFT brick-wall bandpass along the last axis; length is kept."""
    if fs <= 2 * band.upper_hz:
        raise BandError(f"band {band.nominal_hz:g} Hz lies above the Nyquist frequency of fs={fs}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    spec[..., ~band_mask(np.fft.rfftfreq(n, 1.0 / fs), band)] = 0.0
    return np.fft.irfft(spec, n=n, axis=-1)


def _peak_lag(spec_a, spec_b, nfft, max_lag):
    """Sub-sample lag k maximising sum_n a[n] b[n + k], |k| <= max_lag."""
    cc = np.fft.irfft(np.conj(spec_a) * spec_b, n=nfft)
    lags = np.arange(-max_lag, max_lag + 1)
    window = cc[lags % nfft]
    peak = window.max()
    if not np.isfinite(peak):
        raise BandError("cross-correlation is not finite")
    candidates = lags[window == peak]
    lag = int(candidates[np.argmin(np.abs(candidates))])
    i = lag + max_lag
    if 0 < i < window.size - 1:
        ym, y0, yp = window[i - 1], window[i], window[i + 1]
        denom = ym - 2.0 * y0 + yp
        if denom < 0:
            return lag + 0.5 * (ym - yp) / denom
    return float(lag)


def estimate_itd(left, right, band: ThirdOctaveBand, fs, search_us=DEFAULT_SEARCH_US) -> float:
    """Band ITD in microseconds from the interaural cross-correlation maximum.

    Positive values mean the right channel leads. The estimate is the
    antisymmetrised mean of the (left, right) and (right, left) peak searches,
    so swapping the channels negates the result exactly.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 1:
        raise BandError("left and right must be 1-D arrays of equal length")
    if fs <= 2 * band.upper_hz:
        raise BandError(f"band {band.nominal_hz:g} Hz lies above the Nyquist frequency of fs={fs}")
    n = left.size
    nfft = analysis_nfft(n, fs)
    mask = band_mask(np.fft.rfftfreq(nfft, 1.0 / fs), band)
    spec_l = np.fft.rfft(left, nfft) * mask
    spec_r = np.fft.rfft(right, nfft) * mask
    if not (np.any(spec_l) and np.any(spec_r)):
        raise BandError("correlation undefined: a channel has no energy in band "
                        f"{band.nominal_hz:g} Hz")
    max_lag = min(int(np.floor(search_us * 1e-6 * fs)), n - 1)
    lag_lr = _peak_lag(spec_l, spec_r, nfft, max_lag)
    lag_rl = _peak_lag(spec_r, spec_l, nfft, max_lag)
    # right delayed by k samples relative to left <=> left leads <=> negative ITD
    return -(lag_lr - lag_rl) / 2.0 / fs * 1e6


@dataclass(frozen=True)
class BandTable:
    """Per-azimuth, per-band values (ITD in microseconds or ILD in dB)."""
    azimuths_deg: np.ndarray
    band_centers_hz: np.ndarray  # nominal centres
    values: np.ndarray  # (n_azimuths, n_bands)
    quantity: str = "itd_us"

    def column(self, center_hz) -> np.ndarray:
        j = int(np.flatnonzero(np.isclose(self.band_centers_hz, center_hz))[0])
        return self.values[:, j]

    def row(self, azimuth_deg) -> np.ndarray:
        i = int(np.argmin(np.abs(self.azimuths_deg - azimuth_deg)))
        return self.values[i]

    def restrict(self, lo_hz, hi_hz) -> "BandTable":
        keep = (self.band_centers_hz >= lo_hz) & (self.band_centers_hz <= hi_hz)
        return BandTable(self.azimuths_deg, self.band_centers_hz[keep],
                         self.values[:, keep], self.quantity)

    def to_csv(self, path) -> None:
        with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["azimuth_deg", "band_center_hz", "value"])
            for az, row in zip(self.azimuths_deg, self.values):
                for fc, v in zip(self.band_centers_hz, row):
                    writer.writerow([f"{az:g}", f"{fc:g}", repr(float(v))])

    @classmethod
    def from_csv(cls, path, quantity="itd_us") -> "BandTable":
        with open(path, newline="") as fh:
            rows = [(float(r["azimuth_deg"]), float(r["band_center_hz"]), float(r["value"]))
                    for r in csv.DictReader(fh)]
        azs = np.unique([r[0] for r in rows])
        fcs = np.unique([r[1] for r in rows])
        values = np.full((azs.size, fcs.size), np.nan)
        for az, fc, v in rows:
            values[np.searchsorted(azs, az), np.searchsorted(fcs, fc)] = v
        if np.isnan(values).any():
            raise BandError(f"{path}: table is not a complete azimuth x band grid")
        return cls(azs, fcs, values, quantity)


def estimate_itd_table(ds: HrtfDataset, bands=ITD_BANDS, search_us=DEFAULT_SEARCH_US) -> BandTable:
    """ITD per azimuth and band; bands below 400 Hz are deliberately not measured."""
    values = np.array([[estimate_itd(pair[0], pair[1], b, ds.sample_rate_hz, search_us)
                        for b in bands] for pair in ds.irs])
    return BandTable(ds.azimuths_deg.copy(), np.array([b.nominal_hz for b in bands]),
                     values.reshape(len(ds), len(bands)), "itd_us")


def band_powers(x, bands, fs, nfft=None) -> np.ndarray:
    """Band power (sum of squared one-sided spectrum bins) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    nfft = nfft or analysis_nfft(x.shape[-1], fs)
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    power = np.abs(np.fft.rfft(x, nfft, axis=-1)) ** 2
    return np.stack([power[..., band_mask(freqs, b)].sum(axis=-1) for b in bands], axis=-1)


def estimate_ild_table(ds: HrtfDataset, bands=ITD_BANDS) -> BandTable:
    """ILD per azimuth and band: 10*log10(P_right / P_left).

    The sign follows the ITD convention: positive values favour the right ear.
    """
    p = band_powers(ds.irs, bands, ds.sample_rate_hz)  # (n_az, 2, n_bands)
    if np.any(p <= 0):
        az_i, ear, b_i = np.argwhere(p <= 0)[0]
        raise BandError(f"zero band power at azimuth {ds.azimuths_deg[az_i]:g}, "
                        f"{'left' if ear == 0 else 'right'} ear, band {bands[b_i].nominal_hz:g} Hz")
    return BandTable(ds.azimuths_deg.copy(), np.array([b.nominal_hz for b in bands]),
                     10.0 * np.log10(p[:, 1] / p[:, 0]), "ild_db")


def kuhn_itd(theta_deg, regime="low", head_radius_m=0.0875, c_mps=343.0):
    """Rigid-sphere ITD in microseconds: (3a/c)·sinθ at low, (2a/c)·sinθ at high frequencies."""
    factor = {"low": 3.0, "high": 2.0}.get(regime)
    if factor is None:
        raise ValueError(f"regime must be 'low' or 'high', got {regime!r}")
    return factor * head_radius_m / c_mps * sin_deg(theta_deg) * 1e6
