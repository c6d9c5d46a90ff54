"""HRTF cue manipulations: ITD-to-ILD transformation, ITD/ILD removal, condition presets.

All edits operate on one-sided spectra of zero-padded impulse responses
(:class:`HrtfSpectra`). :func:`make_condition` wraps the round trip from a
time-domain :class:`~binacue.dataset.HrtfDataset` and back.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum

import numpy as np

from .bands import ITD_BANDS, BandTable, estimate_itd_table, next_pow2
from .dataset import HrtfDataset

log = logging.getLogger(__name__)


class CueError(ValueError):
    pass


class ConditionName(str, Enum):
    unprocessed = "unprocessed"
    noITD = "noITD"
    noILD = "noILD"
    transformITD_sub = "transformITD_sub"
    transformITD_add = "transformITD_add"
    colocated = "colocated"

    @classmethod
    def parse(cls, name) -> "ConditionName":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(c.value for c in cls)
            raise CueError(f"unknown condition {name!r}; valid names: {valid}") from None


@dataclass(frozen=True)
class TransformParams:
    max_ild_db: float = 12.0
    max_itd_us: float = 700.0
    const_below_hz: float = 400.0
    full_apply_upto_hz: float = 1000.0
    transition_upto_hz: float = 2000.0
    smoothing: bool = True
    # pipeline feeding transformITD_sub: ITDs removed ("noitd") or ILDs removed ("noild")
    sub_base: str = "noitd"

    def __post_init__(self):
        if not 0 < self.const_below_hz < self.full_apply_upto_hz < self.transition_upto_hz:
            raise CueError("need 0 < const_below_hz < full_apply_upto_hz < transition_upto_hz")
        if self.max_itd_us <= 0:
            raise CueError("max_itd_us must be positive")
        if self.sub_base not in ("noitd", "noild"):
            raise CueError(f"sub_base must be 'noitd' or 'noild', got {self.sub_base!r}")

    @classmethod
    def from_mapping(cls, mapping) -> "TransformParams":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise CueError(f"unknown transform parameter(s): {', '.join(sorted(unknown))}")
        return cls(**mapping)

    def check_rate(self, fs):
        if self.transition_upto_hz >= fs / 2:
            raise CueError(f"transition_upto_hz={self.transition_upto_hz} must be below fs/2")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class HrtfSpectra:
    """One-sided spectra, shape (n_azimuths, n_fft // 2 + 1) per ear."""
    left: np.ndarray
    right: np.ndarray
    azimuths_deg: np.ndarray
    sample_rate_hz: int
    n_fft: int

    @property
    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.n_fft, 1.0 / self.sample_rate_hz)

    def with_spectra(self, left, right) -> "HrtfSpectra":
        return replace(self, left=left, right=right)


def to_spectra(ds: HrtfDataset, n_fft=None) -> HrtfSpectra:
    """Zero-padded spectra; default FFT size is the next power of two >= 4 * n_ir."""
    n_fft = n_fft or next_pow2(4 * ds.n_ir)
    if n_fft < ds.n_ir:
        raise CueError("n_fft shorter than the impulse responses")
    spec = np.fft.rfft(ds.irs, n_fft, axis=-1)
    return HrtfSpectra(spec[:, 0], spec[:, 1], ds.azimuths_deg, ds.sample_rate_hz, n_fft)


def to_time(spectra: HrtfSpectra) -> np.ndarray:
    """(n_azimuths, 2, n_fft) impulse responses."""
    return np.stack([np.fft.irfft(spectra.left, spectra.n_fft, axis=-1),
                     np.fft.irfft(spectra.right, spectra.n_fft, axis=-1)], axis=1)


def _parseval_weights(n_bins, n_fft):
    w = np.full(n_bins, 2.0)
    w[0] = 1.0
    if n_fft % 2 == 0:
        w[-1] = 1.0
    return w / n_fft


def spectral_energy(spectra: HrtfSpectra) -> np.ndarray:
    """Per-azimuth energy sum_k |L(k)|^2 + |R(k)|^2 over the full DFT (equals time-domain energy)."""
    w = _parseval_weights(spectra.left.shape[-1], spectra.n_fft)
    return (np.abs(spectra.left) ** 2 + np.abs(spectra.right) ** 2) @ w


def delta_ild(itd_us, params: TransformParams = TransformParams()):
    """Linear ITD-to-ILD map (12 dB per 700 us by default); sign preserved, not clamped."""
    return params.max_ild_db * np.asarray(itd_us, dtype=np.float64) / params.max_itd_us


def gain_factor(delta_ild_db):
    return 10.0 ** (np.asarray(delta_ild_db, dtype=np.float64) / 20.0)


def crossfade_weight(freqs, params: TransformParams) -> np.ndarray:
    """1 up to full_apply_upto_hz, raised cosine on log-frequency down to 0 at transition_upto_hz."""
    f = np.asarray(freqs, dtype=np.float64)
    lo, hi = params.full_apply_upto_hz, params.transition_upto_hz
    with np.errstate(divide="ignore"):
        pos = np.clip(np.log(np.maximum(f, lo) / lo) / np.log(hi / lo), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * pos))


def third_octave_smooth(values, freqs) -> np.ndarray:
    """Mean of ``values`` over bins within [f/2^(1/6), f*2^(1/6)] around each bin."""
    freqs = np.asarray(freqs, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    lo = np.searchsorted(freqs, freqs * 2.0 ** (-1 / 6), side="left")
    hi = np.searchsorted(freqs, freqs * 2.0 ** (1 / 6), side="right")
    return (csum[hi] - csum[lo]) / (hi - lo)


def _band_profile(band_values, freqs, bands=ITD_BANDS):
    """Piecewise-constant profile over bins. Bins below the lowest band take the
    lowest band's value; bins above the top band hold the top band's value."""
    edges = np.array([b.lower_hz for b in bands] + [bands[-1].upper_hz])
    idx = np.clip(np.searchsorted(edges, freqs, side="right") - 1, 0, len(bands) - 1)
    return np.asarray(band_values, dtype=np.float64)[idx]


def gain_profile_db(itd_row_us, freqs, params: TransformParams = TransformParams()) -> np.ndarray:
    """Interaural gain profile in dB (positive boosts the right ear) for one azimuth.

    ``itd_row_us`` holds the ITDs of the 400...2000 Hz third-octave bands.
    Below the lowest band at or above ``const_below_hz`` that band's value is held; bands up to
    ``full_apply_upto_hz`` apply fully; the crossfade weight then takes the
    profile to exactly 0 dB at ``transition_upto_hz`` and above.
    """
    used = np.array([b.nominal_hz >= params.const_below_hz for b in ITD_BANDS])
    if not used.any():
        raise CueError(f"no ITD band at or above const_below_hz={params.const_below_hz}")
    bands = [b for b, u in zip(ITD_BANDS, used) if u]
    row = np.asarray(itd_row_us, dtype=np.float64)[used]
    profile = _band_profile(delta_ild(row, params), freqs, bands)
    if params.smoothing:
        profile = third_octave_smooth(profile, freqs)
    return profile * crossfade_weight(freqs, params)


def _table_rows(itds: BandTable, azimuths):
    centers = [b.nominal_hz for b in ITD_BANDS]
    cols = []
    for fc in centers:
        hit = np.flatnonzero(np.isclose(itds.band_centers_hz, fc))
        if hit.size == 0:
            raise CueError(f"ITD table is missing band {fc:g} Hz")
        cols.append(hit[0])
    rows = []
    for az in azimuths:
        hit = np.flatnonzero(np.isclose(itds.azimuths_deg, az))
        if hit.size == 0:
            raise CueError(f"ITD table has no entry for azimuth {az:g}")
        rows.append(itds.values[hit[0], cols])
    return np.array(rows)


def apply_transform(spectra: HrtfSpectra, itds: BandTable,
                    params: TransformParams = TransformParams()) -> HrtfSpectra:
    """ITD-to-ILD transformation followed by per-azimuth energy matching."""
    params.check_rate(spectra.sample_rate_hz)
    rows = _table_rows(itds, spectra.azimuths_deg)
    if not np.all(np.isfinite(rows)):
        raise CueError("ITD table contains non-finite values")
    over = np.abs(rows) > params.max_itd_us
    if over.any():
        log.warning("%d band ITD(s) exceed %g us; ILD changes beyond %g dB are applied unclamped",
                    int(over.sum()), params.max_itd_us, params.max_ild_db)
    freqs = spectra.freqs
    left = np.empty_like(spectra.left)
    right = np.empty_like(spectra.right)
    for i, row in enumerate(rows):
        profile = gain_profile_db(row, freqs, params)
        sqrt_alpha = gain_factor(profile / 2.0)
        if not np.all(np.isfinite(sqrt_alpha)) or np.any(sqrt_alpha <= 0):
            raise CueError(f"invalid gain factor at azimuth {spectra.azimuths_deg[i]:g}")
        left[i] = spectra.left[i] / sqrt_alpha
        right[i] = spectra.right[i] * sqrt_alpha
    out = spectra.with_spectra(left, right)
    return match_energy(out, spectral_energy(spectra))


def match_energy(spectra: HrtfSpectra, target_energy) -> HrtfSpectra:
    """Scale both ears so each azimuth's energy equals ``target_energy``."""
    energy = spectral_energy(spectra)
    scale = np.sqrt(np.divide(target_energy, energy, out=np.ones_like(energy), where=energy > 0))
    return spectra.with_spectra(spectra.left * scale[:, None], spectra.right * scale[:, None])


def unwrapped_phase(spec, rel_floor=1e-12) -> np.ndarray:
    """Phase unwrapped along frequency from DC. Bins whose magnitude is below
    ``rel_floor`` times the peak take phase interpolated from valid neighbours."""
    mag = np.abs(spec)
    valid = mag > rel_floor * mag.max() if mag.max() > 0 else np.zeros(mag.shape, bool)
    k = np.arange(spec.size)
    if valid.sum() == 0:
        return np.zeros(spec.size)
    phase = np.unwrap(np.angle(spec[valid]))
    if valid.all():
        return phase
    return np.interp(k, k[valid], phase)


def _force_real_edges(spec, n_fft):
    """Snap DC (and Nyquist for even n_fft) to the nearest real value of equal magnitude."""
    edges = [0, -1] if n_fft % 2 == 0 else [0]
    for k in edges:
        v = spec[..., k]
        spec[..., k] = np.abs(v) * np.where(np.real(v) < 0, -1.0, 1.0)
    return spec


def remove_itd(spectra: HrtfSpectra) -> HrtfSpectra:
    """Replace both ears' unwrapped phase by their mean; magnitudes untouched."""
    left = np.empty_like(spectra.left)
    right = np.empty_like(spectra.right)
    for i in range(spectra.left.shape[0]):
        mean_phase = 0.5 * (unwrapped_phase(spectra.left[i]) + unwrapped_phase(spectra.right[i]))
        rot = np.exp(1j * mean_phase)
        left[i] = np.abs(spectra.left[i]) * rot
        right[i] = np.abs(spectra.right[i]) * rot
    left = _force_real_edges(left, spectra.n_fft)
    right = _force_real_edges(right, spectra.n_fft)
    return spectra.with_spectra(left, right)


def remove_ild(spectra: HrtfSpectra) -> HrtfSpectra:
    """Give both ears the RMS magnitude sqrt((|L|^2 + |R|^2) / 2), keeping phases.

    A zero-magnitude bin has no phase to keep; it receives the common
    magnitude with zero phase.
    """
    mag_l = np.abs(spectra.left)
    mag_r = np.abs(spectra.right)
    common = np.sqrt(0.5 * (mag_l ** 2 + mag_r ** 2))
    unit_l = np.divide(spectra.left, mag_l, out=np.ones_like(spectra.left), where=mag_l > 0)
    unit_r = np.divide(spectra.right, mag_r, out=np.ones_like(spectra.right), where=mag_r > 0)
    return spectra.with_spectra(unit_l * common, unit_r * common)


def make_condition(ds: HrtfDataset, cond, params: TransformParams = TransformParams(),
                   itds: BandTable | None = None) -> HrtfDataset:
    """Build one listening-test HRTF condition from an unprocessed dataset.

    Transform conditions use ITDs measured on ``ds`` itself unless ``itds`` is
    given. The result keeps the input IR length; because truncating the padded
    IRs back to that length loses a little energy, every processed azimuth is
    rescaled to its input energy as the final step.
    """
    cond = ConditionName.parse(cond)
    if cond in (ConditionName.unprocessed, ConditionName.colocated):
        return ds.replace_irs(ds.irs.copy(), name=f"{ds.name}:{cond.value}")

    spectra = to_spectra(ds)
    if cond is ConditionName.noITD:
        out = remove_itd(spectra)
    elif cond is ConditionName.noILD:
        out = remove_ild(spectra)
    else:
        if itds is None:
            itds = estimate_itd_table(ds)
        if cond is ConditionName.transformITD_add:
            base = spectra
        elif params.sub_base == "noitd":
            base = remove_itd(spectra)
        else:
            base = remove_ild(spectra)
        out = apply_transform(base, itds, params)

    irs = to_time(out)[..., :ds.n_ir]
    e_in = np.sum(ds.irs ** 2, axis=(1, 2))
    e_out = np.sum(irs ** 2, axis=(1, 2))
    scale = np.sqrt(np.divide(e_in, e_out, out=np.ones_like(e_in), where=e_out > 0))
    return ds.replace_irs(irs * scale[:, None, None], name=f"{ds.name}:{cond.value}")


def energy_ratio(before: HrtfDataset, after: HrtfDataset) -> np.ndarray:
    """Per-azimuth output/input energy."""
    return np.sum(after.irs ** 2, axis=(1, 2)) / np.sum(before.irs ** 2, axis=(1, 2))

