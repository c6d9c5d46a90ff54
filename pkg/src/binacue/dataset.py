"""HRTF datasets: validation, the manifest+WAV on-disk format, spherical-head fixtures.

Conventions used throughout the package
---------------------------------------
* Azimuth is measured on the horizontal plane in degrees, in [-180, 180).
  Positive azimuth places the source on the listener's right.
* ``irs[i, 0]`` is the left-ear impulse response, ``irs[i, 1]`` the right ear.
* A positive ITD means the signal leads at the right ear.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import FormatError, read_wav, write_json, write_wav

MANIFEST = "manifest.json"


class DatasetError(ValueError):
    """Invalid dataset contents or an ill-formed dataset directory."""


@dataclass(frozen=True)
class HrtfDataset:
    sample_rate_hz: int
    azimuths_deg: np.ndarray
    irs: np.ndarray  # (n_azimuths, 2, n_ir)
    name: str = "hrtf"

    def __post_init__(self):
        az = np.array(self.azimuths_deg, dtype=np.float64).reshape(-1)
        irs = np.array(self.irs, dtype=np.float64)
        if int(self.sample_rate_hz) != self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise DatasetError(f"sample rate must be a positive integer, got {self.sample_rate_hz}")
        if az.size == 0:
            raise DatasetError("dataset has no azimuths")
        if irs.ndim != 3 or irs.shape[0] != az.size or irs.shape[1] != 2:
            raise DatasetError(
                f"irs must have shape (n_azimuths={az.size}, 2, n_ir), got {irs.shape}")
        if irs.shape[2] == 0:
            raise DatasetError("impulse responses are empty")
        if np.any(az < -180.0) or np.any(az >= 180.0):
            raise DatasetError("azimuths must lie in [-180, 180)")
        if np.any(np.diff(az) <= 0):
            raise DatasetError("azimuths must be strictly increasing without duplicates")
        if not np.all(np.isfinite(irs)):
            raise DatasetError("impulse responses contain non-finite samples")
        az.flags.writeable = False
        irs.flags.writeable = False
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))
        object.__setattr__(self, "azimuths_deg", az)
        object.__setattr__(self, "irs", irs)

    @property
    def n_ir(self) -> int:
        return self.irs.shape[2]

    def __len__(self):
        return self.azimuths_deg.size

    def nearest_index(self, azimuth_deg: float) -> int:
        """Index of the stored azimuth closest to ``azimuth_deg`` on the circle."""
        diff = (self.azimuths_deg - azimuth_deg + 180.0) % 360.0 - 180.0
        return int(np.argmin(np.abs(diff)))

    def pair(self, azimuth_deg: float) -> np.ndarray:
        """(2, n_ir) IR pair at the nearest stored azimuth."""
        return self.irs[self.nearest_index(azimuth_deg)]

    def replace_irs(self, irs, name=None) -> "HrtfDataset":
        return HrtfDataset(self.sample_rate_hz, self.azimuths_deg, irs,
                           self.name if name is None else name)

    def subset(self, azimuths) -> "HrtfDataset":
        idx = [self.nearest_index(a) for a in sorted(azimuths)]
        return HrtfDataset(self.sample_rate_hz, self.azimuths_deg[idx], self.irs[idx], self.name)


def _entry_filename(azimuth_deg):
    return f"az{azimuth_deg:+08.3f}.wav"


def save_dataset(ds: HrtfDataset, path) -> None:
    """Write ``ds`` as ``manifest.json`` plus one float32 stereo WAV per azimuth."""
    path = Path(path)
    if len(ds) == 0:
        raise DatasetError("refusing to save an empty dataset")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {path}: {exc}") from exc
    entries = []
    for az, pair in zip(ds.azimuths_deg, ds.irs):
        fname = _entry_filename(az)
        write_wav(path / fname, ds.sample_rate_hz, pair, dtype=np.float32)
        entries.append({"azimuth_deg": float(az), "file": fname})
    write_json(path / MANIFEST, {
        "name": ds.name,
        "sample_rate_hz": ds.sample_rate_hz,
        "entries": entries,
    })


def load_dataset(path) -> HrtfDataset:
    """Load and validate a dataset directory written by :func:`save_dataset`."""
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    root = manifest_path.parent
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST} found at {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"ill-formed manifest {manifest_path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise DatasetError("ill-formed manifest: top level must be an object")
    for key in ("sample_rate_hz", "entries"):
        if key not in manifest:
            raise DatasetError(f"ill-formed manifest: missing field '{key}'")
    entries = manifest["entries"]
    if not isinstance(entries, list) or not entries:
        raise DatasetError("ill-formed manifest: 'entries' must be a non-empty list")
    fs_declared = manifest["sample_rate_hz"]

    rows = []
    for entry in entries:
        try:
            az = float(entry["azimuth_deg"])
            fname = entry["file"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"ill-formed manifest entry {entry!r}") from exc
        try:
            fs, data = read_wav(root / fname)
        except FormatError as exc:
            raise DatasetError(str(exc)) from exc
        if data.shape[0] != 2:
            raise DatasetError(
                f"{fname}: channel count is {data.shape[0]}, expected 2 (left, right)")
        if fs != fs_declared:
            raise DatasetError(
                f"{fname}: sample rate {fs} Hz differs from manifest ({fs_declared} Hz); "
                "mixed sample rates are not supported")
        rows.append((az, fname, data))

    lengths = {data.shape[1] for _, _, data in rows}
    if len(lengths) > 1:
        detail = ", ".join(f"{fname}={data.shape[1]}" for _, fname, data in rows)
        raise DatasetError(f"IR length mismatch between files: {detail}")
    rows.sort(key=lambda r: r[0])
    return HrtfDataset(
        sample_rate_hz=fs_declared,
        azimuths_deg=np.array([r[0] for r in rows]),
        irs=np.stack([r[2] for r in rows]),
        name=str(manifest.get("name", root.name)),
    )


def sin_deg(theta_deg):
    """Sine of an angle in degrees, exact at multiples of 90 degrees."""
    theta = np.asarray(theta_deg, dtype=np.float64)
    out = np.sin(np.deg2rad(theta))
    quarter = np.remainder(theta, 360.0)
    out = np.where(quarter % 180.0 == 0.0, 0.0, out)
    out = np.where(quarter == 90.0, 1.0, out)
    out = np.where(quarter == 270.0, -1.0, out)
    return out


@dataclass(frozen=True)
class SphericalHeadSpec:
    """Parameters of the rigid-sphere fixture generator.

    ``tilt_db`` is the broadband level difference (ipsilateral minus
    contralateral) at +-90 degrees; it scales with sin(azimuth).
    """
    head_radius_m: float = 0.0875
    speed_of_sound_mps: float = 343.0
    ir_length_samples: int = 512
    sample_rate_hz: int = 44100
    tilt_db: float = 0.0
    sinc_half_width: int = 32

    def __post_init__(self):
        if self.head_radius_m <= 0 or self.speed_of_sound_mps <= 0:
            raise DatasetError("head radius and speed of sound must be positive")
        if self.sample_rate_hz <= 0:
            raise DatasetError("sample rate must be positive")
        if self.sinc_half_width < 32:
            raise DatasetError("fractional-delay interpolator needs at least 64 taps")
        min_len = 3 * self.head_radius_m / self.speed_of_sound_mps * self.sample_rate_hz
        if self.ir_length_samples < min_len:
            raise DatasetError(
                f"ir_length_samples={self.ir_length_samples} cannot hold a "
                f"{min_len:.1f}-sample interaural delay")
        support = 2 * (self.sinc_half_width + 1) + self.max_delay_samples
        if self.ir_length_samples < support:
            raise DatasetError(
                f"ir_length_samples must be >= {int(np.ceil(support))} for this interpolator")

    @property
    def max_delay_samples(self) -> float:
        return 2 * self.head_radius_m / self.speed_of_sound_mps * self.sample_rate_hz

    def itd_seconds(self, azimuth_deg):
        """Broadband interaural delay (2a/c)·sin(azimuth); positive = right leads."""
        return 2 * self.head_radius_m / self.speed_of_sound_mps * sin_deg(azimuth_deg)


def fractional_delay(n_samples, delay, half_width=32):
    """Blackman-windowed sinc impulse delayed by ``delay`` (fractional) samples."""
    x = np.arange(n_samples) - delay
    w = np.where(np.abs(x) < half_width,
                 0.42 + 0.5 * np.cos(np.pi * x / half_width)
                 + 0.08 * np.cos(2 * np.pi * x / half_width),
                 0.0)
    return np.sinc(x) * w


def synth_spherical(spec: SphericalHeadSpec, azimuths, name="spherical") -> HrtfDataset:
    """Pure-delay (plus optional broadband tilt) HRIR pairs for a spherical head."""
    azimuths = np.sort(np.asarray(azimuths, dtype=np.float64))
    n = spec.ir_length_samples
    center = n / 2.0
    irs = np.empty((azimuths.size, 2, n))
    for i, az in enumerate(azimuths):
        half = 0.5 * float(spec.itd_seconds(az)) * spec.sample_rate_hz
        tilt = 0.5 * spec.tilt_db * float(sin_deg(az))
        irs[i, 0] = 10 ** (-tilt / 20) * fractional_delay(n, center + half, spec.sinc_half_width)
        irs[i, 1] = 10 ** (tilt / 20) * fractional_delay(n, center - half, spec.sinc_half_width)
    return HrtfDataset(spec.sample_rate_hz, azimuths, irs, name)
