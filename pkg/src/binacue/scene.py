"""Anechoic target/interferer scenes: HRTF convolution, SNR calibration, limiting."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audiometry import HalfGainFilter, apply_with_limit, filter_signal
from .bands import band_powers, third_octave_bands
from .cues import ConditionName
from .dataset import HrtfDataset
from .io import read_wav, write_json, write_wav

log = logging.getLogger(__name__)

# layout -> (target azimuth, interferer azimuths); positive azimuth is to the right
LAYOUTS = {
    "central": (0.0, (-60.0, 60.0)),
    "lateral": (60.0, (-60.0, 0.0)),
    "colocated": (0.0, (0.0, 0.0)),
}
CALIBRATIONS = ("ear", "source")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Scene description.

    ``calibration="ear"`` sets levels from the rendered binaural stems (RMS over
    both channels after trimming the first N_ir samples); ``"source"`` scales
    the dry signals before convolution. Each interferer sits at
    ``base_level_db_spl`` and the target at ``base_level_db_spl + snr_db``.
    """
    layout: str = "central"
    condition: str = "unprocessed"
    snr_db: float = 5.0
    base_level_db_spl: float = 65.0
    cap_db_spl: float = 85.0
    spl_ref_db: float = 100.0
    calibration: str = "ear"
    target_audio: str | None = None
    interferer_audio: tuple = ()

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise SceneError(f"unknown layout {self.layout!r}; valid: {', '.join(LAYOUTS)}")
        cond = ConditionName.parse(self.condition)
        object.__setattr__(self, "condition", cond.value)
        if cond is ConditionName.colocated and self.layout != "colocated":
            raise SceneError("the colocated condition requires the colocated layout")
        if self.layout == "colocated" and cond not in (ConditionName.colocated,
                                                        ConditionName.unprocessed):
            raise SceneError("the colocated layout is defined for unprocessed HRTFs only")
        if not np.isfinite(self.snr_db):
            raise SceneError("snr_db must be finite")
        if self.calibration not in CALIBRATIONS:
            raise SceneError(f"calibration must be one of {CALIBRATIONS}")
        interferers = self.interferer_audio
        if isinstance(interferers, (str, Path)):
            interferers = (interferers,)
        object.__setattr__(self, "interferer_audio", tuple(str(p) for p in interferers))

    @classmethod
    def from_mapping(cls, cfg) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise SceneError(f"unknown scene keys: {', '.join(sorted(unknown))}")
        return cls(**cfg)

    @property
    def target_azimuth(self) -> float:
        return LAYOUTS[self.layout][0]

    @property
    def interferer_azimuths(self) -> tuple:
        return LAYOUTS[self.layout][1]

    def dataset_key(self) -> str:
        """Condition whose HRTFs render this scene; colocated uses the unprocessed set."""
        return "unprocessed" if self.layout == "colocated" else self.condition

    def as_dict(self):
        return asdict(self)


@dataclass
class RenderedScene:
    mix: np.ndarray  # (2, n)
    stems: dict  # name -> (2, n)
    fs: int
    metadata: dict = field(default_factory=dict)


def render_source(audio, azimuth_deg, ds: HrtfDataset) -> np.ndarray:
    """Convolve mono ``audio`` with the pair at the nearest stored azimuth.

    Output shape is (2, len(audio) + N_ir - 1).
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise SceneError("render_source expects mono audio")
    if audio.size == 0:
        raise SceneError("audio is empty")
    i = ds.nearest_index(azimuth_deg)
    stored = ds.azimuths_deg[i]
    if not np.isclose((stored - azimuth_deg + 180) % 360 - 180, 0.0, atol=1e-9):
        log.warning("azimuth %g deg not in dataset; using nearest %g deg", azimuth_deg, stored)
    return fftconvolve(audio[None, :], ds.irs[i], axes=-1)


def stem_level_db(stem, n_trim, spl_ref_db=100.0) -> float:
    """Level of a binaural stem: RMS over both channels after dropping ``n_trim`` onset samples."""
    body = np.asarray(stem)[:, n_trim:]
    if body.shape[-1] == 0:
        raise SceneError("signal is shorter than the onset trim")
    rms = np.sqrt(np.mean(body ** 2))
    if rms == 0:
        raise SceneError("cannot calibrate a silent source")
    return float(spl_ref_db + 20 * np.log10(rms))


def _fit_length(x, n):
    return x[:n] if x.size >= n else np.pad(x, (0, n - x.size))


def mix_scene(spec: SceneSpec, ds_by_condition, target, interferers,
              half_gain: HalfGainFilter | None = None) -> RenderedScene:
    """Render and calibrate all sources, then optionally filter and limit.

    ``interferers`` is one mono signal (reused for every interferer) or a list
    with one signal per interferer. All signals are zero-padded or cut to the
    target length. Filtering and limiting act on every stem with the same
    gain, so the mix stays the exact sum of the stems.
    """
    key = spec.dataset_key()
    if key not in ds_by_condition:
        raise SceneError(f"no HRTF dataset supplied for condition '{key}'")
    ds = ds_by_condition[key]
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 1 or target.size == 0:
        raise SceneError("target must be non-empty mono audio")
    n = target.size
    if isinstance(interferers, np.ndarray) and interferers.ndim == 1:
        interferers = [interferers] * len(spec.interferer_azimuths)
    interferers = [np.asarray(x, dtype=np.float64) for x in interferers]
    if len(interferers) != len(spec.interferer_azimuths):
        raise SceneError(f"layout {spec.layout} needs {len(spec.interferer_azimuths)} "
                         f"interferer signals, got {len(interferers)}")
    sources = [("target", target, spec.target_azimuth, spec.base_level_db_spl + spec.snr_db)]
    for k, (x, az) in enumerate(zip(interferers, spec.interferer_azimuths), 1):
        if x.ndim != 1 or x.size == 0:
            raise SceneError(f"interferer {k} must be non-empty mono audio")
        sources.append((f"interferer_{k}", _fit_length(x, n), az, spec.base_level_db_spl))

    stems, gains = {}, {}
    for name, x, az, level in sources:
        if spec.calibration == "source":
            rms = np.sqrt(np.mean(x ** 2))
            if rms == 0:
                raise SceneError(f"{name} is silent")
            g = 10 ** ((level - spec.spl_ref_db) / 20) / rms
            stems[name] = render_source(g * x, az, ds)
        else:
            stem = render_source(x, az, ds)
            g = 10 ** ((level - stem_level_db(stem, ds.n_ir, spec.spl_ref_db)) / 20)
            stems[name] = g * stem
        gains[name] = 20 * np.log10(g)

    if half_gain is not None:
        stems = {k: filter_signal(v, half_gain) for k, v in stems.items()}
    _, reduction = apply_with_limit(sum(stems.values()), None, spec.cap_db_spl, spec.spl_ref_db)
    if reduction:
        scale = 10 ** (-reduction / 20)
        stems = {k: v * scale for k, v in stems.items()}
    mix = np.zeros_like(stems["target"])
    for v in stems.values():
        mix = mix + v

    meta = {
        "layout": spec.layout,
        "condition": spec.condition,
        "hrtf_set": key,
        "snr_db": spec.snr_db,
        "calibration": spec.calibration,
        "azimuths_deg": {name: az for name, _, az, _ in sources},
        "applied_gains_db": gains,
        "half_gain_filter": half_gain is not None,
        "limiter_reduction_db": reduction,
        "sample_rate_hz": ds.sample_rate_hz,
    }
    return RenderedScene(mix, stems, ds.sample_rate_hz, meta)


def better_ear_snr(scene: RenderedScene, bands=None) -> dict:
    """Long-term band SNR per ear (target vs summed interferers) and the better ear.

    Returns a dict with ``band_centers_hz``, ``snr_db`` of shape (2, n_bands)
    (left, right) and ``better_ear_db`` = max over ears.
    """
    if bands is None:
        bands = third_octave_bands(125, min(8000, scene.fs / 2.5))
    target = scene.stems["target"]
    noise = sum(v for k, v in scene.stems.items() if k != "target")
    if isinstance(noise, int):
        raise SceneError("scene has no interferers")
    p_t = band_powers(target, bands, scene.fs)
    p_n = band_powers(noise, bands, scene.fs)
    if np.any(p_n <= 0):
        raise SceneError("zero interferer energy in at least one band")
    snr = 10 * np.log10(np.maximum(p_t, np.finfo(float).tiny) / p_n)
    return {"band_centers_hz": np.array([b.nominal_hz for b in bands]),
            "snr_db": snr, "better_ear_db": snr.max(axis=0)}


def load_mono(path, fs_expected=None) -> np.ndarray:
    fs, data = read_wav(path)
    if data.shape[0] != 1:
        raise SceneError(f"{path}: expected mono audio, found {data.shape[0]} channels")
    if fs_expected is not None and fs != fs_expected:
        raise SceneError(f"{path}: sample rate {fs} Hz differs from the HRTF rate {fs_expected} Hz")
    return data[0]


def write_scene(scene: RenderedScene, path, extra_meta=None, write_stems=False) -> None:
    """Stereo float WAV of the mix with a ``.json`` metadata sidecar."""
    path = Path(path)
    write_wav(path, scene.fs, scene.mix)
    if write_stems:
        for name, stem in scene.stems.items():
            write_wav(path.with_name(f"{path.stem}_{name}.wav"), scene.fs, stem)
    write_json(path.with_suffix(".json"), {**scene.metadata, **(extra_meta or {})})
