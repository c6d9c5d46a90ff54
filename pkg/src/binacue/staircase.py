"""Adaptive 1-up/2-down ITD threshold tracking with phase-shifted pure tones.

ITDs move on a logarithmic axis, ``20*log10(itd_us)`` ("dB" re 1 us), with
step sizes 8, 4, 2 and 1. The step shrinks after every second reversal; the
track ends after eight reversals at the final step and the threshold is the
mean of the last six of them.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_path, write_json

TEST_FREQS_HZ = (250, 500, 750, 1000, 1250)
SIDES = ("left", "right")


class StaircaseError(ValueError):
    pass


class ResponderError(RuntimeError):
    pass


@dataclass(frozen=True)
class FrequencyCondition:
    """Test frequency with its pi-phase ITD ceiling and starting ITD."""
    freq_hz: float

    def __post_init__(self):
        if self.freq_hz not in TEST_FREQS_HZ:
            raise StaircaseError(
                f"{self.freq_hz} Hz is not a supported test frequency; use one of {TEST_FREQS_HZ}")

    @property
    def max_itd_us(self) -> float:
        return 1e6 / (2.0 * self.freq_hz)

    @property
    def start_itd_us(self) -> float:
        return self.max_itd_us / 2.0


def itd_to_log(itd_us):
    itd_us = np.asarray(itd_us, dtype=np.float64)
    if np.any(itd_us <= 0):
        raise StaircaseError("linear ITD must be positive")
    return 20.0 * np.log10(itd_us)


def log_to_itd(log_itd):
    return 10.0 ** (np.asarray(log_itd, dtype=np.float64) / 20.0)


def itd_log_lin(x, direction="to_log"):
    """Convert between linear ITD (us) and log ITD; ``direction`` is 'to_log' or 'to_lin'."""
    if direction == "to_log":
        return itd_to_log(x)
    if direction == "to_lin":
        return log_to_itd(x)
    raise ValueError(f"direction must be 'to_log' or 'to_lin', got {direction!r}")


def itd_to_ipd(itd_us, freq_hz):
    """Interaural phase difference in radians, wrapped into [0, 2*pi)."""
    itd_us = np.asarray(itd_us, dtype=np.float64)
    if np.any(itd_us < 0):
        raise StaircaseError("ITD must be non-negative")
    degrees = 360.0 * freq_hz * itd_us * 1e-6
    return np.mod(degrees * np.pi / 180.0, 2 * np.pi)


@dataclass(frozen=True)
class StimulusSpec:
    duration_ms: float = 500.0
    ramp_ms: float = 50.0
    gap_ms: float = 500.0
    level_db_spl: float = 75.0
    fs: int = 44100
    # dB SPL that corresponds to an RMS of 1.0 (0 dBFS)
    spl_ref_db: float = 100.0

    def __post_init__(self):
        if self.ramp_ms > self.duration_ms / 2:
            raise StaircaseError("ramp must not exceed half the tone duration")

    @property
    def rms(self) -> float:
        return 10.0 ** ((self.level_db_spl - self.spl_ref_db) / 20.0)


def _gated_tone(freq_hz, phase, spec: StimulusSpec):
    n = int(round(spec.duration_ms * 1e-3 * spec.fs))
    n_ramp = int(round(spec.ramp_ms * 1e-3 * spec.fs))
    t = np.arange(n) / spec.fs
    tone = np.sin(2 * np.pi * freq_hz * t + phase)
    if n_ramp:
        ramp = np.hanning(2 * n_ramp)
        tone[:n_ramp] *= ramp[:n_ramp]
        tone[n - n_ramp:] *= ramp[n_ramp:]
    return tone * (spec.rms / np.sqrt(np.mean(tone ** 2)))


def _interval(side, freq_hz, itd_us, spec, mode):
    """One stereo interval lateralised toward ``side``."""
    sign = 1.0 if side == "right" else -1.0
    if mode == "itd":
        half = 0.5 * float(itd_to_ipd(itd_us, freq_hz))
        # the leading ear gets the phase advance
        return np.stack([_gated_tone(freq_hz, -sign * half, spec),
                         _gated_tone(freq_hz, sign * half, spec)])
    if mode == "ild":
        tone = _gated_tone(freq_hz, 0.0, spec)
        quiet = tone * 10 ** (-6.0 / 20)
        return np.stack([quiet, tone]) if side == "right" else np.stack([tone, quiet])
    raise StaircaseError(f"mode must be 'itd' or 'ild', got {mode!r}")


def synth_trial(itd_us, side_order, spec: StimulusSpec = StimulusSpec(), freq_hz=500,
                mode="itd") -> np.ndarray:
    """Two Hann-gated tones separated by silence, shape (2, n).

    ``side_order`` is "LR" (first interval left, second right) or "RL".
    In ``mode="ild"`` (training) the far ear is attenuated by 6 dB instead of
    applying a phase shift.
    """
    if side_order not in ("LR", "RL"):
        raise StaircaseError(f"side_order must be 'LR' or 'RL', got {side_order!r}")
    cond = FrequencyCondition(freq_hz)
    if itd_us > cond.max_itd_us * (1 + 1e-12):
        raise StaircaseError(
            f"ITD {itd_us} us exceeds the pi-phase maximum {cond.max_itd_us:g} us at {freq_hz} Hz")
    first, second = ("left", "right") if side_order == "LR" else ("right", "left")
    gap = np.zeros((2, int(round(spec.gap_ms * 1e-3 * spec.fs))))
    return np.concatenate([_interval(first, freq_hz, itd_us, spec, mode), gap,
                           _interval(second, freq_hz, itd_us, spec, mode)], axis=1)


class SimulatedResponder:
    """Logistic observer on the log-ITD axis with lapse rate ``lapse``.

    p(correct | x) = lapse/2 + (1 - lapse) * (0.5 + 0.5 / (1 + exp(-(x - mu) / slope)))
    """

    def __init__(self, threshold_log_itd, slope=2.0, lapse=0.02, seed=None):
        if slope <= 0 or not 0 <= lapse < 1:
            raise ValueError("slope must be positive and lapse in [0, 1)")
        self.mu = float(threshold_log_itd)
        self.slope = float(slope)
        self.lapse = float(lapse)
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def p_correct(self, log_itd):
        core = 0.5 + 0.5 / (1.0 + np.exp(-(np.asarray(log_itd) - self.mu) / self.slope))
        return self.lapse / 2 + (1 - self.lapse) * core

    def start(self, track_seed):
        seed = self.seed if self.seed is not None else [int(track_seed), 1]
        self._rng = np.random.default_rng(seed)

    def respond(self, itd_us, log_itd, side_order):
        correct = self._rng.random() < self.p_correct(log_itd)
        answer = "right" if side_order == "LR" else "left"
        return answer if correct else ("left" if answer == "right" else "right")

    def describe(self):
        return {"kind": "simulated", "threshold_log_itd": self.mu, "slope": self.slope,
                "lapse": self.lapse, "seed": self.seed}


class ScriptedResponder:
    """Replays a fixed list; True/False entries mean correct/incorrect,
    'left'/'right' entries are literal answers."""

    def __init__(self, responses):
        self.responses = list(responses)
        self._i = 0

    def start(self, track_seed):
        self._i = 0

    def respond(self, itd_us, log_itd, side_order):
        if self._i >= len(self.responses):
            raise ResponderError(f"scripted responder ran out after {self._i} responses")
        r = self.responses[self._i]
        self._i += 1
        if isinstance(r, (bool, np.bool_)):
            answer = "right" if side_order == "LR" else "left"
            return answer if r else ("left" if answer == "right" else "right")
        if r not in SIDES:
            raise ResponderError(f"invalid scripted response {r!r}")
        return r

    def describe(self):
        return {"kind": "scripted", "n_responses": len(self.responses)}


class InteractiveResponder:
    """Console prompt; audio playback is not part of this toolkit."""

    def __init__(self, input_fn=input, print_fn=print):
        self.input_fn = input_fn
        self.print_fn = print_fn

    def start(self, track_seed):
        pass

    def respond(self, itd_us, log_itd, side_order):
        while True:
            ans = self.input_fn(f"ITD {itd_us:.1f} us - second tone left or right? [l/r] ")
            ans = ans.strip().lower()
            if ans in ("l", "left"):
                return "left"
            if ans in ("r", "right"):
                return "right"
            self.print_fn("please answer 'l' or 'r'")

    def describe(self):
        return {"kind": "interactive"}


@dataclass(frozen=True)
class StopRule:
    step_sizes: tuple = (8.0, 4.0, 2.0, 1.0)
    reversals_per_step: int = 2
    final_reversals: int = 8
    threshold_reversals: int = 6
    max_trials: int = 500
    saturation_window: int = 20
    saturation_fraction: float = 0.8


@dataclass(frozen=True)
class Trial:
    itd_us: float
    log_itd: float
    side_order: str
    response: str
    correct: bool
    step_db: float


@dataclass
class StaircaseState:
    current_log_itd: float
    step_index: int = 0
    consecutive_correct: int = 0
    last_direction: int = 0
    reversals_at_step: int = 0
    reversal_log: list = field(default_factory=list)  # (log_itd, step_index)
    trial_log: list = field(default_factory=list)
    rng_seed: int = 0


@dataclass
class TrackResult:
    freq_hz: float
    threshold_log_itd: float
    threshold_itd_us: float
    reversals: list
    trials: list
    converged: bool
    saturated: str | None = None  # "ceiling", "floor" or None
    seed: int = 0
    responder: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "freq_hz": self.freq_hz,
            "threshold_log_itd": self.threshold_log_itd,
            "threshold_itd_us": self.threshold_itd_us,
            "n_trials": len(self.trials),
            "n_reversals": len(self.reversals),
            "reversals_log_itd": [r[0] for r in self.reversals],
            "converged": self.converged,
            "saturated": self.saturated,
            "seed": self.seed,
            "responder": self.responder,
        }

    def write_trials_csv(self, path):
        with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["trial", "itd_us", "log_itd", "side_order", "response",
                             "correct", "step_db"])
            for i, t in enumerate(self.trials, 1):
                writer.writerow([i, repr(t.itd_us), repr(t.log_itd), t.side_order,
                                 t.response, int(t.correct), t.step_db])

    def write_summary_json(self, path):
        write_json(path, self.summary())


def run_track(cond: FrequencyCondition, responder, stop_rule: StopRule = StopRule(),
              seed: int = 0) -> TrackResult:
    """Run one adaptive track; deterministic for a given seed and responder."""
    if isinstance(cond, (int, float)):
        cond = FrequencyCondition(cond)
    rng = np.random.default_rng(seed)
    responder.start(seed)
    x_max = float(itd_to_log(cond.max_itd_us))
    x_min = 0.0  # 1 us
    state = StaircaseState(current_log_itd=float(itd_to_log(cond.start_itd_us)), rng_seed=seed)
    last_step = len(stop_rule.step_sizes) - 1
    final_reversals = 0
    saturated = None
    converged = False

    for _ in range(stop_rule.max_trials):
        x = state.current_log_itd
        if x >= x_max:
            itd = cond.max_itd_us
        elif x <= x_min:
            itd = 1.0
        else:
            itd = float(log_to_itd(x))
        order = "LR" if rng.random() < 0.5 else "RL"
        response = responder.respond(itd, x, order)
        if response not in SIDES:
            raise ResponderError(f"responder returned {response!r}")
        correct = response == ("right" if order == "LR" else "left")
        step = stop_rule.step_sizes[state.step_index]
        state.trial_log.append(Trial(itd, x, order, response, bool(correct), step))

        direction = 0
        if correct:
            state.consecutive_correct += 1
            if state.consecutive_correct == 2:
                direction = -1
                state.consecutive_correct = 0
        else:
            state.consecutive_correct = 0
            direction = 1

        if direction:
            if state.last_direction and direction != state.last_direction:
                state.reversal_log.append((x, state.step_index))
                if state.step_index == last_step:
                    final_reversals += 1
                else:
                    state.reversals_at_step += 1
                    if state.reversals_at_step == stop_rule.reversals_per_step:
                        state.step_index += 1
                        state.reversals_at_step = 0
            state.last_direction = direction
            step = stop_rule.step_sizes[state.step_index]
            state.current_log_itd = min(max(x + direction * step, x_min), x_max)

        if final_reversals >= stop_rule.final_reversals:
            converged = True
            break
        saturated = _saturation(state.trial_log, cond, stop_rule)
        if saturated:
            break

    if converged:
        finals = [r[0] for r in state.reversal_log if r[1] == last_step]
        thr_log = float(np.mean(finals[-stop_rule.threshold_reversals:]))
        thr_us = float(log_to_itd(thr_log))
    elif saturated == "ceiling":
        thr_log, thr_us = x_max, cond.max_itd_us
    elif saturated == "floor":
        thr_log, thr_us = 0.0, 1.0
    else:
        tail = [r[0] for r in state.reversal_log][-stop_rule.threshold_reversals:]
        thr_log = float(np.mean(tail)) if tail else float("nan")
        thr_us = float(log_to_itd(thr_log))
    return TrackResult(cond.freq_hz, thr_log, thr_us, state.reversal_log, state.trial_log,
                       converged, saturated, seed, responder.describe())


def _saturation(trials, cond, rule: StopRule):
    w = rule.saturation_window
    if len(trials) < w:
        return None
    recent = trials[-w:]
    need = rule.saturation_fraction * w
    if sum(t.itd_us == cond.max_itd_us for t in recent) >= need:
        return "ceiling"
    if sum(t.itd_us == 1.0 for t in recent) >= need:
        return "floor"
    return None


def z_composite(subject_thresholds, nh_ref) -> float:
    """Mean over the five test frequencies of (subject - NH mean) / NH sd.

    ``subject_thresholds`` maps freq -> us; ``nh_ref`` maps freq -> {"mean_us", "sd_us"}.
    """
    subject = {float(k): v for k, v in subject_thresholds.items()}
    ref = {float(k): v for k, v in nh_ref.items()}
    z = []
    for f in TEST_FREQS_HZ:
        if f not in subject or f not in ref:
            raise StaircaseError(f"missing frequency {f} Hz in subject or reference data")
        mean, sd = float(ref[f]["mean_us"]), float(ref[f]["sd_us"])
        if not sd > 0:
            raise StaircaseError(f"reference sd at {f} Hz must be positive, got {sd}")
        z.append((float(subject[f]) - mean) / sd)
    return float(np.mean(z))


def load_nh_reference(path) -> dict:
    """Load a user-supplied ``{freq_hz: {mean_us, sd_us}}`` JSON file."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    ref = {}
    for key, val in raw.items():
        if key.startswith("_"):
            continue
        ref[float(key)] = {"mean_us": float(val["mean_us"]), "sd_us": float(val["sd_us"])}
    return ref


def placeholder_reference_path() -> Path:
    return Path(__file__).parent / "data" / "nh_reference_placeholder.json"
