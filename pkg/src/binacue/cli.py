"""Command-line entry point: ``binacue <command> ...``.

Exit codes: 0 success, 2 validation error, 3 I/O error. Settings resolve as
command-line flags > config file > built-in defaults; the config file comes
from ``--config`` or the ``BINACUE_CONFIG`` environment variable.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .audiometry import Audiogram, check_symmetry, design_half_gain
from .bands import estimate_ild_table, estimate_itd_table, third_octave_bands
from .cues import ConditionName, TransformParams, make_condition
from .dataset import MANIFEST, SphericalHeadSpec, load_dataset, save_dataset, synth_spherical
from .io import config_hash, load_config, write_json
from .scene import SceneSpec, better_ear_snr, load_mono, mix_scene, write_scene
from .staircase import (
    FrequencyCondition, InteractiveResponder, ScriptedResponder, SimulatedResponder, StopRule,
    run_track,
)
from .stats import (
    ResultsTable, delta_srt, itd_audiogram_fit, plot_delta_srt, posthoc, write_rows_csv,
)

log = logging.getLogger("binacue")

CONFIG_ENV = "BINACUE_CONFIG"
CONFIG_KEYS = {"seed", "spl_ref_db", "transform", "stop_rule", "scene"}
EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3


class ConfigError(ValueError):
    pass


def _load_run_config(path) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    cfg = load_config(path)
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))} "
                          f"(allowed: {', '.join(sorted(CONFIG_KEYS))})")
    return cfg


def _pick(flag, cfg, key, default):
    """Flag beats config, config beats default."""
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _metadata(args, resolved: dict, seed=None) -> dict:
    return {
        "command": args.command,
        "version": __version__,
        "seed": seed,
        "config": resolved,
        "config_hash": config_hash(resolved),
        "argv": sys.argv[1:],
    }


def _parse_range(text, cast=float):
    """'a..b' -> (a, b)."""
    try:
        lo, hi = text.split("..")
        return cast(lo), cast(hi)
    except ValueError:
        raise ConfigError(f"expected a range like 400..1000, got {text!r}") from None


def _transform_params(cfg, params_file=None, sub_base=None) -> TransformParams:
    merged = dict(cfg.get("transform", {}))
    if params_file:
        merged.update(load_config(params_file))
    if sub_base is not None:
        merged["sub_base"] = sub_base
    return TransformParams.from_mapping(merged)


def cmd_synth_fixture(args, cfg):
    lo, hi = _parse_range(args.azimuths)
    spec = SphericalHeadSpec(ir_length_samples=args.ir_length, sample_rate_hz=args.fs,
                             tilt_db=args.tilt_db)
    ds = synth_spherical(spec, np.arange(lo, hi + 1e-9, args.step), name="spherical")
    save_dataset(ds, args.out)
    resolved = {**asdict(spec), "azimuths_deg": ds.azimuths_deg.tolist()}
    write_json(Path(args.out) / "fixture.json", _metadata(args, resolved))
    print(f"wrote {len(ds)} azimuths to {args.out}")


def cmd_analyze(args, cfg):
    ds = load_dataset(args.dataset)
    lo, hi = _parse_range(args.bands)
    bands = third_octave_bands(lo, hi)
    if not bands:
        raise ConfigError(f"no third-octave bands between {lo} and {hi} Hz")
    out = Path(args.out)
    itd = estimate_itd_table(ds, bands)
    ild = estimate_ild_table(ds, bands)
    itd.to_csv(out / "itd.csv")
    ild.to_csv(out / "ild.csv")
    resolved = {"dataset": str(args.dataset), "bands_hz": [b.nominal_hz for b in bands]}
    write_json(out / "analyze.json", _metadata(args, resolved))
    if args.plot:
        _plot_itd(itd, out / "itd.svg")
    print(f"analysed {len(ds)} azimuths x {len(bands)} bands -> {out}")


def _plot_itd(table, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for fc in table.band_centers_hz:
        ax.plot(table.azimuths_deg, table.column(fc), marker=".", label=f"{fc:g} Hz")
    ax.set_xlabel("azimuth / deg")
    ax.set_ylabel("ITD / us")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_condition(args, cfg):
    cond = ConditionName.parse(args.cond)
    params = _transform_params(cfg, args.params, args.sub_base)
    src = Path(args.dataset)
    out = Path(args.out)
    ds = load_dataset(src)
    params.check_rate(ds.sample_rate_hz)
    if cond in (ConditionName.unprocessed, ConditionName.colocated):
        # untouched HRTFs: copy the files so the result is byte-identical
        root = src if src.is_dir() else src.parent
        out.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(root / MANIFEST, out / MANIFEST)
        for entry in load_config(root / MANIFEST)["entries"]:
            shutil.copyfile(root / entry["file"], out / entry["file"])
    else:
        save_dataset(make_condition(ds, cond, params), out)
    resolved = {"dataset": str(src), "condition": cond.value, "transform": params.as_dict()}
    write_json(out / "condition.json", {**_metadata(args, resolved),
                                        "sub_base": params.sub_base})
    print(f"{cond.value}: wrote {len(ds)} azimuths to {out}")


def _make_responder(text, cfg):
    kind, _, rest = text.partition(":")
    if kind == "simulated":
        opts = {"mu": 40.0, "slope": 2.0, "lapse": 0.02}
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in opts:
                raise ConfigError(f"unknown simulated responder option {key!r}")
            opts[key] = float(val)
        return SimulatedResponder(opts["mu"], opts["slope"], opts["lapse"])
    if kind == "always-wrong":
        return ScriptedResponder([False] * 10_000)
    if kind == "always-right":
        return ScriptedResponder([True] * 10_000)
    if kind == "scripted":
        text = Path(rest).read_text(encoding="utf-8").split()
        return ScriptedResponder([{"1": True, "0": False}.get(t, t) for t in text])
    if kind == "interactive":
        return InteractiveResponder()
    raise ConfigError(f"unknown responder {text!r}; use simulated[:mu=..,slope=..,lapse=..], "
                      "always-wrong, always-right, scripted:FILE or interactive")


def cmd_staircase(args, cfg):
    cond = FrequencyCondition(args.freq)
    seed = int(_pick(args.seed, cfg, "seed", 0))
    rule = StopRule(**{k: tuple(v) if k == "step_sizes" else v
                       for k, v in cfg.get("stop_rule", {}).items()})
    out = Path(args.out)
    rows = []
    for i in range(args.runs):
        res = run_track(cond, _make_responder(args.responder, cfg), rule, seed + i)
        if args.runs == 1:
            res.write_trials_csv(out / "trials.csv")
            res.write_summary_json(out / "track.json")
        rows.append({"run": i, "seed": seed + i, "threshold_log_itd": res.threshold_log_itd,
                     "threshold_itd_us": res.threshold_itd_us, "n_trials": len(res.trials),
                     "converged": res.converged, "saturated": res.saturated or ""})
    write_rows_csv(out / "thresholds.csv", rows)
    th = np.array([r["threshold_log_itd"] for r in rows])
    summary = {"freq_hz": cond.freq_hz, "runs": args.runs,
               "mean_threshold_log_itd": float(th.mean()),
               "sd_threshold_log_itd": float(th.std(ddof=1)) if th.size > 1 else 0.0,
               "mean_threshold_itd_us": float(10 ** (th.mean() / 20))}
    resolved = {"freq_hz": cond.freq_hz, "responder": args.responder, "runs": args.runs,
                "stop_rule": asdict(rule)}
    write_json(out / "summary.json", {**_metadata(args, resolved, seed), **summary})
    print(f"{cond.freq_hz:g} Hz: mean threshold {summary['mean_threshold_log_itd']:.2f} dB "
          f"({summary['mean_threshold_itd_us']:.1f} us) over {args.runs} run(s)")


def cmd_render(args, cfg):
    scene_path = Path(args.scene)
    scene_cfg = {**cfg.get("scene", {}), **load_config(scene_path)}
    if args.snr is not None:
        scene_cfg["snr_db"] = args.snr
    if "spl_ref_db" in cfg and "spl_ref_db" not in scene_cfg:
        scene_cfg["spl_ref_db"] = cfg["spl_ref_db"]
    spec = SceneSpec.from_mapping(scene_cfg)
    if not spec.target_audio or not spec.interferer_audio:
        raise ConfigError("scene needs target_audio and interferer_audio")
    ds = load_dataset(args.hrtf)
    params = _transform_params(cfg, args.params)
    key = spec.dataset_key()
    cond_ds = {key: make_condition(ds, key, params)}
    base = scene_path.parent
    target = load_mono(base / spec.target_audio, ds.sample_rate_hz)
    interferers = [load_mono(base / p, ds.sample_rate_hz) for p in spec.interferer_audio]
    if len(interferers) == 1:
        interferers = interferers[0]
    half_gain = None
    if args.audiogram:
        half_gain = design_half_gain(Audiogram.from_json(args.audiogram), ds.sample_rate_hz)
    scene = mix_scene(spec, cond_ds, target, interferers, half_gain)
    be = better_ear_snr(scene)
    resolved = {"scene": spec.as_dict(), "transform": params.as_dict(), "hrtf": str(args.hrtf),
                "audiogram": args.audiogram}
    meta = {**_metadata(args, resolved), "sub_base": params.sub_base,
            "better_ear_snr_db": dict(zip(map(float, be["band_centers_hz"]),
                                          be["better_ear_db"].tolist()))}
    write_scene(scene, args.out, meta, write_stems=args.stems)
    print(f"rendered {spec.layout}/{spec.condition} at SNR {spec.snr_db:g} dB -> {args.out}")


def cmd_halfgain(args, cfg):
    a = Audiogram.from_json(args.audiogram)
    filt = design_half_gain(a, args.fs)
    out = Path(args.out)
    filt.to_csv(out)
    sym = check_symmetry(a)
    if not sym["symmetric"]:
        log.warning("audiogram asymmetric: %.1f dB at %g Hz", sym["diff_db"], sym["worst_freq_hz"])
    achieved = filt.magnitude_db(filt.target_freqs_hz)
    resolved = {"audiogram": str(args.audiogram), "fs": args.fs, "order": filt.order}
    write_json(out.with_suffix(".json"), {
        **_metadata(args, resolved), "symmetry": sym,
        "target_gain_db": filt.target_gain_db.tolist(), "achieved_gain_db": achieved.tolist(),
        "freqs_hz": filt.target_freqs_hz.tolist()})
    if args.plot:
        _plot_filter(filt, out.with_suffix(".svg"))
    print(f"half-gain FIR (order {filt.order}) -> {out}")


def _plot_filter(filt, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    f = np.geomspace(50, filt.fs / 2, 400)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogx(f, filt.magnitude_db(f))
    ax.plot(filt.target_freqs_hz, filt.target_gain_db, "x")
    ax.set_xlabel("frequency / Hz")
    ax.set_ylabel("gain / dB")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_stats(args, cfg):
    table = ResultsTable.from_csv(args.results)
    out = Path(args.out)
    resolved = {"results": str(args.results), "analysis": args.analysis, "q": args.q}
    report = _metadata(args, resolved)
    if args.analysis == "delta-srt":
        rows = delta_srt(table)
        write_rows_csv(out / "delta_srt.csv", rows)
        if args.plot:
            plot_delta_srt(rows, out / "delta_srt.svg")
        report["n_rows"] = len(rows)
    elif args.analysis == "posthoc":
        rows = posthoc(table, args.q)
        write_rows_csv(out / "posthoc.csv", rows)
        report["tests"] = rows
        report["note"] = ("repeated-measures ANOVA F/p values are not recomputed; "
                          "only the pairwise post-hoc tests are reported")
        print(report["note"])
    else:
        if args.hearing_levels is None or args.freq is None:
            raise ConfigError("--analysis fit needs --hearing-levels and --freq")
        levels = {str(k): float(v) for k, v in load_config(args.hearing_levels).items()}
        fit = itd_audiogram_fit(table, levels, args.freq)
        report["fit"] = fit.as_dict()
        print(f"r = {fit.r:.3f}, R^2 = {fit.r_squared:.3f}, n = {fit.n}")
    write_json(out / f"{args.analysis}.json", report)
    print(f"{args.analysis} -> {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binacue", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help=f"TOML/JSON run config (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-fixture", help="write a spherical-head HRTF fixture")
    s.add_argument("out")
    s.add_argument("--azimuths", default="-90..90", help="range in degrees, e.g. 0..90")
    s.add_argument("--step", type=float, default=15.0)
    s.add_argument("--fs", type=int, default=44100)
    s.add_argument("--ir-length", type=int, default=512)
    s.add_argument("--tilt-db", type=float, default=0.0)
    s.set_defaults(func=cmd_synth_fixture)

    s = sub.add_parser("analyze", help="band ITD/ILD tables of a dataset")
    s.add_argument("dataset")
    s.add_argument("--bands", default="400..2000", help="nominal centre range, e.g. 400..1000")
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true", help="also write itd.svg")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("condition", help="build one HRTF condition")
    s.add_argument("dataset")
    s.add_argument("--cond", required=True, help=", ".join(c.value for c in ConditionName))
    s.add_argument("--params", help="TOML/JSON file of transform parameters")
    s.add_argument("--sub-base", choices=("noitd", "noild"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_condition)

    s = sub.add_parser("staircase", help="run adaptive ITD threshold tracks")
    s.add_argument("--freq", type=float, required=True)
    s.add_argument("--responder", default="simulated")
    s.add_argument("--seed", type=int)
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_staircase)

    s = sub.add_parser("render", help="render a target/interferer scene")
    s.add_argument("scene", help="scene TOML/JSON")
    s.add_argument("--hrtf", required=True, help="unprocessed dataset directory")
    s.add_argument("--params", help="TOML/JSON file of transform parameters")
    s.add_argument("--audiogram", help="apply the half-gain filter for this audiogram")
    s.add_argument("--snr", type=float, help="override snr_db")
    s.add_argument("--stems", action="store_true", help="also write per-source stems")
    s.add_argument("--out", required=True, help="output WAV path")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("halfgain", help="design a half-gain compensation FIR")
    s.add_argument("audiogram")
    s.add_argument("--fs", type=int, default=44100)
    s.add_argument("--out", required=True, help="coefficient CSV path")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_halfgain)

    s = sub.add_parser("stats", help="analyse a results CSV")
    s.add_argument("results")
    s.add_argument("--analysis", choices=("delta-srt", "posthoc", "fit"), default="delta-srt")
    s.add_argument("--q", type=float, default=0.05, help="FDR level for posthoc")
    s.add_argument("--hearing-levels", help="JSON {subject_id: dB HL} for --analysis fit")
    s.add_argument("--freq", type=float, help="frequency for --analysis fit")
    s.add_argument("--plot", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = _load_run_config(args.config)
        args.func(args, cfg)
    except ImportError as exc:
        print(f"error: {exc} (plots need the 'plot' extra)", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
