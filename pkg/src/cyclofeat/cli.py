"""
Command-line pipeline: ``cyclofeat synth|analyze|regress|pipeline``.

Outputs land under one directory::

    clips/     WAV files and JSON sidecars
    features/  feature table, cyclic profiles and spectra
    figures/   SCD / coherence heatmaps (PGM) and intercept plot data
    models/    model JSON, coefficient table, intercepts, score summaries
    manifest.json
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
import numpy as np

from .audio_synth import (
    AudioClip,
    PanTrajectory,
    PatternKind,
    PatternSpec,
    read_onset_file,
    spatialize,
    synthesize,
    write_sidecar,
)
from .cyclo_spectral import ScdGrid, cyclic_coherence, render_heatmap, write_profile_csv, write_spectrum_csv
from .errors import ConfigError, CyclofeatError
from .features import FEATURE_NAMES, analyze_clip, average_features, read_features_csv, write_features_csv
from .regression import (
    backward_eliminate,
    fit_lmm,
    render_table,
    table_section,
    write_intercept_csv,
    write_intercept_plot_data,
    write_model_json,
)
from .survey_data import (
    CATALOG,
    FAMILIES,
    GROUPINGS,
    RESPONSES,
    build_design,
    default_effect_model,
    load_survey_csv,
    mean_scores_by_type,
    render_semantic_table,
    simulate_survey,
    write_survey_csv,
)
from .wav import read_wav, write_wav

PROG = "cyclofeat"
SECTIONS = ("synthesis", "analysis", "regression", "io")
CLIP_KIND = {
    "white_noise": PatternKind.WHITE_NOISE,
    "sr_mono": PatternKind.SR, "sr_stereo": PatternKind.SR,
    "fm_mono": PatternKind.FM, "fm_stereo": PatternKind.FM,
    "mir_mono": PatternKind.MIR, "mir_stereo": PatternKind.MIR,
}
RESPONSE_TITLES = {"physical": "Phy. M. Var.", "psychological": "Psy. M. Var.", "relaxing": "Relax. M. Var."}

_SYNTH_KEYS = {
    "seed", "duration_s", "sample_rate_hz", "period_s", "impulse_ms", "fm_rate_max_hz", "sr_count_min",
    "sr_count_max", "sr_redraw_per_period", "amplitude", "mir_onsets", "pan", "pan_period_s", "pan_depth",
}
_CLIP_KEYS = _SYNTH_KEYS - {"seed"}
_KNOWN = {
    "output": {"dir"},
    "synthesis": _SYNTH_KEYS,
    "analysis": {"alpha_max_hz", "f_stride", "smoothing_bins", "analysis_rate_hz", "stereo"},
    "regression": {"responses", "groupings", "exclude", "criterion"},
    "io": {"survey_csv", "simulate", "participants", "noise_sd"},
}
U64 = 2 ** 64


def default_config_path() -> Path:
    return Path(str(resources.files("cyclofeat") / "data" / "default.ini"))


@dataclass(frozen=True)
class ClipPlan:
    clip_id: str
    spec: PatternSpec
    stereo: bool
    onset_file: Path | None = None
    pan: PanTrajectory | None = None
    pan_source: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: Path
    master_seed: int
    clips: tuple[ClipPlan, ...]
    grid: ScdGrid
    stereo_mode: str
    responses: tuple[str, ...]
    groupings: tuple[str, ...]
    exclude: tuple[str, ...]
    criterion: str
    survey_csv: Path | None
    simulate: bool
    participants: int
    noise_sd: float
    source: Path | None = field(default=None, compare=False)


def derive_seed(master: int, name: str) -> int:
    """Stable per-stream seed from the master seed and a stream name."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _get(section, key, conv, what):
    raw = section.get(key)
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section.name}] {key} = {raw!r} is not a valid {what}") from None


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _list(text: str) -> tuple[str, ...]:
    return tuple(t.strip().lower() for t in text.split(",") if t.strip())


def _seed(text) -> int:
    v = int(str(text), 0)
    if not 0 <= v < U64:
        raise ValueError(text)
    return v


def _resolve(base: Path, text: str) -> Path:
    p = Path(text).expanduser()
    return p if p.is_absolute() else base / p


def _clip_plan(clip_id: str, sec, base: Path, master: int) -> ClipPlan:
    kind = CLIP_KIND[clip_id]
    family = clip_id.split("_")[0] if kind is not PatternKind.WHITE_NOISE else "white_noise"
    lo = _get(sec, "sr_count_min", int, "integer")
    hi = _get(sec, "sr_count_max", int, "integer")
    spec = PatternSpec(
        kind=kind,
        duration_s=_get(sec, "duration_s", float, "number"),
        sample_rate_hz=_get(sec, "sample_rate_hz", int, "integer"),
        period_s=_get(sec, "period_s", float, "number"),
        impulse_ms=_get(sec, "impulse_ms", float, "number"),
        fm_rate_max_hz=_get(sec, "fm_rate_max_hz", float, "number"),
        sr_count_range=(lo, hi),
        # mono and stereo variants share one pattern realisation
        seed=derive_seed(master, family),
        amplitude=_get(sec, "amplitude", float, "number"),
        sr_redraw_per_period=_get(sec, "sr_redraw_per_period", _bool, "boolean"),
    )
    try:
        spec.validate()
    except CyclofeatError as exc:
        raise ConfigError(f"[{sec.name}] {exc}") from None

    onset_file = None
    if kind is PatternKind.MIR:
        onset_file = _resolve(base, sec.get("mir_onsets", ""))
        if not onset_file.is_file():
            raise ConfigError(f"[{sec.name}] mir_onsets file not found: {onset_file}")
        try:
            read_onset_file(onset_file, spec.duration_s)
        except CyclofeatError as exc:
            raise ConfigError(str(exc)) from None

    stereo = clip_id.endswith("_stereo")
    pan, pan_source = None, ""
    if stereo:
        pan_source = sec.get("pan", "oscillating").strip()
        if pan_source == "oscillating":
            pan = PanTrajectory.oscillating(spec.duration_s, _get(sec, "pan_period_s", float, "number"),
                                            _get(sec, "pan_depth", float, "number"))
        else:
            path = _resolve(base, pan_source)
            if not path.is_file():
                raise ConfigError(f"[{sec.name}] pan trajectory file not found: {path}")
            try:
                pan = PanTrajectory.from_csv(path)
            except CyclofeatError as exc:
                raise ConfigError(str(exc)) from None
            pan_source = str(path)
    return ClipPlan(clip_id, spec, stereo, onset_file, pan, pan_source)


def load_config(path, out: str | None = None, seed: int | None = None) -> PipelineConfig:
    """Parse and validate an INI config; raises ConfigError before any work is done."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}".replace("\n", " ")) from None
    base = path.resolve().parent

    for name in SECTIONS:
        if not cp.has_section(name):
            raise ConfigError(f"config {path} has no [{name}] section")
    for name in cp.sections():
        if name.startswith("clip."):
            clip = name[5:]
            if clip not in CATALOG:
                raise ConfigError(f"[{name}] names an unknown clip; expected one of {', '.join(CATALOG)}")
            allowed = _CLIP_KEYS
        elif name in _KNOWN:
            allowed = _KNOWN[name]
        else:
            raise ConfigError(f"unknown config section [{name}]")
        unknown = set(cp[name]) - allowed
        if unknown:
            raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(unknown))}")

    syn = cp["synthesis"]
    defaults = {"sr_redraw_per_period": "false", "pan": "oscillating", "pan_period_s": "3.2", "pan_depth": "1.0"}
    missing = [k for k in _SYNTH_KEYS - {"seed"} - set(defaults) if k not in syn]
    if missing:
        raise ConfigError(f"[synthesis] missing key(s): {', '.join(sorted(missing))}")
    master = seed if seed is not None else _get(syn, "seed", _seed, "unsigned 64-bit seed")

    clips = []
    for clip_id in CATALOG:
        override = f"clip.{clip_id}"
        label = override if cp.has_section(override) else "synthesis"
        merged = configparser.ConfigParser(interpolation=None)
        merged.read_dict({label: {**defaults, **dict(syn)}})
        if cp.has_section(override):
            merged[label].update(cp[override])
        sec = merged[label]
        clips.append(_clip_plan(clip_id, sec, base, master))

    an = cp["analysis"]
    try:
        grid = ScdGrid(
            alpha_max_hz=_get(an, "alpha_max_hz", float, "number"),
            f_stride=_get(an, "f_stride", int, "integer"),
            smoothing_bins=_get(an, "smoothing_bins", int, "integer"),
            analysis_rate_hz=_get(an, "analysis_rate_hz", int, "integer"),
        )
    except CyclofeatError as exc:
        raise ConfigError(f"[analysis] {exc}") from None
    for c in clips:
        if c.spec.sample_rate_hz % grid.analysis_rate_hz:
            raise ConfigError(f"[analysis] analysis_rate_hz {grid.analysis_rate_hz} does not divide "
                              f"the {c.spec.sample_rate_hz} Hz sample rate of {c.clip_id}")
    stereo_mode = an.get("stereo", "average").strip().lower()
    if stereo_mode not in ("average", "left", "right"):
        raise ConfigError(f"[analysis] stereo must be average, left or right, got {stereo_mode!r}")

    rg = cp["regression"]
    responses = _list(rg.get("responses", ",".join(RESPONSES)))
    groupings = _list(rg.get("groupings", "listen_order"))
    exclude = _list(rg.get("exclude", "x8"))
    criterion = rg.get("criterion", "aic").strip().lower()
    if not responses or set(responses) - set(RESPONSES):
        raise ConfigError(f"[regression] responses must be a subset of {', '.join(RESPONSES)}")
    if set(groupings) - (set(GROUPINGS) - {"none"}):
        raise ConfigError("[regression] groupings must be a subset of listen_order, naturalness")
    if set(exclude) - set(FEATURE_NAMES) or len(set(exclude)) >= len(FEATURE_NAMES):
        raise ConfigError(f"[regression] exclude must list some of {', '.join(FEATURE_NAMES)}")
    if criterion != "aic":
        raise ConfigError(f"[regression] unsupported criterion {criterion!r}")

    io = cp["io"]
    simulate = _get(io, "simulate", _bool, "boolean") if "simulate" in io else False
    survey_csv = _resolve(base, io["survey_csv"]) if io.get("survey_csv", "").strip() else None
    if simulate == (survey_csv is not None):
        raise ConfigError("[io] set exactly one of survey_csv or simulate = true")
    if survey_csv is not None and not survey_csv.is_file():
        raise ConfigError(f"[io] survey_csv not found: {survey_csv}")
    participants = _get(io, "participants", int, "integer") if "participants" in io else 100
    noise_sd = _get(io, "noise_sd", float, "number") if "noise_sd" in io else 1.0
    if participants < 1 or noise_sd < 0:
        raise ConfigError("[io] participants must be >= 1 and noise_sd >= 0")

    out_dir = Path(out) if out else _resolve(base, cp.get("output", "dir", fallback="cyclofeat-out"))
    return PipelineConfig(out_dir, master, tuple(clips), grid, stereo_mode, responses, groupings, exclude,
                          criterion, survey_csv, simulate, participants, noise_sd, path)


# -- execution ----------------------------------------------------------------

class RuntimeFailure(CyclofeatError):
    """Data or I/O failure while running a command."""


def thread_count() -> int:
    raw = os.environ.get("CYCLOFEAT_THREADS", "").strip()
    if not raw:
        return max(1, min(len(CATALOG), os.cpu_count() or 1))
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"CYCLOFEAT_THREADS must be a positive integer, got {raw!r}")
    return n


def _pmap(fn, items):
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeFailure(f"cannot create output directory {path}: {exc.strerror or exc}") from None
    if not os.access(path, os.W_OK):
        raise RuntimeFailure(f"output directory {path} is not writable")
    return path


def _render_clip(plan: ClipPlan) -> AudioClip:
    mono = synthesize(plan.spec, plan.onset_file, plan.clip_id)
    return spatialize(mono, plan.pan, plan.clip_id) if plan.stereo else mono


def cmd_synth(cfg: PipelineConfig) -> list[Path]:
    """Write the seven-clip catalog as WAV files with JSON sidecars."""
    clip_dir = _mkdir(cfg.output_dir / "clips")

    def work(plan: ClipPlan):
        clip = _render_clip(plan)
        wav = clip_dir / f"{plan.clip_id}.wav"
        write_wav(clip, wav)
        extra = {"master_seed": cfg.master_seed, "stereo": plan.stereo}
        if plan.onset_file is not None:
            extra["onset_file"] = plan.onset_file.name
        if plan.stereo:
            extra["pan"] = plan.pan_source if plan.pan_source == "oscillating" else Path(plan.pan_source).name
        write_sidecar(clip, plan.spec, clip_dir / f"{plan.clip_id}.json", **extra)
        return wav

    return _pmap(work, cfg.clips)


def cmd_analyze(cfg: PipelineConfig) -> Path:
    """Features, cyclic profiles and heatmaps for every catalog clip."""
    clip_dir = cfg.output_dir / "clips"
    feat_dir = _mkdir(cfg.output_dir / "features")
    fig_dir = _mkdir(cfg.output_dir / "figures")

    def work(clip_id: str):
        wav = clip_dir / f"{clip_id}.wav"
        if not wav.is_file():
            raise RuntimeFailure(f"clip {clip_id!r}: missing WAV file {wav}")
        try:
            clip = read_wav(wav, clip_id)
        except CyclofeatError as exc:
            raise RuntimeFailure(f"clip {clip_id!r}: {exc}") from None
        _, channels = analyze_clip(clip, cfg.grid)
        for k, ch in enumerate(channels):
            stem = f"{clip_id}_ch{k}"
            write_profile_csv(ch.profile, feat_dir / f"{stem}_profile.csv")
            write_spectrum_csv(ch.spectrum, feat_dir / f"{stem}_spectrum.csv")
            render_heatmap(ch.scd, fig_dir / f"{stem}_scd.pgm")
            render_heatmap(cyclic_coherence(ch.scd), fig_dir / f"{stem}_coherence.pgm")
        if len(channels) == 1 or cfg.stereo_mode == "average":
            return average_features([c.features for c in channels], clip_id)
        pick = channels[0 if cfg.stereo_mode == "left" else 1].features
        return average_features([pick], clip_id)

    vectors = _pmap(work, CATALOG)
    out = feat_dir / "features.csv"
    write_features_csv(vectors, out)
    return out


def _load_features(cfg: PipelineConfig):
    path = cfg.output_dir / "features" / "features.csv"
    if not path.is_file():
        raise RuntimeFailure(f"feature table {path} not found; run 'analyze' first")
    feats = read_features_csv(path)
    missing = [c for c in CATALOG if c not in feats]
    if missing:
        raise RuntimeFailure(f"feature table {path} lacks clip(s): {', '.join(missing)}")
    return feats


def cmd_regress(cfg: PipelineConfig) -> Path:
    """Survey ingestion or simulation, model fitting and reports."""
    feats = _load_features(cfg)
    model_dir = _mkdir(cfg.output_dir / "models")
    fig_dir = _mkdir(cfg.output_dir / "figures")
    if cfg.simulate:
        truth = default_effect_model(feats, cfg.noise_sd)
        table = simulate_survey(feats, truth, derive_seed(cfg.master_seed, "survey"), cfg.participants)
        write_survey_csv(table, model_dir / "survey_simulated.csv")
    else:
        table = load_survey_csv(cfg.survey_csv)

    def work(response: str):
        design = build_design(table, feats, response, "none", cfg.exclude)
        ols = backward_eliminate(design, "ols", cfg.criterion)
        lmms = {}
        for grouping in cfg.groupings:
            gd = build_design(table, feats, response, grouping, cfg.exclude)
            for step in ols.eliminated:
                gd = gd.drop(step.variable)
            lmms[grouping] = fit_lmm(gd)
        return response, ols, lmms

    results = _pmap(work, cfg.responses)
    models, sections = {}, []
    for response, ols, lmms in results:
        models[f"{response}_ols"] = ols
        for grouping, lmm in lmms.items():
            models[f"{response}_lmm_{grouping}"] = lmm
            write_intercept_csv(lmm, model_dir / f"intercepts_{response}_{grouping}.csv")
            write_intercept_plot_data(lmm, fig_dir / f"intercepts_{response}_{grouping}.dat")
        if lmms:
            sections.append(table_section(RESPONSE_TITLES[response], ols, next(iter(lmms.values()))))
    write_model_json(models, model_dir / "models.json")
    if sections:
        (model_dir / "coefficients.txt").write_text(render_table(sections), encoding="utf-8")

    summary = mean_scores_by_type(table)
    with open(model_dir / "scores_by_clip.csv", "w", encoding="utf-8") as fh:
        fh.write("clip,effect,mean,sd,count\n")
        for clip in summary.types:
            for effect in ("physical", "psychological", "relaxing", "naturalness"):
                s = summary.get(clip, effect)
                fh.write(f"{clip},{effect},{s.mean:.12g},{s.sd:.12g},{s.count}\n")
    families = mean_scores_by_type(table, FAMILIES)
    (model_dir / "semantic_scores.txt").write_text(render_semantic_table(families), encoding="utf-8")
    return model_dir / "models.json"


def write_manifest(cfg: PipelineConfig) -> Path:
    """Hash every artifact under the output directory; written last."""
    root = cfg.output_dir
    entries = []
    for sub in ("clips", "features", "figures", "models"):
        d = root / sub
        if not d.is_dir():
            continue
        for f in sorted(d.rglob("*")):
            if f.is_file():
                data = f.read_bytes()
                entries.append({"path": f.relative_to(root).as_posix(),
                                "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
    doc = {"master_seed": cfg.master_seed, "artifacts": entries}
    out = root / "manifest.json"
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def cmd_pipeline(cfg: PipelineConfig) -> Path:
    cmd_synth(cfg)
    cmd_analyze(cfg)
    cmd_regress(cfg)
    return write_manifest(cfg)


COMMANDS = {"synth": cmd_synth, "analyze": cmd_analyze, "regress": cmd_regress, "pipeline": cmd_pipeline}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Cyclic ASMR stimulus synthesis, analysis and regression.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None,
                   help="INI configuration (default: the packaged default.ini)")
    p.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
    p.add_argument("--seed", default=None, help="master seed, unsigned 64-bit (overrides [synthesis] seed)")
    return p


def _fail(code: int, kind: str, message: str) -> int:
    one_line = " ".join(str(message).split())
    print(f"{PROG}: {kind}: {one_line}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seed = None
        if args.seed is not None:
            try:
                seed = _seed(args.seed)
            except ValueError:
                raise ConfigError(f"--seed {args.seed!r} is not an unsigned 64-bit integer") from None
        cfg = load_config(args.config or default_config_path(), args.out, seed)
        thread_count()
    except ConfigError as exc:
        return _fail(1, "config-error", str(exc))
    try:
        _mkdir(cfg.output_dir)
        COMMANDS[args.command](cfg)
        if args.command != "pipeline":
            write_manifest(cfg)
    except ConfigError as exc:
        return _fail(1, "config-error", str(exc))
    except (CyclofeatError, OSError, ValueError) as exc:
        return _fail(2, "runtime-error", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
