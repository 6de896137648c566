"""Survey tables: CSV ingestion and validation, score summaries, a seeded simulator and design building."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidParameterError, JoinError, MalformedInputError
from .features import FEATURE_NAMES, FeatureVector
from .regression import DesignMatrix

COLUMNS = ("participant_id", "clip_id", "listen_order", "physical", "psychological", "relaxing", "naturalness")
SCORE_COLUMNS = ("listen_order", "physical", "psychological", "relaxing", "naturalness")
EFFECTS = ("physical", "psychological", "relaxing", "naturalness")
RESPONSES = ("physical", "psychological", "relaxing")
GROUPINGS = ("none", "listen_order", "naturalness")
CATALOG = ("white_noise", "sr_mono", "sr_stereo", "fm_mono", "fm_stereo", "mir_mono", "mir_stereo")
SCALE = (1, 7)

# clip families as labelled in the semantic-score table; SR clips appear as "RAN"
FAMILIES = {
    "White noise": ("white_noise",),
    "MIR": ("mir_mono", "mir_stereo"),
    "RAN": ("sr_mono", "sr_stereo"),
    "FM": ("fm_mono", "fm_stereo"),
}


@dataclass(frozen=True)
class SurveyIssue:
    kind: str  # missing_column, non_integer, out_of_range, duplicate_order, duplicate_clip, unknown_clip, incomplete
    line: int | None
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}{self.kind}: {self.message}"


class SurveyValidationError(MalformedInputError):
    """All problems found in a survey file, each with its line number."""

    def __init__(self, issues: Sequence[SurveyIssue], path=None):
        self.issues = tuple(issues)
        first = self.issues[0]
        more = f" (+{len(self.issues) - 1} more)" if len(self.issues) > 1 else ""
        super().__init__(f"{first.kind}: {first.message}{more}", path, first.line)

    @property
    def kinds(self) -> set[str]:
        return {i.kind for i in self.issues}


@dataclass(frozen=True)
class SimulationInfo:
    """Ground truth kept alongside a simulated table."""

    effect_model: "EffectModel"
    seed: int
    n_clipped: dict[str, int]


@dataclass(frozen=True, eq=False)
class SurveyTable:
    """
    Column-oriented survey responses. Scores are integers on the 1..7 scale
    for real data; a simulator run with discretisation disabled may hold
    real-valued responses instead.
    """

    participant_id: tuple[str, ...]
    clip_id: tuple[str, ...]
    listen_order: np.ndarray
    physical: np.ndarray
    psychological: np.ndarray
    relaxing: np.ndarray
    naturalness: np.ndarray
    simulation: SimulationInfo | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.participant_id)
        if len(self.clip_id) != n:
            raise InvalidParameterError("column lengths differ")
        for name in SCORE_COLUMNS:
            col = np.asarray(getattr(self, name))
            if col.shape != (n,):
                raise InvalidParameterError(f"column {name} has the wrong length")
            col = col.copy()
            col.setflags(write=False)
            object.__setattr__(self, name, col)
        object.__setattr__(self, "participant_id", tuple(self.participant_id))
        object.__setattr__(self, "clip_id", tuple(self.clip_id))

    def __len__(self) -> int:
        return len(self.participant_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SurveyTable):
            return NotImplemented
        return (self.participant_id == other.participant_id and self.clip_id == other.clip_id
                and all(np.array_equal(self.column(c), other.column(c)) for c in SCORE_COLUMNS))

    __hash__ = None

    def column(self, name: str) -> np.ndarray:
        if name not in SCORE_COLUMNS:
            raise InvalidParameterError(f"unknown score column {name!r}")
        return getattr(self, name)

    @property
    def participants(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.participant_id))


def _fmt_score(v) -> str:
    fv = float(v)
    return str(int(fv)) if fv.is_integer() else f"{fv:.12g}"


def write_survey_csv(table: SurveyTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(table)):
            w.writerow([table.participant_id[i], table.clip_id[i],
                        *(_fmt_score(table.column(c)[i]) for c in SCORE_COLUMNS)])


def load_survey_csv(path) -> SurveyTable:
    """
    Read and validate a survey CSV. Header names are matched case- and
    whitespace-insensitively and may come in any order; every violation is
    collected before a SurveyValidationError is raised.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise MalformedInputError(f"cannot open survey file: {exc.strerror or exc}", path) from exc
    with fh:
        try:
            rows = list(csv.reader(fh))
        except (UnicodeDecodeError, csv.Error) as exc:
            raise MalformedInputError(f"unreadable survey file ({exc})", path) from None
    if not rows:
        raise SurveyValidationError([SurveyIssue("missing_column", 1, "file has no header")], path)

    header = [h.strip().lower() for h in rows[0]]
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise SurveyValidationError(
            [SurveyIssue("missing_column", 1, f"missing column {c!r}") for c in missing], path)
    pos = {c: header.index(c) for c in COLUMNS}

    issues: list[SurveyIssue] = []
    records = []
    for lineno, raw in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in raw):
            continue
        if len(raw) < len(header):
            issues.append(SurveyIssue("missing_column", lineno, f"expected {len(header)} fields, got {len(raw)}"))
            continue
        pid = raw[pos["participant_id"]].strip()
        clip = raw[pos["clip_id"]].strip()
        if clip not in CATALOG:
            issues.append(SurveyIssue("unknown_clip", lineno, f"unknown clip_id {clip!r}"))
        scores = {}
        for c in SCORE_COLUMNS:
            text = raw[pos[c]].strip()
            try:
                v = int(text)
            except ValueError:
                issues.append(SurveyIssue("non_integer", lineno, f"{c} = {text!r} is not an integer"))
                continue
            if not SCALE[0] <= v <= SCALE[1]:
                issues.append(SurveyIssue("out_of_range", lineno, f"{c} = {v} outside [{SCALE[0]}, {SCALE[1]}]"))
            scores[c] = v
        records.append((lineno, pid, clip, scores))

    # per-participant protocol checks
    by_pid: dict[str, list] = defaultdict(list)
    for rec in records:
        by_pid[rec[1]].append(rec)
    for pid, recs in by_pid.items():
        seen_order: dict[int, int] = {}
        seen_clip: dict[str, int] = {}
        for lineno, _pid, clip, scores in recs:
            order = scores.get("listen_order")
            if order is not None:
                if order in seen_order:
                    issues.append(SurveyIssue("duplicate_order", lineno,
                                              f"participant {pid!r} has listen_order {order} twice "
                                              f"(first at line {seen_order[order]})"))
                else:
                    seen_order[order] = lineno
            if clip in seen_clip:
                issues.append(SurveyIssue("duplicate_clip", lineno,
                                          f"participant {pid!r} rated {clip!r} twice "
                                          f"(first at line {seen_clip[clip]})"))
            else:
                seen_clip[clip] = lineno
        if len(recs) != len(CATALOG):
            issues.append(SurveyIssue("incomplete", recs[0][0],
                                      f"participant {pid!r} has {len(recs)} rows, expected {len(CATALOG)}"))

    if issues:
        issues.sort(key=lambda i: (i.line or 0))
        raise SurveyValidationError(issues, path)
    return SurveyTable(
        participant_id=[r[1] for r in records],
        clip_id=[r[2] for r in records],
        **{c: np.array([r[3][c] for r in records], dtype=np.int64) for c in SCORE_COLUMNS},
    )


# -- summaries ----------------------------------------------------------------

@dataclass(frozen=True)
class ScoreStat:
    mean: float
    sd: float  # population standard deviation
    count: int


@dataclass(frozen=True)
class ScoreSummary:
    """Per (clip type, effect) statistics; ``types`` keeps the reporting order."""

    types: tuple[str, ...]
    stats: Mapping[tuple[str, str], ScoreStat]

    def mean(self, clip_type: str, effect: str) -> float:
        return self.stats[(clip_type, effect)].mean

    def get(self, clip_type: str, effect: str) -> ScoreStat:
        return self.stats[(clip_type, effect)]


def mean_scores_by_type(table: SurveyTable, families: Mapping[str, Sequence[str]] | None = None) -> ScoreSummary:
    """
    Mean, population SD and count of every effect per clip type.

    By default each catalog clip is its own type; ``families`` pools clips
    under a shared label (see ``FAMILIES``).
    """
    if len(table) == 0:
        raise InvalidParameterError("cannot summarise an empty survey table")
    if families is None:
        present = [c for c in CATALOG if c in set(table.clip_id)]
        extra = sorted(set(table.clip_id) - set(CATALOG))
        families = {c: (c,) for c in present + extra}
    clip_of = np.array(table.clip_id, dtype=object)
    stats = {}
    for label, members in families.items():
        mask = np.isin(clip_of, list(members))
        for effect in EFFECTS:
            vals = np.asarray(table.column(effect), dtype=np.float64)[mask]
            if vals.size == 0:
                continue
            stats[(label, effect)] = ScoreStat(float(vals.mean()), float(vals.std()), int(vals.size))
    return ScoreSummary(tuple(families), stats)


def render_semantic_table(summary: ScoreSummary, effect: str = "naturalness",
                          row_label: str = "Sem. Score", decimals: int = 2) -> str:
    """One-row text table of the mean ``effect`` score per clip type."""
    heads = ["", *summary.types]
    vals = [row_label, *(f"{summary.mean(t, effect):.{decimals}f}" for t in summary.types)]
    widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
    line = lambda cells: "  ".join([cells[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])])
    return "\n".join([line(heads).rstrip(), line(vals)]) + "\n"


# -- simulation ---------------------------------------------------------------

@dataclass(frozen=True)
class ResponseTruth:
    """Generative truth for one response: ``y = intercept + sum coef * x + order + bias + noise``."""

    intercept: float
    coefficients: Mapping[str, float]
    order_intercepts: Sequence[float] = (0.0,) * 7
    bias_intercepts: Sequence[float] = (0.0,) * 7
    noise_sd: float = 1.0

    def __post_init__(self):
        if len(self.order_intercepts) != 7 or len(self.bias_intercepts) != 7:
            raise InvalidParameterError("order and bias intercepts need one value per level 1..7")
        if self.noise_sd < 0:
            raise InvalidParameterError("noise_sd must be non-negative")
        unknown = set(self.coefficients) - set(FEATURE_NAMES)
        if unknown:
            raise InvalidParameterError(f"unknown predictors {sorted(unknown)}")


@dataclass(frozen=True)
class EffectModel:
    """
    Simulator truth. Naturalness is drawn per rating around a per-clip mean and
    rounded to the scale; it enters the responses through ``bias_intercepts``.
    """

    responses: Mapping[str, ResponseTruth]
    naturalness_mean: Mapping[str, float]
    naturalness_sd: float = 1.0
    discretize: bool = True

    def __post_init__(self):
        missing = set(RESPONSES) - set(self.responses)
        if missing:
            raise InvalidParameterError(f"effect model lacks responses {sorted(missing)}")
        if set(self.naturalness_mean) != set(CATALOG):
            raise InvalidParameterError("naturalness_mean needs one entry per catalog clip")


def standardized_coefficients(features_by_clip: Mapping[str, FeatureVector],
                              effects: Mapping[str, float]) -> dict[str, float]:
    """
    Convert effects per catalog standard deviation of a feature into raw
    coefficients, so a truth can be stated independently of feature units.
    """
    out = {}
    for name, eff in effects.items():
        col = np.array([features_by_clip[c].as_dict()[name] for c in CATALOG])
        sd = col.std()
        if sd == 0:
            raise InvalidParameterError(f"{name} is constant across the catalog")
        out[name] = float(eff / sd)
    return out


def simulate_survey(features_by_clip: Mapping[str, FeatureVector], effect_model: EffectModel,
                    seed: int, n_participants: int = 100) -> SurveyTable:
    """
    Draw a survey with a random listening order per participant.

    Scores are rounded and clipped to the 1..7 scale unless the model
    disables discretisation; clip counts per response are kept in
    ``table.simulation.n_clipped``.
    """
    missing = [c for c in CATALOG if c not in features_by_clip]
    if missing:
        raise InvalidParameterError(f"no features for clips {missing}")
    if n_participants < 1:
        raise InvalidParameterError("need at least one participant")
    rng = np.random.default_rng(seed)
    feats = {c: features_by_clip[c].as_dict() for c in CATALOG}
    width = len(str(n_participants))

    pids, clips, orders, nats = [], [], [], []
    for p in range(n_participants):
        perm = rng.permutation(len(CATALOG))
        for k, ci in enumerate(perm):
            pids.append(f"p{p + 1:0{width}d}")
            clips.append(CATALOG[ci])
            orders.append(k + 1)
    nat_raw = np.array([effect_model.naturalness_mean[c] for c in clips]) \
        + effect_model.naturalness_sd * rng.standard_normal(len(clips))
    nats = np.clip(np.rint(nat_raw), *SCALE).astype(np.int64)
    orders = np.array(orders, dtype=np.int64)

    cols, n_clipped = {}, {}
    for resp in RESPONSES:
        truth = effect_model.responses[resp]
        y = np.full(len(clips), truth.intercept, dtype=np.float64)
        for name, coef in truth.coefficients.items():
            y += coef * np.array([feats[c][name] for c in clips])
        y += np.asarray(truth.order_intercepts)[orders - 1]
        y += np.asarray(truth.bias_intercepts)[nats - 1]
        y += truth.noise_sd * rng.standard_normal(len(clips))
        if effect_model.discretize:
            r = np.rint(y)
            n_clipped[resp] = int(np.count_nonzero((r < SCALE[0]) | (r > SCALE[1])))
            y = np.clip(r, *SCALE).astype(np.int64)
        else:
            n_clipped[resp] = 0
        cols[resp] = y
    return SurveyTable(pids, clips, orders, cols["physical"], cols["psychological"], cols["relaxing"],
                       nats, simulation=SimulationInfo(effect_model, seed, n_clipped))


# -- design -------------------------------------------------------------------

def build_design(table: SurveyTable, features_by_clip: Mapping[str, FeatureVector], response: str,
                 grouping: str = "none", exclude=("x8",)) -> DesignMatrix:
    """Join survey rows with clip features; one design row per survey row."""
    if response not in RESPONSES:
        raise InvalidParameterError(f"response must be one of {RESPONSES}, got {response!r}")
    if grouping not in GROUPINGS:
        raise InvalidParameterError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")
    excl = {e.lower() for e in exclude}
    unknown = excl - set(FEATURE_NAMES)
    if unknown:
        raise InvalidParameterError(f"unknown predictors to exclude: {sorted(unknown)}")
    names = [n for n in FEATURE_NAMES if n not in excl]
    if not names:
        raise InvalidParameterError("every predictor is excluded")
    rows = {}
    for clip in dict.fromkeys(table.clip_id):
        if clip not in features_by_clip:
            raise JoinError(f"clip {clip!r} has no feature vector")
        d = features_by_clip[clip].as_dict()
        rows[clip] = [d[n] for n in names]
    P = np.array([rows[c] for c in table.clip_id], dtype=np.float64)
    groups = None if grouping == "none" else table.column(grouping)
    return DesignMatrix.from_predictors(P, names, table.column(response), groups,
                                        group_name="" if grouping == "none" else grouping)


def default_effect_model(features_by_clip: Mapping[str, FeatureVector], noise_sd: float = 1.0,
                         discretize: bool = True) -> EffectModel:
    """
    A plausible truth for demonstration runs: cyclic strength (x1) raises every
    effect, spectral concentration (x9) lowers it, relaxation builds up with
    listening order, and mid-scale naturalness ratings carry a small bonus.
    Effects are stated per catalog standard deviation of each feature.
    """
    std = lambda eff: standardized_coefficients(features_by_clip, eff)
    neutral_bonus = (-0.3, -0.15, 0.0, 0.2, 0.2, 0.0, -0.1)
    return EffectModel(
        responses={
            "physical": ResponseTruth(3.8, std({"x1": 0.5, "x9": -0.4}),
                                      bias_intercepts=tuple(0.2 * b for b in neutral_bonus), noise_sd=noise_sd),
            "psychological": ResponseTruth(3.9, std({"x1": 0.4, "x3": 0.2, "x9": -0.3}),
                                           bias_intercepts=neutral_bonus, noise_sd=noise_sd),
            "relaxing": ResponseTruth(4.0, std({"x1": 0.2, "x9": -0.2}),
                                      order_intercepts=(-0.5, -0.3, -0.35, 0.0, 0.15, 0.4, 0.6),
                                      bias_intercepts=tuple(0.6 * b for b in neutral_bonus), noise_sd=noise_sd),
        },
        naturalness_mean={"white_noise": 4.9, "sr_mono": 4.35, "sr_stereo": 4.35, "fm_mono": 4.45,
                          "fm_stereo": 4.45, "mir_mono": 4.35, "mir_stereo": 4.35},
        naturalness_sd=1.2,
        discretize=discretize,
    )
