import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES
from cyclofeat.errors import InvalidParameterError, JoinError
from cyclofeat.features import FeatureVector
from cyclofeat.regression import fit_lmm, fit_ols
from cyclofeat.survey_data import (
    CATALOG,
    COLUMNS,
    FAMILIES,
    EffectModel,
    ResponseTruth,
    SurveyTable,
    SurveyValidationError,
    build_design,
    default_effect_model,
    load_survey_csv,
    mean_scores_by_type,
    render_semantic_table,
    simulate_survey,
    standardized_coefficients,
    write_survey_csv,
)

HEADER = ",".join(COLUMNS) + "\n"


def features(seed=11):
    rng = np.random.default_rng(seed)
    return {c: FeatureVector.from_values(rng.uniform(0.1, 1.0, 9), c) for c in CATALOG}


def participant_rows(pid, scores=(4, 4, 4, 4), orders=None):
    orders = orders or range(1, 8)
    return "".join(f"{pid},{c},{o},{','.join(map(str, scores))}\n" for c, o in zip(CATALOG, orders))


def write(tmp_path, text):
    p = tmp_path / "s.csv"
    p.write_text(text, encoding="utf-8")
    return p


# -- loading ------------------------------------------------------------------

def test_fixture_loads_700_rows():
    t = load_survey_csv(FIXTURES / "survey_700.csv")
    assert len(t) == 700 and len(t.participants) == 100


def test_round_trip_is_byte_identical(tmp_path):
    src = FIXTURES / "survey_700.csv"
    write_survey_csv(load_survey_csv(src), tmp_path / "out.csv")
    assert (tmp_path / "out.csv").read_bytes() == src.read_bytes()


def test_header_is_normalised(tmp_path):
    text = " Participant_ID ,CLIP_ID,listen_order,physical,psychological,relaxing,naturalness\n"
    t = load_survey_csv(write(tmp_path, text + participant_rows("a")))
    write_survey_csv(t, tmp_path / "o.csv")
    assert (tmp_path / "o.csv").read_text().startswith(HEADER)


def test_columns_in_any_order(tmp_path):
    cols = list(COLUMNS)[::-1]
    rows = "".join(",".join(["4"] * 4 + [str(o), c, "a"]) + "\n" for o, c in zip(range(1, 8), CATALOG))
    t = load_survey_csv(write(tmp_path, ",".join(cols) + "\n" + rows))
    assert t.clip_id == CATALOG


@pytest.mark.parametrize("mutate,kind,line", [
    (lambda s: s.replace("sr_mono,2,4,4,4,4", "sr_mono,2,4,4,8,4"), "out_of_range", 3),
    (lambda s: s.replace("sr_mono,2,4,4,4,4", "sr_mono,2,4,4,0,4"), "out_of_range", 3),
    (lambda s: s.replace("sr_mono,2,4,4,4,4", "sr_mono,2,4,x,4,4"), "non_integer", 3),
    (lambda s: s.replace("sr_mono,2,4,4,4,4", "sr_mono,2,4.5,4,4,4"), "non_integer", 3),
    (lambda s: s.replace("sr_mono,2,", "sr_mono,3,"), "duplicate_order", 4),
    (lambda s: s.replace("a,sr_stereo", "a,sr_mono"), "duplicate_clip", 4),
    (lambda s: s.replace("a,fm_mono", "a,pink_noise"), "unknown_clip", 5),
])
def test_validation_errors_cite_rows(tmp_path, mutate, kind, line):
    text = mutate(HEADER + participant_rows("a"))
    with pytest.raises(SurveyValidationError) as exc:
        load_survey_csv(write(tmp_path, text))
    hits = [i for i in exc.value.issues if i.kind == kind]
    assert hits and hits[0].line == line
    assert f":{line}:" in str(exc.value) or f"line {line}" in str(hits[0])


def test_missing_column(tmp_path):
    text = "participant_id,clip_id,listen_order,physical,psychological,relaxing\n"
    with pytest.raises(SurveyValidationError) as exc:
        load_survey_csv(write(tmp_path, text + "a,white_noise,1,4,4,4\n"))
    assert "missing_column" in exc.value.kinds


def test_all_issues_are_collected(tmp_path):
    text = HEADER + participant_rows("a").replace("sr_mono,2,4,4,4,4", "sr_mono,2,9,4,4,4") \
        .replace("fm_mono,4,4", "fm_mono,4,x")
    with pytest.raises(SurveyValidationError) as exc:
        load_survey_csv(write(tmp_path, text))
    assert {"out_of_range", "non_integer"} <= exc.value.kinds


def test_short_participant_is_incomplete(tmp_path):
    text = HEADER + "".join(participant_rows("a").splitlines(keepends=True)[:5])
    with pytest.raises(SurveyValidationError) as exc:
        load_survey_csv(write(tmp_path, text))
    assert exc.value.kinds == {"incomplete"}


def test_header_only_file_is_empty_table(tmp_path):
    t = load_survey_csv(write(tmp_path, HEADER))
    assert len(t) == 0
    with pytest.raises(InvalidParameterError):
        mean_scores_by_type(t)


# -- summaries ----------------------------------------------------------------

def test_two_row_mean(tmp_path):
    t = SurveyTable(("a", "b"), ("white_noise", "white_noise"), [1, 1], [3, 5], [1, 1], [1, 1], [1, 1])
    s = mean_scores_by_type(t)
    assert s.mean("white_noise", "physical") == 4.0
    st_ = s.get("white_noise", "physical")
    assert st_.sd == 1.0 and st_.count == 2


def test_counts_sum_to_table_size():
    t = load_survey_csv(FIXTURES / "survey_700.csv")
    s = mean_scores_by_type(t, FAMILIES)
    for effect in ("physical", "naturalness"):
        assert sum(s.get(f, effect).count for f in s.types) == 700
    assert s.types == tuple(FAMILIES)


def test_simulated_naturalness_gap():
    feats = features()
    base = default_effect_model(feats)
    nat = {c: 4.0 for c in CATALOG}
    nat.update(mir_mono=5.0, mir_stereo=5.0)
    model = EffectModel(base.responses, nat, naturalness_sd=0.8)
    s = mean_scores_by_type(simulate_survey(feats, model, seed=2024), FAMILIES)
    assert abs(s.mean("MIR", "naturalness") - s.mean("White noise", "naturalness") - 1.0) <= 0.2


def test_semantic_table_layout():
    t = SurveyTable(("a",) * 7, CATALOG, range(1, 8), [4] * 7, [4] * 7, [4] * 7, [5, 4, 4, 3, 3, 6, 6])
    text = render_semantic_table(mean_scores_by_type(t, FAMILIES))
    head, row = text.splitlines()
    assert head.split() == ["White", "noise", "MIR", "RAN", "FM"]
    assert row.split() == ["Sem.", "Score", "5.00", "6.00", "4.00", "3.00"]


# -- simulation ---------------------------------------------------------------

def test_simulation_is_deterministic():
    feats = features()
    m = default_effect_model(feats)
    a, b = simulate_survey(feats, m, seed=1), simulate_survey(feats, m, seed=1)
    assert a == b
    assert a != simulate_survey(feats, m, seed=2)
    assert a.simulation.seed == 1


def test_simulated_table_satisfies_the_protocol(tmp_path):
    feats = features()
    t = simulate_survey(feats, default_effect_model(feats), seed=3, n_participants=20)
    write_survey_csv(t, tmp_path / "s.csv")
    back = load_survey_csv(tmp_path / "s.csv")
    assert back == t and len(back) == 140
    assert set(t.simulation.n_clipped) == {"physical", "psychological", "relaxing"}


def test_simulator_needs_every_clip():
    feats = features()
    m = default_effect_model(feats)
    del feats["fm_mono"]
    with pytest.raises(InvalidParameterError):
        simulate_survey(feats, m, seed=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_noiseless_simulation_is_recovered_exactly(seed):
    feats = features(seed % 1000)
    coefs = {"x1": 1.5, "x3": -0.7, "x9": 0.4}
    truth = ResponseTruth(2.0, coefs, noise_sd=0.0)
    model = EffectModel({r: truth for r in ("physical", "psychological", "relaxing")},
                        {c: 4.0 for c in CATALOG}, discretize=False)
    t = simulate_survey(feats, model, seed=seed, n_participants=10)
    d = build_design(t, feats, "relaxing", "none", exclude=("x2", "x4", "x5", "x6", "x7", "x8"))
    m = fit_ols(d)
    assert m.coef("intercept") == pytest.approx(2.0, abs=1e-6)
    for k, v in coefs.items():
        assert m.coef(k) == pytest.approx(v, abs=1e-6)


def test_standardized_coefficients():
    feats = features()
    out = standardized_coefficients(feats, {"x1": 1.0})
    col = np.array([feats[c].x1 for c in CATALOG])
    assert out["x1"] * col.std() == pytest.approx(1.0)
    flat = {c: FeatureVector.from_values([1.0] * 9, c) for c in CATALOG}
    with pytest.raises(InvalidParameterError):
        standardized_coefficients(flat, {"x1": 1.0})


def test_truth_validation():
    with pytest.raises(InvalidParameterError):
        ResponseTruth(0.0, {"x10": 1.0})
    with pytest.raises(InvalidParameterError):
        ResponseTruth(0.0, {}, order_intercepts=(0.0,) * 6)
    with pytest.raises(InvalidParameterError):
        ResponseTruth(0.0, {}, noise_sd=-1.0)


# -- designs ------------------------------------------------------------------

def test_default_design_drops_x8():
    t = load_survey_csv(FIXTURES / "survey_700.csv")
    d = build_design(t, features(), "physical")
    assert d.predictors == ("x1", "x2", "x3", "x4", "x5", "x6", "x7", "x9")
    assert d.n_cols == 9 and d.n_obs == 700 and d.group_ids is None


def test_listen_order_grouping_has_seven_groups_of_100():
    t = load_survey_csv(FIXTURES / "survey_700.csv")
    d = build_design(t, features(), "relaxing", "listen_order", exclude=("x2", "x4", "x5", "x6", "x7", "x8"))
    assert d.group_labels == tuple(range(1, 8))
    assert np.bincount(d.group_ids).tolist() == [100] * 7
    assert d.group_name == "listen_order"
    fit_lmm(d)


def test_ungrouped_design_is_rejected_by_lmm():
    from cyclofeat.errors import DegenerateGroupingError

    t = load_survey_csv(FIXTURES / "survey_700.csv")
    d = build_design(t, features(), "relaxing", exclude=("x2", "x4", "x5", "x6", "x7", "x8"))
    fit_ols(d)
    with pytest.raises(DegenerateGroupingError):
        fit_lmm(d)


def test_join_errors_name_the_clip():
    t = load_survey_csv(FIXTURES / "survey_700.csv")
    feats = features()
    del feats["mir_stereo"]
    with pytest.raises(JoinError, match="mir_stereo"):
        build_design(t, feats, "physical")


@pytest.mark.parametrize("kw", [dict(response="naturalness"), dict(response="physical", grouping="clip"),
                                dict(response="physical", exclude=("x10",))])
def test_design_argument_checks(kw):
    t = load_survey_csv(FIXTURES / "survey_700.csv")
    with pytest.raises(InvalidParameterError):
        build_design(t, features(), **kw)
