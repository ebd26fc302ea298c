import numpy as np
import pandas as pd
import pytest
import torch

from survival_benchmarks.base.errors import ConfigError, DataError
from survival_benchmarks.data import ehr_data as ed
from survival_benchmarks.data.ehr_data import EncounterRecord, PatientRecord
from survival_benchmarks.explain import integrated_gradients as ig
from survival_benchmarks.transformer.model_core import build_model


@pytest.fixture
def model(tiny_model_config):
    model = build_model(tiny_model_config, seed=3)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not name.startswith("head."):
                p.normal_(0.0, 0.2)
    return model.eval()


def _toy_cohort():
    a = PatientRecord("A", "male", (EncounterRecord("D1", 600, 1),
                                    EncounterRecord("D1", 700, 2),
                                    EncounterRecord("M2", 700, 2)), 720, 30.0, 1)
    b = PatientRecord("B", "female", (EncounterRecord("D1", 850, 1),
                                      EncounterRecord("D9", 860, 2)), 900, 48.0, 0)
    return [a, b]


def _toy_attributions():
    vocab = ed.Vocabulary(["D1", "M2"])
    a, b = _toy_cohort()
    seq_a, seq_b = ed.tokenize(a, vocab), ed.tokenize(b, vocab)
    assert seq_a.codes == ("D1", "SEP", "D1", "M2", "SEP", "PRED")
    assert seq_b.codes == ("D1", "SEP", "D9", "SEP", "PRED")
    return [ig.PatientAttribution("A", seq_a.codes, seq_a.token_ids, seq_a.ages_months,
                                  np.array([0.1, 0.01, 0.3, -0.2, 0.02, 0.05])),
            ig.PatientAttribution("B", seq_b.codes, seq_b.token_ids, seq_b.ages_months,
                                  np.array([0.5, 0.0, 9.0, 0.0, -0.1]))]


def _row(table, code, stratum):
    rows = table[(table["code"] == code) & (table["stratum"] == stratum)]
    assert len(rows) == 1
    return rows.iloc[0]


def test_linear_function_is_exact():
    torch.manual_seed(0)
    w = torch.randn(5, 3)
    x = torch.randn(5, 3)
    out = ig.integrated_gradients(lambda path: (path * w).sum(dim=(1, 2)), x, steps=7, batch_size=3)
    assert torch.allclose(out, x * w, rtol=1e-12, atol=1e-15)


def test_quadratic_function_is_exact():
    x = torch.tensor([[1.0, -2.0], [0.5, 3.0]])
    base = torch.full_like(x, 0.5)
    out = ig.integrated_gradients(lambda path: (path ** 2).sum(dim=(1, 2)), x, steps=4, baseline=base)
    assert torch.allclose(out, x ** 2 - base ** 2, rtol=1e-12)


def test_completeness(model, small_cohort, small_vocab):
    seq = ed.tokenize(small_cohort[0], small_vocab)
    config = ig.AttributionConfig(ig_steps=128)
    attribution = ig.ig_patient(seq, model, config, patient_id="x")

    with torch.no_grad():
        embedded = model.embed(ed.collate([seq]))
        fn = ig.horizon_risk_fn(model, seq, config.horizon_months)
        gap = float(fn(embedded)[0] - fn(torch.zeros_like(embedded))[0])
    assert len(attribution.contributions) == len(seq)
    assert attribution.contributions.sum() == pytest.approx(gap, rel=1e-3, abs=1e-8)
    assert not model.training


def test_zero_model_gives_zero_attributions(tiny_model_config, small_cohort, small_vocab):
    model = build_model(tiny_model_config)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    seq = ed.tokenize(small_cohort[1], small_vocab)
    attribution = ig.ig_patient(seq, model, ig.AttributionConfig(ig_steps=8))
    assert np.all(attribution.contributions == 0.0)


def test_explain_cohort(model, small_cohort, small_vocab):
    attributions = ig.explain_cohort(model, small_cohort[:3], small_vocab, ig.AttributionConfig(ig_steps=8))
    assert [a.patient_id for a in attributions] == [p.patient_id for p in small_cohort[:3]]
    assert all(np.all(np.isfinite(a.contributions)) for a in attributions)


def test_aggregate_takes_max_and_skips_unknown():
    with pytest.warns(UserWarning):
        report = ig.aggregate(_toy_attributions(), _toy_cohort(), ig.AttributionConfig(prevalence_floor=0.0))

    d1 = _row(report.table, "D1", "all")
    assert d1["mean_contribution"] == pytest.approx(0.4)
    assert d1["count"] == 2
    assert d1["ci_high"] - d1["mean_contribution"] == pytest.approx(1.96 * np.std([0.3, 0.5], ddof=1) / np.sqrt(2))

    m2 = _row(report.table, "M2", "all")
    assert m2["mean_contribution"] == pytest.approx(-0.2)
    assert np.isnan(m2["ci_low"])
    assert "D9" not in set(report.table["code"])

    assert _row(report.special_tokens, "SEP", "all")["mean_contribution"] == pytest.approx(0.01)
    assert _row(report.special_tokens, "PRED", "all")["mean_contribution"] == pytest.approx(-0.025)
    assert report.top_k["code"].tolist() == ["D1", "M2"]
    assert report.top_k["rank"].tolist() == [1, 2]


def test_aggregate_strata():
    with pytest.warns(UserWarning):
        report = ig.aggregate(_toy_attributions(), _toy_cohort(), ig.AttributionConfig(prevalence_floor=0.0))

    assert _row(report.table, "D1", "sex=male")["mean_contribution"] == pytest.approx(0.3)
    assert _row(report.table, "D1", "sex=female")["mean_contribution"] == pytest.approx(0.5)
    assert _row(report.table, "D1", "age_first=[0,60)")["count"] == 1
    assert _row(report.table, "D1", "age_first=[70,80)")["mean_contribution"] == pytest.approx(0.5)
    assert _row(report.table, "D1", "years_to_baseline=[10,200)")["mean_contribution"] == pytest.approx(0.3)
    assert _row(report.table, "D1", "years_to_baseline=[1,5)")["mean_contribution"] == pytest.approx(0.5)
    assert ("D1", "age_first=[60,70)") in report.omitted_strata


def test_aggregate_prevalence_floor():
    with pytest.warns(UserWarning):
        report = ig.aggregate(_toy_attributions(), _toy_cohort(), ig.AttributionConfig(prevalence_floor=0.6))
    assert set(report.table["code"]) == {"D1"}


def test_aggregate_is_order_independent():
    config = ig.AttributionConfig(prevalence_floor=0.0)
    with pytest.warns(UserWarning):
        a = ig.aggregate(_toy_attributions(), _toy_cohort(), config)
        b = ig.aggregate(_toy_attributions()[::-1], _toy_cohort()[::-1], config)
    pd.testing.assert_frame_equal(a.table, b.table)
    pd.testing.assert_frame_equal(a.special_tokens, b.special_tokens)


def test_aggregate_errors():
    with pytest.raises(DataError):
        ig.aggregate([], _toy_cohort(), ig.AttributionConfig())
    with pytest.raises(DataError):
        ig.aggregate(_toy_attributions(), _toy_cohort()[:1], ig.AttributionConfig())
    with pytest.raises(ConfigError):
        ig.AttributionConfig(age_bins_years=[60, 0]).validate()


def test_write_report(tmp_path):
    with pytest.warns(UserWarning):
        report = ig.aggregate(_toy_attributions(), _toy_cohort(), ig.AttributionConfig(prevalence_floor=0.0))
    ig.write_attribution_report(report, str(tmp_path))
    table = pd.read_csv(tmp_path / "attributions.csv")
    assert list(table.columns) == ig.ATTRIBUTION_COLUMNS
    assert list(pd.read_csv(tmp_path / "top_k.csv").columns) == ["rank"] + ig.ATTRIBUTION_COLUMNS
    assert set(pd.read_csv(tmp_path / "special_tokens.csv")["code"]) == {"SEP", "PRED"}


def test_prevalence_floor_is_exact_at_the_boundary():
    vocab = ed.Vocabulary(["D1", "D7"])
    cohort, attributions = [], []
    for i in range(100):
        encounters = (EncounterRecord("D1", 10, 1),) + ((EncounterRecord("D7", 10, 1),) if i < 7 else ())
        patient = PatientRecord("p{:03d}".format(i), "male", encounters, 20, 10.0, 0)
        seq = ed.tokenize(patient, vocab)
        cohort.append(patient)
        attributions.append(ig.PatientAttribution(patient.patient_id, seq.codes, seq.token_ids, seq.ages_months,
                                                  np.ones(len(seq))))

    with pytest.warns(UserWarning):
        report = ig.aggregate(attributions, cohort, ig.AttributionConfig(prevalence_floor=0.07))
    assert set(report.table["code"]) == {"D1", "D7"}
    with pytest.warns(UserWarning):
        report = ig.aggregate(attributions, cohort, ig.AttributionConfig(prevalence_floor=0.08))
    assert set(report.table["code"]) == {"D1"}
