import numpy as np
import pytest

from survival_benchmarks.base.base_risk_model import BaseRiskModel, cohort_data_from_records
from survival_benchmarks.base.errors import DataError
from survival_benchmarks.base.prediction import PredictionSet, read_predictions, write_predictions


def test_prediction_set_validation():
    preds = PredictionSet([0.2, 0.7], [3.0, 10.0], [1, 0], horizon=12)
    assert len(preds) == 2
    assert preds.patient_ids == ["0", "1"]

    with pytest.raises(DataError):
        PredictionSet([1.2, 0.1], [1.0, 2.0], [1, 0])
    with pytest.raises(DataError):
        PredictionSet([0.2, 0.1], [-1.0, 2.0], [1, 0])
    with pytest.raises(DataError):
        PredictionSet([0.2, 0.1], [1.0, 2.0], [2, 0])
    with pytest.raises(DataError):
        PredictionSet([0.2], [1.0, 2.0], [1, 0])
    with pytest.raises(DataError):
        PredictionSet([0.2], [1.0], [1], horizon=60)


def test_subset_keeps_alignment():
    preds = PredictionSet([0.1, 0.5, 0.9], [1.0, 2.0, 3.0], [0, 1, 1], patient_ids=["a", "b", "c"])
    sub = preds.subset(np.array([True, False, True]))
    assert sub.patient_ids == ["a", "c"]
    np.testing.assert_array_equal(sub.risk, [0.1, 0.9])


def test_predictions_file(tmp_path):
    preds = PredictionSet([0.123456789012345, 0.5], [3.25, 10.0], [1, 0], patient_ids=["p1", "p2"])
    path = str(tmp_path / "p.tsv")
    write_predictions(preds, path)
    back = read_predictions(path, horizon=36)
    assert back.patient_ids == ["p1", "p2"]
    np.testing.assert_array_equal(back.risk, preds.risk)
    np.testing.assert_array_equal(back.event_indicator, [1, 0])


def test_predictions_file_errors(tmp_path):
    with pytest.raises(DataError):
        read_predictions(str(tmp_path / "missing.tsv"))

    path = tmp_path / "bad.tsv"
    path.write_text("p1\t0.5\t3.0\t1\np2\t0.4\t2.0\n")
    with pytest.raises(DataError, match="line 2"):
        read_predictions(str(path))


def test_base_model_contract(small_cohort):
    model = BaseRiskModel({})
    data = cohort_data_from_records(small_cohort)
    with pytest.raises(NotImplementedError):
        model.predict_risk(data)

    preds = model._to_prediction_set(np.full(len(small_cohort), 1.5), data, 12)
    assert np.all(preds.risk == 1.0)
    assert model.predictions is preds
    with pytest.raises(ValueError):
        model.predictions = "not a prediction set"


def test_base_model_holds_only_config_and_predictions():
    model = BaseRiskModel({"horizon": 36})
    assert vars(model) == {"cfg": {"horizon": 36}, "_predictions": None}
    assert model.predictions is None
