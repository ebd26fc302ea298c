# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import numpy as np

from survival_benchmarks.base.prediction import PredictionSet


class CohortData:
    records = None
    design = None
    patient_ids = None
    event_time = None
    event_indicator = None


def cohort_data_from_records(cohort, design=None):
    """`CohortData` holding patient records (and optionally their baseline design)"""
    data = CohortData()
    data.records = list(cohort)
    data.design = design
    data.patient_ids = [p.patient_id for p in data.records]
    data.event_time = np.array([p.event_time_months for p in data.records], dtype=np.float64)
    data.event_indicator = np.array([p.event_indicator for p in data.records], dtype=np.int64)
    return data


def cohort_data_from_design(frame):
    """`CohortData` of a design table indexed by patient id, with `time` and `event` columns"""
    data = CohortData()
    data.design = frame
    data.patient_ids = [str(i) for i in frame.index]
    data.event_time = frame["time"].to_numpy(dtype=np.float64)
    data.event_indicator = frame["event"].to_numpy(dtype=np.int64)
    return data


class BaseRiskModel(object):
    """The base class for horizon risk models

    Every benchmark (the survival transformer, the Cox baseline) turns a cohort into a
    `PredictionSet`, so that all of them flow through the same metric code.
    """
    def __init__(self, cfg: dict):
        """
        Parameters
        ----------
        cfg : dict
            Dictionary of configuration parameters.
        """
        self.cfg = cfg
        self._predictions = None

    def predict_risk(self, cohort_data, horizon=36.0):
        """Risk predictor
            Compute the risk of the event by `horizon` months for every patient

        Args:
            cohort_data (obj): `CohortData`. Contains the inputs the model needs
            horizon (float): prediction horizon in months

        Raises:
            NotImplementedError: subclasses implement the model
        """

        raise NotImplementedError

    def _to_prediction_set(self, risk, cohort_data, horizon):
        preds = PredictionSet(np.clip(risk, 0.0, 1.0),
                              cohort_data.event_time,
                              cohort_data.event_indicator,
                              horizon=horizon,
                              patient_ids=cohort_data.patient_ids)
        self.predictions = preds
        return preds

    @property
    def predictions(self):
        return self._predictions

    @predictions.setter
    def predictions(self, predictions: PredictionSet):
        if type(predictions) is not PredictionSet:
            raise ValueError('Invalid prediction type. Must be `survival_benchmarks.base.prediction.PredictionSet`')

        self._predictions = predictions
