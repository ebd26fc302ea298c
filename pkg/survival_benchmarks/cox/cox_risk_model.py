# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

from survival_benchmarks.base.base_risk_model import BaseRiskModel
from survival_benchmarks.cox.baseline_cph import CphModel, load_cph_model, predict_design


class CoxRiskModel(BaseRiskModel):
    """Horizon risks of a fitted Cox model over a baseline design table"""

    def __init__(self, cfg: dict):
        super(CoxRiskModel, self).__init__(cfg)

        model = cfg["model"]
        self.model = model if isinstance(model, CphModel) else load_cph_model(model)

    def predict_risk(self, cohort_data, horizon=36.0):
        if cohort_data.design is None:
            raise ValueError("CoxRiskModel needs a design table")

        risk = predict_design(self.model, cohort_data.design, horizon)
        return self._to_prediction_set(risk, cohort_data, horizon)
