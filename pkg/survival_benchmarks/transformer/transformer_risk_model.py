# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import logging

from survival_benchmarks.base.base_risk_model import BaseRiskModel
from survival_benchmarks.transformer.checkpoint import load_checkpoint
from survival_benchmarks.transformer.trainer import predict_risk

logger = logging.getLogger(__name__)


class TransformerRiskModel(BaseRiskModel):
    """Horizon risks from a trained survival transformer checkpoint

    cfg keys: `checkpoint` (path), optional `vocab` (Vocabulary the cohort should be read
    under), `allow_vocab_mismatch`, `batch_size`.
    """

    def __init__(self, cfg: dict):
        super(TransformerRiskModel, self).__init__(cfg)

        self.checkpoint = load_checkpoint(cfg["checkpoint"],
                                          vocab=cfg.get("vocab"),
                                          allow_vocab_mismatch=cfg.get("allow_vocab_mismatch", False))
        self.model = self.checkpoint.model()
        self.batch_size = cfg.get("batch_size", 256)

    @property
    def vocab(self):
        return self.checkpoint.vocab

    def predict_risk(self, cohort_data, horizon=36.0):
        """Risk by `horizon` months for the patients in `cohort_data.records`"""
        if cohort_data.records is None:
            raise ValueError("TransformerRiskModel needs patient records")

        risk = predict_risk(self.model, cohort_data.records, self.vocab, horizon, self.batch_size)
        logger.info("predicted %d risks at %g months", len(risk), horizon)
        return self._to_prediction_set(risk, cohort_data, horizon)
