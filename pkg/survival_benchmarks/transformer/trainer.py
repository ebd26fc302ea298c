# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Optimisation loop with end-of-epoch early stopping, and fine-tuning"""

import copy
import dataclasses
import logging
import math
import warnings

import numpy as np
import pandas as pd
import torch

from survival_benchmarks.base.config import ConfigMixin, package_cfg
from survival_benchmarks.base.errors import ConfigError, DataError, NumericalError
from survival_benchmarks.data.ehr_data import (administrative_censor, collate, shared_codes,
                                               split_cohort, tokenize)
from survival_benchmarks.transformer.checkpoint import Checkpoint
from survival_benchmarks.transformer.losses import LossConfig, LossTerms, total_loss
from survival_benchmarks.transformer.model_core import ModelConfig, SurvivalTransformer, build_model
from survival_benchmarks.transformer.soden_head import SurvivalCurve, hazard_at, risk_at

logger = logging.getLogger(__name__)

DEFAULT_CFG = package_cfg(__file__, "train.yaml")

HISTORY_COLUMNS = ["epoch", "train_loss", "heldout_loss", "learning_rate"]


@dataclasses.dataclass
class TrainConfig(ConfigMixin):
    learning_rate: float = 8e-5
    weight_decay: float = 0.02
    warmup_proportion: float = 0.1
    lr_decay: float = 0.95
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0
    eval_split_fraction: float = 0.05
    fine_tune_split_fraction: float = 0.10

    def validate(self):
        if self.learning_rate < 0.0 or self.weight_decay < 0.0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise ConfigError("warmup_proportion must lie in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive, max_epochs non-negative")
        for name in ("eval_split_fraction", "fine_tune_split_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError("{} must lie in (0, 1)".format(name))


@dataclasses.dataclass
class EncodedCohort:
    sequences: list
    event_time: torch.Tensor
    event_indicator: torch.Tensor

    def __len__(self):
        return len(self.sequences)

    def batch(self, index):
        index = torch.as_tensor(np.asarray(index, dtype=np.int64))
        return ([self.sequences[i] for i in index.tolist()], self.event_time[index], self.event_indicator[index])


def encode_cohort(cohort, vocab, model_config: ModelConfig):
    """Tokenized sequences and outcomes truncated at the model horizon"""
    cohort = administrative_censor(cohort, model_config.horizon_months)
    return EncodedCohort(sequences=[tokenize(p, vocab, model_config.max_seq_len) for p in cohort],
                         event_time=torch.tensor([p.event_time_months for p in cohort], dtype=torch.float64),
                         event_indicator=torch.tensor([p.event_indicator for p in cohort], dtype=torch.float64))


def batch_outputs(model: SurvivalTransformer, sequences):
    """(z, curve) of a list of tokenized sequences"""
    return model(collate(sequences))


def batch_loss(model, sequences, event_time, event_indicator, loss_config) -> LossTerms:
    z, curve = batch_outputs(model, sequences)
    rate = hazard_at(curve, model.head, z, event_time)
    return total_loss(curve, rate, event_time, event_indicator, loss_config)


def heldout_loss(model, encoded: EncodedCohort, loss_config, batch_size=256):
    """Total loss over the whole held-out set, in eval mode"""
    was_training = model.training
    model.eval()
    cum_hazards, rates = [], []
    with torch.no_grad():
        for start in range(0, len(encoded), batch_size):
            index = np.arange(start, min(start + batch_size, len(encoded)))
            sequences, t, _ = encoded.batch(index)
            z, curve = batch_outputs(model, sequences)
            cum_hazards.append(curve.cum_hazard)
            rates.append(hazard_at(curve, model.head, z, t))
    model.train(was_training)

    curve = SurvivalCurve(torch.cat(cum_hazards))
    terms = total_loss(curve, torch.cat(rates), encoded.event_time, encoded.event_indicator, loss_config)
    return float(terms.total)


def lr_schedule(warmup_steps, steps_per_epoch, decay):
    """Linear warmup from 0 to the peak, then `decay` per epoch"""
    def factor(step):
        if step < warmup_steps:
            return step / warmup_steps
        return decay ** ((step - warmup_steps) // steps_per_epoch)
    return factor


def _history_frame(history):
    return pd.DataFrame(history, columns=HISTORY_COLUMNS)


def write_history(history, path):
    _history_frame(history).to_csv(path, sep="\t", index=False, float_format="%.10g")


def _snapshot(model, optimizer, scheduler, shuffle_rng):
    """Everything the next epoch depends on"""
    return {"state_dict": copy.deepcopy(model.state_dict()),
            "optimizer_state": copy.deepcopy(optimizer.state_dict()),
            "scheduler_state": copy.deepcopy(scheduler.state_dict()),
            "shuffle_state": shuffle_rng.bit_generator.state,
            "rng_state": torch.get_rng_state()}


def train(cohort, model: SurvivalTransformer, vocab, train_config: TrainConfig, loss_config: LossConfig,
          split_fraction=None, history_path=None, resume=None):
    """Fit `model` on `cohort`, keeping the state with the lowest held-out loss

    Parameters
    ----------
    cohort : list of PatientRecord
    model : SurvivalTransformer
        Fresh or pretrained; trained in place and left holding the best state.
    vocab : Vocabulary
        The model's vocabulary.
    split_fraction : float or None
        Held-out fraction for end-of-epoch testing, `train_config.eval_split_fraction` by default.
    history_path : str or None
        Where to write the per-epoch history as TSV.
    resume : Checkpoint or None
        Continue the run that produced this checkpoint from its best epoch. `cohort`,
        `train_config` and `loss_config` must be those of that run.

    Returns
    -------
    Checkpoint
    """
    if len(vocab) != model.config.vocab_size:
        raise DataError("model expects {} tokens, vocabulary has {}".format(model.config.vocab_size, len(vocab)))

    fraction = train_config.eval_split_fraction if split_fraction is None else split_fraction
    train_part, held_part = split_cohort(cohort, fraction, train_config.seed)
    if len(train_part) == 0:
        raise DataError("empty cohort")
    train_set = encode_cohort(train_part, vocab, model.config)
    held_set = encode_cohort(held_part, vocab, model.config)

    torch.manual_seed(train_config.seed)
    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(train_config.seed, spawn_key=(1,))))

    steps_per_epoch = math.ceil(len(train_set) / train_config.batch_size)
    warmup_steps = int(round(train_config.warmup_proportion * steps_per_epoch * train_config.max_epochs))

    optimizer = torch.optim.AdamW(model.parameters(),
                                  lr=train_config.learning_rate,
                                  weight_decay=train_config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer,
                                                  lr_schedule(warmup_steps, steps_per_epoch, train_config.lr_decay))

    if resume is None:
        best_loss, best_epoch = heldout_loss(model, held_set, loss_config), 0
        history = [{"epoch": 0, "train_loss": float("nan"), "heldout_loss": best_loss, "learning_rate": 0.0}]
        logger.info("epoch 0: held-out loss %.6f (%d train, %d held out)", best_loss, len(train_set), len(held_set))
    else:
        if resume.optimizer_state is None or resume.scheduler_state is None or resume.shuffle_state is None:
            raise DataError("checkpoint holds no optimizer state to resume from")
        model.load_state_dict(resume.state_dict)
        optimizer.load_state_dict(resume.optimizer_state)
        scheduler.load_state_dict(resume.scheduler_state)
        shuffle_rng.bit_generator.state = resume.shuffle_state
        torch.set_rng_state(resume.rng_state)
        best_loss, best_epoch = resume.best_val_loss, resume.epoch
        history = [dict(h) for h in resume.history if h["epoch"] <= best_epoch]
        logger.info("resuming after epoch %d (held-out loss %.6f)", best_epoch, best_loss)
    best = _snapshot(model, optimizer, scheduler, shuffle_rng)

    stale = 0
    for epoch in range(best_epoch + 1, train_config.max_epochs + 1):
        model.train()
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for n_batch, start in enumerate(range(0, len(order), train_config.batch_size), start=1):
            sequences, t, event = train_set.batch(order[start:start + train_config.batch_size])
            terms = batch_loss(model, sequences, t, event, loss_config)
            if not torch.isfinite(terms.total):
                raise NumericalError("non-finite loss at epoch {}, batch {}".format(epoch, n_batch))

            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            scheduler.step()
            losses.append(float(terms.total))

        loss = heldout_loss(model, held_set, loss_config)
        lr = optimizer.param_groups[0]["lr"]
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "heldout_loss": loss, "learning_rate": lr})
        logger.info("epoch %d: train loss %.6f, held-out loss %.6f, lr %.3g", epoch, np.mean(losses), loss, lr)

        if loss < best_loss:
            best_loss, best_epoch, stale = loss, epoch, 0
            best = _snapshot(model, optimizer, scheduler, shuffle_rng)
        else:
            stale += 1
            if stale >= train_config.patience:
                logger.info("no improvement for %d epochs, stopping at epoch %d", stale, epoch)
                break

    if best_epoch == 0 and train_config.max_epochs > 0:
        warnings.warn("train(): held-out loss never improved on the initial state")

    model.load_state_dict(best["state_dict"])
    model.eval()
    if history_path is not None:
        write_history(history, history_path)

    return Checkpoint(model_config=model.config,
                      vocab=vocab,
                      epoch=best_epoch,
                      best_val_loss=best_loss,
                      history=history,
                      train_config=train_config.to_dict(),
                      loss_config=loss_config.to_dict(),
                      **best)


def fine_tune(pretrained: Checkpoint, new_cohort, train_config: TrainConfig, loss_config: LossConfig,
              history_path=None):
    """Continue training pretrained weights on a new cohort with fresh optimizer moments"""
    if not shared_codes(new_cohort, pretrained.vocab):
        raise DataError("disjoint vocabularies")

    model = pretrained.model()
    logger.info("fine-tuning from epoch %d checkpoint (held-out loss %.6f)",
                pretrained.epoch, pretrained.best_val_loss)
    return train(new_cohort, model, pretrained.vocab, train_config, loss_config,
                 split_fraction=train_config.fine_tune_split_fraction, history_path=history_path)


def resume_training(checkpoint: Checkpoint, cohort, train_config: TrainConfig, loss_config: LossConfig,
                    split_fraction=None, history_path=None):
    """Pick up the run behind `checkpoint` at its best epoch and train on to `train_config.max_epochs`"""
    return train(cohort, checkpoint.model(), checkpoint.vocab, train_config, loss_config,
                 split_fraction=split_fraction, history_path=history_path, resume=checkpoint)


def train_from_scratch(cohort, vocab, model_config: ModelConfig, train_config: TrainConfig,
                       loss_config: LossConfig, split_fraction=None, history_path=None):
    """Fresh model under `vocab`, seeded by `train_config.seed`, trained on `cohort`"""
    model_config = model_config.updated(vocab_size=len(vocab))
    model = build_model(model_config, seed=train_config.seed)
    return train(cohort, model, vocab, train_config, loss_config,
                 split_fraction=split_fraction, history_path=history_path)


def predict_curves(model: SurvivalTransformer, sequences, batch_size=256):
    """Survival curves of tokenized sequences, in eval mode"""
    was_training = model.training
    model.eval()
    cum_hazards = []
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            _, curve = batch_outputs(model, sequences[start:start + batch_size])
            cum_hazards.append(curve.cum_hazard)
    model.train(was_training)
    return SurvivalCurve(torch.cat(cum_hazards))


def predict_risk(model: SurvivalTransformer, cohort, vocab, horizon=36.0, batch_size=256):
    """Risk by `horizon` months for every patient, numpy array"""
    sequences = [tokenize(p, vocab, model.config.max_seq_len) for p in cohort]
    curves = predict_curves(model, sequences, batch_size)
    return risk_at(curves, horizon).numpy()
