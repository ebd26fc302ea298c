# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import dataclasses
import logging
import os
from typing import Optional

import torch

from survival_benchmarks.base.errors import DataError
from survival_benchmarks.data.ehr_data import UNK_ID, Vocabulary, remap_vocabulary
from survival_benchmarks.transformer.model_core import ModelConfig, SurvivalTransformer

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclasses.dataclass
class Checkpoint:
    """Everything needed to rebuild a trained model and continue training it"""
    model_config: ModelConfig
    vocab: Vocabulary
    state_dict: dict
    optimizer_state: Optional[dict] = None
    epoch: int = 0
    best_val_loss: float = float("inf")
    history: list = dataclasses.field(default_factory=list)
    scheduler_state: Optional[dict] = None
    shuffle_state: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None
    train_config: dict = dataclasses.field(default_factory=dict)
    loss_config: dict = dataclasses.field(default_factory=dict)

    def model(self):
        model = SurvivalTransformer(self.model_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(checkpoint: Checkpoint, path):
    torch.save({"format_version": FORMAT_VERSION,
                "model_config": checkpoint.model_config.to_dict(),
                "vocab_digest": checkpoint.vocab.digest(),
                "vocab_tokens": checkpoint.vocab.codes,
                "state_dict": checkpoint.state_dict,
                "optimizer_state": checkpoint.optimizer_state,
                "scheduler_state": checkpoint.scheduler_state,
                "shuffle_state": checkpoint.shuffle_state,
                "epoch": checkpoint.epoch,
                "best_val_loss": checkpoint.best_val_loss,
                "history": checkpoint.history,
                "rng_state": checkpoint.rng_state,
                "train_config": checkpoint.train_config,
                "loss_config": checkpoint.loss_config},
               path)


def _remap_token_embedding(state_dict, source_vocab, target_vocab):
    """Rows of the token table re-indexed for `target_vocab`; unknown tokens take the UNK row"""
    key = "embedding.token_embedding.weight"
    table = state_dict[key]
    index = torch.from_numpy(remap_vocabulary(target_vocab, source_vocab))
    state_dict = dict(state_dict)
    state_dict[key] = table[index].clone()

    n_unk = int((index == UNK_ID).sum()) - 1
    logger.warning("vocabulary remapped: %d of %d codes fall back to UNK", n_unk, len(target_vocab.codes))
    return state_dict


def load_checkpoint(path, vocab: Optional[Vocabulary] = None, allow_vocab_mismatch=False):
    """Read a checkpoint written by `save_checkpoint`

    When `vocab` is given its digest must match the stored one, unless
    `allow_vocab_mismatch` is set: the token embedding is then remapped onto `vocab`
    (shared codes keep their rows, the others start from the UNK row) and the
    optimizer state is dropped.
    """
    if not os.path.isfile(path):
        raise DataError("Cannot open checkpoint {}".format(path))
    try:
        raw = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise DataError("Malformed checkpoint {}: {}".format(path, e))

    if raw.get("format_version") != FORMAT_VERSION:
        raise DataError("unsupported checkpoint format {}".format(raw.get("format_version")))

    stored_vocab = Vocabulary(raw["vocab_tokens"])
    if stored_vocab.digest() != raw["vocab_digest"]:
        raise DataError("checkpoint vocabulary is corrupted")

    model_config = ModelConfig.from_dict(raw["model_config"])
    state_dict = raw["state_dict"]
    optimizer_state = raw["optimizer_state"]

    if vocab is not None and vocab.digest() != stored_vocab.digest():
        if not allow_vocab_mismatch:
            raise DataError("vocabulary hash mismatch: checkpoint {} vs given {}".format(
                stored_vocab.digest()[:12], vocab.digest()[:12]))
        state_dict = _remap_token_embedding(state_dict, stored_vocab, vocab)
        model_config = model_config.updated(vocab_size=len(vocab))
        optimizer_state = None
        stored_vocab = vocab

    return Checkpoint(model_config=model_config,
                      vocab=stored_vocab,
                      state_dict=state_dict,
                      optimizer_state=optimizer_state,
                      scheduler_state=raw.get("scheduler_state"),
                      shuffle_state=raw.get("shuffle_state"),
                      epoch=raw["epoch"],
                      best_val_loss=raw["best_val_loss"],
                      history=raw["history"],
                      rng_state=raw["rng_state"],
                      train_config=raw["train_config"],
                      loss_config=raw["loss_config"])
