# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Encoder of tokenized EHR histories.

Token, age and visit-position embeddings are concatenated, linearly mapped back to
the hidden size and squashed with tanh. A post-norm transformer encoder runs over the
sequence and the output at the PRED position, passed through the pooler, is the
patient's latent state. The survival head (`soden_head.OdeHead`) sits on that state.
"""

import dataclasses
import logging
import math

import torch
from torch import nn

from survival_benchmarks.base.config import ConfigMixin, package_cfg
from survival_benchmarks.base.errors import ConfigError, DataError
from survival_benchmarks.base.transformations import sinusoidal_table
from survival_benchmarks.data.ehr_data import PRED_ID, collate
from survival_benchmarks.transformer.soden_head import OdeHead

logger = logging.getLogger(__name__)

DEFAULT_CFG = package_cfg(__file__, "model.yaml")

ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "tanh": nn.Tanh}


@dataclasses.dataclass
class ModelConfig(ConfigMixin):
    vocab_size: int = 4
    n_layers: int = 6
    max_seq_len: int = 512
    hidden_size: int = 150
    hidden_dropout: float = 0.3
    attention_dropout: float = 0.4
    n_heads: int = 6
    intermediate_size: int = 108
    pooler_size: int = 150
    activation: str = "gelu"
    max_age_months: int = 1320
    max_visits: int = 1024
    layer_norm_eps: float = 1e-12
    initializer_range: float = 0.02
    # survival head
    ode_hidden_size: int = 32
    ode_feed_cumulative_hazard: bool = True
    ode_substep: float = 0.25
    horizon_months: int = 48
    initial_hazard_per_month: float = 0.02

    def validate(self):
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError("hidden_size {} is not divisible by n_heads {}".format(self.hidden_size, self.n_heads))
        for name in ("hidden_dropout", "attention_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("{} must lie in [0, 1)".format(name))
        if self.activation not in ACTIVATIONS:
            raise ConfigError("unknown activation {}".format(self.activation))
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the reserved tokens")
        if not 2 <= self.max_seq_len <= 512:
            raise ConfigError("max_seq_len must lie in [2, 512]")
        if self.n_layers < 0 or self.intermediate_size < 1 or self.pooler_size < 1:
            raise ConfigError("invalid layer sizes")
        if self.initial_hazard_per_month <= 0.0:
            raise ConfigError("initial_hazard_per_month must be positive")


class EhrEmbedding(nn.Module):
    """tanh(W [token | age | visit position] + b)"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        hidden = config.hidden_size
        self.token_embedding = nn.Embedding(config.vocab_size, hidden)
        self.age_embedding = nn.Embedding(config.max_age_months + 1, hidden)
        self.register_buffer("position_embedding",
                             torch.from_numpy(sinusoidal_table(config.max_visits, hidden)),
                             persistent=False)
        self.projection = nn.Linear(3 * hidden, hidden)

    def _check_bounds(self, token_ids, ages, visits):
        if (token_ids.min() < 0 or token_ids.max() >= self.token_embedding.num_embeddings
                or ages.min() < 0 or ages.max() >= self.age_embedding.num_embeddings
                or visits.min() < 0 or visits.max() >= self.position_embedding.shape[0]):
            raise DataError("embedding index out of range")

    def forward(self, token_ids, ages, visits):
        self._check_bounds(token_ids, ages, visits)
        position = self.position_embedding.to(self.projection.weight.dtype)[visits]
        concat = torch.cat([self.token_embedding(token_ids), self.age_embedding(ages), position], dim=-1)
        return torch.tanh(self.projection(concat))


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_size = config.hidden_size // config.n_heads

        self.query = nn.Linear(config.hidden_size, config.hidden_size)
        self.key = nn.Linear(config.hidden_size, config.hidden_size)
        self.value = nn.Linear(config.hidden_size, config.hidden_size)
        self.dropout = nn.Dropout(config.attention_dropout)

    def _split_heads(self, x):
        batch, length, _ = x.shape
        return x.view(batch, length, self.n_heads, self.head_size).transpose(1, 2)

    def forward(self, hidden, mask):
        """
        hidden: (B, L, E); mask: (B, L) bool, True on real tokens.
        Returns the context (B, L, E) and attention probabilities (B, heads, L, L).
        """
        q = self._split_heads(self.query(hidden))
        k = self._split_heads(self.key(hidden))
        v = self._split_heads(self.value(hidden))

        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_size)
        scores = scores.masked_fill(~mask[:, None, None, :], torch.finfo(scores.dtype).min)
        probs = torch.softmax(scores, dim=-1)

        context = torch.matmul(self.dropout(probs), v)
        batch, _, length, _ = context.shape
        context = context.transpose(1, 2).reshape(batch, length, self.n_heads * self.head_size)
        return context, probs


class EncoderLayer(nn.Module):
    """Attention and feed-forward blocks, each followed by residual + layer norm"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attention = SelfAttention(config)
        self.attention_output = nn.Linear(config.hidden_size, config.hidden_size)
        self.attention_norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)

        self.intermediate = nn.Linear(config.hidden_size, config.intermediate_size)
        self.activation = ACTIVATIONS[config.activation]()
        self.output = nn.Linear(config.intermediate_size, config.hidden_size)
        self.output_norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)

        self.dropout = nn.Dropout(config.hidden_dropout)

    def forward(self, hidden, mask):
        context, probs = self.attention(hidden, mask)
        hidden = self.attention_norm(hidden + self.dropout(self.attention_output(context)))
        ff = self.output(self.activation(self.intermediate(hidden)))
        hidden = self.output_norm(hidden + self.dropout(ff))
        return hidden, probs


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList([EncoderLayer(config) for _ in range(config.n_layers)])

    def forward(self, hidden, mask, return_attention=False):
        attention = []
        for layer in self.layers:
            hidden, probs = layer(hidden, mask)
            attention.append(probs)
        if return_attention:
            return hidden, attention
        return hidden


class Pooler(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.dense = nn.Linear(config.hidden_size, config.pooler_size)

    def forward(self, hidden, pred_index):
        rows = torch.arange(hidden.shape[0], device=hidden.device)
        return torch.tanh(self.dense(hidden[rows, pred_index]))


class SurvivalTransformer(nn.Module):
    """Embedding, encoder, pooler and ODE survival head, in float64"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

        self.embedding = EhrEmbedding(config)
        self.embedding_dropout = nn.Dropout(config.hidden_dropout)
        self.encoder = Encoder(config)
        self.pooler = Pooler(config)
        for module in (self.embedding, self.encoder, self.pooler):
            module.apply(self._init_weights)

        self.head = OdeHead(latent_size=config.pooler_size,
                            hidden_size=config.ode_hidden_size,
                            feed_cumulative_hazard=config.ode_feed_cumulative_hazard,
                            horizon_months=config.horizon_months,
                            substep=config.ode_substep,
                            initial_hazard_per_month=config.initial_hazard_per_month)

        self.to(torch.float64)

    def _init_weights(self, module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            module.weight.data.normal_(mean=0.0, std=self.config.initializer_range)
        if isinstance(module, nn.Linear) and module.bias is not None:
            module.bias.data.zero_()
        elif isinstance(module, nn.LayerNorm):
            module.bias.data.zero_()
            module.weight.data.fill_(1.0)

    def embed(self, batch):
        return self.embedding(batch["token_ids"], batch["ages"], batch["visits"])

    def encode(self, embedded, mask, return_attention=False):
        if embedded.shape[1] > self.config.max_seq_len:
            raise DataError("sequence length {} exceeds max_seq_len {}".format(embedded.shape[1],
                                                                               self.config.max_seq_len))
        return self.encoder(self.embedding_dropout(embedded), mask, return_attention=return_attention)

    def latent_from_embedding(self, embedded, batch):
        """Latent state of an already embedded batch (the integrated-gradients path)"""
        hidden = self.encode(embedded, batch["mask"])
        return self.pooler(hidden, batch["pred_index"])

    def latent(self, batch):
        rows = torch.arange(batch["token_ids"].shape[0])
        if torch.any(batch["token_ids"][rows, batch["pred_index"]] != PRED_ID):
            raise DataError("sequence does not end with PRED")
        return self.latent_from_embedding(self.embed(batch), batch)

    def forward(self, batch):
        """Latent states (B, P) and survival curves on the monthly grid"""
        z = self.latent(batch)
        return z, self.head.integrate(z)


def build_model(config: ModelConfig, seed=0):
    """Freshly initialised model, deterministic given `seed`"""
    torch.manual_seed(seed)
    model = SurvivalTransformer(config)
    n_params = sum(p.numel() for p in model.parameters())
    logger.debug("built model with %d parameters", n_params)
    return model


class _train_mode(object):
    def __init__(self, model, train_mode):
        self.model = model
        self.train_mode = train_mode

    def __enter__(self):
        self.previous = self.model.training
        self.model.train(self.train_mode)

    def __exit__(self, *exc):
        self.model.train(self.previous)


def embed(seq, model: SurvivalTransformer):
    """Embedding of one tokenized sequence, shape (L, E)"""
    return model.embed(collate([seq]))[0]


def encode(embedded, model: SurvivalTransformer, mask=None, train_mode=False, return_attention=False):
    """Encoder output (L, E) of one embedded sequence, or (B, L, E) of a batch"""
    single = embedded.dim() == 2
    if single:
        embedded = embedded.unsqueeze(0)
    if mask is None:
        mask = torch.ones(embedded.shape[:2], dtype=torch.bool)
    elif mask.dim() == 1:
        mask = mask.unsqueeze(0)

    with _train_mode(model, train_mode):
        out = model.encode(embedded, mask, return_attention=return_attention)

    if return_attention:
        hidden, attention = out
        return (hidden[0], [a[0] for a in attention]) if single else (hidden, attention)
    return out[0] if single else out


def latent(seq, model: SurvivalTransformer, train_mode=False):
    """Pooled latent state of one tokenized sequence, length `pooler_size`"""
    if len(seq) == 0 or seq.token_ids[-1] != PRED_ID:
        raise DataError("sequence does not end with PRED")
    with _train_mode(model, train_mode):
        return model.latent(collate([seq]))[0]
