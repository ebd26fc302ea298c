import numpy as np
import pytest
import torch

from survival_benchmarks.base.errors import ConfigError, DataError
from survival_benchmarks.data import ehr_data as ed
from survival_benchmarks.transformer import model_core as mc


@pytest.fixture
def model(tiny_model_config):
    return mc.build_model(tiny_model_config, seed=1).eval()


@pytest.fixture
def seq(small_cohort, small_vocab):
    return ed.tokenize(small_cohort[0], small_vocab)


def _zero_all(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def test_config_defaults_and_validation():
    config = mc.ModelConfig.from_yaml(mc.DEFAULT_CFG)
    assert (config.n_layers, config.hidden_size, config.n_heads) == (6, 150, 6)
    assert (config.intermediate_size, config.pooler_size) == (108, 150)
    assert (config.hidden_dropout, config.attention_dropout) == (0.3, 0.4)
    with pytest.raises(ConfigError):
        mc.ModelConfig(hidden_size=150, n_heads=7).validate()
    with pytest.raises(ConfigError):
        mc.ModelConfig(hidden_dropout=1.0).validate()


def test_embed_shape_and_bounds(model, seq, tiny_model_config):
    h = mc.embed(seq, model)
    assert h.shape == (len(seq), tiny_model_config.hidden_size)
    assert h.dtype == torch.float64
    assert torch.all(h.abs() < 1.0)


def test_full_size_embedding_shape(small_vocab, seq):
    config = mc.ModelConfig(vocab_size=len(small_vocab))
    model = mc.build_model(config).eval()
    assert mc.embed(seq, model).shape == (len(seq), 150)
    assert mc.latent(seq, model).shape == (150,)


def test_zero_projection_gives_zero_embedding(model, seq):
    with torch.no_grad():
        model.embedding.projection.weight.zero_()
        model.embedding.projection.bias.zero_()
    assert torch.all(mc.embed(seq, model) == 0.0)


def test_small_projection_is_linear(model, seq):
    with torch.no_grad():
        model.embedding.projection.weight.mul_(1e-6)
        model.embedding.projection.bias.zero_()
    batch = ed.collate([seq])
    emb = model.embedding
    concat = torch.cat([emb.token_embedding(batch["token_ids"]),
                        emb.age_embedding(batch["ages"]),
                        emb.position_embedding[batch["visits"]]], dim=-1)
    linear = concat @ emb.projection.weight.T
    out = mc.embed(seq, model)
    np.testing.assert_allclose(out.detach().numpy(), linear[0].detach().numpy(), rtol=1e-6, atol=1e-18)


def test_embedding_index_out_of_range(model, small_cohort, small_vocab):
    seq = ed.tokenize(small_cohort[0], small_vocab)
    too_old = seq.with_pred_age(5000)
    with pytest.raises(DataError, match="embedding index out of range"):
        mc.embed(too_old, model)


def test_attention_rows_are_distributions(model, seq):
    h = mc.embed(seq, model)
    _, attention = mc.encode(h, model, return_attention=True)
    for probs in attention:
        assert torch.allclose(probs.sum(dim=-1), torch.ones(probs.shape[:-1]))


def test_single_unmasked_key_attends_to_itself(model, seq):
    batch = ed.collate([seq])
    h = model.embed(batch)
    mask = torch.zeros_like(batch["mask"])
    mask[0, 0] = True
    _, attention = model.encode(h, mask, return_attention=True)
    assert torch.allclose(attention[0][0, :, 0, 0], torch.ones(model.config.n_heads))


def test_eval_mode_is_deterministic(model, seq):
    h = mc.embed(seq, model)
    assert torch.equal(mc.encode(h, model), mc.encode(h, model))


def test_train_mode_applies_dropout(model, seq):
    h = mc.embed(seq, model)
    torch.manual_seed(0)
    a = mc.encode(h, model, train_mode=True)
    b = mc.encode(h, model, train_mode=True)
    assert not torch.equal(a, b)
    assert not model.training


def test_latent_requires_pred(model, seq):
    truncated = ed.TokenizedSequence(seq.token_ids[:-1], seq.ages_months[:-1], seq.visit_positions[:-1],
                                     seq.codes[:-1])
    with pytest.raises(DataError):
        mc.latent(truncated, model)


def test_zero_params_give_zero_latent(model, seq):
    _zero_all(model)
    assert torch.all(mc.latent(seq, model) == 0.0)


def test_padding_leaves_latent_unchanged(model, small_cohort, small_vocab):
    seqs = [ed.tokenize(p, small_vocab) for p in small_cohort[:4]]
    plain = torch.stack([mc.latent(s, model) for s in seqs])
    padded = model.latent(ed.collate(seqs, pad_to=max(len(s) for s in seqs) + 7))
    assert torch.max(torch.abs(plain - padded)) < 1e-10


def test_baseline_age_changes_latent(model, seq):
    older = seq.with_pred_age(int(seq.ages_months[-1]) + 60)
    assert not torch.allclose(mc.latent(seq, model), mc.latent(older, model))


def test_latent_gradient_check(small_vocab):
    config = mc.ModelConfig(vocab_size=len(small_vocab), n_layers=1, hidden_size=6, n_heads=2,
                            intermediate_size=5, pooler_size=4, ode_hidden_size=3, max_visits=16,
                            hidden_dropout=0.0, attention_dropout=0.0)
    model = mc.build_model(config, seed=2).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, 0.3)

    seq = ed.TokenizedSequence(np.array([4, ed.SEP_ID, ed.PRED_ID]), np.array([500, 500, 520]),
                               np.array([1, 1, 2]), ("X", "SEP", "PRED"))
    batch = ed.collate([seq])
    embedded = model.embed(batch).detach().clone().requires_grad_(True)

    def fn(h):
        return model.latent_from_embedding(h, batch)

    assert torch.autograd.gradcheck(fn, (embedded,), eps=1e-6, atol=1e-6)
