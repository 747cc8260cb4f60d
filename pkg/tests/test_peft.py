import dataclasses

import numpy as np
import pytest

from mmgl import autodiff as ad
from mmgl.assembly import assemble_for
from mmgl.lm import ConfigError, MMGLModel, ModelConfig
from mmgl.peft import (PAIRING_RULE, PeftKind, PeftMode, apply_peft, check_pairing, count_params, group_counts,
                       lora_wrap)
from helpers import random_example, tiny_model


def desk(kind, **kw):
    cross = kind is PeftKind.FLAMINGO
    model = MMGLModel(ModelConfig(cross_attention=cross))
    apply_peft(model, PeftMode(kind, **kw))
    return model


def test_full_trains_everything():
    assert count_params(desk(PeftKind.FULL))["fraction"] == 1.0


def test_prefix_closed_form_count():
    c = ModelConfig()
    d = c.d_model
    expect = c.n_layers * 2 * 8 * d + 2 * (c.d_enc * d + d) + 64 * d
    counts = count_params(desk(PeftKind.PREFIX, prefix_len=8))
    assert counts["trainable"] == expect == 33024


def test_lora_closed_form_count():
    c = ModelConfig()
    d, r = c.d_model, 8
    expect = c.n_layers * 2 * (d * r + r * d) + 2 * (c.d_enc * d + d) + 64 * d
    assert count_params(desk(PeftKind.LORA))["trainable"] == expect


def test_flamingo_closed_form_count():
    c = ModelConfig(cross_attention=True)
    d, f = c.d_model, c.d_ff
    block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2
    expect = c.n_layers * block + 2 * (c.d_enc * d + d) + 64 * d
    model = desk(PeftKind.FLAMINGO)
    assert count_params(model)["trainable"] == expect
    assert group_counts(model)["cross"] == c.n_layers * block


def test_prefix_fraction_below_lora():
    assert count_params(desk(PeftKind.PREFIX))["fraction"] < count_params(desk(PeftKind.LORA))["fraction"]


@pytest.mark.parametrize("enc, kind", [("ca_e", PeftKind.PREFIX), ("ca_e", PeftKind.LORA),
                                       ("sa_te", PeftKind.FLAMINGO), ("sa_e", PeftKind.FLAMINGO)])
def test_illegal_pairings_quote_rule(enc, kind):
    with pytest.raises(ConfigError) as exc:
        check_pairing(enc, PeftMode(kind))
    assert PAIRING_RULE in str(exc.value)


def test_flamingo_needs_cross_attention():
    with pytest.raises(ConfigError):
        apply_peft(tiny_model(), PeftMode(PeftKind.FLAMINGO))
    model = tiny_model()
    apply_peft(model, PeftMode(PeftKind.FULL))
    with pytest.raises(ConfigError):
        apply_peft(model, PeftMode(PeftKind.FULL))


def test_lora_rank_limits():
    with pytest.raises(ConfigError):
        lora_wrap(tiny_model(), 0, "q", 99, 1.0)
    with pytest.raises(ConfigError):
        apply_peft(tiny_model(), PeftMode(PeftKind.LORA, rank=0))


def test_mode_parse():
    assert PeftMode.parse("Prefix_tuning").kind is PeftKind.PREFIX
    assert PeftMode.parse("lora", rank=2).rank == 2
    with pytest.raises(ValueError):
        PeftMode.parse("adapters")


@pytest.mark.parametrize("kind, enc", [(PeftKind.PREFIX, "sa_te"), (PeftKind.LORA, "sa_e"),
                                       (PeftKind.FLAMINGO, "ca_e")])
def test_zero_init_matches_base(kind, enc):
    rng = np.random.default_rng(0)
    mode = PeftMode(kind, prefix_len=0, rank=2, alpha=4.0)
    cross = kind is PeftKind.FLAMINGO
    model = tiny_model(cross_attention=cross)
    apply_peft(model, mode, enc)
    base = tiny_model()
    inp = assemble_for(model, random_example(rng), enc)
    ref = base(dataclasses.replace(inp, memory=None)).data
    assert np.abs(model(inp).data - ref).max() <= 1e-12


def test_prefix_slots_change_output_when_nonzero():
    rng = np.random.default_rng(1)
    model = tiny_model()
    apply_peft(model, PeftMode(PeftKind.PREFIX, prefix_len=2))
    inp = assemble_for(model, random_example(rng), "sa_te")
    before = model(inp).data
    model.params["prefix.0.v"].data[...] = 1.0
    assert not np.allclose(model(inp).data[0], before[0])


@pytest.mark.parametrize("kind, enc", [(PeftKind.FULL, "sa_te"), (PeftKind.PREFIX, "sa_te"),
                                       (PeftKind.LORA, "sa_e"), (PeftKind.FLAMINGO, "ca_e")])
def test_designated_trainables_get_gradient(kind, enc):
    rng = np.random.default_rng(2)
    model = tiny_model(cross_attention=kind is PeftKind.FLAMINGO)
    trainable, frozen = apply_peft(model, PeftMode(kind, rank=2, prefix_len=2), enc)
    inp = assemble_for(model, random_example(rng), enc)
    with ad.Tape() as tape:
        loss = model.loss(inp)
    ad.backward_all(loss, tape)
    own = {"prefix": "prefix.", "lora": "lora.", "flamingo": "xattn.", "full": "layers."}[kind.value]
    assert any(np.any(model.params[n].grad != 0) for n in trainable if n.startswith(own))
    assert all(not model.params[n].requires_grad for n in frozen)
    if kind is not PeftKind.FULL:
        assert "tok_emb" in frozen and "mapper.text.w" in trainable
