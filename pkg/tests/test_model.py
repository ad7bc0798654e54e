import numpy as np
import pytest

from skillmerge import tokenizer
from skillmerge.adapters import LoraConfig
from skillmerge.errors import ContractError
from skillmerge.merging import merge_cat
from skillmerge.model import (
    CatBundle,
    MoeBundle,
    ToyConfig,
    ToyModel,
    batch_examples,
    encode_example,
    generate,
    init_adapter,
    load_model,
    masked_loss,
    moe_coefficients,
    save_model,
    target_layer_ids,
)
from skillmerge.rng import Rng

CFG = ToyConfig(d_model=32, n_layers=2, n_heads=2, d_ff=48, max_seq_len=64)
LORA = LoraConfig(r=2, lora_alpha=4, target_modules=("q_proj", "v_proj", "k_proj", "up_proj", "down_proj"))


def trained_like_adapter(model, seed, zero_b=False):
    """Adapter with random nonzero factors (stands in for a trained one)."""
    adapter = init_adapter(model.config, LORA, seed)
    if not zero_b:
        rng = Rng(seed + 5000)
        for lid, pair in adapter.layers.items():
            pair.B[:] = rng.child(lid).normal(pair.B.shape, std=0.05)
    return adapter


def test_config_validates_heads():
    with pytest.raises(ContractError):
        ToyConfig(d_model=30, n_heads=4)


def test_forward_deterministic():
    m1 = ToyModel.init(CFG, seed=3)
    m2 = ToyModel.init(CFG, seed=3)
    toks = np.array([1, 4, 7, 9, 2])
    assert np.array_equal(m1.logits(toks), m2.logits(toks))
    m3 = ToyModel.init(CFG, seed=4)
    assert not np.array_equal(m1.logits(toks), m3.logits(toks))


def test_logits_finite_across_seeds():
    toks = np.array([1, 10, 20, 30])
    for seed in range(100):
        model = ToyModel.init(CFG, seed=seed)
        assert np.all(np.isfinite(model.logits(toks)))


def test_fresh_adapter_is_identity():
    model = ToyModel.init(CFG, seed=0)
    toks = np.array([1, 5, 9])
    base = model.logits(toks)
    model.attach(trained_like_adapter(model, 1, zero_b=True))  # B = 0
    assert np.array_equal(model.logits(toks), base)


def test_attach_detach_restores_base():
    model = ToyModel.init(CFG, seed=0)
    toks = np.array([1, 5, 9, 11])
    base = model.logits(toks)
    adapter = trained_like_adapter(model, 2)
    model.attach(adapter)
    changed = model.logits(toks)
    assert not np.array_equal(changed, base)
    model.detach()
    assert np.array_equal(model.logits(toks), base)


def test_cat_endpoint_matches_single_adapter():
    model = ToyModel.init(CFG, seed=0)
    toks = np.array([1, 5, 9, 11, 3])
    a1 = trained_like_adapter(model, 2)
    a2 = trained_like_adapter(model, 3)
    model.attach(a1)
    single = model.logits(toks)
    model.attach(CatBundle([a1, a2], (1.0, 0.0)))
    cat = model.logits(toks)
    assert np.max(np.abs(cat - single)) <= 1e-12


def test_cat_factored_equals_densified():
    model = ToyModel.init(CFG, seed=1)
    toks = np.array([1, 5, 9, 11, 3, 7])
    a1 = trained_like_adapter(model, 2)
    a2 = trained_like_adapter(model, 3)
    alphas = (0.7, 0.6)
    model.attach(CatBundle([a1, a2], alphas))
    factored = model.logits(toks)
    dense = merge_cat([a1, a2], alphas)
    folded = model.fold_delta(dense.layers)
    folded.detach()
    assert np.max(np.abs(factored - folded.logits(toks))) <= 1e-10


def test_dense_delta_attachment_matches_fold():
    model = ToyModel.init(CFG, seed=1)
    toks = np.array([2, 6, 9])
    a1 = trained_like_adapter(model, 4)
    a2 = trained_like_adapter(model, 5)
    dense = merge_cat([a1, a2], (0.5, 0.5))
    model.attach(dense)
    attached = model.logits(toks)
    assert np.max(np.abs(attached - model.fold_delta(dense.layers).logits(toks))) <= 1e-10


def test_moe_zero_router_equals_uniform_cat():
    model = ToyModel.init(CFG, seed=1)
    toks = np.array([1, 8, 3, 9])
    a1 = trained_like_adapter(model, 6)
    a2 = trained_like_adapter(model, 7)
    routers = {}
    for lid in target_layer_ids(model.config):
        d_in = model.weights[lid + ".weight"].shape[1]
        routers[lid] = np.zeros((d_in, 2))
    model.attach(MoeBundle([a1, a2], routers))
    moe = model.logits(toks)
    model.attach(CatBundle([a1, a2], (0.5, 0.5)))
    cat = model.logits(toks)
    assert np.max(np.abs(moe - cat)) <= 1e-10


def test_moe_coefficients():
    d = 8
    x = Rng(0).normal((d,))
    assert np.allclose(moe_coefficients(np.zeros((d, 2)), x), [0.5, 0.5])
    # router built so logits are exactly (ln 3, 0)
    router = np.zeros((2, 2))
    router[0, 0] = np.log(3.0)
    coeff = moe_coefficients(router, np.array([1.0, 0.0]))
    assert np.allclose(coeff, [0.75, 0.25])
    many = moe_coefficients(Rng(1).normal((d, 2)), Rng(2).normal((5, d)))
    assert np.allclose(many.sum(axis=-1), 1.0)


def test_encode_example_mask_alignment():
    ids, mask = encode_example("ab", "cd", max_len=16)
    assert ids[0] == tokenizer.BOS_ID and ids[-1] == tokenizer.EOS_ID
    assert len(ids) == 6
    assert list(mask) == [0, 0, 0, 1, 1, 1]  # answer chars + EOS
    with pytest.raises(ContractError):
        encode_example("ab", "cd", max_len=5)


def test_batch_examples_padding():
    enc = [encode_example("a", "b", 16), encode_example("abc", "de", 16)]
    inputs, targets, mask = batch_examples(enc)
    assert inputs.shape == targets.shape == mask.shape == (2, 6)
    assert mask[0].sum() == 2  # answer char + EOS
    assert mask[1].sum() == 3


def test_masked_loss_all_ones_equals_unmasked():
    model = ToyModel.init(CFG, seed=2)
    # loss over the full sequence == masked loss with empty prompt
    full = masked_loss(model, "", "abc")
    manual_ids, _ = encode_example("", "abc", 64)
    logits = model.logits(manual_ids[:-1])
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    want = -np.mean([logp[t, manual_ids[t + 1]] for t in range(len(manual_ids) - 1)])
    assert full == pytest.approx(want, rel=1e-10)


def test_generate_zero_temperature_is_greedy():
    model = ToyModel.init(CFG, seed=3)
    out = generate(model, "ab", max_new_tokens=6, temperature=0.0)
    ids = [tokenizer.BOS_ID] + tokenizer.encode("ab")
    manual = []
    for _ in range(6):
        nxt = int(np.argmax(model.logits(np.array(ids))[-1]))
        if nxt == tokenizer.EOS_ID:
            break
        ids.append(nxt)
        manual.append(nxt)
    assert out == tokenizer.decode(manual)


def test_generate_near_zero_temperature_matches_greedy():
    model = ToyModel.init(CFG, seed=3)
    assert generate(model, "ab", 8, temperature=0.01, seed=5) == generate(model, "ab", 8, temperature=0.0)


def test_generate_seeded_sampling_reproducible():
    model = ToyModel.init(CFG, seed=4)
    g1 = generate(model, "xy", 12, temperature=1.0, top_p=1.0, seed=9)
    g2 = generate(model, "xy", 12, temperature=1.0, top_p=1.0, seed=9)
    assert g1 == g2


def test_generate_prompt_at_max_length_returns_empty():
    model = ToyModel.init(CFG, seed=4)
    prompt = "a" * (CFG.max_seq_len - 1)  # BOS + 63 chars fills the context
    assert generate(model, prompt, 10) == ""
    with pytest.raises(ContractError):
        generate(model, "a" * CFG.max_seq_len, 10)


def test_save_load_round_trip(tmp_path):
    model = ToyModel.init(CFG, seed=6)
    save_model(model, tmp_path / "m" / "model.safetensors")
    got = load_model(tmp_path / "m" / "model.safetensors")
    assert got.config == model.config
    toks = np.array([1, 7, 2, 9])
    assert np.array_equal(got.logits(toks), model.logits(toks))


def test_attach_rejects_unknown_layers():
    model = ToyModel.init(CFG, seed=0)
    bad = init_adapter(ToyConfig(d_model=32, n_layers=3, n_heads=2, d_ff=48, max_seq_len=64), LORA, 0)
    with pytest.raises(ContractError):
        model.attach(bad)


def test_overlong_sequence_rejected():
    model = ToyModel.init(CFG, seed=0)
    with pytest.raises(ContractError):
        model.logits(np.ones(CFG.max_seq_len + 1, dtype=np.int64))
