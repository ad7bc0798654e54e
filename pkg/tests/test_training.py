import json

import numpy as np
import pytest

from skillmerge import autodiff as ad
from skillmerge.adapters import LoraConfig, adapters_equal
from skillmerge.datagen import Example, SkillDataset, gen_code_skill, gen_math_skill
from skillmerge.errors import ContractError, DivergenceError
from skillmerge.model import (
    CatBundle,
    MoeBundle,
    ToyConfig,
    ToyModel,
    attachment_extras,
    batch_examples,
    encode_example,
    generate,
    init_adapter,
    masked_loss_graph,
    moe_extra,
    target_layer_ids,
)
from skillmerge.rng import Rng
from skillmerge.training import (
    AdamW,
    CatTrainConfig,
    TrainConfig,
    lorahub_weights,
    lr_schedule,
    nelder_mead,
    pretrain_base,
    train_cat_coefficients,
    train_datamix,
    train_datamix_continual,
    train_moe_router,
    train_skill,
)

from oracles import finite_diff_grad, max_rel_err

SMALL = ToyConfig(d_model=32, n_layers=1, n_heads=2, d_ff=48, max_seq_len=48)
LORA4 = LoraConfig(r=4, lora_alpha=8, lora_dropout=0.0,
                   target_modules=("q_proj", "v_proj", "k_proj", "up_proj", "down_proj"))


def make_dataset(tag, n, seed, maker):
    rng = Rng(seed)
    seen = set()
    examples = []
    while len(examples) < n:
        ex = maker(rng)
        if ex.prompt in seen:
            continue
        seen.add(ex.prompt)
        examples.append(ex)
    return SkillDataset(examples, tag, seed)


_PRETRAINED_WEIGHTS = None


def pretrained_model():
    """Small base pretrained on neutral char soup (repetition patterns, no
    task mappings). A frozen random-init base pins logits near uniform, so
    tests that need confident outputs fine-tune on top of this instead."""
    global _PRETRAINED_WEIGHTS
    if _PRETRAINED_WEIGHTS is None:
        rng = Rng(1234)
        chars = "abcdefghij0123456789"
        texts = []
        for _ in range(256):
            words = [" ".join(chars[rng.integer(20)] for _ in range(3)) for _ in range(2)]
            texts.append(f"{words[0]}? {words[1]}; {words[1]}")
        model = ToyModel.init(SMALL, seed=0)
        pretrain_base(model, texts, TrainConfig(epochs=2, lr=3e-3, warmup_steps=10,
                                                batch_size=8, grad_accum=1, seed=42))
        _PRETRAINED_WEIGHTS = model.weights
    return ToyModel(SMALL, _PRETRAINED_WEIGHTS)


def digit_copy_first(rng):
    d1, d2 = rng.integer(10), rng.integer(10)
    pad = "".join(str(rng.integer(10)) for _ in range(2))
    return Example(f"{d1} {d2} {pad}?", f"{d1}")


def letter_copy_second(rng):
    letters = "abcdefghij"
    l1, l2 = letters[rng.integer(10)], letters[rng.integer(10)]
    pad = "".join(letters[rng.integer(10)] for _ in range(2))
    return Example(f"{l1} {l2} {pad}?", f"{l2}")


# schedule / optimizer ----------------------------------------------------

def test_lr_schedule_contract():
    assert lr_schedule(50, 500, 100, 3e-4) == pytest.approx(0.5 * 3e-4)
    assert lr_schedule(100, 500, 100, 3e-4) == pytest.approx(3e-4)
    assert lr_schedule(500, 500, 100, 3e-4) == 0.0
    assert lr_schedule(300, 500, 100, 1.0) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        lr_schedule(1, 100, 100, 3e-4)


def test_adamw_minimizes_quadratic():
    x = ad.param(np.array([5.0, -3.0]))
    opt = AdamW({"x": x}, weight_decay=0.0)
    for _ in range(400):
        loss = ad.sum_all(ad.mul(x, x))
        ad.backward(loss)
        opt.step(0.05)
        opt.zero_grad()
    assert np.max(np.abs(x.value)) < 1e-3


def test_adamw_weight_decay_shrinks_unused_params():
    x = ad.param(np.array([1.0]))
    opt = AdamW({"x": x}, weight_decay=0.1)
    for _ in range(50):
        opt.step(0.1)  # no gradient at all
    assert x.value[0] < 1.0


# train_skill -------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=16)
    with pytest.raises(ContractError):
        TrainConfig(lr=0.0)
    with pytest.raises(ContractError):
        CatTrainConfig(mixture_fraction=0.0)


def test_overfit_single_example():
    model = pretrained_model()
    ds = SkillDataset([Example("ab?", "cd")], "tiny", 0)
    config = TrainConfig(epochs=200, lr=0.01, warmup_steps=10, batch_size=4, grad_accum=1, seed=1)
    adapter = train_skill(model, ds, config, LORA4)
    model.attach(adapter)
    from skillmerge.model import masked_loss

    assert masked_loss(model, "ab?", "cd") < 0.01


def test_train_skill_reproducible_and_leaves_base_frozen():
    model = ToyModel.init(SMALL, seed=0)
    base_weights = {k: v.copy() for k, v in model.weights.items()}
    ds = make_dataset("d", 32, 5, digit_copy_first)
    config = TrainConfig(epochs=1, lr=1e-3, warmup_steps=2, batch_size=4, grad_accum=2, seed=7)
    a1 = train_skill(model, ds, config, LORA4, name="x")
    a2 = train_skill(model, ds, config, LORA4, name="x")
    assert adapters_equal(a1, a2)
    a3 = train_skill(model, ds, TrainConfig(epochs=1, lr=1e-3, warmup_steps=2, batch_size=4,
                                            grad_accum=2, seed=8), LORA4, name="x")
    assert not adapters_equal(a1, a3)
    for k in base_weights:
        assert np.array_equal(model.weights[k], base_weights[k])


def test_train_skill_dropout_deterministic():
    model = ToyModel.init(SMALL, seed=0)
    ds = make_dataset("d", 24, 6, digit_copy_first)
    lora = LoraConfig(r=2, lora_alpha=4, lora_dropout=0.1, target_modules=("q_proj", "v_proj"))
    config = TrainConfig(epochs=1, lr=1e-3, warmup_steps=1, batch_size=4, grad_accum=1, seed=3)
    assert adapters_equal(train_skill(model, ds, config, lora), train_skill(model, ds, config, lora))


def test_train_skill_writes_metrics(tmp_path):
    model = ToyModel.init(SMALL, seed=0)
    ds = make_dataset("d", 24, 9, digit_copy_first)
    config = TrainConfig(epochs=1, lr=1e-3, warmup_steps=1, batch_size=4, grad_accum=1, seed=3)
    train_skill(model, ds, config, LORA4, metrics_path=tmp_path / "m.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert all(set(r) == {"step", "lr", "loss", "split"} for r in rows)
    assert any(r["split"] == "val" for r in rows)


def test_divergence_detected():
    model = ToyModel.init(SMALL, seed=0)
    wvars = {k: ad.const(v) for k, v in model.weights.items()}
    from skillmerge.training import _run_epochs

    bad = ad.param(np.array(1.0))

    def build_loss(batch, train):
        return ad.Var(np.array(np.nan), parents=((bad, lambda g: g),))

    with pytest.raises(DivergenceError):
        _run_epochs(
            trainable={"bad": bad},
            train_encoded=[encode_example("a", "b", 16)] * 4,
            val_encoded=[],
            build_loss=build_loss,
            epochs=1, lr=1e-3, warmup_steps=0, batch_size=4, grad_accum=1,
            rng=Rng(0),
        )


# datamix -----------------------------------------------------------------

def test_datamix_rank_and_param_count():
    model = ToyModel.init(SMALL, seed=0)
    d1 = make_dataset("alpha", 16, 1, digit_copy_first)
    d2 = make_dataset("beta", 16, 2, letter_copy_second)
    config = TrainConfig(epochs=1, lr=1e-3, warmup_steps=1, batch_size=4, grad_accum=2, seed=0)
    mixed = train_datamix(model, [d1, d2], config, LORA4)
    assert mixed.config.r == 8
    skill = init_adapter(model.config, LORA4, 0)
    assert mixed.parameter_count() == 2 * skill.parameter_count()


def test_datamix_order_invariant():
    model = ToyModel.init(SMALL, seed=0)
    d1 = make_dataset("alpha", 16, 1, digit_copy_first)
    d2 = make_dataset("beta", 16, 2, letter_copy_second)
    config = TrainConfig(epochs=1, lr=1e-3, warmup_steps=1, batch_size=4, grad_accum=2, seed=4)
    assert adapters_equal(
        train_datamix(model, [d1, d2], config, LORA4),
        train_datamix(model, [d2, d1], config, LORA4),
    )


def test_datamix_k1_degenerates_to_train_skill():
    model = ToyModel.init(SMALL, seed=0)
    d1 = make_dataset("alpha", 16, 1, digit_copy_first)
    config = TrainConfig(epochs=1, lr=1e-3, warmup_steps=1, batch_size=4, grad_accum=2, seed=4)
    adapter = train_datamix(model, [d1], config, LORA4)
    assert adapter.config.r == LORA4.r


def test_datamix_continual_two_stages():
    model = ToyModel.init(SMALL, seed=0)
    corpus = make_dataset("corpus", 16, 3, letter_copy_second)
    instr = make_dataset("instr", 16, 4, digit_copy_first)
    config = TrainConfig(epochs=1, lr=1e-3, warmup_steps=1, batch_size=4, grad_accum=1, seed=5)
    folded, adapter = train_datamix_continual(model, corpus, instr, config, LORA4)
    assert adapter.config.r == LORA4.r
    for lid in target_layer_ids(model.config):
        key = lid + ".weight"
        assert not np.array_equal(folded.weights[key], model.weights[key])


# CAT coefficients ----------------------------------------------------------

def test_cat_alpha_gradient_matches_finite_differences():
    model = ToyModel.init(SMALL, seed=0)
    a1 = init_adapter(SMALL, LORA4, 1)
    a2 = init_adapter(SMALL, LORA4, 2)
    rng = Rng(3)
    for ad_ in (a1, a2):
        for lid, pair in ad_.layers.items():
            pair.B[:] = rng.child(ad_.name or str(id(ad_)), lid).normal(pair.B.shape, std=0.1)
    batch = batch_examples([encode_example("ab 3?", "7", 48)])
    wvars = {k: ad.const(v) for k, v in model.weights.items()}

    alphas = np.array([0.4, 0.8])

    def loss_at(avec):
        extras = attachment_extras(CatBundle([a1, a2], tuple(avec)))
        return float(masked_loss_graph(SMALL, wvars, batch, extras).value)

    alpha_vars = [ad.param(np.asarray(a)) for a in alphas]
    from skillmerge.model import lora_extra

    extras = {}
    for lid in a1.layer_ids():
        fns = [lora_extra(ad.const(x.layers[lid].A), ad.const(x.layers[lid].B), x.scaling, alpha=v)
               for x, v in zip((a1, a2), alpha_vars)]

        def combined(x, fns=fns):
            out = fns[0](x)
            for f in fns[1:]:
                out = ad.add(out, f(x))
            return out

        extras[lid] = combined
    loss = masked_loss_graph(SMALL, wvars, batch, extras)
    ad.backward(loss)
    got = np.array([float(v.grad) for v in alpha_vars])
    fd = finite_diff_grad(lambda v: loss_at(v), alphas.copy())
    assert max_rel_err(got, fd) <= 1e-6


def test_cat_zero_adapter_alpha2_gradient_is_zero():
    model = ToyModel.init(SMALL, seed=0)
    a1 = init_adapter(SMALL, LORA4, 1)
    for pair in a1.layers.values():
        pair.B[:] = 0.1
    a2 = init_adapter(SMALL, LORA4, 2)  # B = 0: the zero adapter
    wvars = {k: ad.const(v) for k, v in model.weights.items()}
    batch = batch_examples([encode_example("ab?", "c", 48)])
    from skillmerge.model import lora_extra

    v1, v2 = ad.param(np.asarray(0.5)), ad.param(np.asarray(0.5))
    extras = {}
    for lid in a1.layer_ids():
        f1 = lora_extra(ad.const(a1.layers[lid].A), ad.const(a1.layers[lid].B), a1.scaling, alpha=v1)
        f2 = lora_extra(ad.const(a2.layers[lid].A), ad.const(a2.layers[lid].B), a2.scaling, alpha=v2)
        extras[lid] = (lambda x, f1=f1, f2=f2: ad.add(f1(x), f2(x)))
    loss = masked_loss_graph(SMALL, wvars, batch, extras)
    ad.backward(loss)
    assert float(np.abs(v2.grad)) == 0.0
    assert float(np.abs(v1.grad)) > 0.0


def test_cat_coefficient_training_moves_alphas_and_freezes_adapters():
    model = pretrained_model()
    d1 = make_dataset("alpha", 40, 1, digit_copy_first)
    d2 = make_dataset("beta", 40, 2, letter_copy_second)
    config = TrainConfig(epochs=2, lr=3e-3, warmup_steps=2, batch_size=4, grad_accum=1, seed=0)
    a1 = train_skill(model, d1, config, LORA4, name="a1")
    a2 = train_skill(model, d2, config, LORA4, name="a2")
    before = {lid: (p.A.copy(), p.B.copy()) for lid, p in a1.layers.items()}

    alphas = train_cat_coefficients(
        model, [a1, a2], [d1, d2],
        CatTrainConfig(mixture_fraction=0.5, epochs=2, lr=0.01, seed=1),
    )
    assert set(alphas) == set(target_layer_ids(SMALL))
    assert any(abs(a[0] - 0.5) > 1e-4 or abs(a[1] - 0.5) > 1e-4 for a in alphas.values())
    for lid, (a_before, b_before) in before.items():
        assert np.array_equal(a1.layers[lid].A, a_before)
        assert np.array_equal(a1.layers[lid].B, b_before)


def test_cat_block_granularity_shares_within_block():
    model = ToyModel.init(SMALL, seed=0)
    d1 = make_dataset("alpha", 30, 1, digit_copy_first)
    d2 = make_dataset("beta", 30, 2, letter_copy_second)
    a1 = init_adapter(SMALL, LORA4, 1, "a1")
    a2 = init_adapter(SMALL, LORA4, 2, "a2")
    brng = Rng(9)
    for adx in (a1, a2):
        for lid, pair in adx.layers.items():
            pair.B[:] = brng.child(adx.name, lid).normal(pair.B.shape, std=0.1)
    alphas = train_cat_coefficients(
        model, [a1, a2], [d1, d2],
        CatTrainConfig(mixture_fraction=0.5, epochs=1, lr=0.01, seed=2),
        granularity="block",
    )
    block0 = {lid: a for lid, a in alphas.items() if lid.startswith("layers.0.")}
    assert len(set(block0.values())) == 1


def test_cat_empty_mixture_rejected():
    model = ToyModel.init(SMALL, seed=0)
    d1 = make_dataset("alpha", 10, 1, digit_copy_first)
    d2 = make_dataset("beta", 10, 2, letter_copy_second)
    a1 = init_adapter(SMALL, LORA4, 1)
    a2 = init_adapter(SMALL, LORA4, 2)
    with pytest.raises(ContractError, match="mixture"):
        train_cat_coefficients(model, [a1, a2], [d1, d2],
                               CatTrainConfig(mixture_fraction=0.05, epochs=1, lr=0.01, seed=0))


# MoE router ---------------------------------------------------------------

def test_moe_router_separable_routing():
    model = pretrained_model()
    d1 = make_dataset("digits", 96, 1, digit_copy_first)
    d2 = make_dataset("letters", 96, 2, letter_copy_second)
    config = TrainConfig(epochs=3, lr=3e-3, warmup_steps=2, batch_size=8, grad_accum=1, seed=0)
    a1 = train_skill(model, d1, config, LORA4, name="digits")
    a2 = train_skill(model, d2, config, LORA4, name="letters")
    routers = train_moe_router(
        model, [a1, a2], [d1, d2],
        CatTrainConfig(mixture_fraction=1.0, epochs=4, lr=0.05, seed=3),
    )
    assert set(routers) == set(target_layer_ids(SMALL))

    # coefficients always sum to 1, and skill-1 inputs route to expert 1
    sink: list = []
    wvars = {k: ad.const(v) for k, v in model.weights.items()}
    extras = {lid: moe_extra([a1, a2], ad.const(r), lid, coeff_sink=sink)
              for lid, r in routers.items()}
    from skillmerge.model import forward_graph

    test_examples = [ex for ex in make_dataset("digits", 24, 7, digit_copy_first).examples]
    alpha1 = []
    for ex in test_examples:
        ids, _ = encode_example(ex.prompt, ex.answer, 48)
        sink.clear()
        forward_graph(SMALL, wvars, ids[None, :], extras)
        for coeff in sink:
            assert np.allclose(coeff.sum(axis=-1), 1.0)
            alpha1.append(coeff[..., 0].mean())
    assert float(np.mean(alpha1)) > 0.8


# gradient-free hub weights -------------------------------------------------

def test_nelder_mead_quadratic():
    target = np.array([0.2, 0.9])

    def f(x):
        return float(np.sum((x - target) ** 2))

    best, fbest, evals = nelder_mead(f, (0.5, 0.5), budget=100)
    assert evals <= 100
    assert np.max(np.abs(best - target)) < 1e-3


def test_nelder_mead_budget_one_returns_start():
    best, fbest, evals = nelder_mead(lambda x: float(np.sum(x**2)), (0.5, 0.5), budget=1)
    assert evals == 1
    assert np.array_equal(best, [0.5, 0.5])


def test_lorahub_needs_five_examples():
    model = ToyModel.init(SMALL, seed=0)
    a1 = init_adapter(SMALL, LORA4, 1)
    a2 = init_adapter(SMALL, LORA4, 2)
    with pytest.raises(ContractError, match="5 examples"):
        lorahub_weights(model, [a1, a2], [Example("a?", "b")] * 4)


def test_lorahub_huge_regularizer_drives_weights_to_zero():
    model = ToyModel.init(SMALL, seed=0)
    a1 = init_adapter(SMALL, LORA4, 1)
    a2 = init_adapter(SMALL, LORA4, 2)
    rng = Rng(5)
    for adx in (a1, a2):
        for lid, pair in adx.layers.items():
            pair.B[:] = rng.child(str(id(adx)), lid).normal(pair.B.shape, std=0.1)
    examples = make_dataset("digits", 8, 3, digit_copy_first).examples
    weights = lorahub_weights(model, [a1, a2], examples, budget=100, l2=1e6)
    assert np.max(np.abs(weights)) < 0.05


def test_lorahub_improves_over_start_on_real_objective():
    model = pretrained_model()
    d1 = make_dataset("digits", 48, 1, digit_copy_first)
    config = TrainConfig(epochs=2, lr=3e-3, warmup_steps=1, batch_size=8, grad_accum=1, seed=0)
    a1 = train_skill(model, d1, config, LORA4, name="digits")
    a2 = init_adapter(SMALL, LORA4, 9)  # useless zero adapter
    examples = make_dataset("digits", 8, 4, digit_copy_first).examples

    def loss_at(alpha):
        model.attach(CatBundle([a1, a2], tuple(alpha)))
        from skillmerge.model import masked_loss

        vals = [masked_loss(model, ex.prompt, ex.answer) for ex in examples]
        model.detach()
        return float(np.mean(vals))

    weights = lorahub_weights(model, [a1, a2], examples, budget=60)
    assert loss_at(weights) <= loss_at((0.5, 0.5)) + 1e-9
    assert weights[0] > 0.5  # leans into the useful adapter


# pretraining ----------------------------------------------------------------

def test_pretrain_base_reduces_loss_and_mutates_model():
    model = ToyModel.init(SMALL, seed=0)
    rng = Rng(0)
    texts = ["".join("ab"[rng.integer(2)] for _ in range(20)) for _ in range(64)]
    from skillmerge.model import masked_loss

    before = float(np.mean([masked_loss(model, "", t) for t in texts[:8]]))
    pretrain_base(model, texts, TrainConfig(epochs=2, lr=3e-3, warmup_steps=2, batch_size=8,
                                            grad_accum=1, seed=1))
    after = float(np.mean([masked_loss(model, "", t) for t in texts[:8]]))
    assert after < before
