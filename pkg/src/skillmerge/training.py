"""Training loops: per-skill LoRA fine-tuning, DATA-MIX joint training at
rank k*r, CAT coefficient learning, MoE router training, gradient-free
hub weighting, and base-model pretraining.

All loops share one engine (`_run_epochs`): AdamW with linear warmup and
linear decay to zero, gradient accumulation, optional best-on-validation
selection, and bit-reproducibility from (seed, config) — every stochastic
choice (splits, shuffles, dropout masks) draws from streams derived from
the config seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from skillmerge.adapters import LoraAdapter, LoraConfig, LoraPair
from skillmerge.autodiff import Var, backward, const, param, scale
from skillmerge.datagen import Example, SkillDataset
from skillmerge.errors import ContractError, DivergenceError
from skillmerge.model import (
    CatBundle,
    ToyModel,
    batch_examples,
    encode_example,
    init_adapter,
    lora_extra,
    masked_loss_graph,
    moe_extra,
    module_shape,
    target_layer_ids,
)
from skillmerge.rng import Rng, derive_seed


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    lr: float = 3e-4
    warmup_steps: int = 100
    batch_size: int = 8
    grad_accum: int = 4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size not in (4, 8):
            raise ContractError(f"batch_size must be 4 or 8, got {self.batch_size}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.grad_accum < 1 or self.warmup_steps < 0:
            raise ContractError("epochs/grad_accum must be >= 1 and warmup_steps >= 0")


@dataclass(frozen=True)
class CatTrainConfig:
    mixture_fraction: float = 0.05
    epochs: int = 1
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.mixture_fraction <= 1.0):
            raise ContractError(f"mixture_fraction must be in (0, 1], got {self.mixture_fraction}")
        if self.epochs < 1 or self.lr <= 0:
            raise ContractError("epochs must be >= 1 and lr positive")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup to lr_max over warmup_steps, then linear decay hitting
    exactly zero at total_steps. `step` is 1-based."""
    if warmup_steps >= total_steps:
        raise ContractError(f"warmup_steps {warmup_steps} must be < total steps {total_steps}")
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_max * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return lr_max * (1.0 - (step - warmup_steps) / (total_steps - warmup_steps))


class AdamW:
    """Decoupled weight decay Adam over named parameter Vars."""

    def __init__(self, params: dict[str, Var], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.value = p.value - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class MetricsWriter:
    """JSON-lines stream of (step, lr, loss, split)."""

    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w") if path is not None else None

    def write(self, step: int, lr: float, loss: float, split: str) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(
                {"step": step, "lr": lr, "loss": loss, "split": split}) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _encode(examples: Sequence[Example], max_len: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return [encode_example(ex.prompt, ex.answer, max_len) for ex in examples]


def _batch_iter(encoded, order: Sequence[int], batch_size: int):
    for i in range(0, len(order), batch_size):
        chunk = [encoded[j] for j in order[i : i + batch_size]]
        yield batch_examples(chunk)


def _run_epochs(
    *,
    trainable: dict[str, Var],
    train_encoded: list,
    val_encoded: list,
    build_loss: Callable[[tuple, bool], Var],
    epochs: int,
    lr: float,
    warmup_steps: int,
    batch_size: int,
    grad_accum: int,
    rng: Rng,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    select_best: bool = True,
    metrics: MetricsWriter | None = None,
) -> dict[str, np.ndarray]:
    """Shared engine; returns the selected parameter values (copies)."""
    n = len(train_encoded)
    if n == 0:
        raise ContractError("no training examples")
    batches_per_epoch = math.ceil(n / batch_size)
    steps_per_epoch = math.ceil(batches_per_epoch / grad_accum)
    total_steps = epochs * steps_per_epoch
    lr_schedule(total_steps, total_steps, warmup_steps, lr)  # validates warmup < total

    opt = AdamW(trainable, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    metrics = metrics or MetricsWriter(None)
    step = 0
    micro = 0
    best_val = math.inf
    best: dict[str, np.ndarray] | None = None

    def flush():
        nonlocal step, micro
        if micro == 0:
            return
        step += 1
        cur_lr = lr_schedule(step, total_steps, warmup_steps, lr)
        opt.step(cur_lr)
        opt.zero_grad()
        micro = 0
        return cur_lr

    for epoch in range(epochs):
        order = rng.child("shuffle", epoch).permutation(n)
        for batch in _batch_iter(train_encoded, order, batch_size):
            loss = build_loss(batch, True)
            if not np.isfinite(loss.value):
                raise DivergenceError(f"non-finite training loss at step {step + 1}")
            backward(scale(loss, 1.0 / grad_accum))
            micro += 1
            if micro == grad_accum:
                cur_lr = flush()
                metrics.write(step, cur_lr, float(loss.value), "train")
        flush()
        if val_encoded:
            val_loss = evaluate_loss(val_encoded, build_loss, batch_size)
            metrics.write(step, 0.0, val_loss, "val")
            if select_best and val_loss < best_val:
                best_val = val_loss
                best = {k: v.value.copy() for k, v in trainable.items()}
    if best is None:
        best = {k: v.value.copy() for k, v in trainable.items()}
    return best


def evaluate_loss(encoded: list, build_loss, batch_size: int = 8) -> float:
    total = 0.0
    count = 0
    for i in range(0, len(encoded), batch_size):
        batch = batch_examples(encoded[i : i + batch_size])
        loss = build_loss(batch, False)
        total += float(loss.value) * len(encoded[i : i + batch_size])
        count += len(encoded[i : i + batch_size])
    return total / count


def _split_train_val(examples: Sequence[Example], rng: Rng, val_fraction: float):
    """Held-out split for best-checkpoint selection; datasets smaller than
    10 examples train on everything."""
    n = len(examples)
    if n < 10 or val_fraction <= 0:
        return list(examples), []
    n_val = max(1, int(round(val_fraction * n)))
    order = rng.child("val_split").permutation(n)
    val_idx = set(order[:n_val])
    train = [examples[i] for i in range(n) if i not in val_idx]
    val = [examples[i] for i in range(n) if i in val_idx]
    return train, val


def _dropout_fn(rng: Rng, p: float):
    """Inverted-dropout multiplicative mask for the adapter A-side input."""
    if p <= 0:
        return None
    keep = 1.0 - p

    def fn(shape):
        return np.where(rng.bernoulli(keep, shape), 1.0 / keep, 0.0)

    return fn


def _adapter_param_vars(adapter: LoraAdapter) -> dict[str, Var]:
    out: dict[str, Var] = {}
    for lid, pair in adapter.layers.items():
        out[lid + "/A"] = param(pair.A.copy())
        out[lid + "/B"] = param(pair.B.copy())
    return out


def _adapter_from_values(values: dict[str, np.ndarray], ref: LoraAdapter, name: str) -> LoraAdapter:
    layers = {
        lid: LoraPair(A=values[lid + "/A"], B=values[lid + "/B"])
        for lid in ref.layers
    }
    return LoraAdapter(layers=layers, config=ref.config, name=name)


def train_skill(
    model: ToyModel,
    dataset: SkillDataset,
    config: TrainConfig,
    lora_config: LoraConfig,
    name: str = "",
    metrics_path: str | Path | None = None,
) -> LoraAdapter:
    """Fine-tune one adapter on one skill; base weights frozen, the
    checkpoint that does best on the held-out split wins."""
    rng = Rng(config.seed)
    train_ex, val_ex = _split_train_val(dataset.examples, rng, config.val_fraction)
    fresh = init_adapter(model.config, lora_config, derive_seed(config.seed, "adapter_init"), name)
    avars = _adapter_param_vars(fresh)
    wvars = {k: const(v) for k, v in model.weights.items()}
    s = lora_config.scaling
    drop_rng = rng.child("dropout")

    def build_loss(batch, train: bool) -> Var:
        extras = {
            lid: lora_extra(
                avars[lid + "/A"], avars[lid + "/B"], s,
                dropout_mask_fn=_dropout_fn(drop_rng, lora_config.lora_dropout) if train else None,
            )
            for lid in fresh.layers
        }
        return masked_loss_graph(model.config, wvars, batch, extras)

    metrics = MetricsWriter(metrics_path)
    try:
        best = _run_epochs(
            trainable=avars,
            train_encoded=_encode(train_ex, model.config.max_seq_len),
            val_encoded=_encode(val_ex, model.config.max_seq_len),
            build_loss=build_loss,
            epochs=config.epochs,
            lr=config.lr,
            warmup_steps=config.warmup_steps,
            batch_size=config.batch_size,
            grad_accum=config.grad_accum,
            weight_decay=config.weight_decay,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            rng=rng,
            metrics=metrics,
        )
    finally:
        metrics.close()
    return _adapter_from_values(best, fresh, name or f"{dataset.skill_tag}_lora")


def train_datamix(
    model: ToyModel,
    datasets: Sequence[SkillDataset],
    config: TrainConfig,
    lora_config: LoraConfig,
    name: str = "",
    metrics_path: str | Path | None = None,
) -> LoraAdapter:
    """One adapter of rank k*r on the shuffled concatenation of k skill
    datasets (parameter count matches k separate rank-r adapters). The
    concatenation order is canonicalized by skill tag, so permuting the
    dataset argument order cannot change the result."""
    if not datasets:
        raise ContractError("train_datamix needs at least one dataset")
    k = len(datasets)
    ordered = sorted(datasets, key=lambda d: (d.skill_tag, d.format_id if d.format_id is not None else -1))
    combined = SkillDataset(
        examples=[ex for d in ordered for ex in d.examples],
        skill_tag="+".join(d.skill_tag for d in ordered),
        seed=config.seed,
    )
    mix_config = LoraConfig(
        r=k * lora_config.r,
        lora_alpha=lora_config.lora_alpha,
        lora_dropout=lora_config.lora_dropout,
        target_modules=lora_config.target_modules,
    )
    return train_skill(model, combined, config, mix_config,
                       name=name or "datamix", metrics_path=metrics_path)


def train_datamix_continual(
    model: ToyModel,
    corpus_dataset: SkillDataset,
    instruction_dataset: SkillDataset,
    config: TrainConfig,
    lora_config: LoraConfig,
    name: str = "",
) -> tuple[ToyModel, LoraAdapter]:
    """Two-stage variant for mixed masking schemes: fine-tune on the
    corpus with full-sequence loss, fold that delta into the base weights,
    then train a fresh adapter on the instruction data for one epoch.
    Returns (folded model, final adapter)."""
    corpus_as_lm = SkillDataset(
        examples=[Example("", ex.prompt + ex.answer) for ex in corpus_dataset.examples],
        skill_tag=corpus_dataset.skill_tag,
        seed=corpus_dataset.seed,
    )
    stage1 = train_skill(model, corpus_as_lm, config, lora_config, name=f"{name}_stage1")
    folded = model.fold_delta({lid: d for lid, d in stage1.deltas().items()})
    stage2_cfg = replace(config, epochs=1, seed=derive_seed(config.seed, "stage2"))
    adapter = train_skill(folded, instruction_dataset, stage2_cfg, lora_config,
                          name=name or "datamix_continual")
    return folded, adapter


def _mixture(datasets: Sequence[SkillDataset], fraction: float, rng: Rng) -> list[Example]:
    """min(fraction*|D_i|) examples sampled from each dataset."""
    m = min(int(fraction * d.size) for d in datasets)
    if m == 0:
        raise ContractError(
            f"mixture is empty: {fraction:.0%} of sizes {[d.size for d in datasets]}")
    mixed: list[Example] = []
    for i, d in enumerate(datasets):
        idx = rng.child("mixture", i).sample_indices(d.size, m)
        mixed.extend(d.examples[j] for j in idx)
    return mixed


def _alpha_group(layer_id: str, granularity: str) -> str:
    if granularity == "module":
        return layer_id
    if granularity == "block":
        return ".".join(layer_id.split(".")[:2])  # "layers.{i}"
    raise ContractError(f"alpha granularity must be 'module' or 'block', got {granularity!r}")


def train_cat_coefficients(
    model: ToyModel,
    adapters: Sequence[LoraAdapter],
    datasets: Sequence[SkillDataset],
    config: CatTrainConfig,
    granularity: str = "module",
    metrics_path: str | Path | None = None,
) -> dict[str, tuple[float, ...]]:
    """Learn per-layer merge coefficients with the adapters frozen.

    Coefficients start at 1/k each and are trained on a small mixture of
    the skill datasets; returns layer-id -> alpha tuple (block granularity
    shares one tuple across a block's modules but still reports per
    module)."""
    if len(adapters) < 2:
        raise ContractError("need at least two adapters")
    rng = Rng(config.seed)
    mixed = _mixture(datasets, config.mixture_fraction, rng)
    k = len(adapters)
    layer_ids = adapters[0].layer_ids()

    groups = sorted({_alpha_group(lid, granularity) for lid in layer_ids})
    alpha_vars = {
        (g, i): param(np.asarray(1.0 / k)) for g in groups for i in range(k)
    }
    wvars = {key: const(v) for key, v in model.weights.items()}
    extras_fns = {}
    for lid in layer_ids:
        g = _alpha_group(lid, granularity)
        fns = [
            lora_extra(const(ad.layers[lid].A), const(ad.layers[lid].B), ad.scaling,
                       alpha=alpha_vars[(g, i)])
            for i, ad in enumerate(adapters)
        ]

        def combined(x, fns=fns):
            from skillmerge.autodiff import add

            out = fns[0](x)
            for f in fns[1:]:
                out = add(out, f(x))
            return out

        extras_fns[lid] = combined

    def build_loss(batch, train: bool) -> Var:
        return masked_loss_graph(model.config, wvars, batch, extras_fns)

    metrics = MetricsWriter(metrics_path)
    try:
        best = _run_epochs(
            trainable={f"{g}/{i}": v for (g, i), v in alpha_vars.items()},
            train_encoded=_encode(mixed, model.config.max_seq_len),
            val_encoded=[],
            build_loss=build_loss,
            epochs=config.epochs,
            lr=config.lr,
            warmup_steps=0,
            batch_size=4,
            grad_accum=1,
            weight_decay=0.0,  # decay would bias the coefficients toward 0
            rng=rng,
            select_best=False,
            metrics=metrics,
        )
    finally:
        metrics.close()
    return {
        lid: tuple(float(best[f"{_alpha_group(lid, granularity)}/{i}"]) for i in range(k))
        for lid in layer_ids
    }


def train_moe_router(
    model: ToyModel,
    adapters: Sequence[LoraAdapter],
    datasets: Sequence[SkillDataset],
    config: CatTrainConfig,
    metrics_path: str | Path | None = None,
) -> dict[str, np.ndarray]:
    """Train per-layer routers (zero-initialized, so the starting behavior
    is the uniform static average) on the same mixture protocol as CAT."""
    if len(adapters) < 2:
        raise ContractError("need at least two adapters")
    rng = Rng(config.seed)
    mixed = _mixture(datasets, config.mixture_fraction, rng)
    k = len(adapters)
    layer_ids = adapters[0].layer_ids()
    router_vars: dict[str, Var] = {}
    for lid in layer_ids:
        module = lid.rsplit(".", 1)[-1]
        _, d_in = module_shape(model.config, module)
        router_vars[lid] = param(np.zeros((d_in, k)))
    wvars = {key: const(v) for key, v in model.weights.items()}
    extras_fns = {lid: moe_extra(adapters, router_vars[lid], lid) for lid in layer_ids}

    def build_loss(batch, train: bool) -> Var:
        return masked_loss_graph(model.config, wvars, batch, extras_fns)

    metrics = MetricsWriter(metrics_path)
    try:
        best = _run_epochs(
            trainable=router_vars,
            train_encoded=_encode(mixed, model.config.max_seq_len),
            val_encoded=[],
            build_loss=build_loss,
            epochs=config.epochs,
            lr=config.lr,
            warmup_steps=0,
            batch_size=4,
            grad_accum=1,
            weight_decay=0.0,
            rng=rng,
            select_best=False,
            metrics=metrics,
        )
    finally:
        metrics.close()
    return {lid: best[lid] for lid in layer_ids}


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    budget: int = 100,
    step: float = 0.25,
) -> tuple[np.ndarray, float, int]:
    """Derivative-free simplex minimization with a strict evaluation budget.

    The start point is evaluated first (budget=1 returns it) and the best
    point ever evaluated is returned, regardless of where the simplex ends
    up. Coefficients are the textbook reflection/expansion/contraction/
    shrink values."""
    if budget < 1:
        raise ContractError(f"budget must be >= 1, got {budget}")
    x0 = np.asarray(x0, dtype=np.float64)
    dim = x0.size
    evals = 0
    best_x, best_f = x0.copy(), math.inf

    def ev(x: np.ndarray) -> float:
        nonlocal evals, best_x, best_f
        fx = float(f(x))
        evals += 1
        if math.isnan(fx):
            fx = math.inf
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        return fx

    simplex = [(x0.copy(), ev(x0))]
    if best_f == math.inf and evals >= budget:
        raise DivergenceError("all objective evaluations were NaN")
    for i in range(dim):
        if evals >= budget:
            return best_x, best_f, evals
        xi = x0.copy()
        xi[i] += step
        simplex.append((xi, ev(xi)))

    while evals < budget:
        simplex.sort(key=lambda p: p[1])
        if simplex[-1][1] - simplex[0][1] < 1e-12:
            break
        centroid = np.mean([p[0] for p in simplex[:-1]], axis=0)
        worst_x, worst_f = simplex[-1]
        xr = centroid + (centroid - worst_x)
        fr = ev(xr)
        if simplex[0][1] <= fr < simplex[-2][1]:
            simplex[-1] = (xr, fr)
            continue
        if fr < simplex[0][1]:
            if evals >= budget:
                break
            xe = centroid + 2.0 * (centroid - worst_x)
            fe = ev(xe)
            simplex[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if evals >= budget:
            break
        xc = centroid + 0.5 * (worst_x - centroid)
        fc = ev(xc)
        if fc < worst_f:
            simplex[-1] = (xc, fc)
            continue
        # shrink toward the best vertex
        x_best = simplex[0][0]
        new_simplex = [simplex[0]]
        for xi, _ in simplex[1:]:
            if evals >= budget:
                break
            xs = x_best + 0.5 * (xi - x_best)
            new_simplex.append((xs, ev(xs)))
        if len(new_simplex) < len(simplex):
            break
        simplex = new_simplex

    if best_f == math.inf:
        raise DivergenceError("all objective evaluations were NaN")
    return best_x, best_f, evals


def lorahub_weights(
    model: ToyModel,
    adapters: Sequence[LoraAdapter],
    examples: Sequence[Example],
    budget: int = 100,
    l2: float = 0.05,
    start: Sequence[float] | None = None,
) -> tuple[float, ...]:
    """Global merge weights from a few target-task examples, gradient-free.

    Minimizes few-shot masked loss of the weighted concatenation plus an
    L2 penalty on the weights, via Nelder-Mead from the uniform start."""
    if len(examples) < 5:
        raise ContractError(f"lorahub needs at least 5 examples, got {len(examples)}")
    k = len(adapters)
    x0 = np.full(k, 0.5) if start is None else np.asarray(start, dtype=np.float64)
    encoded = _encode(examples, model.config.max_seq_len)
    batch = batch_examples(encoded)
    wvars = {key: const(v) for key, v in model.weights.items()}

    def objective(alpha: np.ndarray) -> float:
        extras = {}
        for lid in adapters[0].layer_ids():
            fns = [
                lora_extra(const(ad.layers[lid].A), const(ad.layers[lid].B), ad.scaling,
                           alpha=float(alpha[i]))
                for i, ad in enumerate(adapters)
            ]

            def combined(x, fns=fns):
                from skillmerge.autodiff import add

                out = fns[0](x)
                for fn in fns[1:]:
                    out = add(out, fn(x))
                return out

            extras[lid] = combined
        loss = masked_loss_graph(model.config, wvars, batch, extras)
        return float(loss.value) + l2 * float(np.sum(alpha**2))

    best_x, _, _ = nelder_mead(objective, x0, budget=budget)
    return tuple(float(a) for a in best_x)


def pretrain_base(
    model: ToyModel,
    texts: Sequence[str],
    config: TrainConfig,
    metrics_path: str | Path | None = None,
) -> ToyModel:
    """Full-weight next-token pretraining on raw text sequences (no
    masking); mutates and returns the model. Stands in for the generally
    competent base the skill adapters are trained on."""
    rng = Rng(config.seed)
    examples = [Example("", t) for t in texts]
    wvars = {k: param(v) for k, v in model.weights.items()}

    def build_loss(batch, train: bool) -> Var:
        return masked_loss_graph(model.config, wvars, batch)

    metrics = MetricsWriter(metrics_path)
    try:
        final = _run_epochs(
            trainable=wvars,
            train_encoded=_encode(examples, model.config.max_seq_len),
            val_encoded=[],
            build_loss=build_loss,
            epochs=config.epochs,
            lr=config.lr,
            warmup_steps=config.warmup_steps,
            batch_size=config.batch_size,
            grad_accum=config.grad_accum,
            weight_decay=config.weight_decay,
            rng=rng,
            select_best=False,
            metrics=metrics,
        )
    finally:
        metrics.close()
    for k in model.weights:
        model.weights[k] = final[k]
    return model
