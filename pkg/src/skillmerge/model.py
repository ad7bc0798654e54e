"""Small deterministic decoder-only transformer with adapter injection.

Two layers of pre-LN causal self-attention + GELU MLP by default, learned
absolute position embeddings, character-level vocabulary. Adapter targets
are the q/k/v projections and the MLP up/down projections (the attention
output projection exists but is never a target). Everything runs in
float64 through the autodiff graph, so the factored adapter path and the
densified-delta path agree to near machine precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from skillmerge import tokenizer
from skillmerge.adapters import LoraAdapter, LoraConfig, LoraPair
from skillmerge.autodiff import (
    Var,
    add,
    backward,
    const,
    cross_entropy_masked,
    embedding_lookup,
    gelu,
    matmul,
    mul,
    reshape,
    scale,
    slice_lastdim,
    softmax_lastdim,
    layernorm_lastdim,
    transpose,
)
from skillmerge.errors import ContractError, DimensionError
from skillmerge.rng import Rng, derive_seed

ATTENTION_MASK_VALUE = -1e9

TARGET_MODULE_SHAPES = {
    # module -> (d_out key, d_in key) resolved against the config
    "q_proj": ("d_model", "d_model"),
    "k_proj": ("d_model", "d_model"),
    "v_proj": ("d_model", "d_model"),
    "up_proj": ("d_ff", "d_model"),
    "down_proj": ("d_model", "d_ff"),
}


@dataclass(frozen=True)
class ToyConfig:
    vocab_size: int = tokenizer.VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq_len: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class CatBundle:
    """Frozen adapters plus per-layer (or global) merge coefficients."""

    adapters: Sequence[LoraAdapter]
    alphas: Mapping[str, Sequence[float]] | Sequence[float]

    def alpha_for(self, layer_id: str) -> tuple[float, ...]:
        if isinstance(self.alphas, Mapping):
            return tuple(float(a) for a in self.alphas[layer_id])
        return tuple(float(a) for a in self.alphas)


@dataclass
class MoeBundle:
    """Frozen adapters routed per token: coefficients softmax(x @ W_r)."""

    adapters: Sequence[LoraAdapter]
    routers: Mapping[str, np.ndarray]  # layer-id -> [d_in, k]


Attachment = LoraAdapter | CatBundle | MoeBundle
ExtraFn = Callable[[Var], Var]


def target_layer_ids(config: ToyConfig, modules: Sequence[str] | None = None) -> list[str]:
    modules = tuple(modules) if modules is not None else tuple(TARGET_MODULE_SHAPES)
    return [f"layers.{i}.{m}" for i in range(config.n_layers) for m in modules]


def init_weights(config: ToyConfig, seed: int) -> dict[str, np.ndarray]:
    """normal(0, 0.02) matrices; layernorm gains start at 1, biases at 0.
    Each weight gets its own stream keyed by name, so adding a layer does
    not reshuffle the others."""
    rng = Rng(seed)

    def normal(name: str, shape: tuple[int, ...]) -> np.ndarray:
        return rng.child("init", name).normal(shape, std=0.02)

    d, f, v = config.d_model, config.d_ff, config.vocab_size
    w: dict[str, np.ndarray] = {
        "embed.weight": normal("embed.weight", (v, d)),
        "pos.weight": normal("pos.weight", (config.max_seq_len, d)),
        "ln_f.gain": np.ones(d),
        "ln_f.bias": np.zeros(d),
        "lm_head.weight": normal("lm_head.weight", (v, d)),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        w[p + "ln1.gain"] = np.ones(d)
        w[p + "ln1.bias"] = np.zeros(d)
        w[p + "ln2.gain"] = np.ones(d)
        w[p + "ln2.bias"] = np.zeros(d)
        for m in ("q_proj", "k_proj", "v_proj", "o_proj"):
            w[p + m + ".weight"] = normal(p + m + ".weight", (d, d))
        w[p + "up_proj.weight"] = normal(p + "up_proj.weight", (f, d))
        w[p + "down_proj.weight"] = normal(p + "down_proj.weight", (d, f))
    return w


def module_shape(config: ToyConfig, module: str) -> tuple[int, int]:
    d_out_key, d_in_key = TARGET_MODULE_SHAPES[module]
    dims = {"d_model": config.d_model, "d_ff": config.d_ff}
    return dims[d_out_key], dims[d_in_key]


def init_adapter(config: ToyConfig, lora_config: LoraConfig, seed: int, name: str = "") -> LoraAdapter:
    """Fresh adapter: A ~ normal(0, 0.02), B = 0, so the initial delta is
    exactly zero and an attached fresh adapter leaves the model unchanged."""
    rng = Rng(seed)
    layers: dict[str, LoraPair] = {}
    for lid in target_layer_ids(config, lora_config.target_modules):
        module = lid.rsplit(".", 1)[-1]
        d_out, d_in = module_shape(config, module)
        a = rng.child("lora_init", lid).normal((lora_config.r, d_in), std=0.02)
        layers[lid] = LoraPair(A=a, B=np.zeros((d_out, lora_config.r)))
    return LoraAdapter(layers=layers, config=lora_config, name=name)


class ToyModel:
    """Base weights plus at most one attached delta source."""

    def __init__(self, config: ToyConfig, weights: dict[str, np.ndarray], seed: int | None = None):
        self.config = config
        self.weights = weights
        self.seed = seed
        self.attachment: Attachment | MergedDeltaLike | None = None

    @classmethod
    def init(cls, config: ToyConfig, seed: int) -> "ToyModel":
        return cls(config, init_weights(config, seed), seed=seed)

    def attach(self, attachment) -> None:
        ids = set(_attachment_layer_ids(attachment))
        allowed = set(target_layer_ids(self.config))
        if not ids.issubset(allowed):
            raise ContractError(f"attachment targets unknown layers: {sorted(ids - allowed)}")
        self.attachment = attachment

    def detach(self) -> None:
        self.attachment = None

    def fold_delta(self, layers: Mapping[str, np.ndarray]) -> "ToyModel":
        """New model with the dense updates materialized into the base weights."""
        w = {k: v.copy() for k, v in self.weights.items()}
        for lid, d in layers.items():
            key = lid + ".weight"
            if key not in w:
                raise ContractError(f"delta targets unknown layer {lid!r}")
            if w[key].shape != d.shape:
                raise DimensionError(f"delta shape mismatch at {lid!r}", w[key].shape, d.shape)
            w[key] = w[key] + d
        clone = ToyModel(self.config, w, seed=self.seed)
        return clone

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        """No-grad forward; tokens [s] or [b, s] of ids."""
        arr = np.asarray(tokens, dtype=np.int64)
        squeeze = arr.ndim == 1
        wvars = {k: const(v) for k, v in self.weights.items()}
        extras = attachment_extras(self.attachment)
        out = forward_graph(self.config, wvars, np.atleast_2d(arr), extras)
        return out.value[0] if squeeze else out.value


# MergedDelta is defined in merging.py; accept anything exposing `.layers`.
class MergedDeltaLike:
    layers: Mapping[str, np.ndarray]


def _attachment_layer_ids(attachment) -> list[str]:
    if isinstance(attachment, LoraAdapter):
        return attachment.layer_ids()
    if isinstance(attachment, CatBundle):
        return attachment.adapters[0].layer_ids()
    if isinstance(attachment, MoeBundle):
        return list(attachment.routers)
    if hasattr(attachment, "layers"):
        return list(attachment.layers)
    raise ContractError(f"cannot attach object of type {type(attachment).__name__}")


def lora_extra(
    a_var: Var, b_var: Var, scaling: float, alpha: float | Var = 1.0, dropout_mask_fn=None
) -> ExtraFn:
    """Factored contribution alpha * s * B(Ax) as a per-layer closure.

    alpha may be a python float (static) or a scalar Var (trainable CAT
    coefficient). dropout_mask_fn, when given, returns the multiplicative
    mask for the A-side input (training only).
    """

    def fn(x: Var) -> Var:
        if dropout_mask_fn is not None:
            x = mul(x, const(dropout_mask_fn(x.value.shape)))
        h = matmul(x, transpose(a_var, (1, 0)))
        out = matmul(h, transpose(b_var, (1, 0)))
        out = scale(out, scaling)
        if isinstance(alpha, Var):
            return mul(out, alpha)
        return scale(out, alpha) if alpha != 1.0 else out

    return fn


def moe_extra(
    adapters: Sequence[LoraAdapter], router_var: Var, layer_id: str,
    coeff_sink: list | None = None,
) -> ExtraFn:
    """Per-token mixture: softmax(x @ W_r) weights each adapter's factored
    contribution position-wise. coeff_sink, when given, collects the
    realized coefficient arrays (for routing analysis)."""
    factors = [
        (const(a.layers[layer_id].A), const(a.layers[layer_id].B), a.scaling) for a in adapters
    ]

    def fn(x: Var) -> Var:
        logits = matmul(x, router_var)
        coeff = softmax_lastdim(logits)
        if coeff_sink is not None:
            coeff_sink.append(coeff.value)
        out = None
        for i, (a_var, b_var, s) in enumerate(factors):
            expert = scale(matmul(matmul(x, transpose(a_var, (1, 0))), transpose(b_var, (1, 0))), s)
            term = mul(slice_lastdim(coeff, i), expert)
            out = term if out is None else add(out, term)
        return out

    return fn


def attachment_extras(attachment) -> dict[str, ExtraFn]:
    """Constant (no-grad) per-layer contribution closures for evaluation."""
    if attachment is None:
        return {}
    if isinstance(attachment, LoraAdapter):
        s = attachment.scaling
        return {
            lid: lora_extra(const(p.A), const(p.B), s)
            for lid, p in attachment.layers.items()
        }
    if isinstance(attachment, CatBundle):
        extras: dict[str, ExtraFn] = {}
        for lid in attachment.adapters[0].layer_ids():
            alphas = attachment.alpha_for(lid)
            fns = [
                lora_extra(const(ad.layers[lid].A), const(ad.layers[lid].B), ad.scaling, alpha=al)
                for al, ad in zip(alphas, attachment.adapters)
            ]

            def combined(x: Var, fns=fns) -> Var:
                out = fns[0](x)
                for f in fns[1:]:
                    out = add(out, f(x))
                return out

            extras[lid] = combined
        return extras
    if isinstance(attachment, MoeBundle):
        return {
            lid: moe_extra(attachment.adapters, const(r), lid)
            for lid, r in attachment.routers.items()
        }
    if hasattr(attachment, "layers"):  # MergedDelta
        return {
            lid: (lambda x, dv=const(np.asarray(d)): matmul(x, transpose(dv, (1, 0))))
            for lid, d in attachment.layers.items()
        }
    raise ContractError(f"cannot attach object of type {type(attachment).__name__}")


def forward_graph(
    config: ToyConfig,
    wvars: Mapping[str, Var],
    tokens: np.ndarray,
    extras: Mapping[str, ExtraFn] | None = None,
) -> Var:
    """Causal decoder forward; returns logits Var of shape [b, s, vocab]."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, s = tokens.shape
    if s > config.max_seq_len:
        raise ContractError(f"sequence length {s} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ContractError("token ids out of vocabulary range")
    extras = extras or {}

    def proj(x: Var, lid: str) -> Var:
        y = matmul(x, transpose(wvars[lid + ".weight"], (1, 0)))
        extra = extras.get(lid)
        return add(y, extra(x)) if extra is not None else y

    x = add(
        embedding_lookup(wvars["embed.weight"], tokens),
        embedding_lookup(wvars["pos.weight"], np.arange(s)),
    )

    h_count = config.n_heads
    dh = config.d_model // h_count
    causal = np.triu(np.full((s, s), ATTENTION_MASK_VALUE), k=1)

    for i in range(config.n_layers):
        p = f"layers.{i}."
        h = add(mul(layernorm_lastdim(x), wvars[p + "ln1.gain"]), wvars[p + "ln1.bias"])

        def heads(v: Var) -> Var:
            return transpose(reshape(v, (b, s, h_count, dh)), (0, 2, 1, 3))

        q = heads(proj(h, p + "q_proj"))
        k = heads(proj(h, p + "k_proj"))
        v = heads(proj(h, p + "v_proj"))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = softmax_lastdim(add(scores, const(causal)))
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, s, config.d_model))
        x = add(x, matmul(ctx, transpose(wvars[p + "o_proj.weight"], (1, 0))))

        h2 = add(mul(layernorm_lastdim(x), wvars[p + "ln2.gain"]), wvars[p + "ln2.bias"])
        up = gelu(proj(h2, p + "up_proj"))
        x = add(x, proj(up, p + "down_proj"))

    x = add(mul(layernorm_lastdim(x), wvars["ln_f.gain"]), wvars["ln_f.bias"])
    return matmul(x, transpose(wvars["lm_head.weight"], (1, 0)))


def moe_coefficients(router: np.ndarray, x: np.ndarray) -> np.ndarray:
    """softmax(router^T x) over the expert axis; x may be [d] or [..., d]."""
    router = np.asarray(router, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != router.shape[0]:
        raise DimensionError("router and input disagree", router.shape, x.shape)
    h = x @ router
    h = h - h.max(axis=-1, keepdims=True)
    e = np.exp(h)
    return e / e.sum(axis=-1, keepdims=True)


def encode_example(prompt: str, answer: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids [BOS prompt answer EOS] and the 0/1 answer-span mask
    (answer tokens plus EOS, so the model learns to stop)."""
    p_ids = tokenizer.encode(prompt)
    a_ids = tokenizer.encode(answer)
    ids = [tokenizer.BOS_ID] + p_ids + a_ids + [tokenizer.EOS_ID]
    if len(ids) > max_len:
        raise ContractError(f"example of {len(ids)} tokens exceeds max_seq_len {max_len}")
    mask = np.zeros(len(ids))
    mask[1 + len(p_ids) :] = 1.0
    return np.asarray(ids, dtype=np.int64), mask


def batch_examples(
    encoded: Sequence[tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to the batch max length; returns (inputs, targets, target mask)
    ready for the next-token loss (inputs are tokens[:-1], targets tokens[1:])."""
    width = max(len(ids) for ids, _ in encoded)
    n = len(encoded)
    toks = np.full((n, width), tokenizer.PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width))
    for j, (ids, m) in enumerate(encoded):
        toks[j, : len(ids)] = ids
        mask[j, : len(ids)] = m
    return toks[:, :-1], toks[:, 1:], mask[:, 1:]


def masked_loss_graph(
    config: ToyConfig,
    wvars: Mapping[str, Var],
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    extras: Mapping[str, ExtraFn] | None = None,
) -> Var:
    inputs, targets, mask = batch
    logits = forward_graph(config, wvars, inputs, extras)
    return cross_entropy_masked(logits, targets, mask)


def masked_loss(model: ToyModel, prompt: str, answer: str) -> float:
    """Mean next-token cross-entropy over the answer span of one example."""
    enc = encode_example(prompt, answer, model.config.max_seq_len)
    wvars = {k: const(v) for k, v in model.weights.items()}
    loss = masked_loss_graph(model.config, wvars, batch_examples([enc]),
                             attachment_extras(model.attachment))
    return float(loss.value)


def generate(
    model: ToyModel,
    prompt: str,
    max_new_tokens: int = 200,
    temperature: float = 0.01,
    top_p: float = 0.95,
    seed: int = 0,
) -> str:
    """Autoregressive sampling with nucleus truncation.

    temperature <= 0 decodes greedily; a prompt already at max_seq_len
    returns an empty continuation. Generation stops at EOS or the budget.
    """
    ids = [tokenizer.BOS_ID] + tokenizer.encode(prompt)
    if len(ids) > model.config.max_seq_len:
        raise ContractError(f"prompt of {len(ids)} tokens exceeds max_seq_len")
    rng = Rng(derive_seed(seed, "generate"))
    out: list[int] = []
    for _ in range(max_new_tokens):
        if len(ids) >= model.config.max_seq_len:
            break
        logits = model.logits(np.asarray(ids, dtype=np.int64))[-1]
        if temperature <= 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            z = z - z.max()
            probs = np.exp(z)
            probs /= probs.sum()
            order = np.argsort(-probs, kind="stable")
            csum = np.cumsum(probs[order])
            cut = int(np.searchsorted(csum, top_p)) + 1
            kept = order[:cut]
            kp = probs[kept] / probs[kept].sum()
            u = rng.uniform()
            nxt = int(kept[np.searchsorted(np.cumsum(kp), u)])
        if nxt == tokenizer.EOS_ID:
            break
        ids.append(nxt)
        out.append(nxt)
    return tokenizer.decode(out)


CONFIG_FILENAME = "toy_config.json"


def save_model(model: ToyModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    from skillmerge.container import write_tensors

    write_tensors(path, model.weights, {"format": "toy_model"})
    (path.parent / CONFIG_FILENAME).write_text(
        json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def load_model(path: str | Path) -> ToyModel:
    from skillmerge.container import read_tensors

    path = Path(path)
    tensors, metadata = read_tensors(path)
    config = ToyConfig.from_dict(json.loads((path.parent / CONFIG_FILENAME).read_text()))
    weights = {k: v.astype(np.float64) for k, v in tensors.items()}
    return ToyModel(config, weights)
