"""Merging of low-rank adapters: CAT, linear, TIES, DARE, SLERP.

Two families, distinguished by where the combination happens:

* concatenation (CAT): the dense updates are combined,
  dW = a1*s*B1@A1 + a2*s*B2@A2. Equivalently a rank-k*r adapter with the
  alpha-scaled B factors concatenated; `cat_concat_form` builds that
  adapter and must densify to the same matrix.
* linear: the factors are combined before the product,
  dW = s * (a1*B1 + a2*B2) @ (a1*A1 + a2*A2), which adds the cross terms
  a1*a2*(B1@A2 + B2@A1)*s. TIES and DARE preprocess the factors (magnitude
  trim + sign election, random drop + 1/density rescale) and then compose
  linearly.

All operations are pure: identical inputs (including seeds) give
bit-identical outputs, and per-layer work is independent so layers may be
merged in parallel without affecting results.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from skillmerge.adapters import LoraAdapter, LoraConfig, LoraPair
from skillmerge.container import read_tensors, write_tensors
from skillmerge.errors import ContainerFormatError, ContractError, MergeError
from skillmerge.rng import Rng, derive_seed

MERGE_METHODS = ("cat_static", "cat_learned", "linear", "ties", "dare", "slerp")

# Near-parallel (or antiparallel) deltas make sin(theta) ~ 0; below this
# angle SLERP falls back to plain linear interpolation to avoid 0/0.
SLERP_ANGLE_EPS = 1e-6

AlphaSpec = Sequence[float] | Mapping[str, Sequence[float]]


@dataclass
class MergeSpec:
    """Method selector plus hyperparameters, JSON-serializable."""

    method: str
    alphas: AlphaSpec | None = None
    density: float | None = None  # ties/dare
    t: float | None = None  # slerp
    seed: int | None = None  # dare
    dare_b_only: bool = False

    def __post_init__(self):
        if self.method not in MERGE_METHODS:
            raise ContractError(f"unknown merge method {self.method!r}; expected one of {MERGE_METHODS}")
        if self.method in ("ties", "dare"):
            if self.density is None:
                raise ContractError(f"{self.method} requires a density")
            if not (0.0 <= self.density <= 1.0):
                raise ContractError(f"density must be in [0, 1], got {self.density}")
        if self.method == "dare" and self.seed is None:
            raise ContractError("dare requires a seed")
        if self.method == "slerp":
            if self.t is None or not (0.0 <= self.t <= 1.0):
                raise ContractError(f"slerp requires t in [0, 1], got {self.t}")
        elif self.alphas is None:
            raise ContractError(f"{self.method} requires alphas")
        if self.alphas is not None:
            # canonicalize so specs survive a to_dict/from_dict round trip
            if isinstance(self.alphas, Mapping):
                self.alphas = {str(k): tuple(float(a) for a in v) for k, v in self.alphas.items()}
                flat = [a for v in self.alphas.values() for a in v]
            else:
                self.alphas = tuple(float(a) for a in self.alphas)
                flat = list(self.alphas)
            if not all(math.isfinite(a) for a in flat):
                raise ContractError("alphas must be finite")

    def to_dict(self) -> dict:
        alphas = self.alphas
        if isinstance(alphas, Mapping):
            alphas = {k: list(v) for k, v in alphas.items()}
        elif alphas is not None:
            alphas = list(alphas)
        return {
            "method": self.method,
            "alphas": alphas,
            "density": self.density,
            "t": self.t,
            "seed": self.seed,
            "dare_b_only": self.dare_b_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergeSpec":
        return cls(
            method=d["method"],
            alphas=d.get("alphas"),
            density=d.get("density"),
            t=d.get("t"),
            seed=d.get("seed"),
            dare_b_only=bool(d.get("dare_b_only", False)),
        )


@dataclass
class MergedDelta:
    """Per-layer dense updates plus how they were produced."""

    layers: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def layer_ids(self) -> list[str]:
        return list(self.layers)


def _check_layer_sets(adapters: Sequence[LoraAdapter]) -> list[str]:
    ids0 = set(adapters[0].layers)
    for other in adapters[1:]:
        ids = set(other.layers)
        if ids != ids0:
            diff = sorted(ids0.symmetric_difference(ids))
            raise MergeError(f"adapters cover different layers; symmetric difference: {diff}")
    for lid in ids0:
        shapes = {(a.layers[lid].d_out, a.layers[lid].d_in) for a in adapters}
        if len(shapes) != 1:
            raise MergeError(f"layer {lid!r} has mismatched base dims across adapters: {sorted(shapes)}")
    return sorted(ids0)


def _resolve_alphas(alphas: AlphaSpec, layer_id: str, k: int) -> tuple[float, ...]:
    if isinstance(alphas, Mapping):
        if layer_id not in alphas:
            raise MergeError(f"per-layer alphas missing entry for {layer_id!r}")
        vals = tuple(float(a) for a in alphas[layer_id])
    else:
        vals = tuple(float(a) for a in alphas)
    if len(vals) != k:
        raise MergeError(f"expected {k} alphas for layer {layer_id!r}, got {len(vals)}")
    return vals


def _common_scaling(adapters: Sequence[LoraAdapter]) -> float:
    scalings = {a.scaling for a in adapters}
    if len(scalings) != 1:
        raise MergeError(f"linear-family merges need equal scaling across adapters, got {sorted(scalings)}")
    return scalings.pop()


def _pad_rank(pair: LoraPair, r: int) -> LoraPair:
    if pair.rank == r:
        return pair
    a = np.zeros((r, pair.d_in))
    b = np.zeros((pair.d_out, r))
    a[: pair.rank] = pair.A
    b[:, : pair.rank] = pair.B
    return LoraPair(A=a, B=b)


def _provenance(method: str, spec: MergeSpec, adapters: Sequence[LoraAdapter], **notes) -> dict:
    return {
        "method": method,
        "spec": spec.to_dict(),
        "sources": [a.name or f"adapter{i}" for i, a in enumerate(adapters)],
        **notes,
    }


def merge_cat(adapters: Sequence[LoraAdapter], alphas: AlphaSpec) -> MergedDelta:
    """Weighted sum of the dense per-layer updates (k >= 2 adapters)."""
    if len(adapters) < 2:
        raise MergeError("merge_cat needs at least two adapters")
    layer_ids = _check_layer_sets(adapters)
    k = len(adapters)
    layers: dict[str, np.ndarray] = {}
    for lid in layer_ids:
        a = _resolve_alphas(alphas, lid, k)
        acc = None
        for weight, adapter in zip(a, adapters):
            d = weight * adapter.scaling * (adapter.layers[lid].B @ adapter.layers[lid].A)
            acc = d if acc is None else acc + d
        layers[lid] = acc
    spec = MergeSpec(method="cat_static", alphas=alphas)
    return MergedDelta(layers=layers, provenance=_provenance("cat", spec, adapters))


def cat_concat_form(adapters: Sequence[LoraAdapter], alphas: AlphaSpec, name: str = "") -> LoraAdapter:
    """CAT as a rank-k*r adapter: B_cat = [a1*B1 | a2*B2 | ...], A_cat stacked.

    The concatenated config keeps the source scaling s by setting
    lora_alpha = s * (sum of ranks), so densifying this adapter equals
    merge_cat exactly.
    """
    if len(adapters) < 2:
        raise MergeError("cat_concat_form needs at least two adapters")
    layer_ids = _check_layer_sets(adapters)
    s = _common_scaling(adapters)
    k = len(adapters)
    r_cat = sum(a.config.r for a in adapters)
    layers: dict[str, LoraPair] = {}
    for lid in layer_ids:
        a = _resolve_alphas(alphas, lid, k)
        a_cat = np.vstack([ad.layers[lid].A for ad in adapters])
        b_cat = np.hstack([w * ad.layers[lid].B for w, ad in zip(a, adapters)])
        layers[lid] = LoraPair(A=a_cat, B=b_cat)
    config = LoraConfig(
        r=r_cat,
        lora_alpha=s * r_cat,
        lora_dropout=adapters[0].config.lora_dropout,
        target_modules=adapters[0].config.target_modules,
    )
    return LoraAdapter(layers=layers, config=config, name=name)


def merge_linear(a1: LoraAdapter, a2: LoraAdapter, alphas: AlphaSpec) -> MergedDelta:
    """Combine factors, then take the product (includes cross terms)."""
    layer_ids = _check_layer_sets([a1, a2])
    s = _common_scaling([a1, a2])
    r = max(a1.config.r, a2.config.r)
    layers: dict[str, np.ndarray] = {}
    for lid in layer_ids:
        w1, w2 = _resolve_alphas(alphas, lid, 2)
        p1, p2 = _pad_rank(a1.layers[lid], r), _pad_rank(a2.layers[lid], r)
        b = w1 * p1.B + w2 * p2.B
        a = w1 * p1.A + w2 * p2.A
        layers[lid] = s * (b @ a)
    spec = MergeSpec(method="linear", alphas=alphas)
    notes = {}
    if a1.config.r != a2.config.r:
        notes["rank_padded_to"] = r
    return MergedDelta(layers=layers, provenance=_provenance("linear", spec, [a1, a2], **notes))


def ties_trim(arr: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * n) largest-magnitude entries, zero the rest.

    Magnitude ties break toward the lower flat (row-major) index.
    """
    if not (0.0 <= density <= 1.0):
        raise MergeError(f"density must be in [0, 1], got {density}")
    flat = arr.reshape(-1)
    keep = math.ceil(density * flat.size)
    out = np.zeros_like(flat)
    if keep > 0:
        order = np.argsort(-np.abs(flat), kind="stable")[:keep]
        out[order] = flat[order]
    return out.reshape(arr.shape)


def ties_preprocess(pair: LoraPair, density: float) -> LoraPair:
    """Trim step applied to both factors of one pair."""
    return LoraPair(A=ties_trim(pair.A, density), B=ties_trim(pair.B, density))


def _ties_combine(trimmed: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Elect the majority sign per position, then alpha-weighted mean over
    the entries whose sign matches it. Zero-sum positions elect sign 0 and
    contribute nothing."""
    stacked = np.stack(trimmed)
    elected = np.sign(stacked.sum(axis=0))
    match = (np.sign(stacked) == elected) & (elected != 0)
    w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (stacked.ndim - 1))
    num = (w * stacked * match).sum(axis=0)
    den = (w * match).sum(axis=0)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def merge_ties(a1: LoraAdapter, a2: LoraAdapter, density: float, alphas: AlphaSpec) -> MergedDelta:
    """Trim / elect sign / disjoint-merge in factor space, then densify."""
    layer_ids = _check_layer_sets([a1, a2])
    s = _common_scaling([a1, a2])
    r = max(a1.config.r, a2.config.r)
    layers: dict[str, np.ndarray] = {}
    for lid in layer_ids:
        w = _resolve_alphas(alphas, lid, 2)
        # trim on the original factors, pad only for the final composition
        t1 = ties_preprocess(a1.layers[lid], density)
        t2 = ties_preprocess(a2.layers[lid], density)
        t1, t2 = _pad_rank(t1, r), _pad_rank(t2, r)
        a_m = _ties_combine([t1.A, t2.A], w)
        b_m = _ties_combine([t1.B, t2.B], w)
        layers[lid] = s * (b_m @ a_m)
    spec = MergeSpec(method="ties", alphas=alphas, density=density)
    return MergedDelta(
        layers=layers,
        provenance=_provenance("ties", spec, [a1, a2], merge_space="factor"),
    )


def dare_preprocess(pair: LoraPair, density: float, seed: int) -> LoraPair:
    """Drop entries with probability 1-density, rescale survivors by
    1/density. density=1 is exactly the identity; density=0 is invalid."""
    if not (0.0 < density <= 1.0):
        raise MergeError(f"dare density must be in (0, 1], got {density}")

    def drop(arr: np.ndarray, tag: str) -> np.ndarray:
        rng = Rng(derive_seed(seed, tag))
        keep = rng.bernoulli(density, arr.shape)
        return np.where(keep, arr / density, 0.0)

    return LoraPair(A=drop(pair.A, "A"), B=drop(pair.B, "B"))


def merge_dare(
    a1: LoraAdapter,
    a2: LoraAdapter,
    density: float,
    seed: int,
    alphas: AlphaSpec,
    b_only: bool = False,
) -> MergedDelta:
    """Random drop + rescale on each adapter's factors, then linear merge.

    By default the merge weights multiply both factor sums symmetrically;
    b_only=True reproduces the variant that weights only the B side,
    dW = s * (a1*B1' + a2*B2') @ (A1' + A2').
    """
    layer_ids = _check_layer_sets([a1, a2])
    s = _common_scaling([a1, a2])
    r = max(a1.config.r, a2.config.r)
    layers: dict[str, np.ndarray] = {}
    for lid in layer_ids:
        w1, w2 = _resolve_alphas(alphas, lid, 2)
        p1 = dare_preprocess(a1.layers[lid], density, derive_seed(seed, 0, lid))
        p2 = dare_preprocess(a2.layers[lid], density, derive_seed(seed, 1, lid))
        p1, p2 = _pad_rank(p1, r), _pad_rank(p2, r)
        b = w1 * p1.B + w2 * p2.B
        a = (p1.A + p2.A) if b_only else (w1 * p1.A + w2 * p2.A)
        layers[lid] = s * (b @ a)
    spec = MergeSpec(method="dare", alphas=alphas, density=density, seed=seed, dare_b_only=b_only)
    return MergedDelta(layers=layers, provenance=_provenance("dare", spec, [a1, a2]))


def slerp_coefficients(theta: float, t: float) -> tuple[float, float]:
    """Spherical interpolation weights for one layer's angle."""
    if theta < SLERP_ANGLE_EPS or math.pi - theta < SLERP_ANGLE_EPS:
        return 1.0 - t, t
    sin_theta = math.sin(theta)
    return math.sin((1.0 - t) * theta) / sin_theta, math.sin(t * theta) / sin_theta


def merge_slerp(a1: LoraAdapter, a2: LoraAdapter, t: float) -> MergedDelta:
    """Interpolate the dense updates on the sphere, per layer.

    The angle comes from the Frobenius inner product of the normalized
    flattened deltas (cosine clamped to [-1, 1] before arccos); the
    resulting coefficients weight the unnormalized deltas.
    """
    if not (0.0 <= t <= 1.0):
        raise ContractError(f"slerp t must be in [0, 1], got {t}")
    layer_ids = _check_layer_sets([a1, a2])
    layers: dict[str, np.ndarray] = {}
    angles: dict[str, float] = {}
    for lid in layer_ids:
        d1 = a1.scaling * (a1.layers[lid].B @ a1.layers[lid].A)
        d2 = a2.scaling * (a2.layers[lid].B @ a2.layers[lid].A)
        n1 = float(np.linalg.norm(d1))
        n2 = float(np.linalg.norm(d2))
        if n1 == 0.0 or n2 == 0.0:
            raise MergeError(f"slerp cannot normalize a zero delta (layer {lid!r})")
        cos = float(np.clip((d1 / n1 * (d2 / n2)).sum(), -1.0, 1.0))
        theta = math.acos(cos)
        c1, c2 = slerp_coefficients(theta, t)
        layers[lid] = c1 * d1 + c2 * d2
        angles[lid] = theta
    spec = MergeSpec(method="slerp", t=t)
    return MergedDelta(layers=layers, provenance=_provenance("slerp", spec, [a1, a2], angles=angles))


def merge(spec: MergeSpec, adapters: Sequence[LoraAdapter]) -> MergedDelta:
    """Dispatch a MergeSpec over adapters."""
    if spec.method in ("cat_static", "cat_learned"):
        return merge_cat(adapters, spec.alphas)
    if len(adapters) != 2:
        raise MergeError(f"{spec.method} merges exactly two adapters, got {len(adapters)}")
    a1, a2 = adapters
    if spec.method == "linear":
        return merge_linear(a1, a2, spec.alphas)
    if spec.method == "ties":
        return merge_ties(a1, a2, spec.density, spec.alphas)
    if spec.method == "dare":
        return merge_dare(a1, a2, spec.density, spec.seed, spec.alphas, b_only=spec.dare_b_only)
    return merge_slerp(a1, a2, spec.t)


def _frange(lo: float, hi: float, step: float) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


@dataclass
class SweepResult:
    best: MergeSpec
    best_score: float
    table: list[dict]  # one row per evaluated grid point


def sweep_grid(
    method: str,
    a1: LoraAdapter,
    a2: LoraAdapter,
    eval_callback: Callable[[MergedDelta], float],
    lambdas: Sequence[float] | None = None,
    alphas1: Sequence[float] | None = None,
    alphas2: Sequence[float] | None = None,
    ts: Sequence[float] | None = None,
    seed: int = 0,
    workers: int = 1,
) -> SweepResult:
    """Exhaustive hyperparameter grid for a merge method.

    Default grids follow the 0.2-increment sweep: density in [0, 1] and
    each alpha in [1, 2] (6 x 6 x 6 = 216 points for ties/dare). Every grid
    point appears in the result table; points whose merge raises (e.g.
    dare at density 0) are recorded with a null score. Ties on the best
    score break toward the lexicographically smallest parameter tuple, and
    the outcome is independent of worker scheduling.
    """
    if lambdas is None:
        lambdas = _frange(0.0, 1.0, 0.2)
    if alphas1 is None:
        alphas1 = _frange(1.0, 2.0, 0.2)
    if alphas2 is None:
        alphas2 = _frange(1.0, 2.0, 0.2)
    if ts is None:
        ts = _frange(0.0, 1.0, 0.2)

    points: list[tuple[tuple[float, ...], MergeSpec]] = []
    if method in ("ties", "dare"):
        for lam in lambdas:
            for x1 in alphas1:
                for x2 in alphas2:
                    try:
                        spec = MergeSpec(method=method, alphas=(x1, x2), density=lam,
                                         seed=seed if method == "dare" else None)
                    except ContractError:
                        raise
                    points.append(((lam, x1, x2), spec))
    elif method in ("cat_static", "linear"):
        for x1 in alphas1:
            for x2 in alphas2:
                points.append(((x1, x2), MergeSpec(method=method, alphas=(x1, x2))))
    elif method == "slerp":
        for t in ts:
            points.append(((t,), MergeSpec(method=method, t=t)))
    else:
        raise ContractError(f"sweep does not support method {method!r}")
    if not points:
        raise ContractError("sweep grid is empty")

    def run(point: tuple[tuple[float, ...], MergeSpec]) -> dict:
        params, spec = point
        row: dict = {"params": params, "spec": spec.to_dict(), "score": None, "error": None}
        try:
            delta = merge(spec, [a1, a2])
            row["score"] = float(eval_callback(delta))
        except MergeError as exc:
            row["error"] = str(exc)
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, points))
    else:
        rows = [run(p) for p in points]
    rows.sort(key=lambda r: r["params"])

    scored = [r for r in rows if r["score"] is not None and math.isfinite(r["score"])]
    if not scored:
        raise ContractError("sweep produced no finite scores")
    best_score = max(r["score"] for r in scored)
    best_row = next(r for r in scored if r["score"] == best_score)
    return SweepResult(best=MergeSpec.from_dict(best_row["spec"]), best_score=best_score, table=rows)


def write_delta_checkpoint(delta: MergedDelta, path: str | Path) -> None:
    """Dense-delta container: one tensor per layer, provenance in metadata."""
    metadata = {
        "format": "dense_delta",
        "provenance": json.dumps(delta.provenance, sort_keys=True),
    }
    write_tensors(path, {lid: arr for lid, arr in delta.layers.items()}, metadata)


def read_delta_checkpoint(path: str | Path) -> MergedDelta:
    tensors, metadata = read_tensors(path)
    if metadata.get("format") != "dense_delta":
        raise ContainerFormatError(f"{path}: not a dense-delta checkpoint")
    provenance = json.loads(metadata.get("provenance", "{}"))
    return MergedDelta(
        layers={k: v.astype(np.float64) for k, v in sorted(tensors.items())},
        provenance=provenance,
    )
