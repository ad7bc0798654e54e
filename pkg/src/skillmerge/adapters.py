"""Low-rank adapters: in-memory types plus checkpoint read/write.

An adapter is an ordered map from layer-id (e.g. "layers.0.q_proj") to a
factor pair (A: [r, d_in], B: [d_out, r]) with a config giving rank,
scaling and target modules. On disk, factors live in a tensor container
under the ecosystem key convention
``base_model.model.<layer-id>.lora_{A,B}.weight`` with an
``adapter_config.json`` sidecar. Arithmetic runs in float64; narrower
storage dtypes are widened on load and remembered per tensor so that a
write/read round-trip is bit-exact including dtype tags.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from skillmerge.container import DTYPE_TAGS, dtype_tag, read_tensors, write_tensors
from skillmerge.errors import AdapterFormatError, ContractError, DimensionError, NonFiniteError

log = logging.getLogger(__name__)

DEFAULT_TARGET_MODULES = ("q_proj", "v_proj", "k_proj", "up_proj", "down_proj")

CONFIG_FILENAME = "adapter_config.json"
WEIGHTS_FILENAME = "adapter_model.safetensors"

_KEY_RE = re.compile(r"^base_model\.model\.(?P<layer>.+)\.lora_(?P<which>[AB])\.weight$")


def tensor_key(layer_id: str, which: str) -> str:
    return f"base_model.model.{layer_id}.lora_{which}.weight"


@dataclass(frozen=True)
class LoraConfig:
    r: int = 32
    lora_alpha: float = 64.0
    lora_dropout: float = 0.05
    target_modules: tuple[str, ...] = DEFAULT_TARGET_MODULES

    def __post_init__(self):
        if self.r <= 0:
            raise ContractError(f"rank must be positive, got {self.r}")
        if not (0 <= self.lora_dropout < 1):
            raise ContractError(f"lora_dropout must be in [0, 1), got {self.lora_dropout}")
        s = self.lora_alpha / self.r
        if not (np.isfinite(s) and s > 0):
            raise ContractError(f"scaling lora_alpha/r must be finite and positive, got {s}")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.r

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "target_modules": list(self.target_modules),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        try:
            return cls(
                r=int(d["r"]),
                lora_alpha=float(d["lora_alpha"]),
                lora_dropout=float(d.get("lora_dropout", 0.05)),
                target_modules=tuple(d["target_modules"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AdapterFormatError(f"invalid adapter config: {exc}") from exc


@dataclass
class LoraPair:
    """One layer's factors; delta(pair) = scaling * B @ A, [d_out x d_in]."""

    A: np.ndarray  # [r, d_in]
    B: np.ndarray  # [d_out, r]

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        self.B = np.ascontiguousarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise DimensionError("LoRA factors must be 2-D", self.A.shape, self.B.shape)
        if self.A.shape[0] != self.B.shape[1]:
            raise DimensionError("A and B disagree on rank", self.A.shape, self.B.shape)
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise NonFiniteError("LoRA factors contain NaN or Inf")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]


def delta(pair: LoraPair, scaling: float) -> np.ndarray:
    """Dense update scaling * B @ A."""
    return scaling * (pair.B @ pair.A)


@dataclass
class LoraAdapter:
    layers: dict[str, LoraPair]
    config: LoraConfig
    name: str = ""
    # tensor key -> container dtype tag; defaults to F64 when absent
    storage_dtypes: dict[str, str] = field(default_factory=dict)
    # unknown tensors preserved verbatim on round-trip, ignored by merging
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for layer_id, pair in self.layers.items():
            module = layer_id.rsplit(".", 1)[-1]
            if module not in self.config.target_modules:
                raise AdapterFormatError(
                    f"layer {layer_id!r} targets module {module!r} not in {self.config.target_modules}"
                )
            if pair.rank != self.config.r:
                raise AdapterFormatError(
                    f"layer {layer_id!r} has rank {pair.rank} but config says r={self.config.r}"
                )
            if pair.rank > min(pair.d_in, pair.d_out):
                raise AdapterFormatError(
                    f"layer {layer_id!r}: rank {pair.rank} exceeds min dim {min(pair.d_in, pair.d_out)}"
                )

    @property
    def scaling(self) -> float:
        return self.config.scaling

    def layer_ids(self) -> list[str]:
        return list(self.layers)

    def deltas(self) -> dict[str, np.ndarray]:
        return {lid: delta(pair, self.scaling) for lid, pair in self.layers.items()}

    def parameter_count(self) -> int:
        return sum(p.A.size + p.B.size for p in self.layers.values())

    def storage_tag(self, key: str) -> str:
        return self.storage_dtypes.get(key, "F64")


def _resolve_paths(path: str | Path) -> tuple[Path, Path]:
    """Map a user path (directory or weights file) to (weights, config)."""
    p = Path(path)
    if p.is_dir() or (not p.exists() and p.suffix == ""):
        return p / WEIGHTS_FILENAME, p / CONFIG_FILENAME
    return p, p.parent / CONFIG_FILENAME


def write_checkpoint(adapter: LoraAdapter, path: str | Path) -> Path:
    """Write weights + config sidecar; returns the weights path.

    Tensors are narrowed to their remembered storage dtypes and serialized
    with lexicographic key order, so writing the same adapter twice yields
    byte-identical files.
    """
    weights_path, config_path = _resolve_paths(path)
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for layer_id, pair in adapter.layers.items():
        for which, arr in (("A", pair.A), ("B", pair.B)):
            key = tensor_key(layer_id, which)
            tensors[key] = arr.astype(DTYPE_TAGS[adapter.storage_tag(key)])
    tensors.update(adapter.extras)
    metadata = {"format": "lora_adapter"}
    if adapter.name:
        metadata["name"] = adapter.name
    write_tensors(weights_path, tensors, metadata)
    config_path.write_text(json.dumps(adapter.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return weights_path


def read_checkpoint(path: str | Path, config: LoraConfig | None = None) -> LoraAdapter:
    """Read an adapter checkpoint (directory or weights file).

    Factor tensors are widened to float64; their on-disk dtype tags are
    kept so a subsequent write round-trips bit-exactly. A lora_A key
    without its lora_B partner (or vice versa) is an error; tensors that
    do not follow the key convention are preserved as extras.
    """
    weights_path, config_path = _resolve_paths(path)
    if config is None:
        if not config_path.exists():
            raise AdapterFormatError(f"no {CONFIG_FILENAME} beside {weights_path} and no config given")
        config = LoraConfig.from_dict(json.loads(config_path.read_text()))
    tensors, metadata = read_tensors(weights_path)

    halves: dict[str, dict[str, np.ndarray]] = {}
    storage: dict[str, str] = {}
    extras: dict[str, np.ndarray] = {}
    for key, arr in tensors.items():
        m = _KEY_RE.match(key)
        if m is None:
            extras[key] = arr
            continue
        storage[key] = dtype_tag(arr)
        halves.setdefault(m.group("layer"), {})[m.group("which")] = arr.astype(np.float64)
    if extras:
        log.warning("%s: ignoring %d tensors outside the adapter key convention: %s",
                    weights_path, len(extras), sorted(extras)[:5])

    layers: dict[str, LoraPair] = {}
    for layer_id in sorted(halves):
        parts = halves[layer_id]
        if "A" not in parts or "B" not in parts:
            missing = "B" if "A" in parts else "A"
            raise AdapterFormatError(f"{weights_path}: layer {layer_id!r} lacks its lora_{missing} partner")
        layers[layer_id] = LoraPair(A=parts["A"], B=parts["B"])

    return LoraAdapter(
        layers=layers,
        config=config,
        name=metadata.get("name", ""),
        storage_dtypes=storage,
        extras=extras,
    )


def adapters_equal(a: LoraAdapter, b: LoraAdapter) -> bool:
    """Bit-exact equality including dtype tags, extras and config."""
    if a.config != b.config or a.name != b.name:
        return False
    if a.layer_ids() != b.layer_ids():
        return False
    for lid in a.layers:
        pa, pb = a.layers[lid], b.layers[lid]
        if not (np.array_equal(pa.A, pb.A) and np.array_equal(pa.B, pb.B)):
            return False
        for which in ("A", "B"):
            key = tensor_key(lid, which)
            if a.storage_tag(key) != b.storage_tag(key):
                return False
    if sorted(a.extras) != sorted(b.extras):
        return False
    return all(np.array_equal(a.extras[k], b.extras[k]) and a.extras[k].dtype == b.extras[k].dtype
               for k in a.extras)
