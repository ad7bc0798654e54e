"""Elo rating over pairwise judgment records, with bootstrap CIs.

The judge itself is out of process: any source (human, scripted oracle)
produces JSON-lines of {question_id, model_a, model_b, outcome} and this
module replays them. Ratings use the unusual-but-specified constants:
initial 200, base 10, scale 400, K = 4.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from skillmerge.errors import ContractError, FormatError
from skillmerge.rng import Rng, derive_seed

log = logging.getLogger(__name__)

OUTCOMES = ("a_wins", "b_wins", "tie")

INITIAL_RATING = 200.0
K_FACTOR = 4.0
BASE = 10.0
SCALE = 400.0


@dataclass(frozen=True)
class JudgmentRecord:
    question_id: str
    model_a: str
    model_b: str
    outcome: str

    def __post_init__(self):
        if self.model_a == self.model_b:
            raise ContractError(f"record {self.question_id!r} compares a model with itself")
        if self.outcome not in OUTCOMES:
            raise ContractError(f"outcome must be one of {OUTCOMES}, got {self.outcome!r}")


@dataclass
class EloTable:
    ratings: dict[str, float]  # median over bootstrap replicates
    ci: dict[str, tuple[float, float]]  # 2.5 / 97.5 percentiles
    n_boot: int

    def ranking(self) -> list[tuple[str, float]]:
        return sorted(self.ratings.items(), key=lambda kv: -kv[1])


def elo_update(
    r_a: float,
    r_b: float,
    outcome: str,
    k: float = K_FACTOR,
    base: float = BASE,
    scale: float = SCALE,
) -> tuple[float, float]:
    """One sequential update; zero-sum by construction."""
    if outcome not in OUTCOMES:
        raise ContractError(f"outcome must be one of {OUTCOMES}, got {outcome!r}")
    e_a = 1.0 / (1.0 + base ** ((r_b - r_a) / scale))
    s_a = 1.0 if outcome == "a_wins" else 0.0 if outcome == "b_wins" else 0.5
    return r_a + k * (s_a - e_a), r_b + k * ((1.0 - s_a) - (1.0 - e_a))


def replay(
    records: Sequence[JudgmentRecord],
    initial: float = INITIAL_RATING,
    k: float = K_FACTOR,
    base: float = BASE,
    scale: float = SCALE,
) -> dict[str, float]:
    """Sequential replay in the given order, everyone starting at `initial`."""
    ratings: dict[str, float] = {}
    for rec in records:
        r_a = ratings.setdefault(rec.model_a, initial)
        r_b = ratings.setdefault(rec.model_b, initial)
        ratings[rec.model_a], ratings[rec.model_b] = elo_update(r_a, r_b, rec.outcome, k, base, scale)
    return ratings


def elo_bootstrap(
    records: Sequence[JudgmentRecord],
    n_boot: int = 5000,
    seed: int = 0,
    initial: float = INITIAL_RATING,
    k: float = K_FACTOR,
) -> EloTable:
    """Resample records with replacement (which also reshuffles replay
    order), replay each replicate from the initial rating, and report the
    per-model median with a 2.5/97.5 percentile interval.

    Models appearing in zero records are simply absent; a model that
    happens to miss one replicate keeps the initial rating there.
    """
    if not records:
        raise ContractError("elo_bootstrap needs at least one record")
    if n_boot <= 0:
        raise ContractError(f"n_boot must be positive, got {n_boot}")
    models = sorted({m for r in records for m in (r.model_a, r.model_b)})
    n = len(records)
    samples = {m: np.empty(n_boot) for m in models}
    for rep in range(n_boot):
        rng = Rng(derive_seed(seed, "elo_boot", rep))
        idx = rng.integers(n, size=n)
        ratings = replay([records[i] for i in idx], initial=initial, k=k)
        for m in models:
            samples[m][rep] = ratings.get(m, initial)
    ratings = {m: float(np.median(samples[m])) for m in models}
    ci = {
        m: (float(np.percentile(samples[m], 2.5)), float(np.percentile(samples[m], 97.5)))
        for m in models
    }
    return EloTable(ratings=ratings, ci=ci, n_boot=n_boot)


def save_judgments(records: Iterable[JudgmentRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "question_id": rec.question_id,
                "model_a": rec.model_a,
                "model_b": rec.model_b,
                "outcome": rec.outcome,
            }, sort_keys=True) + "\n")


def load_judgments(path: str | Path) -> list[JudgmentRecord]:
    records: list[JudgmentRecord] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(JudgmentRecord(
                    question_id=str(row["question_id"]),
                    model_a=str(row["model_a"]),
                    model_b=str(row["model_b"]),
                    outcome=str(row["outcome"]),
                ))
            except (json.JSONDecodeError, KeyError, ContractError) as exc:
                raise FormatError(f"{path}:{lineno}: bad judgment record ({exc})") from exc
    if not records:
        raise FormatError(f"{path}: no judgment records")
    return records


def format_table(table: EloTable) -> str:
    width = max((len(m) for m in table.ratings), default=5)
    lines = [f"{'model':<{width}}  {'rating':>8}  {'2.5%':>8}  {'97.5%':>8}"]
    for model, rating in table.ranking():
        lo, hi = table.ci[model]
        lines.append(f"{model:<{width}}  {rating:>8.2f}  {lo:>8.2f}  {hi:>8.2f}")
    return "\n".join(lines)
