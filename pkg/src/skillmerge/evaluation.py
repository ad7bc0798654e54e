"""Scoring: exact match, exec-accuracy via the mini interpreter, token F1,
and the super-linearity report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from skillmerge.errors import ContractError
from skillmerge.minilang import MiniLangError, evaluate_program, extract_program, parse_program


@dataclass
class ExecReport:
    accuracy: float  # fraction whose program evaluates to the reference
    conformance: float  # fraction emitting any parseable program
    n: int
    correct: int
    conformant: int


def _reference_value(ref: str | int) -> int:
    if isinstance(ref, int):
        return ref
    return evaluate_program(parse_program(ref.strip()), {})


def exec_accuracy(generations: Sequence[str], references: Sequence[str | int]) -> ExecReport:
    """A generation is correct iff it contains a parseable program AND the
    program evaluates (with no free identifiers) to the reference value.
    Unparseable generations count as incorrect and non-conformant."""
    if len(generations) != len(references):
        raise ContractError(f"{len(generations)} generations vs {len(references)} references")
    correct = 0
    conformant = 0
    for gen, ref in zip(generations, references):
        node = extract_program(gen)
        if node is None:
            continue
        conformant += 1
        try:
            value = evaluate_program(node, {})
        except MiniLangError:
            continue
        if value == _reference_value(ref):
            correct += 1
    n = len(generations)
    return ExecReport(
        accuracy=correct / n if n else 0.0,
        conformance=conformant / n if n else 0.0,
        n=n,
        correct=correct,
        conformant=conformant,
    )


def exact_match_accuracy(generations: Sequence[str], references: Sequence[str]) -> float:
    """Whitespace-normalized string equality."""
    if len(generations) != len(references):
        raise ContractError(f"{len(generations)} generations vs {len(references)} references")
    if not generations:
        return 0.0
    hits = sum(1 for g, r in zip(generations, references) if " ".join(g.split()) == " ".join(r.split()))
    return hits / len(generations)


def f1_score(generation: str, reference: str) -> float:
    """Token-level F1 over whitespace tokens (bag-of-words overlap)."""
    g = generation.split()
    r = reference.split()
    if not g or not r:
        return 1.0 if g == r else 0.0
    common = 0
    counts: dict[str, int] = {}
    for tok in r:
        counts[tok] = counts.get(tok, 0) + 1
    for tok in g:
        if counts.get(tok, 0) > 0:
            counts[tok] -= 1
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(g)
    recall = common / len(r)
    return 2 * precision * recall / (precision + recall)


def mean_f1(generations: Sequence[str], references: Sequence[str]) -> float:
    if len(generations) != len(references):
        raise ContractError(f"{len(generations)} generations vs {len(references)} references")
    if not generations:
        return 0.0
    return sum(f1_score(g, r) for g, r in zip(generations, references)) / len(generations)


def superlinearity_report(
    acc_base: float, acc_s1: float, acc_s2: float, acc_merged: float
) -> dict:
    """Relative improvements over the base plus the additive bound.

    Scale-free: feed fractions or percentage points, as long as all four
    share the scale. The additive bound is
    base + (s1-base) + (s2-base); the merged model is super-linear when
    its relative improvement exceeds the sum of the individuals' (or, when
    the base is zero, when it exceeds the bound)."""
    for name, v in (("base", acc_base), ("s1", acc_s1), ("s2", acc_s2), ("merged", acc_merged)):
        if not (0.0 <= v <= 100.0):
            raise ContractError(f"accuracy {name}={v} outside [0, 100]")
    bound = acc_base + (acc_s1 - acc_base) + (acc_s2 - acc_base)
    excess = acc_merged - bound
    report = {
        "accuracies": {"base": acc_base, "s1": acc_s1, "s2": acc_s2, "merged": acc_merged},
        "additive_bound": bound,
        "excess": excess,
    }
    if acc_base > 0.0:
        imp = {
            "s1": (acc_s1 - acc_base) / acc_base,
            "s2": (acc_s2 - acc_base) / acc_base,
            "merged": (acc_merged - acc_base) / acc_base,
        }
        report["mode"] = "relative"
        report["improvements"] = imp
        report["super_linear"] = imp["merged"] > imp["s1"] + imp["s2"]
    else:
        report["mode"] = "absolute"
        report["improvements"] = None
        report["super_linear"] = excess > 0.0
    return report


def format_superlinearity(report: dict) -> str:
    acc = report["accuracies"]
    lines = [
        f"base={acc['base']:.4g}  s1={acc['s1']:.4g}  s2={acc['s2']:.4g}  merged={acc['merged']:.4g}",
        f"additive bound={report['additive_bound']:.4g}  excess={report['excess']:+.4g}",
    ]
    if report["improvements"] is not None:
        imp = report["improvements"]
        lines.append(
            "improvements: s1 {:+.0%}  s2 {:+.0%}  merged {:+.0%}".format(imp["s1"], imp["s2"], imp["merged"])
        )
    lines.append(f"super-linear: {report['super_linear']}")
    return "\n".join(lines)
