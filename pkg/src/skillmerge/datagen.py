"""Deterministic generators for the synthetic two-skill benchmarks.

Three families mirror the composition experiments at desk scale:

* math: templated word problems with small operands and a textual
  reasoning line ("3+4=7\\nanswer: 7") — teaches word-problem parsing and
  small arithmetic.
* code: instructions mapped to mini-language programs ("return (a*b)") —
  teaches program syntax and operand copying, never word problems.
* hard-compose: the math word problems with operands in [1e3, 1e6], where
  textual arithmetic is hopeless and the reference answer is a program;
  scoring is exec-accuracy.

Plus the prompt-format family: one counting task rendered under sampled
(descriptor-casing, separator, space) formats.

Every generator is pure in (n, seed): byte-identical output, prompts
deduplicated (so any split is automatically train/test disjoint), and each
example re-verified from its prompt text by an independent check before
the dataset is returned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from skillmerge import tokenizer
from skillmerge.errors import ContractError, FormatError
from skillmerge.rng import Rng

NAMES = ("ann", "ben", "cal", "dee", "eli", "fay", "gus", "ida", "joe", "kim",
         "lou", "mia", "ned", "pam", "rex", "sue", "tom", "una", "val", "wes")
OBJECTS = ("pens", "eggs", "cups", "maps", "hats", "logs", "pins", "rods",
           "cans", "keys", "jars", "tins")

IDENTIFIERS = ("a", "b", "c", "x", "y", "z", "n", "m")

# words for the letter-counting task; roughly half contain 'o'
WORDS_WITH_O = ("fox", "oslo", "moon", "rock", "door", "owl", "frog", "spoon",
                "crow", "sock", "pond", "wool")
WORDS_WITHOUT_O = ("cat", "tree", "sky", "map", "fish", "hat", "lamp", "rain",
                   "pear", "silk", "mud", "fern")

COUNT_LETTER = "o"


@dataclass(frozen=True)
class Example:
    prompt: str
    answer: str


@dataclass
class SkillDataset:
    examples: list[Example]
    skill_tag: str
    seed: int
    format_id: int | None = None

    @property
    def size(self) -> int:
        return len(self.examples)

    def split(self, test_size: int) -> tuple["SkillDataset", "SkillDataset"]:
        """Head/tail split; prompts are unique by construction so the two
        parts never share one."""
        if not (0 < test_size < self.size):
            raise ContractError(f"test_size {test_size} out of range for {self.size} examples")
        train = SkillDataset(self.examples[:-test_size], self.skill_tag, self.seed, self.format_id)
        test = SkillDataset(self.examples[-test_size:], self.skill_tag, self.seed, self.format_id)
        return train, test


# --- math / hard-compose word problems ---------------------------------

# (template, op); {a}/{b} are the operands in reading order
MATH_TEMPLATES = (
    ("{name} has {a} {obj} and buys {b} more. how many {obj} now?", "+"),
    ("{name} finds {a} {obj} and then {b} more. how many in all?", "+"),
    ("{name} has {a} {obj} and gives away {b}. how many {obj} left?", "-"),
    ("{name} had {a} {obj} and loses {b}. how many remain?", "-"),
    ("one box holds {a} {obj}. {name} has {b} boxes. how many {obj} now?", "*"),
    ("a crate holds {a} {obj}; there are {b} crates. how many in all?", "*"),
)

_CUE_TO_OP = (("buys", "+"), ("finds", "+"), ("gives away", "-"), ("loses", "-"),
              ("box", "*"), ("crate", "*"))


def _apply_op(a: int, b: int, op: str) -> int:
    return a + b if op == "+" else a - b if op == "-" else a * b


def parse_word_problem(prompt: str) -> tuple[int, int, str]:
    """Independent re-derivation: operands are the digit runs in reading
    order, the operation comes from the cue word. Used to verify labels."""
    runs: list[int] = []
    cur = ""
    for ch in prompt:
        if ch.isdigit():
            cur += ch
        elif cur:
            runs.append(int(cur))
            cur = ""
    if cur:
        runs.append(int(cur))
    if len(runs) != 2:
        raise ContractError(f"expected two operands in {prompt!r}, found {runs}")
    for cue, op in _CUE_TO_OP:
        if cue in prompt:
            return runs[0], runs[1], op
    raise ContractError(f"no operation cue in {prompt!r}")


def _word_problem(rng: Rng, lo: int, hi: int) -> tuple[str, int, int, str]:
    template, op = MATH_TEMPLATES[rng.integer(len(MATH_TEMPLATES))]
    a = lo + rng.integer(hi - lo + 1)
    b = lo + rng.integer(hi - lo + 1)
    if op == "-" and b > a:
        a, b = b, a
    prompt = template.format(name=NAMES[rng.integer(len(NAMES))],
                             obj=OBJECTS[rng.integer(len(OBJECTS))], a=a, b=b)
    return prompt, a, b, op


def _generate_unique(n: int, seed: int, make) -> list[Example]:
    """Draw until n distinct prompts; verifies every label on the way out."""
    if n <= 0:
        raise ContractError(f"dataset size must be positive, got {n}")
    rng = Rng(seed)
    seen: set[str] = set()
    out: list[Example] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise ContractError(f"could not generate {n} unique prompts (template space too small)")
        ex = make(rng)
        if ex is None or ex.prompt in seen:
            continue
        seen.add(ex.prompt)
        out.append(ex)
    return out


def gen_math_skill(n: int, seed: int, operand_max: int = 20, max_len: int = 128) -> SkillDataset:
    """Word problems with operands <= operand_max and textual answers."""

    def make(rng: Rng) -> Example | None:
        prompt, a, b, op = _word_problem(rng, 1, operand_max)
        c = _apply_op(a, b, op)
        answer = f"\n{a}{op}{b}={c}\nanswer: {c}"
        if len(prompt) + len(answer) + 2 > max_len:
            return None
        return Example(prompt, answer)

    ds = SkillDataset(_generate_unique(n, seed, make), "math", seed)
    verify_dataset(ds)
    return ds


def gen_hard_compose(n: int, seed: int, operand_lo: int = 10**3, operand_hi: int = 10**6,
                     max_len: int = 128) -> SkillDataset:
    """Same word problems with huge operands; the reference answer is a
    program whose evaluation gives the ground truth."""

    def make(rng: Rng) -> Example | None:
        prompt, a, b, op = _word_problem(rng, operand_lo, operand_hi)
        answer = f"\nreturn ({a}{op}{b})"
        if len(prompt) + len(answer) + 2 > max_len:
            return None
        return Example(prompt, answer)

    ds = SkillDataset(_generate_unique(n, seed, make), "hard_compose", seed)
    verify_dataset(ds)
    return ds


# --- code skill ---------------------------------------------------------

_VERBS = (("adds", "+"), ("multiplies", "*"), ("subtracts", "-"))


def _operand(rng: Rng) -> str:
    kind = rng.integer(3)
    if kind == 0:
        return IDENTIFIERS[rng.integer(len(IDENTIFIERS))]
    if kind == 1:
        return str(1 + rng.integer(99))
    return str(10**3 + rng.integer(10**6 - 10**3 + 1))


def gen_code_skill(n: int, seed: int, max_len: int = 128) -> SkillDataset:
    """Instructions mapped to `return <expr>` programs over named operands
    and literals; no word problems, no operation cue words."""

    def make(rng: Rng) -> Example | None:
        verb, op = _VERBS[rng.integer(len(_VERBS))]
        x, y = _operand(rng), _operand(rng)
        if verb == "subtracts":
            prompt = f"write a program that subtracts {y} from {x}"
            expr = f"{x}-{y}"
        elif rng.integer(4) == 0:  # occasionally nest a product
            z = _operand(rng)
            prompt = f"write a program that {verb} {x} and the product of {y} and {z}"
            expr = f"{x}{op}({y}*{z})"
        else:
            prompt = f"write a program that {verb} {x} and {y}"
            expr = f"{x}{op}{y}"
        answer = f"\nreturn ({expr})"
        if len(prompt) + len(answer) + 2 > max_len:
            return None
        return Example(prompt, answer)

    ds = SkillDataset(_generate_unique(n, seed, make), "code", seed)
    verify_dataset(ds)
    return ds


def parse_code_instruction(prompt: str) -> str:
    """Reconstruct the expected program text from the instruction alone."""
    words = prompt.split()
    if words[:4] != ["write", "a", "program", "that"]:
        raise ContractError(f"unrecognized instruction {prompt!r}")
    rest = words[4:]
    verb = rest[0]
    op = dict(_VERBS).get(verb)
    if op is None:
        raise ContractError(f"unknown verb {verb!r}")
    if verb == "subtracts":  # "subtracts y from x"
        y, _, x = rest[1], rest[2], rest[3]
        return f"return ({x}-{y})"
    if "product" in rest:  # "<verb> x and the product of y and z"
        x, y, z = rest[1], rest[6], rest[8]
        return f"return ({x}{op}({y}*{z}))"
    x, y = rest[1], rest[3]
    return f"return ({x}{op}{y})"


# --- prompt formats ------------------------------------------------------

CASINGS = ("lower", "title", "upper")
SEPARATORS = (": ", " : ", ":\n", " - ", ":: ")
SPACES = ("\n", " ", "\n\n", "; ")


@dataclass(frozen=True)
class PromptFormat:
    """Rendering rule over (descriptor casing, separator, space)."""

    casing: str
    separator: str
    space: str
    descriptors: tuple[str, str] = ("sentence", "answer")

    def _cased(self, word: str) -> str:
        if self.casing == "upper":
            return word.upper()
        if self.casing == "title":
            return word.title()
        return word

    def render(self, sentence: str) -> str:
        d1, d2 = (self._cased(d) for d in self.descriptors)
        return f"{d1}{self.separator}{sentence}{self.space}{d2}{self.separator}"

    def to_dict(self) -> dict:
        return {"casing": self.casing, "separator": self.separator, "space": self.space}


def sample_formats(k: int, seed: int) -> list[PromptFormat]:
    """k distinct formats from the grammar; fixed seed gives a stable list."""
    total = len(CASINGS) * len(SEPARATORS) * len(SPACES)
    if k > total:
        raise ContractError(f"grammar has only {total} formats, asked for {k}")
    rng = Rng(seed)
    seen: set[tuple[str, str, str]] = set()
    out: list[PromptFormat] = []
    while len(out) < k:
        combo = (CASINGS[rng.integer(len(CASINGS))],
                 SEPARATORS[rng.integer(len(SEPARATORS))],
                 SPACES[rng.integer(len(SPACES))])
        if combo in seen:
            continue
        seen.add(combo)
        out.append(PromptFormat(*combo))
    return out


def count_words_with_letter(sentence: str, letter: str = COUNT_LETTER) -> int:
    return sum(1 for w in sentence.split() if letter in w)


def gen_format_tasks(formats: list[PromptFormat], n: int, seed: int,
                     max_len: int = 128) -> list[SkillDataset]:
    """The same underlying (sentence, count) pairs rendered under each
    format; dataset i carries format_id = i."""
    rng = Rng(seed)
    pool = WORDS_WITH_O + WORDS_WITHOUT_O
    pairs: list[tuple[str, int]] = []
    seen: set[str] = set()
    attempts = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise ContractError("could not generate enough unique sentences")
        length = 4 + rng.integer(5)
        sentence = " ".join(pool[rng.integer(len(pool))] for _ in range(length))
        if sentence in seen:
            continue
        seen.add(sentence)
        pairs.append((sentence, count_words_with_letter(sentence)))

    datasets = []
    for fid, fmt in enumerate(formats):
        examples = []
        for sentence, count in pairs:
            prompt = fmt.render(sentence)
            answer = str(count)
            if len(prompt) + len(answer) + 2 > max_len:
                raise ContractError("format rendering exceeds max_len")
            examples.append(Example(prompt, answer))
        ds = SkillDataset(examples, f"format{fid}", seed, format_id=fid)
        verify_dataset(ds, fmt=fmt)
        datasets.append(ds)
    return datasets


def extract_sentence(prompt: str, fmt: PromptFormat) -> str:
    head = fmt._cased(fmt.descriptors[0]) + fmt.separator
    tail = fmt.space + fmt._cased(fmt.descriptors[1]) + fmt.separator
    if not (prompt.startswith(head) and prompt.endswith(tail)):
        raise ContractError(f"prompt does not match format: {prompt!r}")
    return prompt[len(head) : len(prompt) - len(tail)]


# --- label verification --------------------------------------------------

def verify_example(ex: Example, skill_tag: str, fmt: PromptFormat | None = None) -> None:
    """Re-derive the answer from the prompt; raises ContractError on any
    mismatch. Generators run this on every example they emit."""
    if not (tokenizer.encodable(ex.prompt) and tokenizer.encodable(ex.answer)):
        raise ContractError(f"example uses characters outside the vocabulary: {ex.prompt!r}")
    if skill_tag == "math":
        a, b, op = parse_word_problem(ex.prompt)
        c = _apply_op(a, b, op)
        if not ex.answer.endswith(f"answer: {c}") or f"{a}{op}{b}={c}" not in ex.answer:
            raise ContractError(f"math label mismatch: {ex}")
    elif skill_tag == "hard_compose":
        from skillmerge.minilang import evaluate_program, parse_program

        a, b, op = parse_word_problem(ex.prompt)
        got = evaluate_program(parse_program(ex.answer.strip()), {})
        if got != _apply_op(a, b, op):
            raise ContractError(f"compose label mismatch: {ex}")
    elif skill_tag == "code":
        if ex.answer.strip() != parse_code_instruction(ex.prompt):
            raise ContractError(f"code label mismatch: {ex}")
    elif skill_tag.startswith("format"):
        sentence = extract_sentence(ex.prompt, fmt)
        if int(ex.answer) != count_words_with_letter(sentence):
            raise ContractError(f"format label mismatch: {ex}")
    else:
        raise ContractError(f"unknown skill tag {skill_tag!r}")


def verify_dataset(ds: SkillDataset, fmt: PromptFormat | None = None) -> None:
    for ex in ds.examples:
        verify_example(ex, ds.skill_tag, fmt)


# --- JSONL serialization -------------------------------------------------

def save_dataset(ds: SkillDataset, path: str | Path) -> None:
    """One JSON object per line: prompt, answer, mask span (token indices
    into [BOS prompt answer EOS]), skill_tag, format_id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ex in ds.examples:
            mask_begin = 1 + len(ex.prompt)
            mask_end = 2 + len(ex.prompt) + len(ex.answer)
            fh.write(json.dumps({
                "prompt": ex.prompt,
                "answer": ex.answer,
                "mask_begin": mask_begin,
                "mask_end": mask_end,
                "skill_tag": ds.skill_tag,
                "format_id": ds.format_id,
            }, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> SkillDataset:
    examples: list[Example] = []
    skill_tag = None
    format_id = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                ex = Example(row["prompt"], row["answer"])
                mask_begin, mask_end = int(row["mask_begin"]), int(row["mask_end"])
                tag = row["skill_tag"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad dataset line ({exc})") from exc
            if mask_begin != 1 + len(ex.prompt) or mask_end != 2 + len(ex.prompt) + len(ex.answer):
                raise FormatError(f"{path}:{lineno}: mask span inconsistent with prompt/answer")
            if skill_tag is None:
                skill_tag = tag
                format_id = row.get("format_id")
            elif tag != skill_tag:
                raise FormatError(f"{path}:{lineno}: mixed skill tags {skill_tag!r} and {tag!r}")
            examples.append(ex)
    if not examples:
        raise FormatError(f"{path}: empty dataset")
    return SkillDataset(examples, skill_tag, seed=-1, format_id=format_id)
