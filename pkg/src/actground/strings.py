"""String-manipulation world: rewrite-rule ASTs with deterministic
application semantics, a rule sampler, dictionary-backed example
generation, and evaluation-group construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

ALPHABET = "abcdefghijklmnopqrstuvwxyz"
VOWELS = set("aeiou")
CONSONANTS = set(ALPHABET) - VOWELS

VOWEL = "VOWEL"
CONSONANT = "CONSONANT"

MAX_OUTPUT_LEN = 48


class StringsError(Exception):
    pass


@dataclass(frozen=True)
class StringsConfig:
    max_state_len: int = 24
    max_output_len: int = MAX_OUTPUT_LEN
    # sampling distribution for transformations
    kind_probs: tuple = (("replace", 0.4), ("insert_before", 0.25),
                         ("insert_after", 0.25), ("insert_at", 0.1))
    class_atom_prob: float = 0.3   # chance an atom is VOWEL/CONSONANT
    two_atom_prob: float = 0.4
    two_char_text_prob: float = 0.4
    max_insert_index: int = 8


def _atom_matches(atom, ch):
    if atom == VOWEL:
        return ch in VOWELS
    if atom == CONSONANT:
        return ch in CONSONANTS
    return ch == atom


@dataclass(frozen=True)
class Transformation:
    """kind: replace | insert_before | insert_after | insert_at.

    pattern: 1-2 atoms, each a literal letter or VOWEL/CONSONANT class.
    text: 1-2 literal letters.  index: 1-based, insert_at only.
    """

    kind: str
    pattern: tuple = ()
    text: str = ""
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("replace", "insert_before", "insert_after", "insert_at"):
            raise StringsError(f"unknown transformation kind {self.kind!r}")
        if self.kind == "insert_at":
            if self.index < 1:
                raise StringsError("insert_at requires a positive 1-based index")
        elif not self.pattern:
            raise StringsError("pattern must be non-empty")
        if not 1 <= len(self.text) <= 2 or any(c not in ALPHABET for c in self.text):
            raise StringsError(f"text must be 1-2 letters, got {self.text!r}")

    def to_dict(self):
        return {"kind": self.kind, "pattern": list(self.pattern),
                "text": self.text, "index": self.index}

    @staticmethod
    def from_dict(d):
        return Transformation(d["kind"], tuple(d["pattern"]), d["text"], d["index"])


def find_matches(pattern, s):
    """Leftmost, non-overlapping, simultaneous match spans of `pattern`."""
    spans = []
    plen = len(pattern)
    i = 0
    while i + plen <= len(s):
        if all(_atom_matches(a, s[i + j]) for j, a in enumerate(pattern)):
            spans.append((i, i + plen))
            i += plen
        else:
            i += 1
    return spans


def apply_transformation(t: Transformation, s: str,
                         max_output_len: int = MAX_OUTPUT_LEN) -> str:
    """Apply `t` to `s`.  All matches are located on the input before any
    rewriting, so insertions cannot create new match sites."""
    if any(c not in ALPHABET for c in s):
        raise StringsError(f"state contains non-alphabet characters: {s!r}")
    if t.kind == "insert_at":
        if t.index > len(s) + 1:
            raise StringsError(
                f"insert_at index {t.index} out of range for length {len(s)}")
        out = s[:t.index - 1] + t.text + s[t.index - 1:]
    else:
        spans = find_matches(t.pattern, s)
        pieces = []
        prev = 0
        for start, end in spans:
            pieces.append(s[prev:start])
            if t.kind == "replace":
                pieces.append(t.text)
            elif t.kind == "insert_before":
                pieces.append(t.text + s[start:end])
            else:  # insert_after
                pieces.append(s[start:end] + t.text)
            prev = end
        pieces.append(s[prev:])
        out = "".join(pieces)
    if len(out) > max_output_len:
        raise StringsError(
            f"output length {len(out)} exceeds cap {max_output_len}")
    return out


def sample_transformation(rng, config: StringsConfig) -> Transformation:
    kinds, probs = zip(*config.kind_probs)
    kind = kinds[rng.choice(len(kinds), p=np.array(probs) / sum(probs))]

    def atom():
        if rng.random() < config.class_atom_prob:
            return VOWEL if rng.random() < 0.5 else CONSONANT
        return ALPHABET[rng.integers(26)]

    text_len = 2 if rng.random() < config.two_char_text_prob else 1
    text = "".join(ALPHABET[rng.integers(26)] for _ in range(text_len))
    if kind == "insert_at":
        return Transformation(kind, (), text, int(rng.integers(1, config.max_insert_index + 1)))
    plen = 2 if rng.random() < config.two_atom_prob else 1
    return Transformation(kind, tuple(atom() for _ in range(plen)), text)


# ---------------------------------------------------------------------------
# dictionary + environment batches


def load_dictionary(max_len=None):
    """The bundled ~10k-word list (see tools/make_wordlist.py)."""
    text = resources.files("actground.data").joinpath("words.txt").read_text()
    words = [w for w in text.split() if w]
    if max_len is not None:
        words = [w for w in words if len(w) <= max_len]
    return words


@dataclass(frozen=True)
class EnvPair:
    s: str
    s_prime: str
    rule: Transformation


def make_env_pair(rng, words, config: StringsConfig, max_tries=200):
    """One (s, s') pair with s != s', retrying no-ops and cap violations."""
    for _ in range(max_tries):
        word = words[rng.integers(len(words))]
        rule = sample_transformation(rng, config)
        try:
            out = apply_transformation(rule, word, config.max_output_len)
        except StringsError:
            continue
        if out != word:
            return EnvPair(word, out, rule)
    raise StringsError("make_env_pair: retries exhausted")


def build_env_batch(rng, n, words, config: StringsConfig):
    return [make_env_pair(rng, words, config) for _ in range(n)]


# ---------------------------------------------------------------------------
# synthetic instruction annotator


def _ordinal(i):
    words = ["first", "second", "third", "fourth", "fifth", "sixth",
             "seventh", "eighth", "ninth", "tenth"]
    return words[i - 1] if i <= len(words) else str(i)


def _atom_phrase(atom, plural):
    if atom == VOWEL:
        return "vowels" if plural else "vowel"
    if atom == CONSONANT:
        return "consonants" if plural else "consonant"
    return atom


def _pattern_phrase(pattern, rng, plural):
    if len(pattern) == 1:
        name = _atom_phrase(pattern[0], plural)
        if pattern[0] in (VOWEL, CONSONANT):
            return name
        return f"the letter {name}" if not plural and rng.random() < 0.5 else name
    a, b = (_atom_phrase(x, False) for x in pattern)
    return f"{a} {b} pairing" if rng.random() < 0.5 else f"{a} {b} pair"


def _spell(text):
    return " ".join(text)


def synth_instruction(t: Transformation, rng):
    """Templated lowercase command tokens mimicking natural phrasings
    like "replace consonants with p x"."""
    if t.kind == "replace":
        pat = _pattern_phrase(t.pattern, rng, plural=True)
        templates = [
            f"replace {pat} with {_spell(t.text)}",
            f"change every {_pattern_phrase(t.pattern, rng, plural=False)} to {_spell(t.text)}",
        ]
    elif t.kind in ("insert_before", "insert_after"):
        where = "before" if t.kind == "insert_before" else "after"
        pat = _pattern_phrase(t.pattern, rng, plural=False)
        templates = [
            f"add a letter {_spell(t.text)} {where} every {pat}",
            f"insert {_spell(t.text)} {where} each {pat}",
        ]
    else:
        templates = [
            f"add {_spell(t.text)} for the {_ordinal(t.index)} letter",
            f"insert {_spell(t.text)} at position {t.index}",
        ]
    return tuple(templates[rng.integers(len(templates))].split())


# ---------------------------------------------------------------------------
# evaluation groups


@dataclass(frozen=True)
class Instruction:
    command: tuple
    rule: Transformation


@dataclass
class InstructionGroup:
    instructions: list
    # (instruction_index, s, s_prime) triples
    train: list = field(default_factory=list)
    heldout: list = field(default_factory=list)


@dataclass(frozen=True)
class GroupsConfig:
    num_groups: int = 5
    group_size: int = 10
    heldout_per_group: int = 200
    train_per_group: int = 1000
    strings: StringsConfig = StringsConfig()


def _examples_for_rule(rule, words, used, count, config, rng):
    """`count` (word, output) pairs from unused words, marking words used."""
    out = []
    order = rng.permutation(len(words))
    for wi in order:
        word = words[wi]
        if word in used:
            continue
        try:
            res = apply_transformation(rule, word, config.max_output_len)
        except StringsError:
            continue
        if res == word:
            continue
        used.add(word)
        out.append((word, res))
        if len(out) == count:
            return out
    raise StringsError("insufficient dictionary for group construction")


def build_eval_groups(rng, config: GroupsConfig, words=None):
    """Instruction groups with disjoint train/held-out initial states.

    The train list cycles round-robin over the group's instructions so any
    prefix of size m covers instructions as evenly as possible; data-size
    subsets are prefixes of this list.
    """
    if words is None:
        words = load_dictionary(max_len=config.strings.max_state_len)
    g = config.group_size
    per_train = config.train_per_group // g
    per_held = config.heldout_per_group // g
    # rules must apply to enough distinct words, with headroom because
    # words are not shared across a group's instructions
    needed = 3 * (per_train + per_held)

    def coverage(rule):
        count = 0
        for word in words:
            try:
                if apply_transformation(rule, word, config.strings.max_output_len) != word:
                    count += 1
            except StringsError:
                continue
            if count >= needed:
                return count
        return count

    groups = []
    for _ in range(config.num_groups):
        instructions = []
        seen_rules = set()
        while len(instructions) < config.group_size:
            rule = sample_transformation(rng, config.strings)
            if rule in seen_rules:
                continue
            if coverage(rule) < needed:
                continue
            # instructions must be distinguishable by their command text
            command = synth_instruction(rule, rng)
            if any(command == ins.command for ins in instructions):
                continue
            seen_rules.add(rule)
            instructions.append(Instruction(command, rule))

        train_used: set = set()
        held_used: set = set()
        train_by_ins = []
        held_by_ins = []
        for ins in instructions:
            train_by_ins.append(_examples_for_rule(
                ins.rule, words, train_used, per_train, config.strings, rng))
        for ins in instructions:
            # held-out states disjoint from every train state in the group
            used = train_used | held_used
            held_by_ins.append(_examples_for_rule(
                ins.rule, words, used, per_held, config.strings, rng))
            held_used.update(s for s, _ in held_by_ins[-1])

        group = InstructionGroup(instructions)
        for round_i in range(per_train):
            order = rng.permutation(g)
            for ii in order:
                s, sp = train_by_ins[ii][round_i]
                group.train.append((int(ii), s, sp))
        for ii in range(g):
            for s, sp in held_by_ins[ii]:
                group.heldout.append((ii, s, sp))
        groups.append(group)
    return groups


def save_groups(groups, path):
    with open(path, "w", encoding="utf-8") as f:
        for gi, group in enumerate(groups):
            for ii, ins in enumerate(group.instructions):
                rec = {"group": gi, "instruction": ii, "kind": "instruction",
                       "command": " ".join(ins.command),
                       "rule": ins.rule.to_dict()}
                f.write(json.dumps(rec) + "\n")
            for split, rows in (("train", group.train), ("heldout", group.heldout)):
                for ii, s, sp in rows:
                    rec = {"group": gi, "instruction": ii, "kind": split,
                           "command": " ".join(group.instructions[ii].command),
                           "input": s, "output": sp}
                    f.write(json.dumps(rec) + "\n")


def load_groups(path):
    groups: dict[int, InstructionGroup] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                gi = rec["group"]
                if gi not in groups:
                    groups[gi] = InstructionGroup([])
                group = groups[gi]
                if rec["kind"] == "instruction":
                    group.instructions.append(Instruction(
                        tuple(rec["command"].split()),
                        Transformation.from_dict(rec["rule"])))
                elif rec["kind"] == "train":
                    group.train.append((rec["instruction"], rec["input"], rec["output"]))
                elif rec["kind"] == "heldout":
                    group.heldout.append((rec["instruction"], rec["input"], rec["output"]))
                else:
                    raise StringsError(f"unknown record kind {rec['kind']!r}")
            except (KeyError, TypeError, json.JSONDecodeError, StringsError) as e:
                raise StringsError(f"{path}:{lineno}: malformed record: {e}") from e
    return [groups[k] for k in sorted(groups)]


# ---------------------------------------------------------------------------
# character encoding for the models

PAD = 0
BOS = 1
EOS = 2
CHAR_OFFSET = 3
CHAR_VOCAB = CHAR_OFFSET + 26


def encode_chars(s):
    return np.array([ALPHABET.index(c) + CHAR_OFFSET for c in s], dtype=np.int64)


def decode_chars(ids):
    out = []
    for i in ids:
        if i == EOS:
            break
        if i >= CHAR_OFFSET:
            out.append(ALPHABET[i - CHAR_OFFSET])
    return "".join(out)
