"""Block-stacking world: grid states, a logical-form action grammar,
synthetic level generation, templated command annotation, and session I/O.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PALETTE = ("red", "orange", "blue", "brown", "cyan")


class BlocksError(Exception):
    pass


class InapplicableForm(BlocksError):
    """The logical form does not apply to the given state."""


@dataclass(frozen=True)
class BlocksConfig:
    num_columns: int = 8
    max_height: int = 5
    palette: tuple = DEFAULT_PALETTE
    # P(plan length == 1), P(plan length == 2), ...
    plan_length_probs: tuple = (0.7, 0.3)
    start_height_max: int = 3

    @property
    def num_channels(self):
        # colors + empty
        return len(self.palette) + 1


@dataclass(frozen=True)
class BlockGrid:
    """Gravity-packed stacks of colored blocks, bottom to top."""

    columns: tuple  # tuple of tuples of color names

    def validate(self, config: BlocksConfig):
        if len(self.columns) != config.num_columns:
            raise BlocksError(
                f"expected {config.num_columns} columns, got {len(self.columns)}")
        for col in self.columns:
            if len(col) > config.max_height:
                raise BlocksError(f"column exceeds max height {config.max_height}")
            for color in col:
                if color not in config.palette:
                    raise BlocksError(f"unknown block color {color!r}")
        return self

    @staticmethod
    def from_lists(columns):
        return BlockGrid(tuple(tuple(c) for c in columns))

    def to_lists(self):
        return [list(c) for c in self.columns]


@dataclass(frozen=True)
class BlockLogicalForm:
    """act: 'add' (with color) or 'remove'; selector picks target columns."""

    act: str                      # "add" | "remove"
    color: str | None             # block color for "add"
    selector: str                 # all|leftmost|rightmost|even|odd|index|top_color
    selector_arg: object = None   # column index or color

    def describe(self):
        sel = self.selector if self.selector_arg is None \
            else f"{self.selector}({self.selector_arg})"
        act = f"add({self.color})" if self.act == "add" else "remove"
        return f"{act}/{sel}"


def selected_columns(lf: BlockLogicalForm, grid: BlockGrid):
    n = len(grid.columns)
    if lf.selector == "all":
        return list(range(n))
    if lf.selector == "leftmost":
        return [0]
    if lf.selector == "rightmost":
        return [n - 1]
    if lf.selector == "even":
        return list(range(0, n, 2))
    if lf.selector == "odd":
        return list(range(1, n, 2))
    if lf.selector == "index":
        i = lf.selector_arg
        return [i] if 0 <= i < n else []
    if lf.selector == "top_color":
        return [i for i, col in enumerate(grid.columns)
                if col and col[-1] == lf.selector_arg]
    raise BlocksError(f"unknown selector {lf.selector!r}")


def apply_form(lf: BlockLogicalForm, grid: BlockGrid,
               config: BlocksConfig) -> BlockGrid:
    """Deterministically apply `lf`; raises InapplicableForm if it would
    change nothing or violate a grid invariant."""
    targets = selected_columns(lf, grid)
    if not targets:
        raise InapplicableForm(f"{lf.describe()}: selects no columns")
    cols = [list(c) for c in grid.columns]
    if lf.act == "add":
        for i in targets:
            if len(cols[i]) >= config.max_height:
                raise InapplicableForm(
                    f"{lf.describe()}: column {i} already at max height")
        for i in targets:
            cols[i].append(lf.color)
    elif lf.act == "remove":
        for i in targets:
            if not cols[i]:
                raise InapplicableForm(f"{lf.describe()}: column {i} is empty")
        for i in targets:
            cols[i].pop()
    else:
        raise BlocksError(f"unknown act {lf.act!r}")
    return BlockGrid.from_lists(cols)


def grammar_forms(config: BlocksConfig):
    """The full logical-form inventory for this configuration."""
    selectors = [("all", None), ("leftmost", None), ("rightmost", None),
                 ("even", None), ("odd", None)]
    selectors += [("index", i) for i in range(config.num_columns)]
    selectors += [("top_color", c) for c in config.palette]
    forms = []
    for sel, arg in selectors:
        for color in config.palette:
            forms.append(BlockLogicalForm("add", color, sel, arg))
        forms.append(BlockLogicalForm("remove", None, sel, arg))
    return forms


def applicable_forms(grid: BlockGrid, config: BlocksConfig):
    out = []
    for lf in grammar_forms(config):
        try:
            apply_form(lf, grid, config)
        except InapplicableForm:
            continue
        out.append(lf)
    return out


def enumerate_applicable_forms(s: BlockGrid, s_prime: BlockGrid,
                               config: BlocksConfig):
    """All grammar forms lf with apply_form(lf, s) == s_prime (brute force)."""
    out = set()
    for lf in grammar_forms(config):
        try:
            if apply_form(lf, s, config) == s_prime:
                out.add(lf)
        except InapplicableForm:
            continue
    return out


# ---------------------------------------------------------------------------
# level / transition generation


@dataclass(frozen=True)
class BlockTransition:
    s: BlockGrid
    s_prime: BlockGrid


def sample_start_state(rng, config: BlocksConfig) -> BlockGrid:
    cols = []
    hmax = min(config.start_height_max, config.max_height)
    for _ in range(config.num_columns):
        height = int(rng.integers(0, hmax + 1))
        cols.append([config.palette[rng.integers(len(config.palette))]
                     for _ in range(height)])
    return BlockGrid.from_lists(cols)


def sample_level(rng, config: BlocksConfig, max_retries=100):
    """Sample (start, goal, plan) with the plan replayable from start."""
    lengths = np.arange(1, len(config.plan_length_probs) + 1)
    for _ in range(max_retries):
        start = sample_start_state(rng, config)
        plan_len = int(rng.choice(lengths, p=config.plan_length_probs))
        plan = []
        state = start
        ok = True
        for _ in range(plan_len):
            candidates = applicable_forms(state, config)
            if not candidates:
                ok = False
                break
            lf = candidates[rng.integers(len(candidates))]
            state = apply_form(lf, state, config)
            plan.append(lf)
        if ok:
            return start, state, plan
    raise BlocksError("sample_level: retries exhausted (pathological config)")


def transition_stream(rng, batch_size, config: BlocksConfig):
    """Yield endless batches of fresh single-step transitions."""
    while True:
        batch = []
        while len(batch) < batch_size:
            start, _, plan = sample_level(rng, config)
            state = start
            for lf in plan:
                nxt = apply_form(lf, state, config)
                batch.append(BlockTransition(state, nxt))
                state = nxt
                if len(batch) == batch_size:
                    break
        yield batch


# ---------------------------------------------------------------------------
# synthetic annotator

_ADD_VERBS = ["add", "put", "stack"]
_REMOVE_VERBS = ["remove", "take off", "delete"]

_SELECTOR_PHRASES = {
    "all": ["every column", "each column", "all the columns"],
    "leftmost": ["the leftmost column", "the first column on the left",
                 "the far left column"],
    "rightmost": ["the rightmost column", "the last column on the right",
                  "the far right column"],
    "even": ["the even columns", "every even column", "columns at even positions"],
    "odd": ["the odd columns", "every odd column", "columns at odd positions"],
}


def _selector_phrase(lf, rng):
    if lf.selector in _SELECTOR_PHRASES:
        options = _SELECTOR_PHRASES[lf.selector]
        return options[rng.integers(len(options))]
    if lf.selector == "index":
        n = lf.selector_arg + 1  # 1-based in language
        options = [f"column {n}", f"the column number {n}", f"stack {n}"]
        return options[rng.integers(len(options))]
    if lf.selector == "top_color":
        c = lf.selector_arg
        options = [f"the {c} blocks", f"every {c} block", f"the {c} ones"]
        return options[rng.integers(len(options))]
    raise BlocksError(f"unknown selector {lf.selector!r}")


def synth_annotate(lf: BlockLogicalForm, rng):
    """Templated lowercase command tokens for a logical form."""
    where = _selector_phrase(lf, rng)
    if lf.act == "add":
        verb = _ADD_VERBS[rng.integers(len(_ADD_VERBS))]
        if lf.selector == "top_color":
            templates = [
                f"{verb} {lf.color} blocks on {where}",
                f"{verb} a {lf.color} block on top of {where}",
                f"{verb} {lf.color} on {where}",
            ]
        else:
            templates = [
                f"{verb} a {lf.color} block to {where}",
                f"{verb} a {lf.color} block on {where}",
                f"{verb} {lf.color} blocks to {where}",
            ]
    else:
        verb = _REMOVE_VERBS[rng.integers(len(_REMOVE_VERBS))]
        templates = [
            f"{verb} the top block of {where}",
            f"{verb} the top block from {where}",
            f"{verb} the block on top of {where}",
        ]
    return tuple(templates[rng.integers(len(templates))].split())


# ---------------------------------------------------------------------------
# sessions


@dataclass(frozen=True)
class AnnotatedExample:
    s: BlockGrid
    command: tuple
    s_prime: BlockGrid


@dataclass
class Session:
    examples: list = field(default_factory=list)
    annotator_id: str = ""


def generate_sessions(rng, config: BlocksConfig, num_sessions, session_length):
    """Synthetic annotated sessions: walk sampled level plans and describe
    every step with the templated annotator."""
    sessions = []
    for si in range(num_sessions):
        examples = []
        while len(examples) < session_length:
            start, _, plan = sample_level(rng, config)
            state = start
            for lf in plan:
                nxt = apply_form(lf, state, config)
                examples.append(AnnotatedExample(state, synth_annotate(lf, rng), nxt))
                state = nxt
                if len(examples) == session_length:
                    break
        sessions.append(Session(examples, annotator_id=f"synthetic-{si:03d}"))
    return sessions


def save_sessions(sessions, path):
    """Line-delimited JSON: one record per example, session id included."""
    with open(path, "w", encoding="utf-8") as f:
        for session in sessions:
            for ex in session.examples:
                rec = {
                    "session": session.annotator_id,
                    "state": ex.s.to_lists(),
                    "command": " ".join(ex.command),
                    "next_state": ex.s_prime.to_lists(),
                }
                f.write(json.dumps(rec) + "\n")


def load_sessions(path, config: BlocksConfig):
    """Inverse of save_sessions; malformed records error with line numbers."""
    by_id: dict[str, Session] = {}
    order = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                s = BlockGrid.from_lists(rec["state"]).validate(config)
                s_prime = BlockGrid.from_lists(rec["next_state"]).validate(config)
                command = tuple(rec["command"].split())
                sid = rec["session"]
            except (KeyError, TypeError, json.JSONDecodeError, BlocksError) as e:
                raise BlocksError(f"{path}:{lineno}: malformed record: {e}") from e
            if sid not in by_id:
                by_id[sid] = Session([], annotator_id=sid)
                order.append(sid)
            by_id[sid].examples.append(AnnotatedExample(s, command, s_prime))
    return [by_id[sid] for sid in order]


# ---------------------------------------------------------------------------
# tensor encoding

EMPTY_CHANNEL = 0  # channel 0 is "empty"; colors occupy 1..|P|


def encode_grid(grid: BlockGrid, config: BlocksConfig) -> np.ndarray:
    """One-hot (C, H, |P|+1) encoding; channel 0 marks empty cells."""
    C, H = config.num_columns, config.max_height
    out = np.zeros((C, H, config.num_channels), dtype=np.float32)
    out[:, :, EMPTY_CHANNEL] = 1.0
    color_index = {c: i + 1 for i, c in enumerate(config.palette)}
    for ci, col in enumerate(grid.columns):
        for hi, color in enumerate(col):
            out[ci, hi, EMPTY_CHANNEL] = 0.0
            out[ci, hi, color_index[color]] = 1.0
    return out


def grid_to_indices(grid: BlockGrid, config: BlocksConfig) -> np.ndarray:
    """(C, H) integer channel indices (0 = empty)."""
    return encode_grid(grid, config).argmax(axis=-1)


def decode_indices(indices: np.ndarray, config: BlocksConfig):
    """Channel-index grid -> BlockGrid, or None if not gravity-packed."""
    cols = []
    for ci in range(config.num_columns):
        col = []
        seen_empty = False
        for hi in range(config.max_height):
            ch = int(indices[ci, hi])
            if ch == EMPTY_CHANNEL:
                seen_empty = True
            else:
                if seen_empty:
                    return None  # floating block
                col.append(config.palette[ch - 1])
        cols.append(col)
    return BlockGrid.from_lists(cols)


def decode_grid(encoded: np.ndarray, config: BlocksConfig):
    return decode_indices(encoded.argmax(axis=-1), config)
