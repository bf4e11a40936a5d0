"""Discrete 8x8x8 block world: layouts, goal sentences and their resolution.

A layout is a set of cubes and pyramids on an 8x8 board.  Blocks stack in
columns; a pyramid always ends a column.  Goal sentences follow a small closed
template grammar::

    VERB the [SUPERLATIVE] COLOR SHAPE [RELATION]

    RELATION := on top of the COLOR SHAPE
              | under the COLOR SHAPE
              | on the table
              | at row D column D level D

``describe_target`` only emits sentences that ``resolve_description`` maps
back to the described block.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID = 8
SHAPES = ("cube", "pyramid")
COLORS = ("yellow", "white", "gray", "magenta", "blue", "cyan", "red", "green")
NUM_CLASSES = len(SHAPES) * len(COLORS)

VERBS = ("pick", "grab", "take")
SUPERLATIVES = ("leftmost", "rightmost", "nearest", "farthest", "highest", "lowest")
DIGITS = tuple(str(i) for i in range(GRID))
FUNCTION_WORDS = ("the", "on", "top", "of", "table", "under", "at", "row", "column", "level")
PAD, UNK = "<pad>", "<unk>"
MAX_SENTENCE_TOKENS = 24


class BlockWorldError(ValueError):
    """Invalid block-world parameters or data."""


class ParseError(BlockWorldError):
    pass


class ResolutionError(BlockWorldError):
    """No block in the layout matches a description."""


@dataclass(frozen=True)
class Block:
    shape: str
    color: str
    cell: tuple[int, int, int]

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise BlockWorldError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise BlockWorldError(f"unknown color {self.color!r}")
        if len(self.cell) != 3 or not all(
            isinstance(c, (int, np.integer)) and 0 <= c < GRID for c in self.cell
        ):
            raise BlockWorldError(f"cell {self.cell!r} outside the {GRID}^3 grid")
        object.__setattr__(self, "cell", tuple(int(c) for c in self.cell))

    @property
    def class_index(self) -> int:
        return class_index(self.shape, self.color)

    @property
    def name(self) -> str:
        return f"{self.shape}_{self.color}"


def class_index(shape: str, color: str) -> int:
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def class_from_index(index: int) -> tuple[str, str]:
    if not 0 <= index < NUM_CLASSES:
        raise BlockWorldError(f"class index {index} outside [0, {NUM_CLASSES})")
    return SHAPES[index // len(COLORS)], COLORS[index % len(COLORS)]


CLASS_NAMES = tuple(f"{s}_{c}" for s in SHAPES for c in COLORS)


@dataclass
class Layout:
    id: str
    blocks: list[Block] = field(default_factory=list)

    def __post_init__(self):
        problems = layout_violations(self)
        if problems:
            raise BlockWorldError(f"layout {self.id}: " + "; ".join(problems))

    def at(self, cell) -> int | None:
        """Index of the block occupying ``cell``, or None."""
        cell = tuple(cell)
        for i, b in enumerate(self.blocks):
            if b.cell == cell:
                return i
        return None

    def to_text(self) -> str:
        lines = [f"layout {self.id}"]
        lines += [f"{b.cell[0]} {b.cell[1]} {b.cell[2]} {b.shape} {b.color}" for b in self.blocks]
        return "\n".join(lines) + "\n"


def layout_violations(layout: Layout) -> list[str]:
    occupied: dict[tuple[int, int, int], Block] = {}
    problems = []
    for b in layout.blocks:
        if b.cell in occupied:
            problems.append(f"duplicate cell {b.cell}")
        occupied[b.cell] = b
    for b in layout.blocks:
        x, y, z = b.cell
        if z > 0:
            below = occupied.get((x, y, z - 1))
            if below is None:
                problems.append(f"block at {b.cell} has no support")
            elif below.shape == "pyramid":
                problems.append(f"block at {b.cell} rests on a pyramid")
    return problems


def sample_layout(rng_seed: int, min_blocks: int = 1, max_blocks: int = 8,
                  max_height: int = GRID) -> Layout:
    """Sample a random valid layout, deterministic in ``rng_seed``.

    Blocks are dropped one at a time onto a uniformly chosen open column.  A
    pyramid closes its column, so pyramids are only drawn while the remaining
    open capacity still fits the blocks left to place.
    """
    if not 1 <= max_height <= GRID:
        raise BlockWorldError(f"max_height must be in [1, {GRID}], got {max_height}")
    capacity = GRID * GRID * max_height
    if not 1 <= min_blocks <= max_blocks <= capacity:
        raise BlockWorldError(
            f"need 1 <= min_blocks <= max_blocks <= {capacity}, got {min_blocks}, {max_blocks}"
        )
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(min_blocks, max_blocks + 1))
    height = np.zeros((GRID, GRID), dtype=int)
    closed = np.zeros((GRID, GRID), dtype=bool)
    blocks = []
    for placed in range(n):
        open_cols = np.argwhere(~closed & (height < max_height))
        x, y = (int(v) for v in open_cols[rng.integers(len(open_cols))])
        color = COLORS[rng.integers(len(COLORS))]
        z = int(height[x, y])
        remaining = n - placed - 1
        # capacity if this column were closed now
        spare = int(np.sum(np.where(closed, 0, max_height - height))) - (max_height - z)
        shape = "cube"
        if spare >= remaining and rng.random() < 0.5:
            shape = "pyramid"
        blocks.append(Block(shape, color, (x, y, z)))
        height[x, y] += 1
        if shape == "pyramid":
            closed[x, y] = True
    return Layout(f"layout-{rng_seed}", blocks)


# ---------------------------------------------------------------------------
# layout files

def parse_layouts(text: str) -> list[Layout]:
    """Parse ``layout <id>`` headers followed by ``x y z shape color`` lines."""
    layouts: list[Layout] = []
    current_id, blocks = None, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "layout":
            if len(parts) != 2:
                raise ParseError(f"line {lineno}: expected 'layout <id>'")
            if current_id is not None:
                layouts.append(Layout(current_id, blocks))
            current_id, blocks = parts[1], []
            continue
        if current_id is None:
            raise ParseError(f"line {lineno}: block line before any 'layout' header")
        if len(parts) != 5:
            raise ParseError(f"line {lineno}: expected 'x y z shape color'")
        try:
            cell = tuple(int(p) for p in parts[:3])
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer coordinate") from None
        blocks.append(Block(parts[3], parts[4], cell))
    if current_id is not None:
        layouts.append(Layout(current_id, blocks))
    return layouts


def load_layouts(path: str | os.PathLike) -> list[Layout]:
    """Load layouts from a file, or from every file in a directory (sorted)."""
    path = Path(path)
    if path.is_dir():
        out = []
        for f in sorted(p for p in path.iterdir() if p.is_file()):
            out.extend(parse_layouts(f.read_text()))
        return out
    return parse_layouts(path.read_text())


def save_layouts(layouts: Iterable[Layout], path: str | os.PathLike) -> None:
    Path(path).write_text("".join(l.to_text() for l in layouts))


# ---------------------------------------------------------------------------
# vocabulary and tokens

def build_vocabulary() -> dict[str, int]:
    tokens = [PAD, UNK, *VERBS, *FUNCTION_WORDS, *SUPERLATIVES, *COLORS, *SHAPES, *DIGITS]
    return {t: i for i, t in enumerate(tokens)}


VOCABULARY = build_vocabulary()


def save_vocabulary(vocab: dict[str, int], path: str | os.PathLike) -> None:
    ordered = sorted(vocab, key=vocab.__getitem__)
    if [vocab[t] for t in ordered] != list(range(len(ordered))):
        raise BlockWorldError("vocabulary ids must be contiguous from 0")
    Path(path).write_text("\n".join(ordered) + "\n")


def load_vocabulary(path: str | os.PathLike) -> dict[str, int]:
    tokens = Path(path).read_text().splitlines()
    return {t: i for i, t in enumerate(tokens)}


def tokenize(sentence: str) -> list[str]:
    tokens = sentence.split()
    if not tokens:
        raise ParseError("empty sentence")
    return tokens


def encode_tokens(tokens: Sequence[str], vocab: dict[str, int] = VOCABULARY) -> list[int]:
    unk = vocab[UNK]
    return [vocab.get(t, unk) for t in tokens]


def decode_tokens(ids: Sequence[int], vocab: dict[str, int] = VOCABULARY) -> list[str]:
    inverse = {i: t for t, i in vocab.items()}
    return [inverse.get(int(i), UNK) for i in ids if int(i) != vocab[PAD]]


@dataclass
class GoalSpec:
    layout_id: str
    target_index: int
    sentence: list[str]
    vocabulary: dict[str, int] = field(default_factory=lambda: dict(VOCABULARY))

    @property
    def text(self) -> str:
        return " ".join(self.sentence)

    def token_ids(self) -> list[int]:
        return encode_tokens(self.sentence, self.vocabulary)


# ---------------------------------------------------------------------------
# grammar

@dataclass(frozen=True)
class Description:
    """Parsed form of a goal sentence."""

    color: str
    shape: str
    superlative: str | None = None
    relation: str | None = None          # "on", "under", "table", "at"
    other: tuple[str, str] | None = None  # (color, shape) for on/under
    cell: tuple[int, int, int] | None = None

    def tokens(self, verb: str = "pick") -> list[str]:
        out = [verb, "the"]
        if self.superlative:
            out.append(self.superlative)
        out += [self.color, self.shape]
        if self.relation == "on":
            out += ["on", "top", "of", "the", *self.other]
        elif self.relation == "under":
            out += ["under", "the", *self.other]
        elif self.relation == "table":
            out += ["on", "the", "table"]
        elif self.relation == "at":
            x, y, z = self.cell
            out += ["at", "row", str(y), "column", str(x), "level", str(z)]
        return out


@dataclass(frozen=True)
class Ambiguity:
    """More than one block matches a description."""

    matches: tuple[int, ...]

    def __len__(self):
        return len(self.matches)


def parse_description(tokens: Sequence[str]) -> Description:
    t = list(tokens)

    def fail(msg):
        raise ParseError(f"{msg}: {' '.join(t)!r}")

    if len(t) < 4 or t[0] not in VERBS or t[1] != "the":
        fail("expected '<verb> the ...'")
    i = 2
    sup = None
    if t[i] in SUPERLATIVES:
        sup, i = t[i], i + 1
    if i + 2 > len(t) or t[i] not in COLORS or t[i + 1] not in SHAPES:
        fail("expected '<color> <shape>'")
    color, shape = t[i], t[i + 1]
    rest = t[i + 2:]
    if not rest:
        return Description(color, shape, sup)
    if rest == ["on", "the", "table"]:
        return Description(color, shape, sup, "table")
    if len(rest) == 6 and rest[:4] == ["on", "top", "of", "the"] \
            and rest[4] in COLORS and rest[5] in SHAPES:
        return Description(color, shape, sup, "on", (rest[4], rest[5]))
    if len(rest) == 4 and rest[:2] == ["under", "the"] and rest[2] in COLORS and rest[3] in SHAPES:
        return Description(color, shape, sup, "under", (rest[2], rest[3]))
    if (len(rest) == 7 and rest[0] == "at" and rest[1] == "row" and rest[3] == "column"
            and rest[5] == "level" and all(rest[k] in DIGITS for k in (2, 4, 6))):
        y, x, z = int(rest[2]), int(rest[4]), int(rest[6])
        return Description(color, shape, sup, "at", cell=(x, y, z))
    fail("unrecognized relation")


_SUPERLATIVE_KEY = {
    "leftmost": (0, min), "rightmost": (0, max),
    "nearest": (1, min), "farthest": (1, max),
    "lowest": (2, min), "highest": (2, max),
}


def _matches(layout: Layout, d: Description) -> list[int]:
    out = []
    for i, b in enumerate(layout.blocks):
        if b.color != d.color or b.shape != d.shape:
            continue
        x, y, z = b.cell
        if d.relation == "table" and z != 0:
            continue
        if d.relation in ("on", "under"):
            k = layout.at((x, y, z - 1 if d.relation == "on" else z + 1))
            if k is None or (layout.blocks[k].color, layout.blocks[k].shape) != d.other:
                continue
        if d.relation == "at" and b.cell != d.cell:
            continue
        out.append(i)
    if d.superlative and out:
        axis, pick = _SUPERLATIVE_KEY[d.superlative]
        best = pick(layout.blocks[i].cell[axis] for i in out)
        out = [i for i in out if layout.blocks[i].cell[axis] == best]
    return out


def resolve_description(layout: Layout, sentence: Sequence[str] | str) -> int | Ambiguity:
    """Return the index of the unique block a sentence refers to.

    Returns an :class:`Ambiguity` listing every match when the sentence fits
    several blocks; raises :class:`ResolutionError` when it fits none.
    """
    tokens = tokenize(sentence) if isinstance(sentence, str) else list(sentence)
    d = parse_description(tokens)
    found = _matches(layout, d)
    if not found:
        raise ResolutionError(f"no block matches {' '.join(tokens)!r} in {layout.id}")
    if len(found) == 1:
        return found[0]
    return Ambiguity(tuple(found))


def _candidate_tiers(layout: Layout, target: int) -> list[list[Description]]:
    b = layout.blocks[target]
    x, y, z = b.cell
    relations = []
    if z == 0:
        relations.append(Description(b.color, b.shape, relation="table"))
    else:
        below = layout.blocks[layout.at((x, y, z - 1))]
        relations.append(Description(b.color, b.shape, relation="on", other=(below.color, below.shape)))
    above = layout.at((x, y, z + 1))
    if above is not None:
        a = layout.blocks[above]
        relations.append(Description(b.color, b.shape, relation="under", other=(a.color, a.shape)))
    sups = [Description(b.color, b.shape, s) for s in SUPERLATIVES]
    combos = [Description(r.color, r.shape, s, r.relation, r.other) for r in relations for s in SUPERLATIVES]
    return [[Description(b.color, b.shape)], relations + sups, combos]


def describe_target(layout: Layout, target_index: int, rng_seed: int = 0,
                    max_tokens: int = MAX_SENTENCE_TOKENS) -> GoalSpec:
    """Generate a sentence that singles out ``layout.blocks[target_index]``.

    The simplest tier of templates with at least one unambiguous candidate is
    used; ties within a tier are broken by the seeded RNG.  The coordinate
    phrase is the last resort and is always unique.
    """
    if not 0 <= target_index < len(layout.blocks):
        raise BlockWorldError(f"target index {target_index} out of range")
    rng = np.random.default_rng(rng_seed)
    verb = VERBS[rng.integers(len(VERBS))]
    for tier in _candidate_tiers(layout, target_index):
        unique = [d for d in tier if _matches(layout, d) == [target_index]
                  and len(d.tokens(verb)) <= max_tokens]
        if unique:
            d = unique[rng.integers(len(unique))]
            return GoalSpec(layout.id, target_index, d.tokens(verb))
    b = layout.blocks[target_index]
    d = Description(b.color, b.shape, relation="at", cell=b.cell)
    return GoalSpec(layout.id, target_index, d.tokens(verb))
