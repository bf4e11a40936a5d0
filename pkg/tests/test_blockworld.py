import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vismotor import blockworld as bw


def brute_force_valid(blocks):
    """Independent validity check: unique cells, every raised block on a cube."""
    cells = [b.cell for b in blocks]
    if len(set(cells)) != len(cells):
        return False
    by_cell = {b.cell: b for b in blocks}
    for b in blocks:
        x, y, z = b.cell
        if z == 0:
            continue
        below = by_cell.get((x, y, z - 1))
        if below is None or below.shape != "cube":
            return False
    return True


def brute_force_resolve(layout, tokens):
    """Evaluate a sentence predicate by predicate over every block."""
    words = list(tokens)[2:]
    sup = words.pop(0) if words[0] in bw.SUPERLATIVES else None
    color, shape, rest = words[0], words[1], words[2:]
    occupied = {b.cell: b for b in layout.blocks}

    def keep(b):
        if (b.color, b.shape) != (color, shape):
            return False
        x, y, z = b.cell
        if rest == ["on", "the", "table"]:
            return z == 0
        if rest[:1] == ["on"]:
            o = occupied.get((x, y, z - 1))
            return o is not None and (o.color, o.shape) == tuple(rest[4:6])
        if rest[:1] == ["under"]:
            o = occupied.get((x, y, z + 1))
            return o is not None and (o.color, o.shape) == tuple(rest[2:4])
        if rest[:1] == ["at"]:
            return (x, y, z) == (int(rest[4]), int(rest[2]), int(rest[6]))
        return True

    idx = [i for i, b in enumerate(layout.blocks) if keep(b)]
    if sup and idx:
        axis = {"leftmost": 0, "rightmost": 0, "nearest": 1, "farthest": 1, "lowest": 2, "highest": 2}[sup]
        vals = [layout.blocks[i].cell[axis] for i in idx]
        best = min(vals) if sup in ("leftmost", "nearest", "lowest") else max(vals)
        idx = [i for i, v in zip(idx, vals) if v == best]
    return idx


def test_class_index_layout():
    assert bw.NUM_CLASSES == 16
    assert bw.class_index("cube", "yellow") == 0
    assert bw.class_index("pyramid", "green") == 15
    for k in range(16):
        assert bw.class_index(*bw.class_from_index(k)) == k
    with pytest.raises(bw.BlockWorldError):
        bw.class_from_index(16)


def test_block_rejects_bad_fields():
    with pytest.raises(bw.BlockWorldError):
        bw.Block("sphere", "red", (0, 0, 0))
    with pytest.raises(bw.BlockWorldError):
        bw.Block("cube", "orange", (0, 0, 0))
    with pytest.raises(bw.BlockWorldError):
        bw.Block("cube", "red", (8, 0, 0))


@pytest.mark.parametrize("blocks", [
    [bw.Block("cube", "red", (0, 0, 1))],
    [bw.Block("pyramid", "red", (0, 0, 0)), bw.Block("cube", "red", (0, 0, 1))],
    [bw.Block("cube", "red", (1, 1, 0)), bw.Block("cube", "blue", (1, 1, 0))],
])
def test_invalid_layouts_rejected(blocks):
    assert not brute_force_valid(blocks)
    with pytest.raises(bw.BlockWorldError):
        bw.Layout("bad", blocks)


def test_sampled_layouts_match_validator():
    for seed in range(300):
        lay = bw.sample_layout(seed, 1, 8)
        assert brute_force_valid(lay.blocks)
        assert 1 <= len(lay.blocks) <= 8


def test_sampling_is_deterministic():
    assert bw.sample_layout(17).to_text() == bw.sample_layout(17).to_text()
    assert bw.sample_layout(17).to_text() != bw.sample_layout(18).to_text()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), lo=st.integers(1, 4), extra=st.integers(0, 8))
def test_sampled_layouts_valid_property(seed, lo, extra):
    lay = bw.sample_layout(seed, lo, lo + extra)
    assert brute_force_valid(lay.blocks)
    assert lo <= len(lay.blocks) <= lo + extra


def test_layout_file_round_trip(tmp_path):
    layouts = [bw.sample_layout(s) for s in range(5)]
    bw.save_layouts(layouts, tmp_path / "a.txt")
    back = bw.load_layouts(tmp_path / "a.txt")
    assert [l.to_text() for l in back] == [l.to_text() for l in layouts]
    assert len(bw.load_layouts(tmp_path)) == 5


@pytest.mark.parametrize("text", ["0 0 0 cube red\n", "layout a\n0 0 cube red\n", "layout a\nx 0 0 cube red\n"])
def test_layout_parse_errors(text):
    with pytest.raises(bw.ParseError):
        bw.parse_layouts(text)


def test_vocabulary_round_trip(tmp_path):
    v = bw.VOCABULARY
    assert v[bw.PAD] == 0 and v[bw.UNK] == 1
    bw.save_vocabulary(v, tmp_path / "vocab.txt")
    assert bw.load_vocabulary(tmp_path / "vocab.txt") == v
    ids = bw.encode_tokens(["pick", "the", "zebra", "cube"])
    assert ids[2] == v[bw.UNK]
    assert bw.decode_tokens([*ids, 0, 0]) == ["pick", "the", bw.UNK, "cube"]


def test_empty_sentence_is_parse_error():
    with pytest.raises(bw.ParseError):
        bw.tokenize("   ")


def test_resolution_cases():
    lay = bw.Layout("t", [bw.Block("cube", "red", (0, 0, 0)), bw.Block("cube", "red", (3, 0, 0)),
                          bw.Block("pyramid", "blue", (3, 0, 1))])
    assert isinstance(bw.resolve_description(lay, "pick the red cube"), bw.Ambiguity)
    assert bw.resolve_description(lay, "pick the rightmost red cube") == 1
    assert bw.resolve_description(lay, "take the red cube under the blue pyramid") == 1
    assert bw.resolve_description(lay, "grab the blue pyramid on top of the red cube") == 2
    with pytest.raises(bw.ResolutionError):
        bw.resolve_description(lay, "pick the green cube")
    with pytest.raises(bw.ParseError):
        bw.resolve_description(lay, "pick red cube")


def _all_descriptions(layout):
    """Every sentence the grammar can form about this layout's colors/shapes."""
    pairs = sorted({(b.color, b.shape) for b in layout.blocks})
    for color, shape in pairs:
        for sup in (None, *bw.SUPERLATIVES):
            yield bw.Description(color, shape, sup)
            yield bw.Description(color, shape, sup, "table")
            for other in pairs:
                yield bw.Description(color, shape, sup, "on", other)
                yield bw.Description(color, shape, sup, "under", other)
        for b in layout.blocks[:3]:
            yield bw.Description(color, shape, None, "at", cell=b.cell)


def test_resolver_matches_brute_force():
    checked = 0
    for seed in range(40):
        lay = bw.sample_layout(seed, 2, 8)
        for d in _all_descriptions(lay):
            tokens = d.tokens("pick")
            expect = brute_force_resolve(lay, tokens)
            if not expect:
                with pytest.raises(bw.ResolutionError):
                    bw.resolve_description(lay, tokens)
            elif len(expect) == 1:
                assert bw.resolve_description(lay, tokens) == expect[0]
            else:
                assert bw.resolve_description(lay, tokens).matches == tuple(expect)
            checked += 1
    assert checked > 1000


def test_generated_sentences_resolve_to_target():
    for seed in range(200):
        lay = bw.sample_layout(seed, 1, 8)
        for i in range(len(lay.blocks)):
            goal = bw.describe_target(lay, i, rng_seed=seed)
            assert len(goal.sentence) <= bw.MAX_SENTENCE_TOKENS
            assert bw.resolve_description(lay, goal.sentence) == i
            assert brute_force_resolve(lay, goal.sentence) == [i]


def test_simplest_description_preferred():
    lay = bw.Layout("t", [bw.Block("cube", "red", (0, 0, 0)), bw.Block("cube", "blue", (1, 0, 0))])
    assert bw.describe_target(lay, 0).sentence[2:] == ["red", "cube"]


def test_coordinate_fallback():
    # two identical stacks of two red cubes: only coordinates single out a bottom block
    blocks = [bw.Block("cube", "red", c) for c in [(0, 0, 0), (0, 0, 1), (0, 5, 0), (0, 5, 1),
                                                    (5, 0, 0), (5, 0, 1), (5, 5, 0), (5, 5, 1)]]
    lay = bw.Layout("t", blocks)
    goal = bw.describe_target(lay, 0)
    assert bw.resolve_description(lay, goal.sentence) == 0


def test_goal_tokens_encode():
    lay = bw.sample_layout(4)
    goal = bw.describe_target(lay, 0)
    ids = goal.token_ids()
    assert bw.decode_tokens(ids) == goal.sentence
    assert goal.text == " ".join(goal.sentence)


def test_describe_target_range():
    with pytest.raises(bw.BlockWorldError):
        bw.describe_target(bw.sample_layout(0), 99)


def test_superlative_axes():
    lay = bw.Layout("t", [bw.Block("cube", "red", c) for c in [(2, 4, 0), (5, 1, 0), (2, 4, 1)]])
    tok = lambda s: ["pick", "the", s, "red", "cube"]  # noqa: E731
    assert bw.resolve_description(lay, tok("rightmost")) == 1
    assert bw.resolve_description(lay, tok("nearest")) == 1
    assert bw.resolve_description(lay, tok("highest")) == 2
    assert isinstance(bw.resolve_description(lay, tok("leftmost")), bw.Ambiguity)
