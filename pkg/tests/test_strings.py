import numpy as np
import pytest

from actground.oracle import oracle_apply
from actground.strings import (CONSONANT, VOWEL, GroupsConfig, StringsConfig,
                               StringsError, Transformation,
                               apply_transformation, build_env_batch,
                               build_eval_groups, decode_chars, encode_chars,
                               find_matches, load_dictionary, load_groups,
                               sample_transformation, save_groups,
                               synth_instruction)

CFG = StringsConfig()


def test_figure_examples():
    assert apply_transformation(
        Transformation("replace", (CONSONANT,), "px"), "fines") == "pxipxepx"
    assert apply_transformation(
        Transformation("insert_before", ("b",), "k"), "rabbles") == "rakbkbles"
    assert apply_transformation(
        Transformation("replace", (VOWEL, CONSONANT), "vg"), "thatched") == "thvgchvg"
    assert apply_transformation(
        Transformation("insert_at", (), "b", 3), "thanks") == "thbanks"


def test_insert_at_out_of_range():
    with pytest.raises(StringsError):
        apply_transformation(Transformation("insert_at", (), "b", 9), "cat")


def test_output_length_cap():
    with pytest.raises(StringsError, match="cap"):
        apply_transformation(
            Transformation("replace", (VOWEL,), "xx"), "a" * 30, max_output_len=48)


def test_match_spans_never_overlap():
    rng = np.random.default_rng(0)
    for _ in range(500):
        t = sample_transformation(rng, CFG)
        if t.kind == "insert_at":
            continue
        s = "".join("abcdefghij"[rng.integers(10)] for _ in range(rng.integers(1, 20)))
        spans = find_matches(t.pattern, s)
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert a1 <= b0


def test_agrees_with_oracle():
    # full 100k-case sweep runs in the acceptance suite; smoke here
    rng = np.random.default_rng(1)
    words = load_dictionary(max_len=CFG.max_state_len)
    for _ in range(5_000):
        t = sample_transformation(rng, CFG)
        s = words[rng.integers(len(words))]
        try:
            expected = oracle_apply(t, s, CFG.max_output_len)
        except StringsError:
            with pytest.raises(StringsError):
                apply_transformation(t, s, CFG.max_output_len)
            continue
        assert apply_transformation(t, s, CFG.max_output_len) == expected


def test_sampler_distinct_ast_count():
    rng = np.random.default_rng(2)
    seen = {sample_transformation(rng, CFG) for _ in range(50_000)}
    assert len(seen) >= 2_000


def test_sampler_literals_only_config():
    cfg = StringsConfig(class_atom_prob=0.0)
    rng = np.random.default_rng(3)
    for _ in range(500):
        t = sample_transformation(rng, cfg)
        assert VOWEL not in t.pattern and CONSONANT not in t.pattern


def test_sampler_deterministic():
    a = [sample_transformation(np.random.default_rng(4), CFG) for _ in range(50)]
    b = [sample_transformation(np.random.default_rng(4), CFG) for _ in range(50)]
    assert a == b


def test_env_batch_properties():
    rng = np.random.default_rng(5)
    words = load_dictionary(max_len=CFG.max_state_len)
    batch = build_env_batch(rng, 200, words, CFG)
    assert len(batch) == 200
    for pair in batch:
        assert pair.s != pair.s_prime
        assert len(pair.s_prime) <= CFG.max_output_len
        # replaying the logged rule reproduces s'
        assert apply_transformation(pair.rule, pair.s, CFG.max_output_len) == pair.s_prime


def test_instruction_templates_match_figure_phrasing():
    t = Transformation("replace", (CONSONANT,), "px")
    surfaces = {" ".join(synth_instruction(t, np.random.default_rng(s)))
                for s in range(40)}
    assert "replace consonants with p x" in surfaces

    t2 = Transformation("insert_before", ("b",), "k")
    surfaces2 = {" ".join(synth_instruction(t2, np.random.default_rng(s)))
                 for s in range(40)}
    assert "add a letter k before every b" in surfaces2


def test_instruction_lexical_variation():
    t = Transformation("insert_at", (), "b", 3)
    surfaces = {synth_instruction(t, np.random.default_rng(s)) for s in range(20)}
    assert len(surfaces) >= 2


@pytest.fixture(scope="module")
def groups():
    cfg = GroupsConfig(num_groups=2, train_per_group=200, heldout_per_group=200)
    return build_eval_groups(np.random.default_rng(6), cfg), cfg


def test_groups_disjoint_states(groups):
    gs, _ = groups
    for g in gs:
        train_states = {s for _, s, _ in g.train}
        held_states = {s for _, s, _ in g.heldout}
        assert train_states.isdisjoint(held_states)


def test_groups_sizes_and_coverage(groups):
    gs, cfg = groups
    for g in gs:
        assert len(g.instructions) == 10
        assert len(g.heldout) == 200
        assert len(g.train) == cfg.train_per_group
        # every instruction appears in both splits
        assert {i for i, _, _ in g.train} == set(range(10))
        assert {i for i, _, _ in g.heldout} == set(range(10))
        # small prefixes are balanced over instructions
        assert {i for i, _, _ in g.train[:10]} == set(range(10))


def test_groups_examples_consistent(groups):
    gs, cfg = groups
    for g in gs:
        for ii, s, sp in g.train + g.heldout:
            rule = g.instructions[ii].rule
            assert apply_transformation(rule, s, cfg.strings.max_output_len) == sp


def test_groups_round_trip(tmp_path, groups):
    gs, _ = groups
    path = tmp_path / "groups.jsonl"
    save_groups(gs, path)
    loaded = load_groups(path)
    assert len(loaded) == len(gs)
    for a, b in zip(gs, loaded):
        assert a.instructions == b.instructions
        assert [tuple(x) for x in a.train] == [tuple(x) for x in b.train]
        assert [tuple(x) for x in a.heldout] == [tuple(x) for x in b.heldout]


def test_char_codec_round_trip():
    ids = encode_chars("hello")
    assert decode_chars(list(ids) + [2, 5, 6]) == "hello"
