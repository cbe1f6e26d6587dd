import itertools
import json

import pytest

from finecount.errors import (
    InsufficientNegativesError,
    InvalidSpecError,
    SuggesterTransportError,
)
from finecount.taxonomy import (
    COUNT_SLOTS,
    LIGHT_SLOTS,
    NEGATIVE_SUGGESTION_PROMPT,
    VIEW_SLOTS,
    CategorySpec,
    NegativeSource,
    StaticSuggester,
    expand_prompts,
    load_spec,
    parse_suggestions,
    save_spec,
    source_negatives,
)


# ---------------------------------------------------------------- spec


def test_spec_rejects_empty_name():
    with pytest.raises(InvalidSpecError):
        CategorySpec(name="   ")


def test_spec_rejects_self_negative():
    with pytest.raises(InvalidSpecError):
        CategorySpec(name="red disk", negative_source=NegativeSource.STATIC,
                     negatives=["Red  Disk"])


def test_fine_vs_broad_requires_parent():
    with pytest.raises(InvalidSpecError):
        CategorySpec(name="red disk", negative_source=NegativeSource.FINE_VS_BROAD)


def test_fine_vs_broad_pins_parent_negative():
    spec = CategorySpec(name="red disk", parent="shape",
                        negative_source=NegativeSource.FINE_VS_BROAD)
    assert spec.negatives == ["shape"]


def test_none_source_forbids_negatives():
    with pytest.raises(InvalidSpecError):
        CategorySpec(name="red disk", negatives=["blue square"])


def test_spec_json_round_trip():
    spec = CategorySpec(name="red disk", parent="shape",
                        negative_source=NegativeSource.STATIC,
                        negatives=["yellow diamond", "blue square"])
    assert CategorySpec.from_json(spec.to_json()) == spec


def test_spec_file_round_trip(tmp_path):
    spec = CategorySpec(name="red disk", parent="shape",
                        negative_source=NegativeSource.FINE_VS_BROAD)
    path = tmp_path / "spec.json"
    save_spec(spec, str(path))
    assert load_spec(str(path)) == spec
    # on-disk form is plain JSON
    doc = json.loads(path.read_text())
    assert doc["negative_source"] == "fine_vs_broad"


# ---------------------------------------------------------------- prompts


def test_expand_prompts_count_and_content():
    spec = CategorySpec(name="red disk")
    bundle = expand_prompts(spec, 7, seed=0)
    assert len(bundle.positive_prompts) == 7
    assert all("red disk" in p for p in bundle.positive_prompts)
    assert bundle.negative_prompts == {}


def test_expand_prompts_deterministic():
    spec = CategorySpec(name="red disk")
    a = expand_prompts(spec, 15, seed=3)
    b = expand_prompts(spec, 15, seed=3)
    c = expand_prompts(spec, 15, seed=4)
    assert a.positive_prompts == b.positive_prompts
    assert a.positive_prompts != c.positive_prompts


def test_expand_prompts_full_window_covers_slot_product():
    spec = CategorySpec(name="red disk")
    n = len(COUNT_SLOTS) * len(VIEW_SLOTS) * len(LIGHT_SLOTS)
    bundle = expand_prompts(spec, n, seed=0)
    assert len(set(bundle.positive_prompts)) == n
    # every (count, view, light) combination appears exactly once
    combos = set()
    for c, v, l in itertools.product(COUNT_SLOTS, VIEW_SLOTS, LIGHT_SLOTS):
        expected = f"A photorealistic image of {c} red disk. {v}, {l}"
        combos.add(expected)
    assert set(bundle.positive_prompts) == combos


def test_expand_prompts_negatives_use_same_template():
    spec = CategorySpec(name="red disk", negative_source=NegativeSource.STATIC,
                        negatives=["yellow diamond"])
    bundle = expand_prompts(spec, 5, seed=0)
    assert set(bundle.negative_prompts) == {"yellow diamond"}
    assert all("yellow diamond" in p for p in bundle.negative_prompts["yellow diamond"])
    assert all("red disk" not in p for p in bundle.negative_prompts["yellow diamond"])


def test_expand_prompts_rejects_bad_n():
    with pytest.raises(InvalidSpecError):
        expand_prompts(CategorySpec(name="x"), 0, seed=0)


# ---------------------------------------------------------------- suggestions


def test_parse_suggestions_formats():
    raw = "- apple\n* pear\n1. plum\n2) cherry\n  grape , kiwi\n\n"
    got = parse_suggestions(raw)
    assert got == ["apple", "pear", "plum", "cherry", "grape", "kiwi"]


def test_parse_suggestions_drops_empty_lines():
    assert parse_suggestions("\n\n  \n- one\n") == ["one"]


def test_source_negatives_static_and_none():
    spec = CategorySpec(name="red disk", negative_source=NegativeSource.STATIC,
                        negatives=["blue square"])
    assert source_negatives(spec).negatives == ["blue square"]
    bare = CategorySpec(name="red disk")
    assert source_negatives(bare).negatives == []


def test_source_negatives_llm_exact_k():
    spec = CategorySpec(name="red disk", negative_source=NegativeSource.LLM_GENERATED)
    sug = StaticSuggester({"red disk": "- maroon disk\n- red ellipse\n- Red Disk\n"
                                       "- crimson disk\n- scarlet disk\n- ruby disk"})
    out = source_negatives(spec, k=5, llm=sug)
    # the target itself is filtered out, exactly k survive
    assert len(out.negatives) == 5
    assert "Red Disk" not in out.negatives


def test_source_negatives_llm_shortfall():
    spec = CategorySpec(name="red disk", negative_source=NegativeSource.LLM_GENERATED)
    sug = StaticSuggester({"red disk": "- maroon disk\n- red ellipse"})
    with pytest.raises(InsufficientNegativesError) as err:
        source_negatives(spec, k=5, llm=sug)
    assert err.value.requested == 5
    assert len(err.value.obtained) == 2


def test_source_negatives_llm_requires_suggester():
    spec = CategorySpec(name="red disk", negative_source=NegativeSource.LLM_GENERATED)
    with pytest.raises(InvalidSpecError):
        source_negatives(spec, k=5)


def test_source_negatives_wraps_transport_failures():
    class Broken:
        def suggest(self, prompt):
            raise ConnectionError("refused")

    spec = CategorySpec(name="red disk", negative_source=NegativeSource.LLM_GENERATED)
    with pytest.raises(SuggesterTransportError):
        source_negatives(spec, k=5, llm=Broken())


def test_suggestion_prompt_renders_count_and_category():
    rendered = NEGATIVE_SUGGESTION_PROMPT.format(COUNT=5, CATEGORY="red disk")
    assert "5" in rendered
    assert "red disk" in rendered
    assert "{" not in rendered


def test_static_suggester_is_case_insensitive():
    sug = StaticSuggester({"red disk": "- a\n- b"})
    prompt = NEGATIVE_SUGGESTION_PROMPT.format(COUNT=2, CATEGORY="Red Disk")
    assert parse_suggestions(sug.suggest(prompt)) == ["a", "b"]
