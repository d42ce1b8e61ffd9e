import re

import pytest

from lymphstage.atlas import RuleSyntaxError, default_rules_text, parse_expression, parse_rules
from lymphstage.atlas import dsl
from lymphstage.regions import REGIONS


def minimal_rules(overrides=None, header="", skip=()):
    """A complete rule file where every region is a single landmark."""
    overrides = overrides or {}
    parts = [header]
    for i, r in enumerate(REGIONS):
        if r.value in skip:
            continue
        parts.append(f"region {r.value}\n  priority: {i % 3}\n  expr: {overrides.get(r.value, 'lm_' + r.value)}\n")
    return "\n".join(parts)


def test_default_rules_parse_to_21():
    rs = parse_rules(default_rules_text())
    assert len(rs) == 21 and list(rs.rules) == list(REGIONS)
    assert re.fullmatch(r"[0-9a-f]{64}", rs.source_hash)
    assert rs.referenced_landmarks() <= set(rs.landmark_inventory)


def test_precedence_and_associativity():
    assert str(parse_expression("a | b & c")) == "(a | (b & c))"
    assert str(parse_expression("a - b - c")) == "(a - b - c)"
    assert str(parse_expression("a - b | c")) == "((a - b) | c)"
    assert str(parse_expression("a | b - c")) == "((a | b) - c)"
    assert str(parse_expression("(a | b) & c")) == "((a | b) & c)"
    e = parse_expression("a | b | c")
    assert isinstance(e, dsl.Union) and len(e.items) == 3


def test_function_forms():
    e = parse_expression("posterior_of(bbox(femur_left, tibia_left)) & inferior_of(centroid(femur_left), 5mm)")
    a, b = e.items
    assert (a.direction, a.ref_kind, a.names, a.offset_mm) == ("posterior", "bbox", ("femur_left", "tibia_left"), 0.0)
    assert (b.direction, b.ref_kind, b.offset_mm) == ("inferior", "centroid", 5.0)
    d = parse_expression("dilate(spleen, 7.5 mm)")
    assert isinstance(d, dsl.Dilate) and d.radius_mm == 7.5
    assert parse_expression("dilate(spleen, 3)").radius_mm == 3.0
    assert parse_expression("hull(aorta, heart)").names == ("aorta", "heart")
    assert parse_expression("slab(hip_left)").names == ("hip_left",)
    m = parse_expression("left_side(spine)")
    assert (m.side, m.name) == ("left", "spine")


def test_defines_are_inlined_and_comments_ignored():
    text = minimal_rules({"NeckL": "organs & body  # trailing comment"},
                         header="# header\ndefine organs = liver | lung\n")
    rs = parse_rules(text)
    assert str(rs["NeckL"].expr) == "((liver | lung) & body)"
    assert "organs" in rs.defines


def _err(text):
    with pytest.raises(RuleSyntaxError) as info:
        parse_rules(text)
    return info.value


def test_missing_region_named():
    e = _err(minimal_rules(skip=("PoplitealR",)))
    assert "PoplitealR" in str(e)


def test_duplicate_region():
    text = minimal_rules() + "\nregion NeckL\n  priority: 1\n  expr: x\n"
    e = _err(text)
    assert "duplicate" in e.message and e.line is not None


def test_unknown_region_and_operator_positions():
    e = _err("region NeckX\n  priority: 1\n  expr: a\n")
    assert "unknown region" in e.message and (e.line, e.column) == (1, 8)
    e = _err(minimal_rules({"NeckL": "frobnicate(a)"}))
    assert "unknown operator" in e.message and e.column == 9
    e = _err(minimal_rules({"NeckL": "a ^ b"}))
    assert "unexpected character" in e.message


def test_unresolved_landmark_only_with_inventory():
    parse_rules(minimal_rules())
    e = _err(minimal_rules(header="landmarks: x"))
    assert "unresolved landmark" in e.message


def test_priority_and_radius_validation():
    assert "integer" in _err(minimal_rules().replace("priority: 0", "priority: 1.5", 1)).message
    assert "non-negative" in _err(minimal_rules({"NeckL": "dilate(a, -2mm)"})).message
    rs = parse_rules(minimal_rules().replace("priority: 0", "priority: -4", 1))
    assert rs[REGIONS[0]].priority == -4


def test_misc_errors():
    assert "bbox" in _err(minimal_rules({"NeckL": "left_of(a)"})).message
    assert "reference" in _err(minimal_rules({"NeckL": "bbox(a)"})).message
    assert "argument list" in _err(minimal_rules({"NeckL": "dilate"})).message
    assert "no expr" in _err("region NeckL\n  priority: 1\n").message
    assert "no priority" in _err("region NeckL\n  expr: a\n").message
    assert "shadows" in _err("define NeckL = a\n").message
    with pytest.raises(RuleSyntaxError):
        parse_expression("a b")


def test_depth_limit():
    # Redundant parentheses do not deepen the tree ...
    assert parse_expression("(" * 60 + "a" + ")" * 60).depth == 1
    # ... but pathological nesting is still refused without a RecursionError.
    with pytest.raises(RuleSyntaxError, match="nesting"):
        parse_expression("(" * 5000 + "a" + ")" * 5000)
    nested = "a"
    for _ in range(31):
        nested = f"dilate({nested}, 1mm)"
    assert parse_expression(nested).depth == 32
    with pytest.raises(RuleSyntaxError, match="depth 33 exceeds"):
        parse_expression(f"dilate({nested}, 1mm)")


def test_depth_limit_through_defines():
    deep = "a"
    for _ in range(20):
        deep = f"dilate({deep}, 1mm)"
    text = f"define d = {deep}\n" + minimal_rules({"NeckL": "d"})
    parse_rules(text)
    e = _err(f"define d = {deep}\ndefine e = dilate(dilate(d, 1mm), 1mm)\n" + minimal_rules({"NeckL": " & ".join(
        ["dilate(" * 10 + "e" + ", 1mm)" * 10])}))
    assert "depth" in e.message


def test_hash_changes_with_text():
    a = parse_rules(minimal_rules())
    b = parse_rules(minimal_rules() + "\n# comment\n")
    assert a.source_hash != b.source_hash
    assert a.rules == b.rules
