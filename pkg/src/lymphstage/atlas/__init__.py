from .dsl import RuleSet, RuleSyntaxError, parse_expression, parse_rules
from .evaluate import (
    LandmarkSet,
    RegionAtlas,
    build_atlas,
    check_exclusive,
    default_rules_text,
    dilate_mm,
    evaluate_mask,
    evaluate_rule,
    load_default_rules,
)

__all__ = [
    "LandmarkSet",
    "RegionAtlas",
    "RuleSet",
    "RuleSyntaxError",
    "build_atlas",
    "check_exclusive",
    "default_rules_text",
    "dilate_mm",
    "evaluate_mask",
    "evaluate_rule",
    "load_default_rules",
    "parse_expression",
    "parse_rules",
]
