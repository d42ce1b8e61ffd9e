"""Lugano stage and therapeutic group from an involvement profile."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .regions import INFRA_BITS, REGIONS, SUPRA_BITS, RegionId, regions_to_mask


class Stage(str, Enum):
    NoInvolvement = "NoInvolvement"
    I = "I"
    II = "II"
    III = "III"
    IV = "IV"

    @property
    def rank(self) -> int:
        return _RANK[self]

    @classmethod
    def from_number(cls, n: int) -> "Stage":
        return (cls.NoInvolvement, cls.I, cls.II, cls.III, cls.IV)[int(n)]


_RANK = {s: i for i, s in enumerate(Stage)}


class Group(str, Enum):
    Limited = "Limited"
    Advanced = "Advanced"
    NONE = "None"


@dataclass(frozen=True)
class InvolvementProfile:
    involved: frozenset[RegionId] = frozenset()
    extranodal: bool = False
    supporting: Mapping[RegionId, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "involved", frozenset(RegionId(r) for r in self.involved))
        object.__setattr__(self, "extranodal", bool(self.extranodal))

    @property
    def mask(self) -> int:
        return regions_to_mask(self.involved)

    def to_dict(self) -> dict:
        return {
            "involved": [r.value for r in REGIONS if r in self.involved],
            "extranodal": self.extranodal,
            "supporting_lesions": {r.value: list(self.supporting[r]) for r in REGIONS if r in self.supporting},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "InvolvementProfile":
        involved = d.get("involved", [])
        unknown = [r for r in involved if r not in RegionId.__members__]
        if unknown:
            raise ValueError(f"unknown region name(s): {unknown}")
        supporting = {RegionId(k): tuple(v) for k, v in d.get("supporting_lesions", {}).items()}
        return cls(frozenset(RegionId(r) for r in involved), bool(d.get("extranodal", False)), supporting)


@dataclass(frozen=True)
class StagingResult:
    stage: Stage
    group: Group
    rationale: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "group": self.group.value, "rationale": dict(self.rationale)}


def therapeutic_group(stage: Stage | str) -> Group:
    stage = Stage(stage)
    if stage in (Stage.I, Stage.II):
        return Group.Limited
    if stage in (Stage.III, Stage.IV):
        return Group.Advanced
    return Group.NONE


def stage_from_mask(mask: int, extranodal: bool) -> Stage:
    """Stage of a 21-bit region bitmask (bit i = i-th region in enumeration
    order). Precedence: extranodal, both sides, several regions, one region."""
    if extranodal:
        return Stage.IV
    supra = mask & SUPRA_BITS
    infra = mask & INFRA_BITS
    if supra and infra:
        return Stage.III
    n = (supra | infra).bit_count()
    if n >= 2:
        return Stage.II
    if n == 1:
        return Stage.I
    return Stage.NoInvolvement


def stage(profile: InvolvementProfile) -> StagingResult:
    mask = profile.mask
    st = stage_from_mask(mask, profile.extranodal)
    supra = sorted((r for r in profile.involved if (1 << r.ordinal) & SUPRA_BITS), key=lambda r: r.ordinal)
    infra = sorted((r for r in profile.involved if (1 << r.ordinal) & INFRA_BITS), key=lambda r: r.ordinal)
    if profile.extranodal:
        rule = "extranodal involvement"
    elif supra and infra:
        rule = "nodal regions on both sides of the diaphragm"
    elif len(supra) + len(infra) >= 2:
        rule = "two or more nodal regions on one side of the diaphragm"
    elif supra or infra:
        rule = "single nodal region"
    else:
        rule = "no involvement detected"
    rationale = {
        "rule": rule,
        "supra_regions": [r.value for r in supra],
        "infra_regions": [r.value for r in infra],
        "supra_count": len(supra),
        "infra_count": len(infra),
        "extranodal": profile.extranodal,
    }
    return StagingResult(st, therapeutic_group(st), rationale)


def stage_regions(regions: Iterable[RegionId | str], extranodal: bool = False) -> StagingResult:
    return stage(InvolvementProfile(frozenset(RegionId(r) for r in regions), extranodal))
