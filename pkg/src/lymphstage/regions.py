"""The 21 nodal regions and their side of the diaphragm."""

from __future__ import annotations

from enum import Enum


class RegionId(str, Enum):
    WaldeyersRing = "WaldeyersRing"
    NeckL = "NeckL"
    NeckR = "NeckR"
    InfraclavicularL = "InfraclavicularL"
    InfraclavicularR = "InfraclavicularR"
    AxillaL = "AxillaL"
    AxillaR = "AxillaR"
    TrochleaL = "TrochleaL"
    TrochleaR = "TrochleaR"
    Mediastinum = "Mediastinum"
    HilumL = "HilumL"
    HilumR = "HilumR"
    Spleen = "Spleen"
    UpperAbdomen = "UpperAbdomen"
    LowerAbdomen = "LowerAbdomen"
    ParaIliacL = "ParaIliacL"
    ParaIliacR = "ParaIliacR"
    GroinL = "GroinL"
    GroinR = "GroinR"
    PoplitealL = "PoplitealL"
    PoplitealR = "PoplitealR"

    @property
    def ordinal(self) -> int:
        return REGION_INDEX[self]

    @property
    def side(self) -> "Side":
        return DIAPHRAGM_SIDE[self]

    @property
    def label(self) -> int:
        """Label id in multi-label atlas volumes (1-based enumeration order)."""
        return REGION_INDEX[self] + 1


class Side(str, Enum):
    SUPRA = "Supra"
    INFRA = "Infra"


REGIONS: tuple[RegionId, ...] = tuple(RegionId)
REGION_INDEX = {r: i for i, r in enumerate(REGIONS)}

SUPRA_REGIONS = frozenset(REGIONS[:12])
INFRA_REGIONS = frozenset(REGIONS[12:])
DIAPHRAGM_SIDE = {r: (Side.SUPRA if r in SUPRA_REGIONS else Side.INFRA) for r in REGIONS}

SUPRA_BITS = sum(1 << REGION_INDEX[r] for r in SUPRA_REGIONS)
INFRA_BITS = sum(1 << REGION_INDEX[r] for r in INFRA_REGIONS)

# Row labels used in per-region result tables.
DISPLAY_NAMES = {
    RegionId.WaldeyersRing: "Waldeyer's Ring",
    RegionId.NeckL: "Left Neck",
    RegionId.NeckR: "Right Neck",
    RegionId.InfraclavicularL: "Left Infraclavicular",
    RegionId.InfraclavicularR: "Right Infraclavicular",
    RegionId.AxillaL: "Left Axilla",
    RegionId.AxillaR: "Right Axilla",
    RegionId.TrochleaL: "Left Trochlea",
    RegionId.TrochleaR: "Right Trochlea",
    RegionId.Mediastinum: "Mediastinum",
    RegionId.HilumL: "Left Hilum",
    RegionId.HilumR: "Right Hilum",
    RegionId.Spleen: "Spleen",
    RegionId.UpperAbdomen: "Upper Abdomen",
    RegionId.LowerAbdomen: "Lower Abdomen",
    RegionId.ParaIliacL: "Left Para-iliac",
    RegionId.ParaIliacR: "Right Para-iliac",
    RegionId.GroinL: "Left Groin",
    RegionId.GroinR: "Right Groin",
    RegionId.PoplitealL: "Left Popliteal Fossa",
    RegionId.PoplitealR: "Right Popliteal Fossa",
}


def regions_to_mask(regions) -> int:
    m = 0
    for r in regions:
        m |= 1 << REGION_INDEX[RegionId(r)]
    return m


def mask_to_regions(mask: int) -> list[RegionId]:
    return [r for i, r in enumerate(REGIONS) if mask >> i & 1]
