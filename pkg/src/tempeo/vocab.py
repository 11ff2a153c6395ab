"""Label vocabularies shared by ingest, prompt generation and scoring."""

DAMAGE_CLASSES = ("No damage", "Minor Damage", "Major Damage", "Destroyed")
DAMAGED = frozenset(DAMAGE_CLASSES[1:])

# upstream disaster type -> name used in prompts and answers
DISASTER_TYPES = {
    "earthquake": "earthquake",
    "fire": "wildfire",
    "flooding": "flood",
    "hurricane": "hurricane",
    "tornado": "tornado",
    "tsunami": "tsunami",
    "volcano": "volcanic eruption",
}

SEVERITY = {
    "No damage": "has no damage",
    "Minor Damage": "has minor damage",
    "Major Damage": "has major damage",
    "Destroyed": "has been destroyed",
}

BUILDING_CHANGES = ("constructed", "demolished")

CHANGE_TYPES = ("Residential", "Commercial", "Industrial", "Road", "Demolition", "Mega Projects")
CHANGE_STATUSES = (
    "Greenland", "Land Cleared", "Excavation", "Materials Dumped", "Construction Started",
    "Construction Midway", "Construction Done", "Operational", "Prior Construction",
)

FMOW_CLASSES = (
    "airport", "airport_hangar", "airport_terminal", "amusement_park", "aquaculture",
    "archaeological_site", "barn", "border_checkpoint", "burial_site", "car_dealership",
    "construction_site", "crop_field", "dam", "debris_or_rubble", "educational_institution",
    "electric_substation", "factory_or_powerplant", "fire_station", "flooded_road", "fountain",
    "gas_station", "golf_course", "ground_transportation_station", "helipad", "hospital",
    "impoverished_settlement", "interchange", "lake_or_pond", "lighthouse", "military_facility",
    "multi-unit_residential", "nuclear_powerplant", "office_building", "oil_or_gas_facility", "park",
    "parking_lot_or_garage", "place_of_worship", "police_station", "port", "prison", "race_track",
    "railway_bridge", "recreational_facility", "road_bridge", "runway", "shipyard", "shopping_mall",
    "single-unit_residential", "smokestack", "solar_farm", "space_facility", "stadium",
    "storage_tank", "surface_mine", "swimming_pool", "toll_booth", "tower", "tunnel_opening",
    "waste_disposal", "water_treatment_facility", "wind_farm", "zoo",
)

GRID_CELLS = (
    "top left", "top center", "top right",
    "center left", "center", "center right",
    "bottom left", "bottom center", "bottom right",
)

SOURCE_KINDS = ("xbd", "s2looking", "qfabric", "fmow_rgb", "fmow_sentinel", "single_image_corpus")

DATASET_NAMES = {
    "xbd": "xBD", "s2looking": "S2Looking", "qfabric": "QFabric", "fmow_rgb": "fMoW RGB",
    "fmow_sentinel": "fMoW Sentinel", "single_image_corpus": "Single image",
}


def fmow_display(name: str) -> str:
    """``lake_or_pond`` -> ``Lake or pond``."""
    text = name.replace("_", " ")
    return text[:1].upper() + text[1:]
