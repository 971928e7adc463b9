"""Deterministic synthetic corpus: paired (scene description, OSM-style tile,
satellite-style tile) records on a city grid.

The OSM raster carries name-keyed glyph blocks (one per POI) aligned to the
encoder's patch grid, so tile identity is recoverable from pixels; the
satellite raster shows only road layout, environment tint, and category
blobs under noise. That asymmetry is the whole point: store names live in
the map data, not in the imagery.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import ContractError, ParameterError
from .encoders import tokenize_words
from .geoindex import GeoTile

TILE_SOURCE_SIZE = 512
DIRECTIONS = ["front", "back", "left", "right"]

NAME_BANK = [
    "burger mania", "golden dragon", "blue harbor", "silver fox", "maple leaf",
    "iron anchor", "sunny side", "velvet room", "copper kettle", "lucky star",
    "green garden", "red lantern", "white whale", "night owl", "royal crown",
    "happy panda", "ocean breeze", "stone bridge", "wild rose", "amber light",
    "crystal palace", "honey bee", "rapid river", "quiet corner", "grand union",
    "little italy", "sweet tooth", "urban nest", "paper moon", "swift wind",
    "daily grind", "marble arch", "cedar house", "salt flats", "neon tiger",
    "olive branch", "hidden gem", "corner pocket", "misty peak", "early bird",
]

CATEGORY_BANK = [
    "cafe", "store", "bank", "hotel", "school", "pharmacy", "bakery", "diner",
]

COLOR_BANK = ["red", "blue", "green", "yellow", "gray", "brown", "white", "black"]
MATERIAL_BANK = ["brick", "glass", "wood", "concrete", "steel", "stucco"]
DENSITY_BANK = ["dense", "open", "quiet", "busy"]
WEATHER_BANK = ["sunny", "cloudy", "rainy", "foggy"]

DISTRACTOR_BANK = [
    "the weather has been mild for most of the week around here",
    "a few pedestrians pass by without paying much attention to anything",
    "somewhere in the distance a siren fades in and out of hearing",
    "the pavement shows the usual wear of a well used city block",
    "nothing about the traffic pattern seems unusual at this hour",
    "overhead wires crisscross the street like in many other districts",
    "a light breeze moves some litter along the edge of the curb",
    "the general noise level is typical for a neighborhood of this size",
]

# muted rgb used for satellite category blobs and environment tints
CATEGORY_COLORS = {
    "cafe": (0.75, 0.45, 0.25), "store": (0.35, 0.55, 0.80),
    "bank": (0.55, 0.55, 0.35), "hotel": (0.60, 0.35, 0.60),
    "school": (0.80, 0.70, 0.30), "pharmacy": (0.35, 0.70, 0.45),
    "bakery": (0.80, 0.55, 0.50), "diner": (0.45, 0.40, 0.70),
}

ENV_COLORS = {
    "red": (0.62, 0.40, 0.36), "blue": (0.40, 0.48, 0.62),
    "green": (0.44, 0.56, 0.42), "yellow": (0.66, 0.62, 0.40),
    "gray": (0.52, 0.52, 0.52), "brown": (0.54, 0.46, 0.38),
    "white": (0.72, 0.72, 0.70), "black": (0.30, 0.30, 0.32),
}

# patch-aligned glyph slots (row, col) on the 8x8 patch grid; two per direction
GLYPH_SLOTS = {
    "front": [(1, 3), (1, 4)],
    "back": [(6, 3), (6, 4)],
    "left": [(3, 1), (4, 1)],
    "right": [(3, 6), (4, 6)],
}


@dataclass
class GridConfig:
    rows: int = 40
    cols: int = 40
    spacing_m: float = 100.0
    lat0: float = 40.700
    lon0: float = -74.020


@dataclass
class Poi:
    name: str
    category: str
    direction: str
    color: str
    material: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ParameterError(f"unknown direction {self.direction!r}")


@dataclass
class SceneSpec:
    seed: int
    row: int
    col: int
    lat: float
    lon: float
    road_orientation: str  # "north-south" | "east-west"
    road_lanes: int
    road_crossing: bool
    pois: list[Poi]
    view: str  # "pano" | "single"
    env_color: str
    env_material: str
    env_density: str
    env_weather: str

    def __post_init__(self):
        names = [p.name for p in self.pois]
        if len(set(names)) != len(names):
            raise ContractError("POI names must be unique within a scene")


@dataclass
class SceneRecord:
    id: str
    spec: SceneSpec
    text: str
    osm_tile: GeoTile
    sat_tile: GeoTile

    @property
    def lat(self):
        return self.spec.lat

    @property
    def lon(self):
        return self.spec.lon

    @property
    def view(self):
        return self.spec.view

    @property
    def poi_tags(self) -> list[str]:
        tags = []
        for p in self.spec.pois:
            tags.extend(tokenize_words(p.name))
            tags.append(p.category)
        return sorted(set(tags))

    def tile_id(self, modality: str) -> str:
        return f"{self.id}_{'osm' if modality == 'osm' else 'sat'}"

    def tile(self, modality: str) -> np.ndarray:
        t = self.osm_tile if modality == "osm" else self.sat_tile
        return t.as_float()


def cell_coords(row: int, col: int, grid: GridConfig) -> tuple[float, float]:
    dlat = grid.spacing_m / 111_195.0
    dlon = grid.spacing_m / (111_195.0 * np.cos(np.radians(grid.lat0)))
    return grid.lat0 + row * dlat, grid.lon0 + col * dlon


def name_color(name: str) -> tuple[float, float, float]:
    """Stable, saturated rgb keyed by POI name; bank names get well-spread
    golden-ratio hues, others fall back to a hash hue."""
    if name in NAME_BANK:
        hue = (NAME_BANK.index(name) * 0.618033988749895) % 1.0
    else:
        digest = hashlib.md5(name.encode()).digest()
        hue = int.from_bytes(digest[:2], "big") / 65536.0
    return colorsys.hsv_to_rgb(hue, 0.9, 0.95)


def generate_scene(seed: int, grid: GridConfig | None = None) -> SceneSpec:
    """SceneSpec fully determined by the seed (and grid geometry)."""
    grid = grid or GridConfig()
    rng = np.random.default_rng(seed)
    row = int(rng.integers(grid.rows))
    col = int(rng.integers(grid.cols))
    lat, lon = cell_coords(row, col, grid)
    view = "pano" if rng.random() < 0.5 else "single"
    n_pois = int(rng.integers(2, 5)) if view == "pano" else int(rng.integers(1, 3))
    names = [NAME_BANK[i] for i in rng.choice(len(NAME_BANK), n_pois, replace=False)]
    if view == "pano":
        dirs = [DIRECTIONS[i] for i in rng.choice(4, n_pois, replace=False)]
    else:
        facing = DIRECTIONS[int(rng.integers(4))]
        dirs = [facing] * n_pois
    pois = [
        Poi(
            name=names[i],
            category=CATEGORY_BANK[int(rng.integers(len(CATEGORY_BANK)))],
            direction=dirs[i],
            color=COLOR_BANK[int(rng.integers(len(COLOR_BANK)))],
            material=MATERIAL_BANK[int(rng.integers(len(MATERIAL_BANK)))],
        )
        for i in range(n_pois)
    ]
    return SceneSpec(
        seed=seed, row=row, col=col, lat=lat, lon=lon,
        road_orientation="north-south" if rng.random() < 0.5 else "east-west",
        road_lanes=int(rng.integers(1, 4)),
        road_crossing=bool(rng.random() < 0.4),
        pois=pois, view=view,
        env_color=COLOR_BANK[int(rng.integers(len(COLOR_BANK)))],
        env_material=MATERIAL_BANK[int(rng.integers(len(MATERIAL_BANK)))],
        env_density=DENSITY_BANK[int(rng.integers(len(DENSITY_BANK)))],
        env_weather=WEATHER_BANK[int(rng.integers(len(WEATHER_BANK)))],
    )


def _downsample(canvas: np.ndarray, out_size: int) -> np.ndarray:
    s = canvas.shape[0] // out_size
    pooled = canvas.reshape(out_size, s, out_size, s, 3).mean(axis=(1, 3))
    return np.clip(np.round(pooled * 255), 0, 255).astype(np.uint8)


def render_tile(spec: SceneSpec, modality: str, out_size: int = 64,
                noise_seed: int | None = None, scene_id: str | None = None) -> GeoTile:
    """Deterministic 512x512 raster downsampled to the encoder input size."""
    if modality not in ("osm", "satellite"):
        raise ParameterError(f"unknown modality {modality!r}")
    S = TILE_SOURCE_SIZE
    cell = S // 8  # one encoder patch in source pixels
    canvas = np.zeros((S, S, 3))
    env = np.array(ENV_COLORS[spec.env_color])
    if modality == "osm":
        canvas[:] = np.array([0.93, 0.91, 0.86]) * 0.85 + env * 0.15
        road_color = np.array([0.55, 0.55, 0.58])
    else:
        canvas[:] = env * 0.75 + 0.1
        road_color = np.array([0.34, 0.33, 0.33])
    width = 28 + 20 * spec.road_lanes
    lo, hi = S // 2 - width // 2, S // 2 + width // 2
    if spec.road_orientation == "north-south":
        canvas[:, lo:hi] = road_color
    else:
        canvas[lo:hi, :] = road_color
    if spec.road_crossing:
        if spec.road_orientation == "north-south":
            canvas[S // 2 - 24 : S // 2 + 24, :] = road_color * 0.9
        else:
            canvas[:, S // 2 - 24 : S // 2 + 24] = road_color * 0.9
    slot_use: dict[str, int] = {}
    for poi in spec.pois:
        k = slot_use.get(poi.direction, 0)
        slot_use[poi.direction] = k + 1
        r, c = GLYPH_SLOTS[poi.direction][min(k, 1)]
        y, x = r * cell, c * cell
        if modality == "osm":
            canvas[y : y + cell, x : x + cell] = name_color(poi.name)
        else:
            canvas[y : y + cell, x : x + cell] = CATEGORY_COLORS[poi.category]
    if modality == "satellite":
        rng = np.random.default_rng(spec.seed if noise_seed is None else noise_seed)
        canvas = canvas + rng.normal(0.0, 0.06, canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0)
    suffix = "osm" if modality == "osm" else "sat"
    tile_id = f"{scene_id or f'scene{spec.seed}'}_{suffix}"
    return GeoTile(
        id=tile_id, modality=modality, lat=spec.lat, lon=spec.lon, zoom=20,
        pixels=_downsample(canvas, out_size),
        poi_tags=sorted(
            {w for p in spec.pois for w in tokenize_words(p.name)}
            | {p.category for p in spec.pois}
        ),
    )


def describe_scene(spec: SceneSpec, pad_tokens: int = 0) -> str:
    """Three-stage templated description: roads, then signage, then the
    overall environment. Panoramic texts sweep all four directions and come
    out longer than single-view ones."""
    rng = np.random.default_rng(spec.seed + 1)
    road_variants = [
        f"you are standing on a {spec.road_orientation} road with "
        f"{spec.road_lanes} lanes",
        f"the street here runs {spec.road_orientation} and carries "
        f"{spec.road_lanes} lanes of traffic",
    ]
    sentences = [road_variants[int(rng.integers(2))]
                 + (" near a crossing" if spec.road_crossing else "")]
    if pad_tokens > 0:
        total = 0
        i = int(rng.integers(len(DISTRACTOR_BANK)))
        while total < pad_tokens:
            s = DISTRACTOR_BANK[i % len(DISTRACTOR_BANK)]
            sentences.append(s)
            total += len(s.split())
            i += 1
    by_dir: dict[str, list[Poi]] = {}
    for p in spec.pois:
        by_dir.setdefault(p.direction, []).append(p)

    def poi_phrase(p: Poi) -> str:
        forms = [
            f"a {p.category} named {p.name} with a {p.color} {p.material} front",
            f"the {p.name} {p.category} behind a {p.color} {p.material} facade",
        ]
        return forms[int(rng.integers(2))]

    if spec.view == "pano":
        sentences.append("looking around in every direction")
        for d in DIRECTIONS:
            if d in by_dir:
                listed = " and ".join(poi_phrase(p) for p in by_dir[d])
                sentences.append(f"to the {d} there is {listed}")
            else:
                sentences.append(f"to the {d} nothing in particular stands out")
    else:
        facing = spec.pois[0].direction if spec.pois else "front"
        listed = " and ".join(poi_phrase(p) for p in spec.pois)
        if listed:
            sentences.append(f"facing {facing} you can see {listed}")
    env_variants = [
        f"the surrounding area looks mostly {spec.env_color} with "
        f"{spec.env_material} buildings in a {spec.env_density} layout",
        f"overall the {spec.env_density} neighborhood shows {spec.env_color} "
        f"tones and a lot of {spec.env_material}",
    ]
    sentences.append(env_variants[int(rng.integers(2))])
    sentences.append(f"the weather is {spec.env_weather}")
    return ". ".join(sentences) + "."


def generate_corpus(seed: int, size: int, grid: GridConfig | None = None,
                    out_size: int = 64, pad_tokens: int = 0) -> list[SceneRecord]:
    """Corpus of scenes on distinct grid cells; pure function of its args."""
    grid = grid or GridConfig()
    n_cells = grid.rows * grid.cols
    if size > n_cells:
        raise ParameterError(f"corpus size {size} exceeds grid cells {n_cells}")
    rng = np.random.default_rng(seed)
    cells = rng.choice(n_cells, size, replace=False)
    records = []
    for i, cell in enumerate(cells):
        spec = generate_scene(seed * 1_000_003 + i, grid)
        spec.row, spec.col = int(cell) // grid.cols, int(cell) % grid.cols
        spec.lat, spec.lon = cell_coords(spec.row, spec.col, grid)
        scene_id = f"s{seed}_{i:04d}"
        records.append(
            SceneRecord(
                id=scene_id,
                spec=spec,
                text=describe_scene(spec, pad_tokens=pad_tokens),
                osm_tile=render_tile(spec, "osm", out_size, scene_id=scene_id),
                sat_tile=render_tile(spec, "satellite", out_size, scene_id=scene_id),
            )
        )
    return records


# ----------------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------------


@dataclass
class TextStatsReport:
    mean_length: float
    ttr: float
    mean_pairwise_similarity: float
    length_histogram: dict[str, int]


def text_stats(texts: list[str], hist_bin: int = 10) -> TextStatsReport:
    """Mean token length, averaged type-token ratio, mean pairwise token-set
    Jaccard similarity, and a binned length histogram."""
    if len(texts) < 2:
        raise ContractError("need at least 2 texts for pairwise similarity")
    token_lists = [tokenize_words(t) for t in texts]
    lengths = [len(toks) for toks in token_lists]
    ttrs = [len(set(toks)) / len(toks) for toks in token_lists if toks]
    sets = [set(toks) for toks in token_lists]
    sims = []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            union = sets[i] | sets[j]
            sims.append(len(sets[i] & sets[j]) / len(union) if union else 0.0)
    hist: dict[str, int] = {}
    for n in lengths:
        lo = (n // hist_bin) * hist_bin
        key = f"{lo}-{lo + hist_bin - 1}"
        hist[key] = hist.get(key, 0) + 1
    return TextStatsReport(
        mean_length=float(np.mean(lengths)),
        ttr=float(np.mean(ttrs)),
        mean_pairwise_similarity=float(np.mean(sims)),
        length_histogram=dict(sorted(hist.items(), key=lambda kv: int(kv[0].split("-")[0]))),
    )


def split(records: list, ratio: tuple[int, int] = (5, 1), seed: int = 0):
    """Seeded shuffle then partition into (train, test); default 5:1."""
    a, b = ratio
    if len(records) < a + b:
        raise ContractError(
            f"corpus of {len(records)} smaller than ratio sum {a + b}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_test = len(records) * b // (a + b)
    test_idx = set(order[:n_test].tolist())
    train = [records[i] for i in range(len(records)) if i not in test_idx]
    test = [records[i] for i in range(len(records)) if i in test_idx]
    return train, test


# ----------------------------------------------------------------------------
# persistence: JSONL + portable pixmaps
# ----------------------------------------------------------------------------


def ppm_bytes(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ContractError(f"not a binary ppm: {path}")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8)[: h * w * 3].reshape(h, w, 3)


def write_corpus(records: list[SceneRecord], out_dir):
    os.makedirs(os.path.join(out_dir, "tiles"), exist_ok=True)
    with open(os.path.join(out_dir, "corpus.jsonl"), "w", encoding="utf-8") as f:
        for rec in records:
            for tile, suffix in ((rec.osm_tile, "osm"), (rec.sat_tile, "sat")):
                with open(
                    os.path.join(out_dir, "tiles", f"{rec.id}_{suffix}.ppm"), "wb"
                ) as tf:
                    tf.write(ppm_bytes(tile.pixels))
            row = {
                "id": rec.id,
                "lat": rec.lat,
                "lon": rec.lon,
                "view": rec.view,
                "text": rec.text,
                "osm_tile": f"tiles/{rec.id}_osm.ppm",
                "sat_tile": f"tiles/{rec.id}_sat.ppm",
                "poi_tags": rec.poi_tags,
                "spec": _spec_to_json(rec.spec),
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _spec_to_json(spec: SceneSpec) -> dict:
    d = asdict(spec)
    return d


def load_corpus(out_dir) -> list[SceneRecord]:
    records = []
    with open(os.path.join(out_dir, "corpus.jsonl"), encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            sd = row["spec"]
            spec = SceneSpec(**{**sd, "pois": [Poi(**p) for p in sd["pois"]]})
            osm = GeoTile(
                id=f"{row['id']}_osm", modality="osm", lat=row["lat"],
                lon=row["lon"], zoom=20,
                pixels=read_ppm(os.path.join(out_dir, row["osm_tile"])),
                poi_tags=row["poi_tags"],
            )
            sat = GeoTile(
                id=f"{row['id']}_sat", modality="satellite", lat=row["lat"],
                lon=row["lon"], zoom=20,
                pixels=read_ppm(os.path.join(out_dir, row["sat_tile"])),
                poi_tags=row["poi_tags"],
            )
            records.append(SceneRecord(id=row["id"], spec=spec, text=row["text"],
                                       osm_tile=osm, sat_tile=sat))
    return records
