"""Geo-tagged reference index and retrieval evaluation: great-circle
distances, Web-Mercator ground resolution, per-query M-windows, exact top-K
cosine retrieval, R@K / L@threshold metrics, and two-branch score fusion.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, ParameterError, ShapeError

EARTH_RADIUS_M = 6_371_000.0
MERCATOR_LAT_BOUND = 85.051129
WEB_MERCATOR_EQUATOR_RES = 156543.03392  # meters/pixel at zoom 0, 256px tiles

INDEX_MAGIC = b"TXLI"
INDEX_VERSION = 1


@dataclass
class GeoTile:
    id: str
    modality: str  # "osm" | "satellite"
    lat: float
    lon: float
    zoom: int = 20
    pixels: np.ndarray | None = None  # (S, S, 3) uint8
    poi_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if abs(self.lat) > MERCATOR_LAT_BOUND:
            raise ParameterError(f"latitude {self.lat} outside Mercator bounds")

    def as_float(self) -> np.ndarray:
        return np.asarray(self.pixels, dtype=np.float64) / 255.0


@dataclass
class ReferenceEntry:
    tile: GeoTile
    embedding: np.ndarray  # unit vector (embed_dim,)


@dataclass
class QueryResult:
    candidate_ids: list[str]
    similarities: list[float]
    candidate_coords: list[tuple[float, float]]
    truth_id: str | None = None
    truth_coords: tuple[float, float] | None = None


def haversine(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between (lat, lon) degree pairs."""
    lat1, lon1, lat2, lon2 = map(np.radians, (a[0], a[1], b[0], b[1]))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return float(2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(h)))


def ground_resolution(lat: float, zoom: int) -> float:
    """Meters of ground per pixel in the 256-pixel-base Web-Mercator scheme."""
    if abs(lat) > MERCATOR_LAT_BOUND:
        raise ParameterError(f"latitude {lat} outside Mercator bounds")
    if zoom < 0:
        raise ParameterError(f"zoom must be >= 0, got {zoom}")
    return WEB_MERCATOR_EQUATOR_RES * np.cos(np.radians(lat)) / (2**zoom)


def neighborhood(refs: list[ReferenceEntry], center: tuple[float, float],
                 M: int) -> list[ReferenceEntry]:
    """The M entries nearest to center by haversine, ties broken by id."""
    if M > len(refs):
        raise ContractError(f"window M={M} exceeds reference count {len(refs)}")
    keyed = sorted(
        refs, key=lambda r: (haversine((r.tile.lat, r.tile.lon), center), r.tile.id)
    )
    return keyed[:M]


def retrieve(query_embedding: np.ndarray, window: list[ReferenceEntry],
             K: int) -> QueryResult:
    """Exact top-K by dot product, descending, deterministic id tie-break."""
    if not window:
        raise ContractError("empty retrieval window")
    if K > len(window):
        raise ContractError(f"K={K} exceeds window size {len(window)}")
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    sims = np.array([float(q @ r.embedding) for r in window])
    order = sorted(range(len(window)), key=lambda i: (-sims[i], window[i].tile.id))
    top = order[:K]
    return QueryResult(
        candidate_ids=[window[i].tile.id for i in top],
        similarities=[float(sims[i]) for i in top],
        candidate_coords=[(window[i].tile.lat, window[i].tile.lon) for i in top],
    )


def recall_at_k(results: list[QueryResult], K: int) -> float:
    """Fraction of queries whose ground-truth id appears in the top K."""
    if any(r.truth_id is None for r in results):
        raise ContractError("every result needs a ground-truth id")
    if any(len(r.candidate_ids) < K for r in results):
        raise ContractError(f"K={K} exceeds a result's candidate list")
    hits = sum(1 for r in results if r.truth_id in r.candidate_ids[:K])
    return hits / len(results)


def localization_recall(results: list[QueryResult], threshold: float) -> float:
    """Fraction of queries whose top-1 candidate lies within threshold meters
    of the true location."""
    hits = 0
    for r in results:
        if r.truth_coords is None or not r.candidate_coords:
            raise ContractError("results need candidate and truth coordinates")
        if haversine(r.candidate_coords[0], r.truth_coords) < threshold:
            hits += 1
    return hits / len(results)


def fuse_scores(s_image: np.ndarray, s_text: np.ndarray, w: float) -> np.ndarray:
    """Per-query (row-wise) min-max normalize both matrices, then blend:
    (1-w) * image + w * text."""
    s_image = np.asarray(s_image, dtype=np.float64)
    s_text = np.asarray(s_text, dtype=np.float64)
    if s_image.shape != s_text.shape:
        raise ShapeError(f"shape mismatch {s_image.shape} vs {s_text.shape}")
    if not 0.0 <= w <= 1.0:
        raise ParameterError(f"fusion weight must be in [0, 1], got {w}")

    def row_norm(m):
        lo = m.min(axis=1, keepdims=True)
        hi = m.max(axis=1, keepdims=True)
        span = hi - lo
        out = np.zeros_like(m)
        np.divide(m - lo, span, out=out, where=span > 0)
        return out

    return (1.0 - w) * row_norm(s_image) + w * row_norm(s_text)


# ----------------------------------------------------------------------------
# index construction and persistence
# ----------------------------------------------------------------------------


def build_index(tiles: list[GeoTile], dual, batch_size: int = 64) -> list[ReferenceEntry]:
    """Embed every tile with the image encoder; entries keep tile metadata."""
    entries = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start:start + batch_size]
        rasters = np.stack([t.as_float() for t in chunk])
        emb, _ = dual.encode_image(rasters)
        for t, e in zip(chunk, emb.data):
            entries.append(ReferenceEntry(tile=t, embedding=e.copy()))
    return entries


def save_index(entries: list[ReferenceEntry], modality: str, path):
    """Binary index file; written to a temp file and swapped in atomically."""
    embed_dim = entries[0].embedding.shape[0] if entries else 0
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<I", INDEX_VERSION))
    mb = modality.encode()
    buf.write(struct.pack("<H", len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<II", embed_dim, len(entries)))
    for e in entries:
        ib = e.tile.id.encode()
        buf.write(struct.pack("<H", len(ib)))
        buf.write(ib)
        buf.write(struct.pack("<ddI", e.tile.lat, e.tile.lon, e.tile.zoom))
        buf.write(np.asarray(e.embedding, dtype=np.float32).tobytes())
        tags = json.dumps(e.tile.poi_tags).encode()
        buf.write(struct.pack("<I", len(tags)))
        buf.write(tags)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_index(path) -> tuple[str, list[ReferenceEntry]]:
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    if buf.read(4) != INDEX_MAGIC:
        raise ContractError(f"not an index file: {path}")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != INDEX_VERSION:
        raise ContractError(f"unsupported index version {version}")
    (mlen,) = struct.unpack("<H", buf.read(2))
    modality = buf.read(mlen).decode()
    embed_dim, count = struct.unpack("<II", buf.read(8))
    entries = []
    for _ in range(count):
        (ilen,) = struct.unpack("<H", buf.read(2))
        tid = buf.read(ilen).decode()
        lat, lon, zoom = struct.unpack("<ddI", buf.read(20))
        emb = np.frombuffer(buf.read(4 * embed_dim), dtype=np.float32)
        (tlen,) = struct.unpack("<I", buf.read(4))
        tags = json.loads(buf.read(tlen).decode())
        tile = GeoTile(id=tid, modality=modality, lat=lat, lon=lon,
                       zoom=int(zoom), poi_tags=tags)
        entries.append(ReferenceEntry(tile=tile, embedding=np.asarray(emb, np.float64)))
    return modality, entries


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


def evaluate(test_records, refs: list[ReferenceEntry], dual, vocab, modality: str,
             M: int = 100, Ks=(1, 5, 10), thresholds=(50.0,),
             center_noise_m: float = 0.0, noise_seed: int = 0,
             batch_size: int = 64) -> dict:
    """R@K and L@threshold over every test query with its M-window centered
    on the true location (optionally jittered)."""
    from .encoders import tokenize

    if not test_records:
        raise ContractError("no test records to evaluate")
    rng = np.random.default_rng(noise_seed)
    kmax = max(max(Ks), 1)
    results = []
    embs = []
    for start in range(0, len(test_records), batch_size):
        chunk = test_records[start:start + batch_size]
        seqs = [tokenize(r.text, vocab, dual.config) for r in chunk]
        e, _ = dual.encode_text(seqs)
        embs.append(e.data)
    embs = np.concatenate(embs, axis=0)
    for rec, q in zip(test_records, embs):
        center = (rec.lat, rec.lon)
        if center_noise_m > 0:
            dy, dx = rng.normal(0, center_noise_m, 2)
            center = (
                rec.lat + dy / 111_195.0,
                rec.lon + dx / (111_195.0 * np.cos(np.radians(rec.lat))),
            )
        window = neighborhood(refs, center, min(M, len(refs)))
        res = retrieve(q, window, min(kmax, len(window)))
        res.truth_id = rec.tile_id(modality)
        res.truth_coords = (rec.lat, rec.lon)
        results.append(res)
    metrics = {
        "modality": modality,
        "M": M,
        "queries": len(results),
        "recall": {f"R@{k}": recall_at_k(results, k) for k in Ks},
        "localization": {
            f"L@{int(t)}": localization_recall(results, t) for t in thresholds
        },
    }
    return metrics


def metrics_to_text(metrics: dict) -> str:
    """Aligned-column report mirroring the usual R@K / L@t table layout."""
    cols = list(metrics["recall"]) + list(metrics["localization"])
    vals = list(metrics["recall"].values()) + list(metrics["localization"].values())
    head = f"{'modality':<12}" + "".join(f"{c:>8}" for c in cols)
    row = f"{metrics['modality']:<12}" + "".join(f"{v:>8.4f}" for v in vals)
    return head + "\n" + row + "\n"
