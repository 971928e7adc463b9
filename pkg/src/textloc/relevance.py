"""Gradient-weighted attention rollout: per-layer accumulation of clamped
gradient x attention products from an identity matrix, giving per-token and
per-patch relevance for one (query, candidate) pair. Also the word-category
scoring used to summarize what the text encoder attends to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, ParameterError, Tape, mul, sum_
from .encoders import BOS, EOS, PAD, DualEncoder, TokenSequence


@dataclass
class AttentionTrace:
    """Attention probabilities and their gradients w.r.t. one similarity
    score, per layer: arrays of shape (H, T, T)."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    token_count: int
    modality: str  # "text" | "image"

    def __post_init__(self):
        for A, gA in self.layers:
            if A.shape != gA.shape:
                raise ContractError("attention and gradient shapes differ")


@dataclass
class RelevanceResult:
    R: np.ndarray
    token_scores: np.ndarray
    heatmap: np.ndarray | None = None


def capture_traces(dual: DualEncoder, seq: TokenSequence, tile: np.ndarray):
    """Forward both encoders with attention retention, backprop from the
    candidate's similarity score, and return (sim, text trace, image trace)."""
    with Tape() as tape:
        t_emb, t_attns = dual.encode_text([seq], retain_attention=True)
        v_emb, v_attns = dual.encode_image(tile, retain_attention=True)
        sim = sum_(mul(t_emb, v_emb))
        tape.backward(sim)
    if any(not a.retain_grad for a in t_attns + v_attns):
        raise ContractError("attention-gradient retention was not enabled")

    def grad_of(a):
        return a.grad[0].copy() if a.grad is not None else np.zeros_like(a.data[0])

    text_trace = AttentionTrace(
        layers=[(a.data[0].copy(), grad_of(a)) for a in t_attns],
        token_count=t_attns[0].data.shape[-1],
        modality="text",
    )
    image_trace = AttentionTrace(
        layers=[(a.data[0].copy(), grad_of(a)) for a in v_attns],
        token_count=v_attns[0].data.shape[-1],
        modality="image",
    )
    return sim.item(), text_trace, image_trace


def relevance_rollout(trace: AttentionTrace, start_layer: int = 1) -> np.ndarray:
    """R starts at identity; each layer l >= start_layer (1-based) adds the
    clamped head-averaged gradient x attention product applied to R."""
    T = trace.token_count
    R = np.eye(T)
    n_layers = len(trace.layers)
    if start_layer < 1:
        raise ParameterError(f"start layer must be >= 1, got {start_layer}")
    for l in range(start_layer - 1, n_layers):
        A, gA = trace.layers[l]
        if A.shape[-1] != T:
            raise ContractError("trace layers disagree on token count")
        abar = np.maximum(0.0, gA * A).mean(axis=0)
        R = R + abar @ R
    return R


def bilinear_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel center alignment."""
    in_h, in_w = m.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = m[np.ix_(y0, x0)] * (1 - fx) + m[np.ix_(y0, x1)] * fx
    bot = m[np.ix_(y1, x0)] * (1 - fx) + m[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def min_max_normalize(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def extract_scores(R: np.ndarray, pooling_index: int, modality: str,
                   patch_grid: int | None = None, tile_size: int | None = None,
                   keep_positions=None) -> RelevanceResult:
    """Read the pooled token's relevance row and strip non-content slots.

    Text: keep_positions selects the real word tokens. Image: drop the class
    slot, reshape to the patch grid, upsample to tile resolution, min-max
    normalize to [0, 1] (constant maps become all zeros).
    """
    T = R.shape[0]
    if not 0 <= pooling_index < T:
        raise ContractError(f"pooling index {pooling_index} out of range 0..{T - 1}")
    row = R[pooling_index].copy()
    if modality == "text":
        if keep_positions is None:
            raise ContractError("text extraction needs the real-token positions")
        return RelevanceResult(R=R, token_scores=row[np.asarray(keep_positions)])
    if modality == "image":
        if patch_grid is None:
            raise ContractError("image extraction needs the patch grid size")
        patches = row[1:]  # class slot is index 0
        grid = patches.reshape(patch_grid, patch_grid)
        size = tile_size or patch_grid
        heat = min_max_normalize(bilinear_resize(grid, size, size))
        return RelevanceResult(R=R, token_scores=patches, heatmap=heat)
    raise ParameterError(f"unknown modality {modality!r}")


def text_relevance(trace: AttentionTrace, seq: TokenSequence,
                   start_layer: int = 1) -> RelevanceResult:
    """Rollout plus extraction for a text trace of one padded sequence."""
    R = relevance_rollout(trace, start_layer)
    eos = seq.ids.index(EOS)
    keep = [i for i, t in enumerate(seq.ids) if t not in (BOS, EOS, PAD)]
    keep = [i for i in keep if i < trace.token_count]
    return extract_scores(R, eos, "text", keep_positions=keep)


def image_relevance(trace: AttentionTrace, patch_grid: int,
                    tile_size: int, start_layer: int = 1) -> RelevanceResult:
    R = relevance_rollout(trace, start_layer)
    return extract_scores(R, 0, "image", patch_grid=patch_grid, tile_size=tile_size)


# ----------------------------------------------------------------------------
# attention-category scoring
# ----------------------------------------------------------------------------

DEFAULT_CATEGORIES = {
    "LandMarker": ["plaza", "park", "monument", "tower", "bridge", "station"],
    "SignName": [],  # populated from the corpus word bank at load time
    "Road": ["road", "street", "avenue", "lane", "lanes", "crossing", "intersection"],
    "Building": ["building", "buildings", "shop", "store", "cafe", "hotel",
                 "school", "bank", "pharmacy", "facade", "front"],
    "Vegetation": ["tree", "trees", "grass", "hedge", "planters", "greenery"],
    "Vehicle": ["car", "cars", "bus", "truck", "bikes", "traffic"],
    "Sky": ["sky", "skyline", "horizon"],
    "Weather": ["sunny", "cloudy", "rainy", "foggy", "mild", "weather"],
}


@dataclass
class CategoryLexicon:
    categories: dict[str, list[str]] = field(
        default_factory=lambda: {k: list(v) for k, v in DEFAULT_CATEGORIES.items()}
    )

    def __post_init__(self):
        seen = {}
        for cat, words in self.categories.items():
            for w in words:
                if w != w.lower():
                    raise ParameterError(f"lexicon words must be lowercase: {w!r}")
                if w in seen:
                    raise ParameterError(
                        f"word {w!r} appears in both {seen[w]} and {cat}"
                    )
                seen[w] = cat

    def lookup(self, word: str) -> str | None:
        for cat, words in self.categories.items():
            if word in words:
                return cat
        return None

    @classmethod
    def load(cls, path) -> "CategoryLexicon":
        with open(path, encoding="utf-8") as f:
            return cls(categories=json.load(f))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.categories, f, indent=2, sort_keys=True)


def categorize_attention(token_scores, tokens, lexicon: CategoryLexicon) -> dict:
    """Mean relevance per lexicon category over the aligned token list.
    Categories with no hits are absent from the result, not zero."""
    if len(token_scores) != len(tokens):
        raise ContractError(
            f"{len(token_scores)} scores vs {len(tokens)} tokens"
        )
    buckets: dict[str, list[float]] = {}
    stray: list[float] = []
    for score, tok in zip(token_scores, tokens):
        cat = lexicon.lookup(tok)
        if cat is None:
            stray.append(float(score))
        else:
            buckets.setdefault(cat, []).append(float(score))
    result = {cat: float(np.mean(v)) for cat, v in buckets.items()}
    return {
        "categories": result,
        "uncategorized": float(np.mean(stray)) if stray else None,
    }


# ----------------------------------------------------------------------------
# export
# ----------------------------------------------------------------------------


def write_pgm(matrix: np.ndarray, path):
    """Write a [0,1] matrix as a binary 8-bit portable graymap."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    data = np.round(m * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def heatmap_to_json(matrix: np.ndarray) -> str:
    return json.dumps(np.asarray(matrix, dtype=float).round(6).tolist())
