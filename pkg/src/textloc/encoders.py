"""Miniature dual encoder: a text transformer and a patch transformer that
project into one shared embedding space, plus linear expansion of a learned
positional table to a longer context.

Sizes are deliberately small (defaults: d_model 128, 4 heads, 4 layers) so a
full contrastive training run finishes in minutes on a CPU.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (
    ContractError,
    ParameterError,
    ShapeError,
    Tensor,
    add,
    concat,
    embedding,
    gather_rows,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    reshape,
    slice_,
    softmax_rows,
    swap_last,
    transpose,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>"]

_WORD_RE = re.compile(r"[a-z0-9']+")

CHECKPOINT_MAGIC = b"TXLC"
CHECKPOINT_VERSION = 1

MAX_LOGIT_SCALE = 100.0
INIT_LOGIT_SCALE = 14.29  # exp(s); tau ~ 0.07


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    base_context: int = 77
    context: int = 300
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ParameterError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.image_size % self.patch_size != 0:
            raise ParameterError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        if not (self.context >= self.base_context >= 2):
            raise ParameterError(
                f"need context >= base_context >= 2, got "
                f"{self.context} / {self.base_context}"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class TokenSequence:
    ids: list[int]
    length: int  # count of real (word) tokens, excluding markers/padding

    def __post_init__(self):
        if self.ids.count(EOS) != 1:
            raise ContractError("token sequence must contain exactly one end marker")


def tokenize_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Corpus-built word vocabulary; line number = id in the on-disk format."""

    def __init__(self, words: list[str]):
        self.tokens = SPECIAL_TOKENS + [w for w in words if w not in SPECIAL_TOKENS]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        seen = {}
        for text in texts:
            for w in tokenize_words(text):
                if w not in seen:
                    seen[w] = None
        return cls(sorted(seen))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        vocab = cls.__new__(cls)
        vocab.tokens = tokens
        vocab.index = {t: i for i, t in enumerate(tokens)}
        return vocab


def tokenize(text: str, vocab: Vocabulary, config: EncoderConfig) -> TokenSequence:
    """Lowercase word tokenization, truncated to fit the model context."""
    words = tokenize_words(text)[: config.context - 2]
    ids = [BOS] + [vocab.index.get(w, UNK) for w in words] + [EOS]
    return TokenSequence(ids=ids, length=len(words))


def expand_positional_embedding(P: np.ndarray, N: int) -> np.ndarray:
    """Stretch a positional table from N0 to N rows by full linear
    interpolation; rows 0 and N-1 reproduce the original endpoints exactly."""
    P = np.asarray(P, dtype=np.float64)
    n0 = P.shape[0]
    if n0 < 2:
        raise ParameterError(f"base table needs at least 2 rows, got {n0}")
    if N < n0:
        raise ParameterError(f"shrinking ({n0} -> {N}) is not supported")
    x = np.arange(N, dtype=np.float64) * (n0 - 1) / (N - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, n0 - 1)
    frac = (x - lo)[:, None]
    return (1.0 - frac) * P[lo] + frac * P[hi]


# At toy scale, weight std 0.02 leaves pooled embeddings nearly identical
# across samples and contrastive training stalls at the uniform-softmax
# saddle. 0.1 keeps enough per-sample signal in the pooled slot to escape.
WEIGHT_INIT_STD = 0.1
POS_INIT_STD = 0.02


def _init_block(rng, d_model, name, params):
    std = WEIGHT_INIT_STD
    d_ff = 4 * d_model
    params[f"{name}.ln1.g"] = Tensor(np.ones(d_model), requires_grad=True)
    params[f"{name}.ln1.b"] = Tensor(np.zeros(d_model), requires_grad=True)
    for p in ("wq", "wk", "wv", "wo"):
        params[f"{name}.attn.{p}"] = Tensor(
            rng.normal(0, std, (d_model, d_model)), requires_grad=True
        )
    params[f"{name}.attn.bo"] = Tensor(np.zeros(d_model), requires_grad=True)
    params[f"{name}.ln2.g"] = Tensor(np.ones(d_model), requires_grad=True)
    params[f"{name}.ln2.b"] = Tensor(np.zeros(d_model), requires_grad=True)
    params[f"{name}.mlp.w1"] = Tensor(
        rng.normal(0, std, (d_model, d_ff)), requires_grad=True
    )
    params[f"{name}.mlp.b1"] = Tensor(np.zeros(d_ff), requires_grad=True)
    params[f"{name}.mlp.w2"] = Tensor(
        rng.normal(0, std, (d_ff, d_model)), requires_grad=True
    )
    params[f"{name}.mlp.b2"] = Tensor(np.zeros(d_model), requires_grad=True)


def _run_blocks(x, params, prefix, config, attn_mask, retain_attention):
    """Pre-norm transformer stack; returns (x, attention tensors per layer)."""
    B, L, d = x.data.shape
    H = config.n_heads
    dh = d // H
    attns = []
    for layer in range(config.n_layers):
        name = f"{prefix}.block{layer}"
        h = layer_norm(x, params[f"{name}.ln1.g"], params[f"{name}.ln1.b"])
        q = matmul(h, params[f"{name}.attn.wq"])
        k = matmul(h, params[f"{name}.attn.wk"])
        v = matmul(h, params[f"{name}.attn.wv"])
        # (B, L, d) -> (B, H, L, dh)
        q = transpose(reshape(q, (B, L, H, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (B, L, H, dh)), (0, 2, 1, 3))
        v = transpose(reshape(v, (B, L, H, dh)), (0, 2, 1, 3))
        scores = matmul(q, swap_last(k)) * (1.0 / np.sqrt(dh))
        if attn_mask is not None:
            scores = add(scores, attn_mask)
        A = softmax_rows(scores)
        if retain_attention:
            A.retain_grad = True
        attns.append(A)
        ctx = matmul(A, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        attn_out = add(matmul(ctx, params[f"{name}.attn.wo"]), params[f"{name}.attn.bo"])
        x = add(x, attn_out)
        h2 = layer_norm(x, params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])
        m = add(matmul(h2, params[f"{name}.mlp.w1"]), params[f"{name}.mlp.b1"])
        m = add(matmul(gelu(m), params[f"{name}.mlp.w2"]), params[f"{name}.mlp.b2"])
        x = add(x, m)
    return x, attns


class TextEncoder:
    """Full-attention (non-causal) transformer pooled at the end marker."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        std = WEIGHT_INIT_STD
        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(
            rng.normal(0, std, (config.vocab_size, config.d_model)), requires_grad=True
        )
        p["pos"] = Tensor(
            rng.normal(0, POS_INIT_STD, (config.base_context, config.d_model)),
            requires_grad=True,
        )
        for layer in range(config.n_layers):
            _init_block(rng, config.d_model, f"text.block{layer}", p)
        p["lnf.g"] = Tensor(np.ones(config.d_model), requires_grad=True)
        p["lnf.b"] = Tensor(np.zeros(config.d_model), requires_grad=True)
        p["proj"] = Tensor(
            rng.normal(0, std, (config.d_model, config.embed_dim)), requires_grad=True
        )
        self.params = p

    @property
    def context_length(self) -> int:
        return self.params["pos"].data.shape[0]

    def expand_positions(self, N: int | None = None):
        """Replace the positional table with its linear interpolation to N
        rows (defaults to the configured expanded context); stays trainable."""
        N = self.config.context if N is None else N
        table = expand_positional_embedding(self.params["pos"].data, N)
        self.params["pos"] = Tensor(table, requires_grad=True)

    def forward(self, seqs: list[TokenSequence], retain_attention: bool = False):
        """Returns (unit embeddings Tensor[B, embed_dim], attention list)."""
        cfg = self.config
        L = max(len(s.ids) for s in seqs)
        if L > self.context_length:
            raise ContractError(
                f"sequence length {L} exceeds context {self.context_length}"
            )
        B = len(seqs)
        ids = np.full((B, L), PAD, dtype=np.int64)
        eos_pos = np.zeros(B, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s.ids)] = s.ids
            eos_pos[i] = s.ids.index(EOS)
        pad_mask = np.where(ids == PAD, -1e9, 0.0)[:, None, None, :]
        x = embedding(self.params["tok_emb"], ids)
        x = add(x, slice_(self.params["pos"], np.s_[:L]))
        x, attns = _run_blocks(x, self.params, "text", cfg, pad_mask, retain_attention)
        x = layer_norm(x, self.params["lnf.g"], self.params["lnf.b"])
        pooled = gather_rows(x, eos_pos)
        emb = l2_normalize(matmul(pooled, self.params["proj"]))
        return emb, attns


class ImageEncoder:
    """Patch transformer with a class slot pooled for the tile embedding."""

    def __init__(self, config: EncoderConfig, seed: int = 1):
        self.config = config
        rng = np.random.default_rng(seed)
        std = WEIGHT_INIT_STD
        p: dict[str, Tensor] = {}
        patch_dim = 3 * config.patch_size**2
        p["patch_w"] = Tensor(
            rng.normal(0, std, (patch_dim, config.d_model)), requires_grad=True
        )
        p["patch_b"] = Tensor(np.zeros(config.d_model), requires_grad=True)
        p["cls"] = Tensor(rng.normal(0, std, (1, config.d_model)), requires_grad=True)
        p["pos"] = Tensor(
            rng.normal(0, POS_INIT_STD, (config.n_patches + 1, config.d_model)),
            requires_grad=True,
        )
        for layer in range(config.n_layers):
            _init_block(rng, config.d_model, f"image.block{layer}", p)
        p["lnf.g"] = Tensor(np.ones(config.d_model), requires_grad=True)
        p["lnf.b"] = Tensor(np.zeros(config.d_model), requires_grad=True)
        p["proj"] = Tensor(
            rng.normal(0, std, (config.d_model, config.embed_dim)), requires_grad=True
        )
        self.params = p

    def patchify(self, tiles: np.ndarray) -> np.ndarray:
        """(B, S, S, 3) in [0,1] -> (B, n_patches, 3*ps*ps) row-major patches."""
        cfg = self.config
        B, H, W, C = tiles.shape
        if H != cfg.image_size or W != cfg.image_size or C != 3:
            raise ShapeError(
                f"expected tiles of shape (B, {cfg.image_size}, {cfg.image_size}, 3), "
                f"got {tiles.shape}"
            )
        ps = cfg.patch_size
        g = cfg.patch_grid
        x = tiles.reshape(B, g, ps, g, ps, C)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(B, g * g, ps * ps * C)
        return x

    def forward(self, tiles: np.ndarray, retain_attention: bool = False):
        """tiles: (B, image_size, image_size, 3) floats in [0,1]."""
        cfg = self.config
        patches = self.patchify(np.asarray(tiles, dtype=np.float64))
        B = patches.shape[0]
        x = add(matmul(Tensor(patches), self.params["patch_w"]), self.params["patch_b"])
        cls = embedding(self.params["cls"], np.zeros((B, 1), dtype=np.int64))
        x = concat([cls, x], axis=1)
        x = add(x, self.params["pos"])
        x, attns = _run_blocks(x, self.params, "image", cfg, None, retain_attention)
        x = layer_norm(x, self.params["lnf.g"], self.params["lnf.b"])
        pooled = slice_(x, np.s_[:, 0, :])
        emb = l2_normalize(matmul(pooled, self.params["proj"]))
        return emb, attns


class DualEncoder:
    """Text and image encoders plus the shared learnable logit scale."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.text = TextEncoder(config, seed=seed)
        self.image = ImageEncoder(config, seed=seed + 1)
        self.logit_scale = Tensor(np.log(INIT_LOGIT_SCALE), requires_grad=True)

    def expand_text_context(self, N: int | None = None):
        """Stretch the text positional table to the expanded context."""
        self.text.expand_positions(N)

    @property
    def temperature(self) -> float:
        return float(1.0 / np.exp(self.logit_scale.data))

    def clamp_logit_scale(self):
        self.logit_scale.data = np.asarray(
            np.minimum(self.logit_scale.data, np.log(MAX_LOGIT_SCALE))
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {f"text.{k}": v for k, v in self.text.params.items()}
        out.update({f"image.{k}": v for k, v in self.image.params.items()})
        out["logit_scale"] = self.logit_scale
        return out

    def encode_text(self, seqs, retain_attention: bool = False):
        single = isinstance(seqs, TokenSequence)
        emb, attns = self.text.forward([seqs] if single else seqs, retain_attention)
        return emb, attns

    def encode_image(self, tiles: np.ndarray, retain_attention: bool = False):
        tiles = np.asarray(tiles, dtype=np.float64)
        if tiles.ndim == 3:
            tiles = tiles[None]
        return self.image.forward(tiles, retain_attention)

    # ------------------------------------------------------------------
    # checkpoint format: magic, version, config JSON, named float32 tensors
    # ------------------------------------------------------------------

    def save(self, path):
        params = self.parameters()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg = json.dumps(asdict(self.config)).encode()
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            t = params[name]
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", t.data.ndim))
            for d in t.data.shape:
                buf.write(struct.pack("<q", d))
            buf.write(np.ascontiguousarray(t.data, dtype=np.float32).tobytes())
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "DualEncoder":
        with open(path, "rb") as f:
            raw = f.read()
        buf = io.BytesIO(raw)
        if buf.read(4) != CHECKPOINT_MAGIC:
            raise ContractError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", buf.read(4))
        config = EncoderConfig(**json.loads(buf.read(clen)))
        (count,) = struct.unpack("<I", buf.read(4))
        model = cls(config)
        params = model.parameters()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf.read(2))
            name = buf.read(nlen).decode()
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = tuple(struct.unpack("<q", buf.read(8))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(buf.read(4 * n), dtype=np.float32).reshape(shape)
            target = params.get(name)
            if target is None:
                raise ContractError(f"unknown tensor {name} in checkpoint")
            target.data = np.asarray(data, dtype=np.float64)
        return model
