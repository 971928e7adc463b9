"""Command-line entry points tying the pipeline together:
gen-corpus, train, build-index, eval, localize, explain, stats, serve.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from .encoders import DualEncoder, EncoderConfig, Vocabulary, tokenize
from .explain import MockExplainer
from .geoindex import build_index, evaluate, load_index, metrics_to_text, save_index
from .relevance import (
    CategoryLexicon,
    capture_traces,
    categorize_attention,
    heatmap_to_json,
    image_relevance,
    text_relevance,
    write_pgm,
)
from .training import TrainConfig, train


def _add_gen_corpus(sub):
    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-rows", type=int, default=40)
    p.add_argument("--grid-cols", type=int, default=40)
    p.add_argument("--spacing-m", type=float, default=100.0)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--pad-tokens", type=int, default=0)


def _add_train(sub):
    p = sub.add_parser("train", help="train a dual encoder on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", choices=["osm", "satellite"], default="osm")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--base-context", type=int, default=77)
    p.add_argument("--context", type=int, default=300)
    p.add_argument("--no-expand", action="store_true",
                   help="keep the base context (truncating model)")
    p.add_argument("--loss-mode", default="symmetric_infonce")
    p.add_argument("--log", default=None, help="training log file (tsv)")


def _add_build_index(sub):
    p = sub.add_parser("build-index", help="embed corpus tiles into an index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--modality", choices=["osm", "satellite"], default="osm")
    p.add_argument("--out", required=True)


def _add_eval(sub):
    p = sub.add_parser("eval", help="R@K / L@threshold over the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--M", type=int, default=100)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--thresholds", default="50")
    p.add_argument("--out", default=None, help="metrics JSON path")


def _add_localize(sub):
    p = sub.add_parser("localize", help="one-shot text query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--M", type=int, default=100)
    p.add_argument("--K", type=int, default=5)


def _add_explain(sub):
    p = sub.add_parser("explain", help="heatmaps + rationale for one candidate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--candidate-id", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lexicon", default=None, help="category lexicon JSON")


def _add_stats(sub):
    p = sub.add_parser("stats", help="corpus text statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--explainer", choices=["mock", "http"], default="mock")
    p.add_argument("--heatmap-dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textloc")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_gen_corpus, _add_train, _add_build_index, _add_eval,
                _add_localize, _add_explain, _add_stats, _add_serve):
        add(sub)
    return parser


def _load_model(args):
    dual = DualEncoder.load(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    return dual, vocab


def cmd_gen_corpus(args) -> int:
    grid = corpus_mod.GridConfig(rows=args.grid_rows, cols=args.grid_cols,
                                 spacing_m=args.spacing_m)
    records = corpus_mod.generate_corpus(args.seed, args.size, grid,
                                         out_size=args.tile_size,
                                         pad_tokens=args.pad_tokens)
    corpus_mod.write_corpus(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    records = corpus_mod.load_corpus(args.corpus)
    train_recs, _ = corpus_mod.split(records, (5, 1), seed=args.split_seed)
    vocab = Vocabulary.build([r.text for r in train_recs])
    config = EncoderConfig(
        vocab_size=len(vocab), d_model=args.d_model, n_heads=args.n_heads,
        n_layers=args.n_layers, base_context=args.base_context,
        context=args.context, image_size=train_recs[0].osm_tile.pixels.shape[0],
        embed_dim=args.embed_dim,
    )
    dual = DualEncoder(config, seed=args.seed)
    if not args.no_expand:
        dual.expand_text_context()
    tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                     base_lr=args.lr, seed=args.seed, loss_mode=args.loss_mode)
    log = open(args.log, "w") if args.log else None
    try:
        history = train(train_recs, dual, vocab, tc, args.modality, log_file=log)
    finally:
        if log:
            log.close()
    dual.save(args.out)
    vocab.save(args.out + ".vocab")
    print(f"final loss {history[-1]['mean_loss']:.4f}; "
          f"checkpoint {args.out}; vocab {args.out}.vocab")
    return 0


def cmd_build_index(args) -> int:
    dual = DualEncoder.load(args.checkpoint)
    records = corpus_mod.load_corpus(args.corpus)
    tiles = [r.osm_tile if args.modality == "osm" else r.sat_tile for r in records]
    entries = build_index(tiles, dual)
    save_index(entries, args.modality, args.out)
    print(f"indexed {len(entries)} {args.modality} tiles -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    dual, vocab = _load_model(args)
    modality, refs = load_index(args.index)
    records = corpus_mod.load_corpus(args.corpus)
    _, test_recs = corpus_mod.split(records, (5, 1), seed=args.split_seed)
    ks = tuple(int(k) for k in args.ks.split(","))
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    metrics = evaluate(test_recs, refs, dual, vocab, modality, M=args.M,
                       Ks=ks, thresholds=thresholds)
    sys.stdout.write(metrics_to_text(metrics))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
    return 0


def cmd_localize(args) -> int:
    from .geoindex import neighborhood, retrieve

    dual, vocab = _load_model(args)
    _, refs = load_index(args.index)
    seq = tokenize(args.text, vocab, dual.config)
    emb, _ = dual.encode_text([seq])
    window = neighborhood(refs, (args.lat, args.lon), min(args.M, len(refs)))
    result = retrieve(emb.data[0], window, min(args.K, len(window)))
    out = {
        "candidates": [
            {"tile_id": cid, "similarity": sim, "lat": c[0], "lon": c[1]}
            for cid, sim, c in zip(result.candidate_ids, result.similarities,
                                   result.candidate_coords)
        ]
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_explain(args) -> int:
    dual, vocab = _load_model(args)
    records = corpus_mod.load_corpus(args.corpus)
    by_tile = {}
    for r in records:
        by_tile[r.tile_id("osm")] = (r, r.osm_tile)
        by_tile[r.tile_id("satellite")] = (r, r.sat_tile)
    if args.candidate_id not in by_tile:
        print(f"unknown candidate {args.candidate_id}", file=sys.stderr)
        return 2
    rec, tile = by_tile[args.candidate_id]
    seq = tokenize(args.text, vocab, dual.config)
    sim, t_trace, v_trace = capture_traces(dual, seq, tile.as_float())
    t_rel = text_relevance(t_trace, seq)
    v_rel = image_relevance(v_trace, dual.config.patch_grid, dual.config.image_size)
    os.makedirs(args.out_dir, exist_ok=True)
    write_pgm(v_rel.heatmap, os.path.join(args.out_dir, "heatmap.pgm"))
    with open(os.path.join(args.out_dir, "heatmap.json"), "w") as f:
        f.write(heatmap_to_json(v_rel.heatmap))
    words = [vocab.tokens[t] for t in seq.ids if t >= 4]
    lexicon = (CategoryLexicon.load(args.lexicon) if args.lexicon
               else CategoryLexicon())
    report = categorize_attention(t_rel.token_scores, words, lexicon)
    pairs = sorted(zip(words, map(float, t_rel.token_scores)), key=lambda p: -p[1])
    mock = MockExplainer()
    from .explain import ExplainRequest

    resp = mock.explain(ExplainRequest(
        query_text=args.text, top_tokens=pairs[:8], candidate_id=args.candidate_id,
        candidate_lat=rec.lat, candidate_lon=rec.lon, poi_tags=rec.poi_tags,
    ))
    with open(os.path.join(args.out_dir, "explain.json"), "w") as f:
        json.dump({"similarity": sim, "rationale": resp.rationale,
                   "confidence": resp.confidence, "categories": report},
                  f, indent=2, sort_keys=True)
    print(f"wrote heatmap and rationale to {args.out_dir}")
    return 0


def cmd_stats(args) -> int:
    records = corpus_mod.load_corpus(args.corpus)
    report = corpus_mod.text_stats([r.text for r in records])
    payload = dataclasses.asdict(report)
    print(json.dumps(payload, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .explain import HttpExplainer
    from .service import LocalizeEngine, create_app

    dual, vocab = _load_model(args)
    modality, refs = load_index(args.index)
    explainer = HttpExplainer() if args.explainer == "http" else MockExplainer()
    engine = LocalizeEngine(
        dual=dual, vocab=vocab, modality=modality, refs=refs,
        tiles_dir=os.path.join(args.corpus, "tiles"),
        heatmap_dir=args.heatmap_dir or os.path.join(args.corpus, "heatmaps"),
        explainer=explainer,
    )
    uvicorn.run(create_app(engine), host=args.host, port=args.port)
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "build-index": cmd_build_index,
    "eval": cmd_eval,
    "localize": cmd_localize,
    "explain": cmd_explain,
    "stats": cmd_stats,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
