"""Explainability walkthrough: capture attention traces for one
(query, candidate) pair, roll them up into token and patch relevance,
bucket the token scores by word category, and show the confidence-based
re-ranking rule on a worked top-5 list.

    python3 demos/02_relevance_and_reranking.py
"""

import numpy as np

from textloc.corpus import generate_corpus
from textloc.encoders import DualEncoder, EncoderConfig, Vocabulary, tokenize
from textloc.explain import Candidate, MockExplainer, ExplainRequest, RankedCandidates, confidence_rerank
from textloc.relevance import (
    CategoryLexicon,
    capture_traces,
    categorize_attention,
    image_relevance,
    text_relevance,
)

records = generate_corpus(seed=33, size=12)
rec = records[0]
vocab = Vocabulary.build([r.text for r in records])
config = EncoderConfig(vocab_size=len(vocab), d_model=32, n_heads=4,
                       n_layers=2, embed_dim=32, base_context=77, context=160)
dual = DualEncoder(config, seed=0)
dual.expand_text_context()

seq = tokenize(rec.text, vocab, config)
sim, t_trace, v_trace = capture_traces(dual, seq, rec.osm_tile.as_float())
print(f"query: {rec.text[:70]}...")
print(f"similarity to its own tile: {sim:.4f}")

t_rel = text_relevance(t_trace, seq)
words = [vocab.tokens[t] for t in seq.ids if t >= 4]
top = sorted(zip(words, t_rel.token_scores), key=lambda p: -p[1])[:6]
print("most relevant tokens:", ", ".join(f"{w} ({s:.3f})" for w, s in top))

v_rel = image_relevance(v_trace, config.patch_grid, config.image_size)
peak = np.unravel_index(np.argmax(v_rel.heatmap), v_rel.heatmap.shape)
print(f"heatmap peak at pixel {peak} of {v_rel.heatmap.shape}")

report = categorize_attention(t_rel.token_scores, words, CategoryLexicon())
for cat, score in sorted(report["categories"].items(), key=lambda kv: -kv[1]):
    print(f"  {cat:<12} {score:.3f}")

# the mock explainer scores token overlap against the candidate's tags
resp = MockExplainer().explain(ExplainRequest(
    query_text=rec.text, top_tokens=[(w, float(s)) for w, s in top],
    candidate_id=rec.tile_id("osm"), poi_tags=rec.poi_tags,
))
print(f"rationale: {resp.rationale}")
print(f"confidence: {resp.confidence:.2f}")

# worked re-ranking example: a low-confidence top-1 triggers the rule and
# the high-confidence runner-up takes its place
ranked = confidence_rerank(RankedCandidates(entries=[
    Candidate(id=f"c{i}", similarity=s, confidence=c)
    for i, (s, c) in enumerate(zip([0.9, 0.8, 0.7, 0.6, 0.5],
                                   [0.1, 0.95, 0.2, 0.3, 0.1]))
]))
print("re-ranked order:", [c.id for c in ranked.entries])
