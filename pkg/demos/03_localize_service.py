"""Interactive-loop walkthrough against an in-process HTTP app: localize,
refine with extra text, then force a confidence re-rank.

    python3 demos/03_localize_service.py
"""

from fastapi.testclient import TestClient

from textloc.corpus import generate_corpus
from textloc.encoders import DualEncoder, EncoderConfig, Vocabulary
from textloc.geoindex import build_index
from textloc.service import LocalizeEngine, create_app

records = generate_corpus(seed=44, size=30)
vocab = Vocabulary.build([r.text for r in records])
config = EncoderConfig(vocab_size=len(vocab), d_model=32, n_heads=4,
                       n_layers=1, embed_dim=16, base_context=77, context=160)
dual = DualEncoder(config, seed=0)
dual.expand_text_context()
refs = build_index([r.osm_tile for r in records], dual)

engine = LocalizeEngine(dual, vocab, "osm", refs)
client = TestClient(create_app(engine))

target = records[0]
body = client.post("/localize", json={
    "text": "a cafe with a red brick front", "lat": target.lat,
    "lon": target.lon, "M": 20, "K": 5, "explain": True,
}).json()
sid = body["session_id"]
print(f"session {sid}, re-ranked: {body['reranked']}")
for c in body["candidates"]:
    print(f"  {c['tile_id']}  sim {c['similarity']:.3f}  "
          f"conf {c['confidence']:.2f}")

poi = target.spec.pois[0]
refined = client.post("/refine", json={
    "session_id": sid, "extra_text": f"the sign reads {poi.name}",
}).json()
print(f"after refinement with '{poi.name}':")
for c in refined["candidates"]:
    print(f"  {c['tile_id']}  sim {c['similarity']:.3f}")

forced = client.post("/rerank", json={"session_id": sid}).json()
print("forced re-rank order:", [c["tile_id"] for c in forced["candidates"]])
