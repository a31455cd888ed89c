# Keyword extraction and triple retrieval on a synthetic dialogue.
from clinsum.knowledge import KnowledgeEmbedder, distill, encode_knowledge, extract_keywords, linearize_triples
from clinsum.synthetic import generate_synthetic

data = generate_synthetic(8, 4, seed=2)
dialogue = data.corpus[1]
for u in dialogue.utterances:
    print(f"  {u.speaker:7s} {u.text}")

print("keywords:", extract_keywords(dialogue.context(), 7))

ctx = distill(dialogue.context(), data.triples)
print(f"{len(ctx.triples)} triples retrieved")
for t in ctx.triples[:6]:
    print("  ", t.head, t.relation, t.tail, t.weight)

tokens = linearize_triples(ctx)
embedder = KnowledgeEmbedder.from_store(data.triples, d_kn=16, seed=0)
E_kn = encode_knowledge(tokens, embedder)
print("knowledge row:", E_kn.shape, E_kn[0, :4].round(3))

# the same dialogue always yields the same record
print(ctx.dumps(dialogue.id) == distill(dialogue.context(), data.triples).dumps(dialogue.id))
