# Train the summarizer on a small synthetic corpus and inspect its outputs.
# Takes roughly half a minute on a laptop.
import numpy as np

from clinsum.corpus import tokenize
from clinsum.knowledge import KnowledgeEmbedder
from clinsum.metrics import rouge_l
from clinsum.model import ModelConfig
from clinsum.synthetic import generate_synthetic
from clinsum.training import EvidenceBuilder, build_model, predict_department, prepare, summarize, train_examples

data = generate_synthetic(20, 4, seed=0, d_v=64)
config = ModelConfig(d_model=32, n_heads=2, d_ff=64, n_departments=4, d_v=64, d_kn=64,
                     max_src_len=120, max_tgt_len=24, learning_rate=3e-3, batch_size=4, epochs=120)
embedder = KnowledgeEmbedder.from_store(data.triples, config.d_kn, seed=0)
evidence = EvidenceBuilder(data.triples, data.features, embedder)

model = build_model(data.corpus, config)
examples = prepare(data.corpus, model, evidence)
print("parameters:", model.parameter_count(), "fusion sites:", {i: sorted(s.modalities) for i, s in model.fusion.items()})


def report(epoch, m, rec):
    if epoch % 20 == 0:
        print(f"epoch {epoch:3d}  L={rec['L']:.4f}  CL={rec['CL']:.4f}  GL={rec['GL']:.4f}  acc={rec['dept_accuracy']:.2f}")


result = train_examples(model, examples, on_epoch=report)
print("initial loss", round(result.initial["L"], 4))

outputs = [summarize(model, ex) for ex in examples]
scores = [rouge_l(tokenize(o), tokenize(ex.reference))["f1"] for o, ex in zip(outputs, examples)]
print("mean ROUGE-L:", np.mean(scores))
for ex, out in list(zip(examples, outputs))[:4]:
    print(f"[{predict_department(model, ex)}] {out}")
