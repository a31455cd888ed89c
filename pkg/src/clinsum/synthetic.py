"""Template-generated clinical dialogues with matching knowledge and image features.

Each department owns a disjoint set of symptom words. A dialogue mentions two
of its department's symptoms, every target summary is a fixed function of
(department, symptom pair), and every symptom has triples in the store, so a
small model can learn the mapping exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dialogue, Utterance
from .knowledge import KnowledgeTriple, TripleStore
from .visual import VisualFeatureStore

DEPARTMENTS = {
    "dermatology": ["rash", "itching", "blisters", "scaling", "acne", "hives", "eczema", "warts"],
    "cardiology": ["palpitations", "chestpain", "breathlessness", "edema", "fainting", "arrhythmia", "cyanosis", "murmur"],
    "gastroenterology": ["heartburn", "bloating", "diarrhea", "constipation", "nausea", "jaundice", "cramps", "vomiting"],
    "pulmonology": ["cough", "wheezing", "sputum", "hemoptysis", "snoring", "apnea", "phlegm", "chills"],
    "neurology": ["headache", "numbness", "tremor", "seizures", "vertigo", "tingling", "weakness", "confusion"],
    "ophthalmology": ["redness", "blurring", "floaters", "glare", "dryness", "squint", "tearing", "halos"],
    "orthopedics": ["stiffness", "swelling", "fracture", "sprain", "backache", "limping", "bruising", "clicking"],
    "ent": ["earache", "tinnitus", "hoarseness", "congestion", "nosebleed", "sorethroat", "deafness", "sneezing"],
    "urology": ["dysuria", "hematuria", "frequency", "urgency", "flankpain", "retention", "incontinence", "nocturia"],
    "psychiatry": ["anxiety", "insomnia", "sadness", "irritability", "panic", "fatigue", "restlessness", "apathy"],
}
BODY_SITES = ["skin", "heart", "abdomen", "lungs", "brain", "eyes", "joints", "throat", "bladder", "mind"]
DURATIONS = ["two", "three", "four", "five", "seven", "ten"]


@dataclass
class SyntheticData:
    corpus: list[Dialogue]
    triples: TripleStore
    features: VisualFeatureStore


def summary_for(department: str, a: str, b: str) -> dict[str, str]:
    return {
        "summary": f"patient reports {a} and {b} , referred to {department}",
        "mcs": f"{a} with {b}",
        "doctor_impression": f"consult {department} for {a}",
    }


def generate_synthetic(n_dialogues: int = 20, n_departments: int = 4, vocab_size_hint: int = 100,
                       seed: int = 0, d_v: int = 16) -> SyntheticData:
    """Corpus, triple store and feature store, fully determined by the arguments.

    ``vocab_size_hint`` bounds the number of symptom words per department
    (between 3 and 8) so the resulting vocabulary stays near the hint.
    """
    if not 1 <= n_departments <= len(DEPARTMENTS):
        raise ValueError(f"n_departments must be in [1, {len(DEPARTMENTS)}]")
    if n_dialogues < n_departments:
        raise ValueError("need at least one dialogue per department")
    rng = np.random.default_rng(seed)
    names = list(DEPARTMENTS)[:n_departments]
    per_dept = int(np.clip((vocab_size_hint - 40) // (n_departments + 1), 3, 8))
    symptoms = {d: DEPARTMENTS[d][:per_dept] for d in names}

    protos = {d: rng.normal(0.0, 1.0, d_v) for d in names}
    sym_protos = {s: rng.normal(0.0, 0.5, d_v) for d in names for s in symptoms[d]}

    features = VisualFeatureStore(d_v=d_v)
    corpus = []
    for i in range(n_dialogues):
        dept = names[i % n_departments]
        a, b = sorted(rng.choice(symptoms[dept], size=2, replace=False).tolist())
        dur = DURATIONS[int(rng.integers(len(DURATIONS)))]
        img = [f"img{i:04d}_0", f"img{i:04d}_1"]
        features.add(img[0], protos[dept] + sym_protos[a] + rng.normal(0.0, 0.05, d_v))
        features.add(img[1], protos[dept] + sym_protos[b] + rng.normal(0.0, 0.05, d_v))
        utts = [
            Utterance("patient", f"hello doctor , i have {a} and {b} for {dur} days ."),
            Utterance("doctor", f"how severe is the {a} ?"),
            Utterance("patient", f"the {a} is bad and the {b} started later .", (img[0],)),
            Utterance("doctor", f"please share a photo of the {b} ."),
            Utterance("patient", "here is the photo .", (img[1],)),
        ]
        corpus.append(Dialogue(
            id=f"syn{i:04d}",
            utterances=tuple(utts),
            department=dept,
            disease=None,
            **summary_for(dept, a, b),
        ))

    triples = []
    for k, dept in enumerate(names):
        site = BODY_SITES[list(DEPARTMENTS).index(dept)]
        syms = symptoms[dept]
        for j, s in enumerate(syms):
            triples += [
                KnowledgeTriple(s, "symptom_of", dept, 1.0),
                KnowledgeTriple(s, "located_in", site, 0.9),
                KnowledgeTriple(s, "is_a", "symptom", 0.8),
                KnowledgeTriple(s, "treated_by", f"{dept}_specialist", 0.7),
                KnowledgeTriple(s, "related_to", syms[(j + 1) % len(syms)], 0.6),
                KnowledgeTriple(s, "related_to", syms[(j + 2) % len(syms)], 0.5),
            ]
        triples.append(KnowledgeTriple(dept, "is_a", "medical_department", 1.0))
    for word in ("days", "photo", "doctor", "severe"):
        triples.append(KnowledgeTriple(word, "related_to", "consultation", 0.2))
    return SyntheticData(corpus, TripleStore(triples), features)
