import sys
import numpy as np
import pytest

from clinsum.knowledge import KnowledgeEmbedder
from clinsum.model import ModelConfig
from clinsum.synthetic import generate_synthetic
from clinsum.training import EvidenceBuilder


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic(20, 4, 100, seed=0, d_v=16)


@pytest.fixture(scope="session")
def evidence(synth):
    return EvidenceBuilder(synth.triples, synth.features, KnowledgeEmbedder.from_store(synth.triples, 16, seed=0))


@pytest.fixture
def small_config():
    return ModelConfig(d_model=16, n_heads=2, n_encoder_layers=4, n_decoder_layers=1, d_ff=32,
                       vocab_size=20, n_departments=4, d_v=16, d_kn=16, max_src_len=80,
                       max_tgt_len=16, learning_rate=3e-3, batch_size=4, epochs=2, seed=0)


@pytest.fixture
def micro_config():
    return ModelConfig(d_model=8, n_heads=2, n_encoder_layers=2, n_decoder_layers=1, d_ff=16,
                       vocab_size=12, n_departments=3, fusion_placement={2: {"visual", "knowledge"}},
                       max_src_len=16, max_tgt_len=8, d_v=5, d_kn=6, seed=7)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)
