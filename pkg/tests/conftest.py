import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seraug import corpus


@pytest.fixture(scope="session")
def blob_corpus(tmp_path_factory):
    """The reference desk-scale corpus: 100 real + 50 synthetic, shift 3."""
    out = tmp_path_factory.mktemp("blob")
    records = corpus.generate_blob_corpus(
        out,
        n_per_class=25,
        n_synthetic=50,
        dims=12,
        t_range=(10, 40),
        class_separation=5.0,
        noise_std=1.0,
        domain_shift=3.0,
        n_layers=1,
        seed=42,
    )
    return records, out
