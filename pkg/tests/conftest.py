import numpy as np
import pytest

from fundus_cl import synth
from fundus_cl.data import DatasetManifest, FundusRecord


def make_manifest(n_patients, eyes=2, referable_every=2, prefix="p"):
    """n_patients x eyes records; every ``referable_every``-th patient is referable (grade 3)."""
    records = []
    for p in range(n_patients):
        grade = 3 if p % referable_every == 0 else 0
        for e in range(eyes):
            records.append(FundusRecord(f"{prefix}{p}_{e}", f"/nonexistent/{prefix}{p}_{e}.png", grade,
                                        f"{prefix}{p}", "OD" if e == 0 else "OS"))
    return DatasetManifest(records)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_fixture(tmp_path_factory):
    """40 synthetic 32 px images with 4 styles on disk."""
    out = tmp_path_factory.mktemp("tiny")
    manifest = synth.generate(out, 40, seed=5, size=32, n_styles=4)
    return out, manifest
