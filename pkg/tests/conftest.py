import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom_manifest(tmp_path_factory):
    from pcmcad.phantoms import write_phantom_dataset
    return write_phantom_dataset(tmp_path_factory.mktemp("phantoms"), seed=0)


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, phantom_manifest):
    """Output directory of one default pipeline run over the phantom dataset."""
    from pcmcad.cli import main
    out = tmp_path_factory.mktemp("pipeline")
    code = main(["pipeline", "--manifest", str(phantom_manifest), "--out-dir", str(out), "--jobs", "1"])
    assert code == 0
    return out
