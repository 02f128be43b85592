import pytest

from mvprod import dataio


@pytest.fixture(scope="session")
def default_dataset_dir(tmp_path_factory):
    """The default synthetic corpus (N=2000, 6x5 ontology, seed 1),
    generated once per session."""
    out = tmp_path_factory.mktemp("dataset") / "default"
    dataio.generate(dataio.GenConfig(seed=1), out)
    return out
