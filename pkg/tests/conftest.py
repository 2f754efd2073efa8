import pytest


@pytest.fixture(scope="session")
def acceptance_artifacts():
    """Datasets, trained checkpoints and reports for the acceptance suite.

    Built once and cached under artifacts/acceptance (override with
    --artifacts-root); a fresh build trains both filters and takes a few
    hours of CPU, a cached tree loads in seconds.
    """
    import pipeline_build

    root = pipeline_build.DEFAULT_ROOT
    return pipeline_build.build_all(root)
