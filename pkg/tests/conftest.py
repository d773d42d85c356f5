import pytest

from millstream.config import RunConfig


def mini_config(**overrides) -> RunConfig:
    """Small, fast replay configuration for pipeline-level tests."""

    base = dict(
        stream_length=2000,
        warmup_fraction=0.4,
        post_reset_min=60,
        ph_min_instances=20,
        batch_size=25,
        ccsa_epochs=15,
        ccsa_pairs_per_kind=32,
        pretrain_epochs=80,
        source_train_cap=400,
        explainer_permutations=12,
        explain_instances=5,
        background_size=10,
        median_calibration_batches=3,
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def mini_replay():
    from millstream.pipeline import run_replay

    return run_replay(mini_config())
