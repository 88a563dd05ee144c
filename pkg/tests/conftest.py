import pytest

from agsearch.archive import estimate_relationship_frequencies
from agsearch.synthlab import (
    SynthConfig,
    calibrate_models,
    collect_concept_stats,
    generate_dataset,
)


@pytest.fixture(scope="session")
def deposit_lab():
    """Small calibrated object-deposit world shared across integration tests."""
    config = SynthConfig(
        n_clutter_tracklets=60, planted=(("object_deposit", 6),), seed=2024
    )
    ds = generate_dataset(config)
    models = calibrate_models(ds.store, ds.labels, seed=1)
    stats = collect_concept_stats(ds.store, models, ds.labels, seed=2)
    freqs = estimate_relationship_frequencies(ds.store, models, n_samples=20000, seed=3)
    return ds, models, stats, freqs
