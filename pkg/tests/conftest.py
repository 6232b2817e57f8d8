"""Shared fixtures: desk-scale trained models, built once per session."""

import time

import pytest

from cascadeface import haar, nets, synth, train

# the pnet run doubles as the end-to-end training benchmark, so its dataset
# and seed stay fixed
PNET_TRAIN = dict(n=2000, size=12, seed=42, epochs=30)
RNET_TRAIN = dict(n=2000, size=24, seed=43, epochs=12)
ONET_TRAIN = dict(n=1500, size=48, seed=44, epochs=8)


def _train(build, n, size, seed, epochs):
    data = synth.synth_dataset(n, size, rng_seed=seed)
    spec = build()
    cfg = train.TrainConfig(learning_rate=0.1, batch_size=64, epochs=epochs,
                            ohem_keep_ratio=0.7, rng_seed=seed)
    init = train.init_weights(spec, rng_seed=seed)
    store, history = train.train_stage(spec, init, data, cfg)
    return store, history


@pytest.fixture(scope="session")
def pnet_training_run():
    """Trained pnet, its history, held-out accuracy, and training wall time."""
    t0 = time.perf_counter()
    store, history = _train(nets.build_pnet, **PNET_TRAIN)
    elapsed = time.perf_counter() - t0
    heldout = synth.synth_dataset(500, 12, rng_seed=PNET_TRAIN["seed"] + 1)
    accuracy = train.classification_accuracy(nets.build_pnet(), store, heldout)
    return store, history, accuracy, elapsed


@pytest.fixture(scope="session")
def trained_cascade(pnet_training_run):
    """Weight store covering all three trained stage networks."""
    store = dict(pnet_training_run[0])
    store.update(_train(nets.build_rnet, **RNET_TRAIN)[0])
    store.update(_train(nets.build_onet, **ONET_TRAIN)[0])
    return store


@pytest.fixture(scope="session")
def trained_haar():
    pos, neg = synth.synth_haar_windows(1200, 14000, rng_seed=42)
    return haar.build_cascade(pos, neg)
