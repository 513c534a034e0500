import numpy as np
import pytest

from georag import alignment, synth

# Desk-scale training settings for the synthetic world. The corpus-scale
# defaults (lr 3e-5, 10 epochs) barely move a fresh model on 2k samples,
# so directional tests use a faster schedule.
DESK_LR = 1e-3
DESK_EPOCHS = 12

# World settings that make raw visual retrieval genuinely ambiguous:
# a weak cluster-specific component and strong noise, so distant clusters
# sharing a style signature get confused without geographic alignment.
AMBIGUOUS_WORLD = dict(cluster_signal=0.3, embedding_noise_sigma=1.5)


def make_world(seed, **overrides):
    kw = dict(AMBIGUOUS_WORLD)
    kw.update(overrides)
    return synth.synthesize_world(synth.SyntheticWorldConfig(seed=seed, **kw))


def train_desk_model(world, seed=0):
    dataset = alignment.TriModalBatch(world.image_emb, world.text_emb,
                                      world.points)
    config = alignment.TrainConfig(seed=seed, lr=DESK_LR, epochs=DESK_EPOCHS)
    return alignment.train(dataset, config)


@pytest.fixture(scope="session")
def world0():
    """The canonical fixture world: seed 0, 8 clusters x 256 points."""
    return make_world(0)


@pytest.fixture(scope="session")
def trained0(world0):
    """Model trained on world0 with the desk-scale schedule."""
    model, log = train_desk_model(world0, seed=0)
    return model, log


@pytest.fixture(scope="session")
def index0(world0, trained0):
    model, _ = trained0
    return synth.build_index_from_embeddings(world0.records, world0.image_emb,
                                             model)


@pytest.fixture(scope="session")
def small_world():
    """A fast fixture for unit tests that only need plausible data."""
    return make_world(7, n_clusters=4, points_per_cluster=16)
