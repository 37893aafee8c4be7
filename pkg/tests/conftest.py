import numpy as np
import pytest

from emsense.config import build_scene, load_scenario
from emsense.em_forward import ChannelSet
from emsense.pilots import random_pilots


@pytest.fixture(scope="session")
def tiny():
    """Small two-BS scene (M=64, K=2) with its channels, truth and random pilots."""
    scene, target = build_scene(load_scenario("tiny"))
    channels = ChannelSet.build(scene)
    rng = np.random.default_rng(5)
    pilots = np.stack([np.stack([random_pilots(ue.n_t, scene.n_pilots, ue.power_budget, rng) for ue in scene.ues])
                       for _ in range(scene.subcarriers.K)])
    s_true = target.property_vector(scene.subcarriers.omega_c)
    return scene, target, channels, pilots, s_true
