import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from hydra_bench.detector.models import ATTN, CONV
from hydra_bench.detector.training import DetectorConfig, DetectorWeights, build_model
from hydra_bench.scene import SceneConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scene():
    return SceneConfig(n_train=6, n_test=3)


@pytest.fixture(scope="session")
def small_frames(small_scene):
    return generate_dataset(small_scene, 7)


def random_weights(variant, scene: SceneConfig, seed=0, dtype=torch.float64) -> DetectorWeights:
    """Untrained victim with non-trivial attention offsets, for structural tests."""
    cfg = DetectorConfig(variant=variant, seed=seed)
    torch.manual_seed(seed)
    model = build_model(cfg, scene.rig(), scene.grid).to(dtype)
    if variant == ATTN:
        with torch.no_grad():
            for layer in model.attn:
                layer.sampling_offsets.weight.normal_(0.0, 0.3)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return DetectorWeights(model, cfg, scene.rig(), scene.grid)


@pytest.fixture(scope="session")
def conv_random(small_scene):
    return random_weights(CONV, small_scene)


@pytest.fixture(scope="session")
def attn_random(small_scene):
    return random_weights(ATTN, small_scene)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def resize_oracle(a, out_h, out_w):
    """Half-pixel bilinear resize written out per output pixel (C, h, w) -> (C, out_h, out_w)."""
    c, h, w = a.shape
    out = np.zeros((c, out_h, out_w))

    def taps(i, n_in, n_out):
        s = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, s - i0

    for r in range(out_h):
        r0, r1, fr = taps(r, h, out_h)
        for q in range(out_w):
            c0, c1, fc = taps(q, w, out_w)
            out[:, r, q] = ((1 - fr) * (1 - fc) * a[:, r0, c0] + (1 - fr) * fc * a[:, r0, c1]
                            + fr * (1 - fc) * a[:, r1, c0] + fr * fc * a[:, r1, c1])
    return out
