import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import offguard as og

settings.register_profile(
    "ci", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")

ASSETS_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "assets")


def small_mlp(seed: int = 1, in_dim: int = 8, hidden: int = 16, classes: int = 4) -> og.ModelSpec:
    rng = np.random.default_rng(seed)
    scale = lambda n: np.sqrt(1.0 / n)
    return og.ModelSpec(
        [
            og.dense(
                rng.normal(0, scale(in_dim), size=(hidden, in_dim)).astype(np.float32),
                rng.normal(0, 0.1, size=hidden).astype(np.float32),
            ),
            og.relu(),
            og.dense(
                rng.normal(0, scale(hidden), size=(classes, hidden)).astype(np.float32),
                rng.normal(0, 0.1, size=classes).astype(np.float32),
            ),
            og.softmax(),
        ],
        (in_dim,),
    )


def seven_layer_conv_net(seed: int = 3) -> og.ModelSpec:
    """Five conv layers, a flatten and a dense head (desk-scale dims)."""
    rng = np.random.default_rng(seed)

    def conv(c_in, c_out):
        k = rng.normal(0, 0.3, size=(3, 3, c_in, c_out)).astype(np.float32)
        b = rng.normal(0, 0.05, size=c_out).astype(np.float32)
        return og.conv2d(k, b, stride=1, padding="same")

    layers = [conv(1, 2), conv(2, 2), conv(2, 2), conv(2, 2), conv(2, 2), og.flatten()]
    flat = 6 * 6 * 2
    layers.append(
        og.dense(
            rng.normal(0, 0.1, size=(4, flat)).astype(np.float32),
            np.zeros(4, dtype=np.float32),
        )
    )
    return og.ModelSpec(layers, (6, 6, 1))


@pytest.fixture(scope="session")
def mlp():
    return small_mlp()


@pytest.fixture(scope="session")
def conv_net():
    return seven_layer_conv_net()


@pytest.fixture()
def honest_stack(mlp):
    core = og.WorkerCore()
    client = og.OffloadClient(
        mlp, [og.DirectSession(core)], og.OffloadPlan(verify_ratio=0.25)
    )
    client.setup()
    return core, client
