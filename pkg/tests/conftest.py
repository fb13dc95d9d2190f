import numpy as np
import pytest

from clicklabel.features import BackendConfig, FeatureTensor
from clicklabel.residual import ReferenceBank, build_bank


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tensor(rng, h=8, w=8, d=8, source_id=""):
    return FeatureTensor(
        values=rng.normal(size=(h, w, d)).astype(np.float32), source_id=source_id
    )


def random_bank(rng, n_images=4, h=8, w=8, d=8) -> ReferenceBank:
    tensors = [random_tensor(rng, h, w, d, source_id=f"ref{i}") for i in range(n_images)]
    return build_bank(tensors)


@pytest.fixture
def small_backend_cfg():
    return BackendConfig(kind="handcrafted", grid=8, scales=(0,))
