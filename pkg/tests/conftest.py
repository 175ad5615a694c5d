import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from milpath.bagio import FeatureBag
from milpath.milnet import init_model

settings.register_profile(
    "suite",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("suite")


def random_bag(rng: np.random.Generator, k: int, d: int, case_id: str = "case") -> FeatureBag:
    cols = max(1, int(np.ceil(np.sqrt(k))))
    idx = np.arange(k)
    coords = np.stack([(idx % cols) * 224, (idx // cols) * 224], axis=1).astype(np.int32)
    return FeatureBag(
        case_id=case_id,
        slide_index=np.zeros(k, dtype=np.uint16),
        coords=coords,
        features=rng.standard_normal((k, d)).astype(np.float32),
    )


def small_model(
    seed: int = 0,
    mode: str = "abmil",
    d_in: int = 5,
    d_proj: int = 7,
    d_attn: int = 6,
    n_classes: int = 3,
    dropout_in: float = 0.0,
    dropout_hidden: float = 0.0,
    **kwargs,
):
    return init_model(
        d_in=d_in,
        d_proj=d_proj,
        d_attn=d_attn,
        n_classes=n_classes,
        mode=mode,
        dropout_in=dropout_in,
        dropout_hidden=dropout_hidden,
        seed=seed,
        **kwargs,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260814)
