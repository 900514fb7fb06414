import numpy as np
import pytest

from dictionaries import Dictionary
from dynamics import IntegratorConfig, SampleDesign, build_system, generate_pairs
from estimators import edmd, pf_edmd


@pytest.fixture(scope='session')
def example1_pairs():
    """1000 uniform points of [-1, 1]^2 and their images under x -> Ax."""
    design = SampleDesign('uniform-domain', (-1.0, -1.0), (1.0, 1.0), total=1000)
    return generate_pairs(build_system('linear-example1'), design, IntegratorConfig(1.0, 1, seed=1))


@pytest.fixture(scope='session')
def example1_result(example1_pairs):
    """EDMD on the total degree <= 5 monomials, a Koopman-invariant subspace of the linear map."""
    return edmd(example1_pairs, Dictionary.monomials(2, degree=5))


@pytest.fixture(scope='session')
def example1_tensor_result(example1_pairs):
    """EDMD and PF-EDMD on the 36 monomials x1^l1 x2^l2 with 0 <= l1, l2 <= 5."""
    return pf_edmd(example1_pairs, Dictionary.monomials(2, max_per_dim=5))


@pytest.fixture(scope='session')
def doublewell_pairs():
    design = SampleDesign('per-box', (-2.0, -2.0), (2.0, 2.0), (8, 8), per_box=40)
    cfg = IntegratorConfig.from_lag(1.0, 1e-3, seed=3)
    return generate_pairs(build_system('double-well', sigma=0.7), design, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
