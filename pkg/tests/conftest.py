import pytest

from qp_spectral_lab.constants import SCHEMA_VERSION
from qp_spectral_lab.operators import OperatorFamily, default_model
from qp_spectral_lab.settings import ExperimentConfig

# Small enough that every command runs in seconds
SMALL_GRIDS = {
    "theta_count": 16,
    "energy_count": 2,
    "y_count": 8,
    "line_count": 8,
    "section_count": 2,
    "branch_samples": 32,
    "phase_count": 8,
}

SMALL_COMMANDS = {
    "green": {"size": 8, "energy": 2.5},
    "ldt_scan": {
        "scales": [4, 8],
        "initial_size": 4,
        "resonance_size": 4,
        "resonance_samples": 2,
    },
    "msa_verify": {"theta_count": 2, "energy": 2.5},
    "localize": {"size": 12, "theta_count": 2},
    "branch": {"size": 8, "truncation": 4, "big_size": 12, "refine_rounds": 1},
    "duality": {"direct_size": 16, "dual_size": 16},
    "poisson": {"big_size": 16, "sub_size": 8, "pairs": 3, "delyon_scales": [4, 8]},
    "bench": {"sizes": [16, 24], "block_size": 4},
}


@pytest.fixture
def default_spec():
    """The reference DUAL model at d = 1, λ = 1e-3."""
    return default_model()


@pytest.fixture
def free_spec():
    """The reference DUAL model without hopping."""
    return default_model(coupling=0.0)


@pytest.fixture
def direct_spec():
    return default_model(family=OperatorFamily.DIRECT)


@pytest.fixture
def make_config():
    """Build a small validated config, optionally with another operator or overrides."""

    def build(spec=None, **overrides) -> ExperimentConfig:
        raw = {
            "schema_version": SCHEMA_VERSION,
            "seed": 7,
            "operator": spec if spec is not None else default_model(),
            "grids": SMALL_GRIDS,
            "commands": SMALL_COMMANDS,
        }
        raw.update(overrides)
        return ExperimentConfig.model_validate(raw)

    return build
