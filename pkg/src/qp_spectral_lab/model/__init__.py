from qp_spectral_lab.model.potential import (
    AnalyticPotential,
    FourierTerm,
    NondegeneracyReport,
    evaluate_potential,
    nondegeneracy_check,
)
from qp_spectral_lab.model.symbols import (
    GevreyReport,
    GevreySymbol,
    SymbolEntry,
    coefficients_at,
    symbol_coefficient,
    symbol_l1_norm,
    truncation_tail_bound,
    verify_gevrey,
)
from qp_spectral_lab.model.torus import (
    FrequencyVector,
    TorusPoint,
    default_frequency,
    frequency_family,
    orbit_points,
    shift_orbit,
    wrap,
)
from qp_spectral_lab.model.types import ShiftMode, SymbolRule

__all__ = [
    "AnalyticPotential",
    "FourierTerm",
    "FrequencyVector",
    "GevreyReport",
    "GevreySymbol",
    "NondegeneracyReport",
    "ShiftMode",
    "SymbolEntry",
    "SymbolRule",
    "TorusPoint",
    "coefficients_at",
    "default_frequency",
    "evaluate_potential",
    "frequency_family",
    "nondegeneracy_check",
    "orbit_points",
    "shift_orbit",
    "symbol_coefficient",
    "symbol_l1_norm",
    "truncation_tail_bound",
    "verify_gevrey",
    "wrap",
]
