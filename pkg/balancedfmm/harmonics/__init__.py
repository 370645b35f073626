from .operators import (
    Expansion,
    LocalExpansion,
    MultipoleExpansion,
    l2l,
    l2l_batch,
    l2p,
    m2l,
    m2l_batch,
    m2m,
    m2m_batch,
    m2p,
    p2m,
    symmetry_residual,
    warm_tables,
)
from .precision import Q_MAX, PrecisionPolicy, order_and_cap, order_from_tolerance, truncation_bound
from .rotation import wigner_small_d
from .solid import index, irregular_harmonics, n_coefficients, regular_harmonics

__all__ = [
    "Expansion",
    "LocalExpansion",
    "MultipoleExpansion",
    "PrecisionPolicy",
    "Q_MAX",
    "index",
    "irregular_harmonics",
    "l2l",
    "l2l_batch",
    "l2p",
    "m2l",
    "m2l_batch",
    "m2m",
    "m2m_batch",
    "m2p",
    "n_coefficients",
    "order_and_cap",
    "order_from_tolerance",
    "p2m",
    "regular_harmonics",
    "symmetry_residual",
    "truncation_bound",
    "warm_tables",
    "wigner_small_d",
]
