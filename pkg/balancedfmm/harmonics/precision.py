import logging
from dataclasses import dataclass, field

from balancedfmm.errors import GeometryError

logger = logging.getLogger(__name__)

Q_MAX = 60


def truncation_bound(theta: float, order: int, bound_constant: float = 1.0) -> float:
    return bound_constant * theta ** (order + 1) / (1.0 - theta) ** 2


def order_and_cap(tol: float, theta: float, bound_constant: float = 1.0, q_max: int = Q_MAX):
    """Smallest order meeting the tolerance, and whether the cap was hit instead."""
    if not 0.0 < tol < 1.0:
        raise GeometryError(f"tol must lie in (0, 1), got {tol}")
    if not 0.0 < theta < 1.0:
        raise GeometryError(f"theta must lie in (0, 1), got {theta}")
    for order in range(q_max + 1):
        if truncation_bound(theta, order, bound_constant) <= tol:
            return order, False
    logger.warning(
        f"tol={tol:g} needs more than Q_max={q_max} at theta={theta}; "
        f"achievable bound is {truncation_bound(theta, q_max, bound_constant):.3e}"
    )
    return q_max, True


def order_from_tolerance(tol: float, theta: float, bound_constant: float = 1.0) -> int:
    return order_and_cap(tol, theta, bound_constant)[0]


@dataclass
class PrecisionPolicy:
    tol: float
    theta: float
    bound_constant: float = 1.0
    order: int = field(init=False)
    capped: bool = field(init=False)

    def __post_init__(self):
        self.order, self.capped = order_and_cap(self.tol, self.theta, self.bound_constant)

    @property
    def bound(self) -> float:
        """Bound achieved at the chosen order (above tol only when capped)."""
        return truncation_bound(self.theta, self.order, self.bound_constant)
