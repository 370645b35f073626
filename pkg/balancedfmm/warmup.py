import logging
import time

import numpy as np

from balancedfmm.harmonics.operators import m2l_batch, warm_tables
from balancedfmm.harmonics.solid import n_coefficients

logger = logging.getLogger(__name__)


def warm_operators(order: int, method: str = "rotation"):
    """
    Build the translation tables for `order` and push one pair through M2L,
    so that the first timed stage does not pay for table construction.
    """
    start = time.perf_counter()
    warm_tables(order, method)
    coefficients = np.zeros((1, n_coefficients(order)), dtype=np.complex128)
    coefficients[0, 0] = 1.0
    m2l_batch(coefficients, np.zeros((1, 3)), [1.0], np.array([[3.0, 1.0, 2.0]]), [1.0], order, method)
    logger.debug(f"operator tables for Q={order} ({method}) ready in {time.perf_counter() - start:.3f}s")
