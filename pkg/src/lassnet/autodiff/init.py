import numpy as np


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    """Kaiming-uniform with gain sqrt(2): U(-b, b), b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
