import numpy as np


def cosine_embed(q, m: int = 32) -> np.ndarray:
    """Cosine features cos(i * pi * q) for i = 1..m.

    A scalar ``q`` gives a length-m vector; an array of levels gives one row
    per level.
    """
    q_arr = np.asarray(q, dtype=np.float64)
    if np.any(q_arr < 0.0) or np.any(q_arr > 1.0) or np.any(np.isnan(q_arr)):
        raise ValueError("quantile levels must lie in [0, 1]")
    i = np.arange(1, m + 1, dtype=np.float64)
    return np.cos(np.pi * q_arr[..., None] * i)
