"""Pure-numpy fallback for the matrix-product kernel.

One rank-1 update per k, ascending. For every output element (i, j) this adds
a[i, k] * b[k, j] in the same order, with the same two roundings per term, as
the compiled triple loop, so the two backends agree bit for bit.
"""

import numpy as np


def matmul_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    for k in range(a.shape[1]):
        np.add(out, a[:, k : k + 1] * b[k : k + 1, :], out=out)
