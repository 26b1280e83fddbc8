"""Shared builders for randomized test instances."""

import numpy as np

from rarefx.core import CATEGORICAL, CONTINUOUS, Dataset, GpsMatrix


def random_dataset(rng, n=60, z=3, n_cont=2, n_cat=1, with_truth=False) -> Dataset:
    """Random valid dataset with contiguous categorical levels."""
    cont = rng.standard_normal((n, n_cont))
    cat = 1.0 + rng.integers(0, 3, size=(n, n_cat))
    X = np.column_stack([cont, cat.astype(float)])
    W = 1 + rng.integers(0, z, size=n)
    W[:z] = np.arange(1, z + 1)  # every label present
    Y = (rng.random(n) < 0.3).astype(int)
    truth = rng.random((n, z)) if with_truth else None
    return Dataset(
        X=X,
        kinds=(CONTINUOUS,) * n_cont + (CATEGORICAL,) * n_cat,
        W=W,
        Y=Y,
        truth=truth,
    )


def random_gps(rng, n=50, z=3) -> GpsMatrix:
    return GpsMatrix.from_raw(rng.dirichlet(np.full(z, 2.0), size=n))
