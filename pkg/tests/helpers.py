"""Shared test utilities: Geweke comparison and small oracles."""

import numpy as np


def batch_se(x, batches=50):
    """Standard error of the mean of a correlated series via batch means."""
    x = np.asarray(x, dtype=float)
    n = (x.shape[0] // batches) * batches
    means = x[:n].reshape((batches, -1) + x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(batches)


def geweke_z(marginal, successive, batches=50):
    """z statistics comparing independent draws with a Markov chain, per column."""
    m = np.asarray(marginal, dtype=float)
    s = np.asarray(successive, dtype=float)
    se_m = m.std(axis=0, ddof=1) / np.sqrt(m.shape[0])
    se_s = batch_se(s, batches)
    return (m.mean(axis=0) - s.mean(axis=0)) / np.sqrt(se_m**2 + se_s**2)


def moments(v):
    """First and second moments of a flat parameter vector."""
    v = np.ravel(v)
    return np.concatenate([v, v * v])


class MeanRNG:
    """Stand-in generator that returns distribution means instead of draws."""

    def standard_normal(self, size=None):
        return 0.0 if size is None else np.zeros(size)

    def gamma(self, shape, scale=1.0, size=None):
        return shape * scale
