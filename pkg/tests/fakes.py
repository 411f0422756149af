"""Deterministic stand-ins for trained discriminators."""
import numpy as np

from lumitrack.reshape import N_TEMP, TAU_MINUTES

EDGE_LEVEL = np.log10(0.5 * 100_000.0)


class EdgeLightModel:
    """Scores a normalised curve by how close its day/night edges sit to +-6 h."""

    kind = "light"

    def score(self, X):
        X = np.atleast_2d(X)
        out = np.empty(X.shape[0])
        for k, row in enumerate(X):
            below = np.flatnonzero(row < EDGE_LEVEL)
            if below.size == 0 or below[0] == 0 or below[-1] == row.size - 1:
                out[k] = 0.0
                continue
            down, up = TAU_MINUTES[below[0]], TAU_MINUTES[below[-1]]
            out[k] = np.exp(-(abs(down + 360) + abs(up - 360)) / 20.0)
        return out


class GapTempModel:
    """Scores a temperature pair by the gap between sensor and station means."""

    kind = "temp"

    def score(self, X):
        X = np.atleast_2d(X)
        return np.exp(-np.abs(X[:, :N_TEMP].mean(axis=1) - X[:, N_TEMP:].mean(axis=1)) / 3.0)
