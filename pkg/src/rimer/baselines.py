"""Reference forecasters used by the evaluation harness."""

from __future__ import annotations

import numpy as np


def persistence_forecast(inputs: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed value of each lookback row."""
    return np.repeat(inputs[:, -1:], horizon, axis=1)


class RidgeForecaster:
    """Multi-output ridge regression from a lookback window to the horizon.

    The intercept is not penalized.
    """

    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha
        self.coef: np.ndarray | None = None
        self.intercept: np.ndarray | None = None

    def fit(self, inputs: np.ndarray, targets: np.ndarray) -> "RidgeForecaster":
        x_mean = inputs.mean(axis=0)
        y_mean = targets.mean(axis=0)
        X = inputs - x_mean
        Y = targets - y_mean
        gram = X.T @ X + self.alpha * np.eye(X.shape[1])
        self.coef = np.linalg.solve(gram, X.T @ Y)
        self.intercept = y_mean - x_mean @ self.coef
        return self

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("RidgeForecaster.predict called before fit")
        return inputs @ self.coef + self.intercept
