"""
Adam with an elementwise box constraint.
"""

import numpy as np

from app.config import GRAPE_CONFIG


class AdamOptimizer:
    """
    Adam updates followed by clamping to [-bound, bound].

    If an unconstrained step stays inside the box, clamping leaves it
    bit-identical.
    """

    def __init__(self, learning_rate=None, beta1=None, beta2=None, eps=None, bound=None):
        self.learning_rate = GRAPE_CONFIG["learning_rate"] if learning_rate is None else float(learning_rate)
        self.beta1 = GRAPE_CONFIG["beta1"] if beta1 is None else float(beta1)
        self.beta2 = GRAPE_CONFIG["beta2"] if beta2 is None else float(beta2)
        self.eps = GRAPE_CONFIG["adam_eps"] if eps is None else float(eps)
        self.bound = GRAPE_CONFIG["amplitude_bound"] if bound is None else float(bound)
        if self.learning_rate <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.bound <= 0:
            raise ValueError(
                f"Invalid Adam settings: lr={self.learning_rate}, beta1={self.beta1}, "
                f"beta2={self.beta2}, bound={self.bound}."
            )
        self.m = None
        self.v = None
        self.t = 0

    def reset(self):
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grad):
        """
        Returns the updated, clamped parameters; `params` is left untouched.

        Args:
            params (np.ndarray): Current iterate.
            grad (np.ndarray): Gradient of the cost at `params`.
        """
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        updated = params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return np.clip(updated, -self.bound, self.bound)
