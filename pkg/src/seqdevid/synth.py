"""Synthetic session generators for demos and self-tests.

These produce SessionMatrix lists with the same shape conventions as the
capture pipeline, so the training and comparison code can be exercised
without any packet data.
"""

from __future__ import annotations

import numpy as np

from .features import SessionMatrix

__all__ = ["make_shifted_dataset", "make_sign_dataset"]


def make_shifted_dataset(n_classes: int = 27, per_class: int = 20,
                         seq_len: int = 12, n_features: int = 25,
                         shift: float = 3.0, noise: float = 1.0,
                         seed: int = 0) -> list[SessionMatrix]:
    """Gaussian sessions with a class-dependent mean shift.

    Every class gets a fixed mean vector drawn once from its own stream;
    samples add unit-scale noise on top. With the default shift the classes
    are cleanly separable, which makes this useful as a smoke dataset: any
    working model should score far above chance on it.
    """
    rng = np.random.default_rng(seed)
    means = [np.random.default_rng((seed, 1000 + c)).uniform(0.0, shift, n_features)
             for c in range(n_classes)]
    out = []
    for c in range(n_classes):
        for s in range(per_class):
            values = means[c] + noise * rng.normal(size=(seq_len, n_features))
            out.append(SessionMatrix(values=values,
                                     device_label=f"device{c:02d}",
                                     session_id=f"s{s:03d}"))
    return out


def make_sign_dataset(per_class: int = 40, seq_len: int = 6,
                      n_features: int = 4, seed: int = 0) -> list[SessionMatrix]:
    """Two classes split by the sign of feature 0; the rest is noise."""
    rng = np.random.default_rng(seed)
    out = []
    for label, sign in (("neg", -1.0), ("pos", 1.0)):
        for s in range(per_class):
            values = rng.normal(size=(seq_len, n_features))
            values[:, 0] = sign * (1.0 + 0.1 * rng.normal(size=seq_len))
            out.append(SessionMatrix(values=values, device_label=label,
                                     session_id=f"s{s:03d}"))
    return out
