"""Uniform K-bin quantization of the output space.

Labels are floored to bins of width B = (y_max - y_min) / K; bin k is
represented by its left edge y_min + k*B. Targets for the survival-style
head use a cumulative encoding, and g maps bins to (0, 1] with the top
bin scoring exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantizationScheme",
    "build_scheme",
    "bin_of",
    "bins_of",
    "cumulative_encode",
    "g_eval",
    "g_values",
]


@dataclass(frozen=True)
class QuantizationScheme:
    K: int
    y_min: float
    y_max: float

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"need at least 2 bins, got K={self.K}")
        if not self.y_max > self.y_min:
            raise ValueError(
                f"degenerate output range [{self.y_min}, {self.y_max}]"
            )

    @property
    def B(self):
        return (self.y_max - self.y_min) / self.K

    def representative(self, k):
        """Left edge of bin k."""
        return self.y_min + k * self.B

    def to_dict(self):
        return {"K": self.K, "y_min": self.y_min, "y_max": self.y_max, "B": self.B}


def build_scheme(y_values, K):
    y = np.asarray(y_values, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot build a quantization scheme from no outputs")
    return QuantizationScheme(int(K), float(y.min()), float(y.max()))


def bin_of(y, scheme):
    """Floor y to its bin index, clamped into {0, ..., K-1}."""
    if not np.isfinite(y):
        raise FloatingPointError(f"non-finite output value {y!r}")
    k = int(np.floor((y - scheme.y_min) / scheme.B))
    return min(max(k, 0), scheme.K - 1)


def bins_of(y_values, scheme):
    """Vectorized bin_of over an array of outputs."""
    y = np.asarray(y_values, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite output value in array")
    k = np.floor((y - scheme.y_min) / scheme.B).astype(np.int64)
    return np.clip(k, 0, scheme.K - 1)


def cumulative_encode(bin_index, K):
    """Binary target vector: element k is 1 iff k <= bin_index."""
    if not 0 <= bin_index < K:
        raise IndexError(f"bin {bin_index} out of range for K={K}")
    t = np.zeros(K)
    t[: bin_index + 1] = 1.0
    return t


def g_eval(bin_index, scheme):
    """Normalized evaluation score of a bin: (k+1)/K, top bin scores 1."""
    if not 0 <= bin_index < scheme.K:
        raise IndexError(f"bin {bin_index} out of range for K={scheme.K}")
    return (bin_index + 1) / scheme.K


def g_values(scheme):
    """g over all bins as an array; strictly increasing, g[-1] == 1."""
    return (np.arange(scheme.K) + 1.0) / scheme.K
