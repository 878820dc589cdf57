"""Quadrature rules on the reference triangle and the unit segment."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    """Points in barycentric (triangle) or [0, 1] (segment) coordinates.

    Weights are normalized to sum to one; scale by the element measure.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


def _dunavant5():
    s = np.sqrt(15.0)
    a1, b1 = (6.0 - s) / 21.0, (9.0 + 2.0 * s) / 21.0
    a2, b2 = (6.0 + s) / 21.0, (9.0 - 2.0 * s) / 21.0
    w1, w2 = (155.0 - s) / 1200.0, (155.0 + s) / 1200.0
    pts = [(1 / 3, 1 / 3, 1 / 3),
           (b1, a1, a1), (a1, b1, a1), (a1, a1, b1),
           (b2, a2, a2), (a2, b2, a2), (a2, a2, b2)]
    wts = [9.0 / 40.0, w1, w1, w1, w2, w2, w2]
    return QuadratureRule(np.array(pts), np.array(wts), 5)


def _gauss3():
    r = np.sqrt(0.6)
    pts = 0.5 * (1.0 + np.array([-r, 0.0, r]))
    wts = np.array([5.0, 8.0, 5.0]) / 18.0
    return QuadratureRule(pts, wts, 5)


TRIANGLE_7 = _dunavant5()
SEGMENT_3 = _gauss3()
