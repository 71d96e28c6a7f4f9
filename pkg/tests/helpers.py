import numpy as np

from occanykit.geometry import Pose7


def random_unit_quat(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def rotation_angle_between(a: Pose7, b: Pose7) -> float:
    """Precise small-angle distance via quaternion chordal distance.

    arccos-based measures bottom out around 2e-8; this resolves to ~1e-15.
    """
    qa = np.asarray(a.q)
    qb = np.asarray(b.q)
    d = min(np.linalg.norm(qa - qb), np.linalg.norm(qa + qb))
    return float(4.0 * np.arcsin(min(1.0, d / 2.0)))
