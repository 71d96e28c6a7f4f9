"""Desk-scale urban occupancy pipeline.

Multi-frame pointmap reconstruction with a transformer scene memory,
novel-view rendering with test-time view augmentation, trilinear
voxelization into semantic occupancy grids, and the matching evaluation
metrics, all validated against analytic synthetic scenes.
"""

__version__ = "0.1.0"
