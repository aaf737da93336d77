"""LiDAR-to-voxel perception simulation for legged robots on procedurally generated terrain.

Submodules: ``geometry`` (meshes, transforms, BVH raycasting), ``lidar``
(scan patterns, noise, latency), ``voxel`` (occupancy grids, height maps),
``perception`` (z-sliced CNN encoder), ``terrain`` (block families and
curriculum), ``task`` (observations, rewards, termination) and ``cli``.
"""

__version__ = "0.1.0"
