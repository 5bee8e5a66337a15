"""egorig: skeletal IK, embedded-graph character deformation, silhouette
mesh refinement, and mesh-anchored Gaussian splatting on synthetic capture."""

__version__ = "0.1.0"
