"""Per-tree canopy volume estimation from orchard LiDAR point clouds."""

__version__ = "0.1.0"
