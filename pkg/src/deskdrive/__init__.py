"""Desk-scale 2D autonomous-driving workbench.

Simulates a small Ackermann vehicle with a planar lidar and provides the
full autonomy pipeline on top of it: range-flow scan odometry, occupancy
grid SLAM, adaptive Monte Carlo localization, and grid/elastic-band
navigation, plus a websocket telemetry bridge and dataset recorder.
"""

from deskdrive.geometry import Pose2D, Twist2D

__version__ = "0.1.0"

__all__ = ["Pose2D", "Twist2D", "__version__"]
