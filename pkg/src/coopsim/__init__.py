"""Desk-scale cooperative perception simulator.

Synthetic LIDAR scenes, a hand-written convolutional detector, and three
vehicle-to-vehicle sharing pipelines (raw point clouds, intermediate feature
grids, final detection lists) with matching wire formats, training loops and
evaluation sweeps. Everything is numpy + stdlib and bit-reproducible from
(config, seed).
"""

__version__ = "0.1.0"
