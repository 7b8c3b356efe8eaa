"""Numerical laboratory for first nontrivial Neumann eigenpairs, hot-spot
localization and reflected Brownian motion on bounded convex planar domains."""

from hotspotlab.geometry import (
    ConvexDomain,
    NormalizationReport,
    DiameterPairSet,
    polygon,
    rectangle,
    disk,
    ellipse,
    stadium,
    random_hull,
    from_spec,
)

__version__ = "0.1.0"
