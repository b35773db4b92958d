"""Event-conditioned flow matching for rest-to-task ROI time-series synthesis."""

__version__ = "0.1.0"

from .estimator import RestToTaskFlow

__all__ = ["RestToTaskFlow"]
