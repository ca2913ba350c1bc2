"""Online road-event tube building and spatiotemporal mAP evaluation."""

__version__ = "0.1.0"
