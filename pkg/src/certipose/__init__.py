"""Event-based satellite pose estimation with certifiable test-time
self-supervision."""

__version__ = "0.1.0"
