"""M/M/1 queue whose rates depend on an environment that slows down as the queue grows."""

__version__ = "0.1.0"
