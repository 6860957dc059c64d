"""Service settings, run configuration, logging setup and the exception hierarchy."""
