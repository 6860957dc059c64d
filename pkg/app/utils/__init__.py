"""Atomic file writes, JSON lines and unit conversions."""
