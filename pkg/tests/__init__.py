"""Test suite for the Rydberg pulse-family toolkit."""
