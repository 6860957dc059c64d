"""HTTP surface: pulse export, fidelity, fit and ratio endpoints."""
