"""Physics models, propagation, training and evaluation services."""
