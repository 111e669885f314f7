"""Synthetic grouped-image benchmark: data, probes, evaluation and ablations."""
