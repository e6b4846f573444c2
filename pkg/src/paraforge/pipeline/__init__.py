"""Manifests, configuration, synthetic corpora and the two training flows."""
