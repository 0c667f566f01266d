"""Manifests, patch stores, checkpoints, reports and the synthetic corpus."""
