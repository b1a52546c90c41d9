"""Separation and clustering scores."""
