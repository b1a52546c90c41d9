"""Frame-similarity graphs and community quality metrics."""
