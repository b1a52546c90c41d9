"""Frame masks and source reconstruction."""
