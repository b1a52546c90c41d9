"""Run registry package initialization."""
