"""Audio I/O, framing and the synthetic speaker corpus."""
