"""Seed derivation so every stage draws from one root seed."""
import numpy as np

# Stage keys keep streams of different stages independent.
STAGE_KEYS = {
    "synth": 1,
    "pretrain": 2,
    "finetune": 3,
    "head": 4,
    "trend": 5,
    "eval": 6,
}


def derive_seed(root_seed: int, *keys: int) -> int:
    """Deterministic 32-bit seed from a root seed and integer keys."""
    sequence = np.random.SeedSequence([int(root_seed), *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def make_rng(root_seed: int, *keys: int) -> np.random.Generator:
    """Generator for the stream identified by (root_seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), *[int(k) for k in keys]]))
