from __future__ import annotations

from typing import Optional

import numpy as np


def is_true(value: Optional[str]) -> bool:
    if value is None:
        return False

    return value.lower() in ["1", "yes", "true", "y", "t"]


def is_false(value: Optional[str]) -> bool:
    if value is None:
        return False

    return value.lower() in ["0", "no", "false", "n", "f"]


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Independent generator for a named position in the seed tree. The same
    (seed, stream) always yields the same draws regardless of which worker
    or process asks for it.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))
