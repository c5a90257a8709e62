"""Temperature-based language sampling shared by vocabulary building and batching."""

import warnings

import numpy as np


def language_distribution(counts, T=5.0):
    """Return ``{lang: p}`` with ``p_l`` proportional to ``(n_l / sum n) ** (1/T)``.

    Languages with zero examples are dropped with a warning. Iteration order of
    the result follows the input order.
    """
    if T < 1:
        raise ValueError(f"temperature must be >= 1, got {T}")
    counts = dict(counts)
    empty = [lang for lang, n in counts.items() if n <= 0]
    if empty:
        warnings.warn(f"dropping languages with no examples: {empty}", stacklevel=2)
    kept = {lang: n for lang, n in counts.items() if n > 0}
    if not kept:
        raise ValueError("no language has any examples")
    total = float(sum(kept.values()))
    weights = np.array([(n / total) ** (1.0 / T) for n in kept.values()], dtype=np.float64)
    weights /= weights.sum()
    return dict(zip(kept, weights.tolist()))
