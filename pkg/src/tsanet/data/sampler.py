from __future__ import annotations

from collections.abc import Iterator, Sequence

import numpy as np

from ..errors import ValidationError
from .sequence import FrameSequence


def joint_sampler(
    datasets: Sequence[Sequence[FrameSequence]], switch_every: int = 128, seed: int = 0
) -> Iterator[tuple[FrameSequence, int]]:
    """Endless (sequence, t) draws alternating between datasets.

    The active dataset changes round-robin every ``switch_every`` draws.
    Each dataset walks its own per-epoch shuffle of sequences and picks the
    centre frame uniformly; windows are clamped downstream.
    """
    if switch_every < 1:
        raise ValidationError(f"switch_every must be >= 1, got {switch_every}")
    if not datasets:
        raise ValidationError("joint_sampler needs at least one dataset")
    for i, ds in enumerate(datasets):
        if len(ds) == 0:
            raise ValidationError(f"dataset {i} is empty")

    rngs = [np.random.default_rng([seed, i]) for i in range(len(datasets))]
    orders: list[list[int]] = [[] for _ in datasets]
    draw = 0
    while True:
        k = (draw // switch_every) % len(datasets)
        if not orders[k]:
            orders[k] = rngs[k].permutation(len(datasets[k])).tolist()[::-1]
        seq = datasets[k][orders[k].pop()]
        t = int(rngs[k].integers(len(seq)))
        yield seq, t
        draw += 1
