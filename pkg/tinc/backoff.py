import random


class ExponentialBackoff:
    """Exponential backoff over simulated time.

    Used by cross-shard participants that re-query a coordinator for a decision.
    Each call to :meth:`delay` returns a value between ``base * 2^(exp-1)`` and
    ``base * 2^exp``, where the exponent starts at 1 and grows by one per call up
    to ``maximum``. The jitter stream is seeded, so two runs with the same seed
    produce the same retry schedule.

    Parameters
    ----------
    base: float
        The base delay in simulated milliseconds.
    seed: int
        Seed for the jitter stream.
    maximum: int
        Largest exponent.
    """

    def __init__(self, base: float = 100.0, *, seed: int = 0, maximum: int = 6):
        self._base = base
        self._exp = 0
        self._max = maximum
        self._rand = random.Random(seed)

    @property
    def attempts(self) -> int:
        return self._exp

    def reset(self) -> None:
        self._exp = 0

    def delay(self) -> float:
        self._exp = min(self._exp + 1, self._max)
        upper = self._base * 2 ** self._exp
        return self._rand.uniform(upper / 2, upper)
