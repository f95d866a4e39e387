"""In-process simulation of the server/worker message exchange.

Nothing is sent over a wire; each aggregation or broadcast is logged as one
communication event. Reductions run in ascending worker id, so results do
not depend on the order in which workers finish.
"""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class ProtocolError(RuntimeError):
    """A round did not receive exactly one contribution per worker."""


@dataclass(frozen=True)
class RoundMessage:
    kind: str
    payload: tuple
    round_tag: tuple


@dataclass
class CommLedger:
    events: Counter = field(default_factory=Counter)
    rounds: int = 0

    @property
    def total_events(self):
        return sum(self.events.values())


class Cluster:
    """Server plus ``P`` workers holding local copies of the model."""

    def __init__(self, P, ledger=None, keep_log=False):
        self.P = int(P)
        self.ledger = CommLedger() if ledger is None else ledger
        self.local_models = [None] * self.P
        self.log = [] if keep_log else None

    def _record(self, kind, payload, tag, headline):
        self.ledger.events[kind] += 1
        if headline:
            self.ledger.rounds += 1
        if self.log is not None:
            self.log.append(RoundMessage(kind, tuple(payload), tuple(tag)))

    def gather_average(self, contributions, tag=(), headline=False, kind="gather_vectors"):
        """Mean of one vector per worker.

        ``contributions`` maps worker id to vector (a sequence is read as
        ids ``0..P-1``). The reduction is ``c_0 + sum_p (c_p - c_0) / P`` in
        ascending id order, which returns ``c_0`` bit-exactly when all
        contributions are equal.
        """
        if not hasattr(contributions, "keys"):
            contributions = dict(enumerate(contributions))
        ids = sorted(contributions)
        if ids != list(range(self.P)):
            missing = sorted(set(range(self.P)) - set(ids))
            extra = sorted(set(ids) - set(range(self.P)))
            raise ProtocolError(f"gather {tag}: missing workers {missing}, unexpected {extra}")
        ordered = [np.asarray(contributions[p], dtype=float) for p in ids]
        ref = ordered[0]
        acc = np.zeros_like(ref)
        for c in ordered[1:]:
            acc += c - ref
        out = ref + acc / self.P
        self._record(kind, ordered, tag, headline)
        return out

    def allreduce_average(self, contributions, tag=()):
        """Average delivered to every worker in one communication (a headline round)."""
        out = self.gather_average(contributions, tag, headline=True, kind="allreduce_vectors")
        for p in range(self.P):
            self.local_models[p] = out.copy()
        return out

    def broadcast(self, x, tag=(), headline=True):
        x = np.asarray(x, dtype=float)
        for p in range(self.P):
            self.local_models[p] = x.copy()
        self._record("broadcast_model", [x], tag, headline)
        return x
