"""Query-only access to a trained link predictor.

Attack code receives an :class:`OracleHandle` and nothing else from the
victim side: it can submit a history of adjacency matrices and read back a
binary predicted adjacency. Parameters, gradients and architecture stay
behind the closure.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class OracleHandle:
    __slots__ = ("_predict", "_lock", "_queries")

    def __init__(self, predict: Callable[[Sequence[np.ndarray]], np.ndarray]):
        self._predict = predict
        self._lock = threading.Lock()
        self._queries = 0

    @property
    def queries(self) -> int:
        return self._queries

    def reset_counter(self) -> None:
        with self._lock:
            self._queries = 0

    def predict_links(self, history: Sequence[np.ndarray]) -> np.ndarray:
        with self._lock:
            self._queries += 1
        out = np.array(self._predict([np.asarray(a) for a in history]), dtype=np.uint8)
        out.setflags(write=False)
        return out

    def __repr__(self):
        return f"OracleHandle(queries={self._queries})"


def predict_links(oracle: OracleHandle, history: Sequence[np.ndarray]) -> np.ndarray:
    return oracle.predict_links(history)
