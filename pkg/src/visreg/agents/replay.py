from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..randomizers import observe_batch


@dataclass
class Transition:
    """One six-tuple record.

    Observations are produced on demand from the stored payloads and the
    randomizer parameters that were active when the step was taken, so the
    sampled observation is always the one seen at storage time.
    """
    payload: np.ndarray
    next_payload: np.ndarray
    action: int
    reward: float
    terminal: bool
    phi_ref: np.ndarray
    phi_sampled: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, kind: str, scale: float = 1.0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.kind = kind
        self.scale = scale
        self.cursor = 0
        self.size = 0
        self._arrays = None

    def __len__(self):
        return self.size

    def _alloc(self, tr: Transition):
        c = self.capacity
        p = np.asarray(tr.payload)
        self._arrays = {
            "payload": np.zeros((c,) + p.shape, p.dtype),
            "next_payload": np.zeros((c,) + p.shape, p.dtype),
            "action": np.zeros(c, np.int64),
            "reward": np.zeros(c),
            "terminal": np.zeros(c, bool),
            "phi_ref": np.zeros((c, len(tr.phi_ref))),
            "phi_sampled": np.zeros((c, len(tr.phi_sampled))),
        }

    def push(self, tr: Transition) -> None:
        if self._arrays is None:
            self._alloc(tr)
        i = self.cursor
        for name, arr in self._arrays.items():
            arr[i] = getattr(tr, name)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, i: int) -> Transition:
        if not 0 <= i < self.size:
            raise IndexError(i)
        a = self._arrays
        return Transition(a["payload"][i], a["next_payload"][i], int(a["action"][i]),
                          float(a["reward"][i]), bool(a["terminal"][i]),
                          a["phi_ref"][i], a["phi_sampled"][i])

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def batch(self, idx: np.ndarray, need_sampled: bool = True) -> dict:
        a = self._arrays
        out = {
            "obs": observe_batch(a["payload"][idx], a["phi_ref"][idx], self.kind, self.scale),
            "next_obs": observe_batch(a["next_payload"][idx], a["phi_ref"][idx], self.kind, self.scale),
            "action": a["action"][idx],
            "reward": a["reward"][idx],
            "terminal": a["terminal"][idx],
        }
        if need_sampled:
            out["obs_sampled"] = observe_batch(a["payload"][idx], a["phi_sampled"][idx], self.kind, self.scale)
        return out
