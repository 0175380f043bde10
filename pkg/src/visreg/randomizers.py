"""Visual randomizers and the spaces they are sampled from."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import CartpoleState, GridState, grid_payload, paint, paint_planes, render_labels

BACKGROUND_COLOR = "background_color"
XI_TAG = "xi_tag"


@dataclass(frozen=True)
class Randomizer:
    """A map from randomization-free payloads to observations.

    ``background_color`` paints label stacks (k, H, W) into (3k, H, W)
    rasters; ``xi_tag`` appends ``scale * xi`` to a grid position.
    """
    kind: str
    params: tuple[float, ...]
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind == BACKGROUND_COLOR:
            if len(self.params) != 3 or not all(0.0 <= p <= 1.0 for p in self.params):
                raise ValueError(f"background colour must be RGB in [0, 1], got {self.params}")
        elif self.kind == XI_TAG:
            if len(self.params) != 1:
                raise ValueError("xi_tag takes exactly one parameter")
        else:
            raise ValueError(f"unknown randomizer kind {self.kind!r}")

    def __call__(self, payload: np.ndarray) -> np.ndarray:
        return observe(payload, self)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}


def color(r, g, b) -> Randomizer:
    return Randomizer(BACKGROUND_COLOR, (r, g, b))


def xi(value, scale: float = 1.0) -> Randomizer:
    return Randomizer(XI_TAG, (value,), scale)


def observe(payload: np.ndarray, phi: Randomizer) -> np.ndarray:
    """Observation for one payload."""
    payload = np.asarray(payload)
    if phi.kind == XI_TAG:
        if payload.shape[-1:] != (2,):
            raise TypeError("xi_tag randomizer needs a gridworld payload")
        tag = np.full(payload.shape[:-1] + (1,), phi.scale * phi.params[0])
        return np.concatenate([payload.astype(np.float64), tag], axis=-1)
    if payload.ndim < 2 or payload.dtype != np.uint8:
        raise TypeError("background_color randomizer needs a raster label payload")
    if payload.ndim == 2:  # a single frame
        payload = payload[None]
    lead = payload.shape[:-3]
    flat = payload.reshape((-1,) + payload.shape[-3:])
    bg = np.broadcast_to(np.asarray(phi.params, dtype=np.float64), (len(flat), 3))
    out = paint_planes(flat, bg)
    return out.reshape(lead + out.shape[1:])


def observe_batch(payloads: np.ndarray, params: np.ndarray, kind: str,
                  scale: float = 1.0) -> np.ndarray:
    """Observations for a batch with one randomizer parameter row per item."""
    params = np.asarray(params, dtype=np.float64)
    if kind == XI_TAG:
        return np.concatenate([payloads.astype(np.float64), scale * params[:, :1]], axis=1)
    return paint_planes(payloads, params)


def apply(phi: Randomizer, s, size: int = 32) -> np.ndarray:
    """Observation of a single environment state (one frame for cartpole)."""
    if isinstance(s, GridState):
        if phi.kind != XI_TAG:
            raise TypeError("gridworld states take an xi_tag randomizer")
        return observe(grid_payload(s), phi)
    if isinstance(s, CartpoleState):
        if phi.kind != BACKGROUND_COLOR:
            raise TypeError("cartpole states take a background_color randomizer")
        return observe(render_labels(s, size)[None], phi)
    return observe(s, phi)


# --- spaces ---------------------------------------------------------------------

@dataclass(frozen=True)
class RandomizationSpace:
    """``rgb_box``/``rgb_union`` hold boxes as ((lo, hi), ...); ``xi_set`` holds values."""
    kind: str
    reference: Randomizer
    boxes: tuple = ()
    values: tuple = ()
    xi_scale: float = 1.0

    def __post_init__(self):
        if self.kind in ("rgb_box", "rgb_union"):
            boxes = tuple((tuple(map(float, lo)), tuple(map(float, hi))) for lo, hi in self.boxes)
            object.__setattr__(self, "boxes", boxes)
            if not boxes or (self.kind == "rgb_box" and len(boxes) != 1):
                raise ValueError(f"{self.kind} needs {'one box' if self.kind == 'rgb_box' else 'boxes'}")
            for lo, hi in boxes:
                if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
                    raise ValueError(f"bad box {lo}..{hi}")
                if any(v < 0 or v > 1 for v in lo + hi):
                    raise ValueError(f"box {lo}..{hi} leaves the RGB cube")
        elif self.kind == "xi_set":
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
            if not self.values:
                raise ValueError("xi_set needs values")
        else:
            raise ValueError(f"unknown space kind {self.kind!r}")
        if not self.contains(self.reference):
            raise ValueError("reference randomizer lies outside the space")

    @property
    def randomizer_kind(self) -> str:
        return XI_TAG if self.kind == "xi_set" else BACKGROUND_COLOR

    def contains(self, phi: Randomizer) -> bool:
        if phi.kind != self.randomizer_kind:
            return False
        if self.kind == "xi_set":
            return phi.params[0] in self.values
        p = phi.params
        return any(all(l <= v <= h for l, v, h in zip(lo, p, hi)) for lo, hi in self.boxes)

    def sample(self, rng: np.random.Generator) -> Randomizer:
        if self.kind == "xi_set":
            return xi(self.values[int(rng.integers(len(self.values)))], self.xi_scale)
        if len(self.boxes) == 1:
            lo, hi = self.boxes[0]
        else:
            vols = np.array([np.prod(np.subtract(hi, lo)) for lo, hi in self.boxes])
            w = vols / vols.sum() if vols.sum() > 0 else np.full(len(vols), 1 / len(vols))
            lo, hi = self.boxes[int(rng.choice(len(self.boxes), p=w))]
        return color(*rng.uniform(lo, hi))

    def grid(self, n: int = 5) -> list[Randomizer]:
        """A discretization of the space: every value of an xi set, or an
        n^3 lattice per box."""
        if self.kind == "xi_set":
            return [xi(v, self.xi_scale) for v in self.values]
        out = []
        for lo, hi in self.boxes:
            axes = [np.linspace(l, h, n) if h > l else np.array([l]) for l, h in zip(lo, hi)]
            out.extend(color(r, g, b) for r in axes[0] for g in axes[1] for b in axes[2])
        return out

    def collapsed(self) -> "RandomizationSpace":
        """The degenerate space containing only the reference."""
        if self.kind == "xi_set":
            return RandomizationSpace("xi_set", self.reference, values=self.reference.params,
                                      xi_scale=self.xi_scale)
        p = self.reference.params
        return RandomizationSpace("rgb_box", self.reference, boxes=((p, p),))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "reference": list(self.reference.params)}
        if self.kind == "xi_set":
            d["values"] = list(self.values)
            d["xi_scale"] = self.xi_scale
        else:
            d["boxes"] = [[list(lo), list(hi)] for lo, hi in self.boxes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationSpace":
        kind = d["kind"]
        if kind == "xi_set":
            scale = float(d.get("xi_scale", 1.0))
            return cls(kind, xi(d["reference"][0] if isinstance(d["reference"], (list, tuple)) else d["reference"], scale),
                       values=tuple(d["values"]), xi_scale=scale)
        return cls(kind, color(*d["reference"]), boxes=tuple((b[0], b[1]) for b in d["boxes"]))


WHITE = (1.0, 1.0, 1.0)


def small_space() -> RandomizationSpace:
    return RandomizationSpace("rgb_box", color(*WHITE), boxes=(((0.5, 0.5, 0.5), WHITE),))


def big_space() -> RandomizationSpace:
    return RandomizationSpace("rgb_box", color(*WHITE), boxes=(((0.5, 0.0, 0.0), WHITE),))


def split_space() -> RandomizationSpace:
    return RandomizationSpace("rgb_union", color(*WHITE),
                              boxes=(((0.0, 0.0, 0.0), (0.2, 0.2, 0.2)), ((0.8, 0.8, 0.8), WHITE)))


def xi_space(values=(5.0, -5.0), reference: float = 5.0, scale: float = 1.0) -> RandomizationSpace:
    return RandomizationSpace("xi_set", xi(reference, scale), values=tuple(values), xi_scale=scale)


PRESET_SPACES = {"small": small_space, "big": big_space, "split": split_space, "xi": xi_space}


# --- distances --------------------------------------------------------------------

def distance(a: np.ndarray, b: np.ndarray, norm: str = "l2") -> np.ndarray:
    """Distance between flattened observations; batched over the leading axis
    when both inputs have one."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d.reshape(d.shape[0], -1) if d.ndim > 1 else d[None]
    if norm == "l2":
        out = np.sqrt(np.einsum("ij,ij->i", d, d))
    elif norm == "max":
        out = np.abs(d).max(axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out


def sup_distance(phi1: Randomizer, phi2: Randomizer, payloads, norm: str = "l2") -> float:
    """max over the given payloads of |phi1(s) - phi2(s)|."""
    payloads = list(payloads)
    if not payloads:
        raise ValueError("sup_distance needs at least one state")
    return max(float(distance(observe(p, phi1)[None], observe(p, phi2)[None], norm)[0])
               for p in payloads)
