"""Channelized high-contrast permeability fields.

Each channel is a band of constant thickness around the sinusoidal
centerline ``y(x) = y0 + a sin(2 pi f x + phase)`` crossing the unit square
from the left side to the right side. Fields are rasterized at element
centers: ``contrast`` inside a channel, 1 elsewhere.
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import MeshError, PlacementError

BACKGROUND = 1.0
DEFAULT_CONTRAST = 1000.0
MAX_PLACEMENT_TRIES = 1000

# sampling ranges for generated channels
AMPLITUDE_RANGE = (0.03, 0.08)
FREQUENCY_RANGE = (0.5, 1.5)
THICKNESS_RANGE = (0.08, 0.12)


@dataclass(frozen=True)
class ChannelSpec:
    y0: float
    amplitude: float
    frequency: float
    thickness: float
    phase: float

    def centerline(self, x):
        return self.y0 + self.amplitude * np.sin(2 * np.pi * self.frequency * x + self.phase)

    def inside_domain(self):
        reach = abs(self.amplitude) + self.thickness / 2
        return self.thickness > 0 and self.y0 - reach > 0 and self.y0 + reach < 1

    def mask(self, points):
        """Boolean membership of ``points`` (shape ``(n, 2)``) in the channel."""
        points = np.asarray(points, float)
        return np.abs(points[:, 1] - self.centerline(points[:, 0])) <= self.thickness / 2


@dataclass(frozen=True, eq=False)
class PermField:
    """Per-element permeability on an ``nx`` by ``ny`` grid."""

    values: np.ndarray = field(repr=False)
    channels: tuple
    contrast: float
    nx: int
    ny: int
    seed: object = None
    background: float = BACKGROUND

    @property
    def grid(self):
        """Values reshaped to ``(ny, nx)``, row ``j`` holding elements ``j*nx .. j*nx+nx-1``."""
        return self.values.reshape(self.ny, self.nx)

    def channel_masks(self, mesh):
        centers = mesh.element_centers
        return [ch.mask(centers) for ch in self.channels]

    def to_json(self):
        return {
            "nx": self.nx, "ny": self.ny, "contrast": self.contrast,
            "background": self.background, "seed": self.seed,
            "channels": [asdict(ch) for ch in self.channels],
        }


def rasterize(channels, contrast, mesh, seed=None):
    """Build the element field from channel specs."""
    values = np.full(mesh.n_elements, BACKGROUND)
    centers = mesh.element_centers
    for ch in channels:
        values[ch.mask(centers)] = contrast
    values.setflags(write=False)
    return PermField(values, tuple(channels), float(contrast), mesh.nx, mesh.ny, seed)


def _valid_layout(channels, mesh):
    if not all(ch.inside_domain() for ch in channels):
        return False
    centers = mesh.element_centers
    masks = [ch.mask(centers).reshape(mesh.ny, mesh.nx) for ch in channels]
    for mk in masks:
        # every element column must be crossed, and the band must be one piece
        if not mk.any(axis=0).all():
            return False
        if ndimage.label(mk)[1] != 1:
            return False
    # disjoint and not edge-adjacent, so each channel stays its own component
    grown = [ndimage.binary_dilation(mk) for mk in masks]
    for a in range(len(masks)):
        for b in range(a + 1, len(masks)):
            if np.any(grown[a] & masks[b]):
                return False
    return True


def _sample_channel(rng):
    amplitude = rng.uniform(*AMPLITUDE_RANGE)
    thickness = rng.uniform(*THICKNESS_RANGE)
    reach = amplitude + thickness / 2
    return ChannelSpec(
        y0=rng.uniform(reach + 0.02, 1 - reach - 0.02),
        amplitude=amplitude,
        frequency=rng.uniform(*FREQUENCY_RANGE),
        thickness=thickness,
        phase=rng.uniform(0, 2 * np.pi),
    )


def gen_channelized(seed, n_channels, contrast, mesh):
    """Random field with ``n_channels`` disjoint sinusoidal channels.

    Channel sets are redrawn until the rasterized channels are pairwise
    disjoint; after ``MAX_PLACEMENT_TRIES`` failures a
    :class:`PlacementError` is raised.
    """
    if n_channels < 0:
        raise ValueError("n_channels must be non-negative")
    if contrast < 1:
        raise ValueError(f"contrast must be >= 1, got {contrast}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_PLACEMENT_TRIES):
        channels = [_sample_channel(rng) for _ in range(n_channels)]
        if _valid_layout(channels, mesh):
            return rasterize(channels, contrast, mesh, seed)
    raise PlacementError(
        f"could not place {n_channels} disjoint channels in {MAX_PLACEMENT_TRIES} tries")


def _jitter(ch, magnitude, rng):
    u = rng.uniform(-magnitude, magnitude, size=5)
    # position and phase shift on the scale of the channel thickness
    return ChannelSpec(
        y0=ch.y0 + u[0] * ch.thickness,
        amplitude=ch.amplitude * (1 + u[1]),
        frequency=ch.frequency * (1 + u[2]),
        thickness=ch.thickness * (1 + u[3]),
        phase=ch.phase + u[4],
    )


def perturb(field, magnitude, seed, mesh=None):
    """Jitter the channel parameters of ``field`` and re-rasterize.

    Every parameter moves by a uniform relative amount bounded by
    ``magnitude``: amplitude, frequency and thickness relative to their own
    value, the offset ``y0`` relative to the thickness and the phase in
    radians.
    """
    if not 0 <= magnitude < 1:
        raise ValueError(f"magnitude must lie in [0, 1), got {magnitude}")
    if magnitude == 0:
        return field
    if mesh is None:
        from .fem import build_mesh
        mesh = build_mesh(field.nx, field.ny)
    rng = np.random.default_rng(seed)
    for _ in range(MAX_PLACEMENT_TRIES):
        channels = [_jitter(ch, magnitude, rng) for ch in field.channels]
        if _valid_layout(channels, mesh):
            out = rasterize(channels, field.contrast, mesh, seed)
            return replace(out, seed={"parent": field.seed, "perturb": seed,
                                      "magnitude": magnitude})
    raise PlacementError("perturbed channels could not be placed disjointly")


def eval_on_elements(field, mesh):
    """Element coefficients of ``field`` on ``mesh`` as a fresh array."""
    if (field.nx, field.ny) != (mesh.nx, mesh.ny):
        raise MeshError(f"field is {field.nx}x{field.ny}, mesh is {mesh.nx}x{mesh.ny}")
    return np.array(field.values, dtype=float)


def uniform_field(mesh, value=BACKGROUND):
    values = np.full(mesh.n_elements, float(value))
    values.setflags(write=False)
    return PermField(values, (), float(value), mesh.nx, mesh.ny)


def save_field(field, csv_path, json_path=None):
    """Write the element grid as CSV (one row per element row) plus a JSON sidecar."""
    np.savetxt(csv_path, field.grid, delimiter=",", fmt="%.17g")
    if json_path is None:
        json_path = str(csv_path).rsplit(".", 1)[0] + ".json"
    with open(json_path, "w") as fh:
        json.dump(field.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_field(json_path, mesh=None):
    """Regenerate a field from its JSON sidecar."""
    with open(json_path) as fh:
        meta = json.load(fh)
    if mesh is None:
        from .fem import build_mesh
        mesh = build_mesh(meta["nx"], meta["ny"])
    channels = [ChannelSpec(**c) for c in meta["channels"]]
    return rasterize(channels, meta["contrast"], mesh, meta.get("seed"))
