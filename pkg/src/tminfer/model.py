"""Domain types, ground-truth channel construction, and synthetic data generation.

The physical picture is a two-edge linear scattering channel: a w x w frame of
input intensities is scrambled into a w x w frame of output intensities,

    out[g] = sum_a T[g, a] * in[a] + sigma[g] * eps[g],

with ``T`` a dense nonnegative intensity transmission matrix and ``eps`` standard
normal channel noise.  Everything downstream (pseudolikelihood fitting,
decimation, extraction) operates on the concatenated site vector
``I = [in, out]`` of length ``n = 2 * w**2``; input channels occupy sites
``0 .. n_half-1`` and output channels sites ``n_half .. n-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Dimensions",
    "TransmissionMatrix",
    "NoiseSpec",
    "Sample",
    "Dataset",
    "GroundTruthCoupling",
    "build_random_tm",
    "transmit",
    "generate_dataset",
    "reverse_dataset",
    "assemble_ground_truth_coupling",
]


def _readonly(arr: np.ndarray) -> np.ndarray:
    """Return a float64 C-contiguous view/copy flagged read-only."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out is arr:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dimensions:
    """Geometry of the square I/O frames.

    Attributes
    ----------
    w : int
        Pixels per side of the square input (and output) frame.
    """

    w: int

    def __post_init__(self) -> None:
        if not isinstance(self.w, (int, np.integer)) or self.w < 2:
            raise ValueError(f"frame side must be an integer >= 2, got {self.w!r}")

    @property
    def n_half(self) -> int:
        """Channels per side: w**2."""
        return self.w * self.w

    @property
    def n(self) -> int:
        """Total sites in the concatenated input+output vector: 2 * w**2."""
        return 2 * self.n_half


@dataclass(frozen=True)
class TransmissionMatrix:
    """Dense n_half x n_half intensity map between the two fiber ends.

    ``role`` records which direction the map describes: a ``direct`` matrix
    sends input intensities to output intensities, an ``inverse`` one sends
    outputs back to inputs.  Generated ground-truth direct matrices are
    nonnegative with unit row sums; inferred matrices carry no such guarantee.
    """

    dims: Dimensions
    entries: np.ndarray
    role: str = "direct"

    def __post_init__(self) -> None:
        if self.role not in ("direct", "inverse"):
            raise ValueError(f"role must be 'direct' or 'inverse', got {self.role!r}")
        m = np.asarray(self.entries, dtype=np.float64)
        nh = self.dims.n_half
        if m.shape != (nh, nh):
            raise ValueError(f"entries must have shape ({nh}, {nh}), got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transmission matrix entries must all be finite")
        object.__setattr__(self, "entries", _readonly(m))


@dataclass(frozen=True)
class NoiseSpec:
    """Per-output-channel Gaussian noise: standard deviations and an RNG seed.

    ``sigma`` may be a scalar (homogeneous noise) or a length-n_half vector.
    ``seed`` is an optional default seed for generators that take one of these.
    """

    sigma: float | np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim > 1:
            raise ValueError("sigma must be a scalar or a 1-d vector")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("sigma must be finite and nonnegative")
        object.__setattr__(self, "sigma", s if s.ndim == 0 else _readonly(s))

    def sigma_vector(self, n_half: int) -> np.ndarray:
        """Broadcast sigma to a length-``n_half`` vector."""
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim == 0:
            return np.full(n_half, float(s))
        if s.shape != (n_half,):
            raise ValueError(f"sigma vector has length {s.shape[0]}, expected {n_half}")
        return s.copy()


@dataclass(frozen=True)
class Sample:
    """One paired observation: input and output intensity vectors."""

    input: np.ndarray
    output: np.ndarray

    def __post_init__(self) -> None:
        i = np.asarray(self.input, dtype=np.float64)
        o = np.asarray(self.output, dtype=np.float64)
        if i.ndim != 1 or o.ndim != 1 or i.shape != o.shape:
            raise ValueError("input and output must be 1-d vectors of equal length")
        if not (np.all(np.isfinite(i)) and np.all(np.isfinite(o))):
            raise ValueError("sample intensities must all be finite")
        object.__setattr__(self, "input", _readonly(i))
        object.__setattr__(self, "output", _readonly(o))

    def sites(self) -> np.ndarray:
        """Concatenated site vector [input, output] of length n."""
        return np.concatenate([self.input, self.output])


@dataclass(frozen=True)
class Dataset:
    """M paired intensity observations plus generation metadata.

    Samples are stored as two (M, n_half) arrays, row m holding sample m.
    ``direction`` is ``forward`` for as-measured pairs and ``reversed`` when
    input/output have been swapped (the representation used to infer the
    inverse map).  ``meta`` carries seed, sigma, and a source description.
    """

    dims: Dimensions
    inputs: np.ndarray
    outputs: np.ndarray
    direction: str = "forward"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.direction not in ("forward", "reversed"):
            raise ValueError(f"direction must be 'forward' or 'reversed', got {self.direction!r}")
        i = np.asarray(self.inputs, dtype=np.float64)
        o = np.asarray(self.outputs, dtype=np.float64)
        nh = self.dims.n_half
        if i.ndim != 2 or i.shape[1] != nh or o.shape != i.shape:
            raise ValueError(f"inputs/outputs must both have shape (M, {nh})")
        if i.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if not (np.all(np.isfinite(i)) and np.all(np.isfinite(o))):
            raise ValueError("dataset intensities must all be finite")
        object.__setattr__(self, "inputs", _readonly(i))
        object.__setattr__(self, "outputs", _readonly(o))

    @property
    def m_samples(self) -> int:
        return self.inputs.shape[0]

    def sample(self, m: int) -> Sample:
        return Sample(self.inputs[m], self.outputs[m])

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(m) for m in range(self.m_samples)]

    def site_matrix(self) -> np.ndarray:
        """(M, n) matrix of concatenated site vectors, one sample per row."""
        return np.hstack([self.inputs, self.outputs])


@dataclass(frozen=True)
class GroundTruthCoupling:
    """Symmetric n x n interaction matrix assembled from a known channel.

    Block structure over [input | output] sites:

        [ -T^T T    2 T^T ]
        [  2 T     -Id    ]

    Used only to validate inference results, never inside inference itself.
    """

    j: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.j, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("coupling matrix must be square")
        object.__setattr__(self, "j", _readonly(m))


def build_random_tm(dims: Dimensions, density: float, seed: int | None = None) -> TransmissionMatrix:
    """Draw a random sparse row-stochastic ground-truth transmission matrix.

    Each entry is independently activated with probability ``density`` and set
    to 1, then every row is divided by its own active count, so each row sums
    to exactly 1.  A row that receives no activation gets one uniformly random
    element activated so the normalization is always defined.

    Parameters
    ----------
    dims : Dimensions
    density : float
        Activation probability, in (0, 1].
    seed : int, optional
        Seed for the activation draw.

    Returns
    -------
    TransmissionMatrix
        Direct-role matrix with nonnegative entries and unit row sums.
    """
    if not (0.0 < density <= 1.0):
        raise ValueError(f"density must lie in (0, 1], got {density!r}")
    nh = dims.n_half
    if density * nh < 1.0:
        raise ValueError(
            f"density {density} gives an expected {density * nh:.3g} active elements "
            f"per row of {nh}; need density * n_half >= 1"
        )
    rng = np.random.default_rng(seed)
    active = rng.random((nh, nh)) < density
    # Repair empty rows in row order so the draw sequence stays reproducible.
    for g in np.flatnonzero(~active.any(axis=1)):
        active[g, int(rng.integers(0, nh))] = True
    counts = active.sum(axis=1)
    entries = active.astype(np.float64) / counts[:, None]
    return TransmissionMatrix(dims=dims, entries=entries, role="direct")


def transmit(
    tm: TransmissionMatrix,
    input: np.ndarray,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Propagate one input frame through the channel with additive noise.

    ``out[g] = sum_a T[g, a] * in[a] + sigma[g] * eps[g]`` with ``eps`` drawn
    standard normal from ``rng``.  The output is not clamped: noise is allowed
    to push values outside [0, 1].
    """
    x = np.asarray(input, dtype=np.float64)
    nh = tm.dims.n_half
    if x.shape != (nh,):
        raise ValueError(f"input must have shape ({nh},), got {x.shape}")
    sigma = noise.sigma_vector(nh)
    eps = rng.standard_normal(nh)
    return tm.entries @ x + sigma * eps


def generate_dataset(
    tm: TransmissionMatrix,
    m_samples: int,
    noise: NoiseSpec,
    seed: int | None = None,
    source: str = "synthetic",
) -> Dataset:
    """Generate M paired samples through a known channel.

    Inputs are i.i.d. uniform on [0, 1] per channel.  The draw order is fixed:
    all inputs first (sample-major, channel-minor), then all noise deviates,
    so a fixed seed reproduces the dataset bit for bit.
    """
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    if seed is None:
        seed = noise.seed
    nh = tm.dims.n_half
    rng = np.random.default_rng(seed)
    inputs = rng.random((m_samples, nh))
    eps = rng.standard_normal((m_samples, nh))
    sigma = noise.sigma_vector(nh)
    outputs = inputs @ tm.entries.T + sigma[None, :] * eps
    meta = {
        "seed": seed,
        "sigma": noise.sigma.tolist() if np.ndim(noise.sigma) else float(noise.sigma),
        "source": source,
    }
    return Dataset(dims=tm.dims, inputs=inputs, outputs=outputs, direction="forward", meta=meta)


def reverse_dataset(ds: Dataset) -> Dataset:
    """Swap input/output per sample, preserving order.

    The reversed dataset feeds the same fitting pipeline to infer the inverse
    map.  Reversing twice is rejected to prevent a silent double swap.
    """
    if ds.direction != "forward":
        raise ValueError("dataset is already reversed")
    meta = dict(ds.meta)
    meta["source"] = f"{meta.get('source', 'unknown')} (reversed)"
    return replace(ds, inputs=ds.outputs, outputs=ds.inputs, direction="reversed", meta=meta)


def assemble_ground_truth_coupling(tm: TransmissionMatrix) -> GroundTruthCoupling:
    """Assemble the symmetric block coupling matrix of a known direct channel."""
    if tm.role != "direct":
        raise ValueError("ground-truth coupling is defined for direct-role matrices")
    t = tm.entries
    nh = tm.dims.n_half
    j = np.empty((2 * nh, 2 * nh), dtype=np.float64)
    j[:nh, :nh] = -(t.T @ t)
    j[:nh, nh:] = 2.0 * t.T
    j[nh:, :nh] = 2.0 * t
    j[nh:, nh:] = -np.eye(nh)
    return GroundTruthCoupling(j=j)
