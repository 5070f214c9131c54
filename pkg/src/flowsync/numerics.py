"""Grids, seeded random streams, and a small hand-written MLP.

Everything downstream (rendering, flow math, training, sampling) sits on the
three primitives in this module:

* ``Grid2D``: a single-channel frame stored as a flat row-major float64 array.
* ``RngStream``: a counter-based random stream keyed by ``(seed, stream_id)``.
  Two streams with different ids are statistically independent, and the same
  key always replays the same sequence bit for bit, which is what makes
  chunked sampling and training resume exact.
* ``MlpParams`` plus ``mlp_forward`` / ``mlp_backward``: a fixed tanh MLP
  family with analytically exact reverse-mode gradients. No autodiff graph,
  no framework; the backward pass is checked against finite differences in
  the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_UINT64_MAX = 2**64 - 1


# ---------------------------------------------------------------------------
# Grid2D
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Grid2D:
    """A height x width frame of real values, flat row-major.

    Pixel (x, y) with x the column and y the row lives at index y*width + x.
    Construction validates shape and finiteness, so any operation that builds
    its result as a Grid2D cannot silently return NaN or Inf.
    """

    height: int
    width: int
    values: np.ndarray

    def __eq__(self, other) -> bool:
        # Hand-rolled because the generated comparison trips over the array
        # field; value equality is exact, not approximate.
        if not isinstance(other, Grid2D):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ShapeError(f"grid dims must be positive, got {self.height}x{self.width}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.height * self.width:
            raise ShapeError(
                f"expected flat array of {self.height * self.width} values, "
                f"got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("grid contains non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, height: int, width: int) -> "Grid2D":
        return cls(height, width, np.zeros(height * width))

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "Grid2D":
        return cls(height, width, np.full(height * width, float(value)))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Grid2D":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeError(f"expected 2-D matrix, got shape {matrix.shape}")
        return cls(matrix.shape[0], matrix.shape[1], matrix.reshape(-1).copy())

    def as_matrix(self) -> np.ndarray:
        """Return a (height, width) view of the values."""
        return self.values.reshape(self.height, self.width)

    def with_values(self, values: np.ndarray) -> "Grid2D":
        """New grid of the same shape around a fresh flat value array."""
        return Grid2D(self.height, self.width, np.asarray(values, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def require_same_shape(a: Grid2D, b: Grid2D, what: str = "grids") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# RngStream
# ---------------------------------------------------------------------------


def _require_uint64(value: int, name: str) -> int:
    value = int(value)
    if not 0 <= value <= _UINT64_MAX:
        raise ContractError(f"{name} must fit in an unsigned 64-bit int, got {value}")
    return value


class RngStream:
    """A named substream of the global experiment randomness.

    Backed by the Philox counter-based bit generator with key
    ``(seed, stream_id)``. The counter lives inside the generator, so a
    stream is stateful across calls, but rebuilding the stream with the same
    key always replays the identical sequence. Streams with different ids
    never share state.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = _require_uint64(seed, "seed")
        self.stream_id = _require_uint64(stream_id, "stream_id")
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, n: int) -> np.ndarray:
        """n independent standard normal draws (float64)."""
        if n < 0:
            raise ContractError(f"draw count must be >= 0, got {n}")
        return self._gen.standard_normal(n)

    def uniform(self, low: float = 0.0, high: float = 1.0, n: int | None = None):
        if n is None:
            return float(self._gen.uniform(low, high))
        return self._gen.uniform(low, high, size=n)

    def integers(self, low: int, high: int, n: int | None = None):
        """Uniform integers in [low, high), numpy convention."""
        if n is None:
            return int(self._gen.integers(low, high))
        return self._gen.integers(low, high, size=n)


def gaussian_sample(rng: RngStream, n: int) -> np.ndarray:
    """n standard normal draws from the given stream, deterministic per key."""
    return rng.normal(n)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Dense MLP with tanh hidden layers and an identity output layer.

    weights[i] has shape (layer_sizes[i+1], layer_sizes[i]) and biases[i]
    shape (layer_sizes[i+1],). All float64.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"need >= 2 positive layer sizes, got {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("one weight and bias array per layer transition required")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]):
                raise ShapeError(
                    f"weights[{i}] shape {w.shape} != {(sizes[i + 1], sizes[i])}"
                )
            if b.shape != (sizes[i + 1],):
                raise ShapeError(f"biases[{i}] shape {b.shape} != {(sizes[i + 1],)}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i + 1] * (sizes[i] + 1) for i in range(len(sizes) - 1))


def init_mlp(layer_sizes, rng: RngStream, zero_last: bool = True) -> MlpParams:
    """Gaussian fan-in init; the output layer starts at zero by default.

    Zeroing the last layer makes the initial prediction exactly zero, so the
    first recorded training loss equals the mean squared norm of the
    regression targets. Handy as a fixed reference point.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        w = rng.normal(sizes[i + 1] * fan_in).reshape(sizes[i + 1], fan_in)
        w /= np.sqrt(fan_in)
        b = np.zeros(sizes[i + 1])
        if zero_last and i == len(sizes) - 2:
            w[:] = 0.0
        weights.append(w)
        biases.append(b)
    return MlpParams(sizes, weights, biases)


def _as_rows(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeError(f"{what} has length {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ShapeError(f"{what} rows have length {x.shape[1]}, expected {dim}")
        return x, False
    raise ShapeError(f"{what} must be 1-D or 2-D, got ndim={x.ndim}")


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass. Accepts a single input vector or a batch of row vectors."""
    rows, squeeze = _as_rows(x, params.layer_sizes[0], "input")
    h = rows
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.tanh(h)
    if not np.all(np.isfinite(h)):
        raise NumericError("mlp_forward produced non-finite output")
    return h[0] if squeeze else h


def mlp_backward(
    params: MlpParams, x: np.ndarray, output_grad: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact reverse-mode gradients of the forward map.

    Args:
        params: network parameters.
        x: input vector, or batch of row vectors.
        output_grad: dL/d(output), same shape as the forward output. For a
            batch, parameter gradients are summed over rows.

    Returns:
        (param_grads, input_grad) where param_grads is a list of
        (dL/dW_i, dL/db_i) in layer order and input_grad matches x's shape.
    """
    rows, squeeze = _as_rows(x, params.layer_sizes[0], "input")
    grad_rows, gsqueeze = _as_rows(output_grad, params.layer_sizes[-1], "output_grad")
    if squeeze != gsqueeze or rows.shape[0] != grad_rows.shape[0]:
        raise ShapeError("input and output_grad batch shapes disagree")

    # Forward, caching post-activation values per layer.
    acts = [rows]
    h = rows
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.tanh(h)
        acts.append(h)

    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.weights)
    g = grad_rows
    for i in range(last, -1, -1):
        if i != last:
            # acts[i + 1] is tanh(pre); d tanh = 1 - tanh^2.
            g = g * (1.0 - acts[i + 1] ** 2)
        gw = g.T @ acts[i]
        gb = g.sum(axis=0)
        param_grads[i] = (gw, gb)
        g = g @ params.weights[i]

    for gw, gb in param_grads:
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("mlp_backward produced non-finite gradients")
    input_grad = g[0] if squeeze else g
    return param_grads, input_grad
