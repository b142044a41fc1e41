"""Dense tanh MLPs with hand-written reverse mode, Adam, and checkpoint I/O.

Every model in the package exposes its trainable state as a ``dict`` mapping a
block name to a flat float64 array.  Losses return gradients in the same
layout, which keeps the optimizer, the finite-difference checker and the
checkpoint format oblivious to what the blocks mean.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Input does not match the declared layer sizes."""


class TapeError(RuntimeError):
    """Backward was requested without a matching recorded forward pass."""


@dataclass
class Tape:
    """Activations recorded by :meth:`Mlp.record` for one backward pass."""

    owner: int
    activations: list[np.ndarray]
    squeezed: bool
    used: bool = field(default=False)


class Mlp:
    """Fully connected network: tanh on hidden layers, identity output.

    Parameters live in one flat array ``params``; per-layer weights and biases
    are views into it, so in-place optimizer updates are seen by ``forward``.
    ``shapes`` lists ``(rows, cols)`` for every weight and bias block in
    storage order.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        out_scale: float = 1.0,
    ):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"layer sizes must be >= 2 positive ints, got {sizes}")
        self.sizes = sizes
        self.shapes: list[tuple[int, int]] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.shapes.append((fan_in, fan_out))
            self.shapes.append((1, fan_out))
        self.params = np.zeros(sum(r * c for r, c in self.shapes))
        self._weights: list[np.ndarray] = []
        self._biases: list[np.ndarray] = []
        offset = 0
        for k, (r, c) in enumerate(self.shapes):
            view = self.params[offset : offset + r * c].reshape(r, c)
            offset += r * c
            (self._weights if k % 2 == 0 else self._biases).append(view)
        if rng is not None:
            self.reinitialize(rng, out_scale)

    def reinitialize(self, rng: np.random.Generator, out_scale: float = 1.0) -> None:
        # uniform with variance 1/fan_in; biases zero
        for k, w in enumerate(self._weights):
            bound = np.sqrt(3.0 / w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            if k == len(self._weights) - 1:
                w *= out_scale
        for b in self._biases:
            b[...] = 0.0

    @classmethod
    def identity(cls, dim: int) -> "Mlp":
        net = cls((dim, dim))
        net._weights[0][...] = np.eye(dim)
        return net

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        squeezed = x.ndim == 1
        if squeezed:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeError(
                f"expected input of width {self.sizes[0]}, got shape {np.shape(x)}"
            )
        return x, squeezed

    def forward(self, x) -> np.ndarray:
        h, squeezed = self._as_batch(x)
        last = len(self._weights) - 1
        for k, (w, b) in enumerate(zip(self._weights, self._biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
        return h[0] if squeezed else h

    __call__ = forward

    def record(self, x) -> tuple[np.ndarray, Tape]:
        """Forward pass that also returns the tape needed by :meth:`backward`."""
        h, squeezed = self._as_batch(x)
        acts = [h]
        last = len(self._weights) - 1
        for k, (w, b) in enumerate(zip(self._weights, self._biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
                acts.append(h)
        tape = Tape(owner=id(self), activations=acts, squeezed=squeezed)
        return (h[0] if squeezed else h), tape

    def backward(
        self, tape: Tape | None, upstream, per_sample: bool = False
    ) -> np.ndarray:
        """Gradient of ``sum(upstream * output)`` with respect to ``params``.

        With ``per_sample=True`` the result has one row per batch element
        instead of being summed over the batch.
        """
        if tape is None or tape.owner != id(self):
            raise TapeError("backward called without a forward pass recorded on this net")
        g = np.asarray(upstream, dtype=np.float64)
        if tape.squeezed and g.ndim == 1:
            g = g[None, :]
        batch = tape.activations[0].shape[0]
        if g.shape != (batch, self.sizes[-1]):
            raise ShapeError(f"upstream shape {g.shape} != {(batch, self.sizes[-1])}")
        tape.used = True
        chunks: list[np.ndarray] = []
        for k in range(len(self._weights) - 1, -1, -1):
            h_in = tape.activations[k]
            if per_sample:
                chunks.append(g.copy())
                chunks.append(np.einsum("bi,bj->bij", h_in, g).reshape(batch, -1))
            else:
                chunks.append(g.sum(axis=0))
                chunks.append((h_in.T @ g).ravel())
            if k > 0:
                g = (g @ self._weights[k].T) * (1.0 - h_in * h_in)
        # chunks were appended bias-then-weight from the last layer backwards
        return np.concatenate(chunks[::-1], axis=-1)

    def copy(self) -> "Mlp":
        twin = Mlp(self.sizes)
        twin.params[...] = self.params
        return twin


def zeros_like(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Params, max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    """Adam over a named set of parameter arrays, updated in place."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float | None = None,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = zeros_like(self.params)
        self.v = zeros_like(self.params)
        self.t = 0
        self.skipped = 0

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> bool:
        """Apply one update; returns False (and leaves params alone) on NaN/inf."""
        lr = self.lr if lr is None else lr
        grads = {k: np.array(grads[k], dtype=np.float64) for k in self.params if k in grads}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            logger.warning("non-finite gradient; Adam step %d aborted", self.t + 1)
            return False
        clip_grad_norm(grads, self.max_grad_norm)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


# --- finite differences -----------------------------------------------------


def finite_difference(
    fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Params, dict[str, np.ndarray]]:
    """Central differences of ``fn`` with respect to arrays perturbed in place.

    Returns ``(estimates, coords)``; when ``max_coords`` is set only a random
    subset of coordinates per block is probed and ``coords`` records which.
    """
    rng = rng or np.random.default_rng(0)
    est: Params = {}
    coords: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        vals = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            vals[j] = (up - down) / (2.0 * step)
        est[name] = vals
        coords[name] = idx
    return est, coords


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max coordinate-wise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradient_check(
    fn: Callable[[], float],
    grads: Mapping[str, np.ndarray],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic ``grads`` and central differences."""
    est, coords = finite_difference(fn, params, step, max_coords, rng)
    worst = 0.0
    for name, idx in coords.items():
        analytic = np.asarray(grads[name]).reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, est[name]))
    return worst


# --- checkpoints ------------------------------------------------------------

MAGIC = b"IMAPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated or from another format version."""


def encode_blocks(blocks: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<Q", data.size))
        out.append(data.tobytes())
    return b"".join(out)


def decode_blocks(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an IMAPCKPT checkpoint (bad magic string)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (size,) = struct.unpack("<Q", take(8))
        blocks[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last block")
    return blocks


def save_checkpoint(path, blocks: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_blocks(blocks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_blocks(Path(path).read_bytes())


def assign_blocks(target: Mapping[str, np.ndarray], blocks: Mapping[str, np.ndarray]) -> None:
    """Copy loaded ``blocks`` into existing parameter arrays, checking sizes."""
    missing = set(target) - set(blocks)
    if missing:
        raise CheckpointError(f"checkpoint lacks blocks: {sorted(missing)}")
    for name, arr in target.items():
        src = blocks[name]
        if src.size != arr.size:
            raise CheckpointError(f"block {name!r}: size {src.size} != expected {arr.size}")
        arr.reshape(-1)[...] = src
