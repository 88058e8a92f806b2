"""Model backends: images in, embedding vectors out.

Every backend exposes ``embed``; backends that can also differentiate expose
``input_vjp`` (vector-Jacobian product w.r.t. the input image) and set
``supports_vjp``.  ``ExternalBackend`` talks newline-delimited JSON to another
process, see :mod:`starmask.serve` for the server side.
"""
from __future__ import annotations

import base64
import json
import math
import shlex
import socket
import subprocess
from typing import Sequence

import numpy as np

from .exceptions import BackendError, CapabilityError, DegenerateEmbeddingError, ShapeMismatchError

NORM_EPS = 1e-12


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"embedding sizes differ: {a.size} vs {b.size}")
    aa, bb = float(a @ a), float(b @ b)
    if aa < NORM_EPS**2 or bb < NORM_EPS**2:
        raise DegenerateEmbeddingError("cannot take the cosine of a zero-norm embedding")
    # sqrt(aa * aa) == aa exactly, so cos(a, a) is exactly 1
    return float(np.clip(a @ b / math.sqrt(aa * bb), -1.0, 1.0))


def cosine_grad(a, b) -> np.ndarray:
    """Gradient of cos(a, b) with respect to ``a``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        raise DegenerateEmbeddingError("cannot take the cosine of a zero-norm embedding")
    cos = a @ b / (na * nb)
    return b / (na * nb) - cos * a / (na * na)


class Backend:
    supports_vjp = False
    supports_logits = False
    dims: tuple[int, int, int] | None = None

    def embed(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def input_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} does not provide input gradients")

    def logits(self, x: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} does not provide class logits")

    def close(self):
        pass

    def _check_dims(self, x: np.ndarray):
        if self.dims is not None and tuple(x.shape) != tuple(self.dims):
            raise ShapeMismatchError(f"backend expects images of shape {self.dims}, got {x.shape}")


class PlantedRegionBackend(Backend):
    """Average-pooled luminance of the cells whose centers fall inside a set of discs.

    Cells outside the discs contribute zeros, so the embedding ignores every
    pixel outside the planted region.
    """

    supports_vjp = True

    def __init__(self, discs: Sequence[tuple[float, float, float]], pool: int = 2,
                 dims: tuple[int, int, int] | None = None):
        if not discs:
            raise ValueError("at least one disc is required")
        if pool < 1:
            raise ValueError("pool must be >= 1")
        self.discs = [tuple(map(float, d)) for d in discs]
        self.pool = int(pool)
        self.dims = tuple(dims) if dims is not None else None
        self._cells: dict[tuple[int, int], np.ndarray] = {}

    def region_cells(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._cells:
            ch, cw = height // self.pool, width // self.pool
            if ch == 0 or cw == 0:
                raise ShapeMismatchError(f"image {height}x{width} smaller than pool {self.pool}")
            # cell centers in normalized coordinates of the full image
            p = self.pool
            cx, cy = np.meshgrid(2.0 * (np.arange(cw) * p + p / 2) / width - 1.0,
                                 2.0 * (np.arange(ch) * p + p / 2) / height - 1.0)
            inside = np.zeros((ch, cw), dtype=bool)
            for dx, dy, r in self.discs:
                inside |= (cx - dx) ** 2 + (cy - dy) ** 2 <= r * r
            self._cells[key] = inside
        return self._cells[key]

    def region_pixels(self, height: int, width: int) -> np.ndarray:
        """Boolean (H, W) map of the pixels the embedding depends on."""
        cells = self.region_cells(height, width)
        ch, cw = cells.shape
        out = np.zeros((height, width), dtype=bool)
        out[: ch * self.pool, : cw * self.pool] = np.repeat(np.repeat(cells, self.pool, 0), self.pool, 1)
        return out

    def embed(self, x: np.ndarray) -> np.ndarray:
        self._check_dims(x)
        h, w, _ = x.shape
        cells = self.region_cells(h, w)
        ch, cw = cells.shape
        p, c = self.pool, x.shape[2]
        lum = x[: ch * p, : cw * p].sum(axis=2)
        pooled = lum.reshape(ch, p, cw, p).sum(axis=(1, 3)) / (p * p * c)
        return np.where(cells, pooled, 0.0).ravel()

    def input_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        self._check_dims(x)
        h, w, c = x.shape
        cells = self.region_cells(h, w)
        ch, cw = cells.shape
        p = self.pool
        cot = np.asarray(cotangent, dtype=float).reshape(ch, cw)
        per_cell = np.where(cells, cot, 0.0) / (p * p * c)
        grad = np.zeros((h, w, c))
        grad[: ch * p, : cw * p] = np.repeat(np.repeat(per_cell, p, 0), p, 1)[..., None]
        return grad


class LinearProjectionBackend(Backend):
    """e(x) = A @ vec(x) with a seeded Gaussian matrix A; logits are the embedding."""

    supports_vjp = True
    supports_logits = True

    def __init__(self, dims: tuple[int, int, int], embed_dim: int = 16, seed: int = 0):
        self.dims = tuple(int(d) for d in dims)
        n = int(np.prod(self.dims))
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((embed_dim, n)) / np.sqrt(n)

    def embed(self, x: np.ndarray) -> np.ndarray:
        self._check_dims(x)
        return self.matrix @ np.asarray(x, dtype=float).ravel()

    def input_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        self._check_dims(x)
        return (self.matrix.T @ np.asarray(cotangent, dtype=float)).reshape(self.dims)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.embed(x)


# -- wire format -------------------------------------------------------------

def encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def decode_array(text: str, shape=None) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(text), dtype="<f4").astype(float)
    return data.reshape(shape) if shape is not None else data


class ExternalBackend(Backend):
    """Client for a backend speaking newline-delimited JSON.

    ``endpoint`` is either ``tcp://host:port`` or a command line that starts a
    server reading requests on stdin and answering on stdout.
    """

    def __init__(self, endpoint: str, timeout: float | None = 60.0):
        self.endpoint = endpoint
        self._proc = None
        self._sock = None
        try:
            if endpoint.startswith("tcp://"):
                host, _, port = endpoint[len("tcp://"):].rpartition(":")
                self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
                self._reader = self._sock.makefile("rb")
                self._writer = self._sock.makefile("wb")
            else:
                self._proc = subprocess.Popen(
                    shlex.split(endpoint), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                )
                self._reader, self._writer = self._proc.stdout, self._proc.stdin
        except (OSError, ValueError) as exc:
            raise BackendError(f"cannot reach backend {endpoint!r}: {exc}") from exc
        hello = self._request({"op": "handshake"})
        self.dims = tuple(hello["dims"]) if hello.get("dims") else None
        self.embed_dim = int(hello["embed_dim"])
        self.supports_vjp = bool(hello.get("supports_vjp", False))
        self.supports_logits = bool(hello.get("supports_logits", False))

    def _request(self, payload: dict) -> dict:
        try:
            self._writer.write((json.dumps(payload) + "\n").encode("utf-8"))
            self._writer.flush()
            line = self._reader.readline()
        except OSError as exc:
            raise BackendError(f"transport failure talking to {self.endpoint!r}: {exc}") from exc
        if not line:
            raise BackendError(f"backend {self.endpoint!r} closed the connection")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendError(f"malformed reply from backend: {line[:200]!r}") from exc
        if reply.get("ok") is False:
            raise BackendError(f"backend error: {reply.get('error', 'unknown')}")
        return reply

    def embed(self, x: np.ndarray) -> np.ndarray:
        self._check_dims(x)
        reply = self._request({"op": "embed", "image": encode_array(x)})
        return np.asarray(reply["embedding"], dtype=float)

    def input_vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        if not self.supports_vjp:
            return super().input_vjp(x, cotangent)
        reply = self._request({"op": "vjp", "image": encode_array(x),
                               "cotangent": [float(v) for v in cotangent]})
        return decode_array(reply["grad"], x.shape)

    def logits(self, x: np.ndarray) -> np.ndarray:
        if not self.supports_logits:
            return super().logits(x)
        reply = self._request({"op": "logits", "image": encode_array(x)})
        return np.asarray(reply["logits"], dtype=float)

    def close(self):
        for stream in (getattr(self, "_writer", None), getattr(self, "_reader", None)):
            try:
                if stream is not None:
                    stream.close()
            except OSError:
                pass
        if self._sock is not None:
            self._sock.close()
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
