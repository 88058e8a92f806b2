"""Expose a built-in backend over the newline-delimited JSON protocol.

    python -m starmask.serve planted --disc 0.3,-0.2,0.25 --shape 64,64,3
    python -m starmask.serve linear --shape 16,16,1 --embed-dim 8 --tcp 5555

Requests and replies are one JSON object per line; failures are answered with
``{"ok": false, "error": ...}``.
"""
from __future__ import annotations

import argparse
import json
import socketserver
import sys
from typing import IO

import numpy as np

from .backends import Backend, LinearProjectionBackend, PlantedRegionBackend, decode_array, encode_array


def handle(backend: Backend, request: dict, embed_dim: int) -> dict:
    op = request.get("op")
    if op == "handshake":
        return {"ok": True, "dims": list(backend.dims) if backend.dims else None,
                "embed_dim": embed_dim, "supports_vjp": backend.supports_vjp,
                "supports_logits": backend.supports_logits}
    if backend.dims is None:
        raise ValueError("server backend has no fixed image shape")
    if op not in ("embed", "vjp", "logits"):
        raise ValueError(f"unknown op {op!r}")
    x = decode_array(request["image"], backend.dims)
    if op == "embed":
        return {"embedding": backend.embed(x).tolist()}
    if op == "vjp":
        grad = backend.input_vjp(x, np.asarray(request["cotangent"], dtype=float))
        return {"grad": encode_array(grad)}
    return {"logits": backend.logits(x).tolist()}


def serve_stream(backend: Backend, reader: IO[bytes], writer: IO[bytes]) -> None:
    """Answer requests until ``reader`` reaches end of file."""
    dims = backend.dims
    embed_dim = int(backend.embed(np.zeros(dims)).size) if dims else 0
    for line in iter(reader.readline, b""):
        if not line.strip():
            continue
        try:
            reply = handle(backend, json.loads(line), embed_dim)
        except Exception as exc:  # reported to the client, never fatal to the server
            reply = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        writer.write((json.dumps(reply) + "\n").encode("utf-8"))
        writer.flush()


def make_tcp_server(backend: Backend, host: str = "127.0.0.1", port: int = 0) -> socketserver.TCPServer:
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            serve_stream(backend, self.rfile, self.wfile)

    return socketserver.TCPServer((host, port), Handler)


def build_backend(args: argparse.Namespace) -> Backend:
    dims = tuple(int(v) for v in args.shape.split(","))
    if args.kind == "planted":
        discs = [tuple(float(v) for v in d.split(",")) for d in (args.disc or ["0.3,-0.2,0.25"])]
        return PlantedRegionBackend(discs, pool=args.pool, dims=dims)
    return LinearProjectionBackend(dims, embed_dim=args.embed_dim, seed=args.seed)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m starmask.serve", description=__doc__.splitlines()[0])
    parser.add_argument("kind", choices=["planted", "linear"])
    parser.add_argument("--shape", required=True, help="H,W,C")
    parser.add_argument("--disc", action="append", help="cx,cy,r (repeatable)")
    parser.add_argument("--pool", type=int, default=2)
    parser.add_argument("--embed-dim", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tcp", type=int, default=None, help="listen on this local port instead of stdio")
    args = parser.parse_args(argv)
    backend = build_backend(args)
    if args.tcp is not None:
        with make_tcp_server(backend, port=args.tcp) as server:
            server.serve_forever()
    else:
        serve_stream(backend, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
