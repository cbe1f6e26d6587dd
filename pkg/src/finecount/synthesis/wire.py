"""Adapter shell for out-of-process generator services.

Real diffusion backends run as separate processes (GPU workers, containers).
This module speaks a small framed protocol over any pair of binary streams,
typically a local socket or a child process's stdin/stdout:

  request   one JSON line: {"prompt": str, "seed": int} + "\\n"
  response  header: 7 x uint32 little-endian
                [L, H, S_text, p_h, p_w, image_len, meta_len]
            image_len bytes   PNG-encoded RGB image
            meta_len bytes    JSON {"token_spans": {word: [start, end]},
                                    "layers": [block ids]}
            L*H*S_text*p_h*p_w float32 little-endian attention values,
            laid out C-contiguously in (layer, head, token, patch) order.

The same framing runs in both directions of reuse: ``serve_one``/``serve_loop``
let a Python process expose any GeneratorBackend over the protocol, which is
also how the round-trip is tested.
"""

from __future__ import annotations

import io
import json
import socket
import struct
import subprocess

import numpy as np

from ..errors import BackendError
from .ops import AttentionStack, GenerationResult, GeneratorCapabilities

_HEADER = struct.Struct("<7I")


def _read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise BackendError(f"stream closed mid-message ({len(buf)}/{n} bytes)")
        buf += chunk
    return buf


def write_request(stream, prompt: str, seed: int) -> None:
    stream.write(json.dumps({"prompt": prompt, "seed": int(seed)}).encode() + b"\n")
    stream.flush()


def read_request(stream) -> tuple[str, int]:
    line = stream.readline()
    if not line:
        raise EOFError("request stream closed")
    try:
        req = json.loads(line)
        return str(req["prompt"]), int(req["seed"])
    except (ValueError, KeyError) as exc:
        raise BackendError(f"malformed request line: {exc}") from exc


def write_response(stream, result: GenerationResult) -> None:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(result.image, dtype=np.uint8)).save(buf, format="PNG")
    image_bytes = buf.getvalue()
    meta = {
        "token_spans": {w: [int(s), int(e)] for w, (s, e) in result.token_spans.items()},
        "layers": [int(b) for b in result.attention.layers],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    att = result.attention
    values = np.ascontiguousarray(att.values, dtype="<f4")
    L, H, S_text, _ = values.shape
    p_h, p_w = att.grid
    stream.write(_HEADER.pack(L, H, S_text, p_h, p_w, len(image_bytes), len(meta_bytes)))
    stream.write(image_bytes)
    stream.write(meta_bytes)
    stream.write(values.tobytes())
    stream.flush()


def read_response(stream) -> GenerationResult:
    from PIL import Image

    L, H, s_text, p_h, p_w, image_len, meta_len = _HEADER.unpack(
        _read_exact(stream, _HEADER.size)
    )
    image = np.asarray(Image.open(io.BytesIO(_read_exact(stream, image_len))).convert("RGB"))
    try:
        meta = json.loads(_read_exact(stream, meta_len))
    except ValueError as exc:
        raise BackendError(f"malformed response metadata: {exc}") from exc
    n_values = L * H * s_text * p_h * p_w
    raw = _read_exact(stream, 4 * n_values)
    values = np.frombuffer(raw, dtype="<f4").astype(float).reshape(L, H, s_text, p_h * p_w)
    stack = AttentionStack(values=values, layers=list(meta["layers"]), grid=(p_h, p_w))
    spans = {w: (int(s), int(e)) for w, (s, e) in meta["token_spans"].items()}
    return GenerationResult(image=image, attention=stack, token_spans=spans)


class RemoteGenerator:
    """GeneratorBackend over a reader/writer stream pair.

    Capabilities are declared by the caller's config: the protocol carries
    per-image payloads only, and properties like the captured block set are
    deployment facts about the remote service.
    """

    def __init__(self, reader, writer, capabilities: GeneratorCapabilities, process=None):
        self._reader = reader
        self._writer = writer
        self._caps = capabilities
        self._process = process

    def capabilities(self) -> GeneratorCapabilities:
        return self._caps

    def generate(self, prompt: str, seed: int) -> GenerationResult:
        write_request(self._writer, prompt, seed)
        return read_response(self._reader)

    def close(self) -> None:
        for stream in (self._writer, self._reader):
            try:
                stream.close()
            except OSError:
                pass
        if self._process is not None:
            self._process.wait(timeout=10)


def connect_tcp(host: str, port: int, capabilities: GeneratorCapabilities,
                timeout: float = 60.0) -> RemoteGenerator:
    sock = socket.create_connection((host, port), timeout=timeout)
    reader = sock.makefile("rb")
    writer = sock.makefile("wb")
    return RemoteGenerator(reader, writer, capabilities)


def spawn_worker(argv: list[str], capabilities: GeneratorCapabilities) -> RemoteGenerator:
    """Launch a worker process speaking the protocol on stdin/stdout."""
    proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    return RemoteGenerator(proc.stdout, proc.stdin, capabilities, process=proc)


def serve_one(reader, writer, backend) -> bool:
    """Answer a single request; returns False once the peer disconnects."""
    try:
        prompt, seed = read_request(reader)
    except EOFError:
        return False
    write_response(writer, backend.generate(prompt, seed))
    return True


def serve_loop(reader, writer, backend) -> None:
    while serve_one(reader, writer, backend):
        pass
