"""HTTP transport for guidance providers.

Wire format (all integers little-endian)::

    array   := magic "PGIM\\0\\0\\0\\1" | height u32 | width u32 | channels u32
               | height*width*channels float32 LE, row-major (H, W, C)
    header  := timestep f64 | noise_level f64 | seed u64 | prompt_len u32 | prompt UTF-8
    request := header | array
    response:= array

Endpoints: ``GET /health`` returns JSON ``{"protocol": "1", ...}``;
``POST /predict_noise`` and ``POST /denoise`` take a request and answer
with one array.  Errors come back as non-200 with a plain-text reason.
"""
from __future__ import annotations

import json
import logging
import struct
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from .guidance import Conditioning, GuidanceError, GuidanceProvider, IdentityEncoder

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"
MAGIC = b"PGIM\x00\x00\x00\x01"
_DIMS = struct.Struct("<III")
_HEADER = struct.Struct("<ddQI")
CONTENT_TYPE = "application/octet-stream"


class ProviderTimeout(GuidanceError):
    pass


class ProviderUnavailable(GuidanceError):
    pass


class MalformedResponse(GuidanceError):
    pass


class DimensionMismatch(GuidanceError):
    pass


class ProtocolError(ValueError):
    """A message could not be decoded."""


def encode_array(arr) -> bytes:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ProtocolError(f"arrays must be (H, W) or (H, W, C), got shape {a.shape}")
    return MAGIC + _DIMS.pack(*a.shape) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_array(buf: bytes, offset: int = 0):
    """Decode one array starting at ``offset``; returns ``(array, next_offset)``."""
    end = offset + len(MAGIC) + _DIMS.size
    if len(buf) < end or buf[offset:offset + len(MAGIC)] != MAGIC:
        raise ProtocolError("missing or wrong array magic")
    h, w, c = _DIMS.unpack_from(buf, offset + len(MAGIC))
    n = h * w * c * 4
    if len(buf) < end + n:
        raise ProtocolError(f"array payload truncated: need {n} bytes, have {len(buf) - end}")
    arr = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=end).reshape(h, w, c)
    return arr.astype(np.float32), end + n


def encode_request(array, timestep=0.0, noise_level=0.0, seed=0, prompt="") -> bytes:
    p = prompt.encode("utf-8")
    return _HEADER.pack(float(timestep), float(noise_level), int(seed), len(p)) + p + encode_array(array)


def decode_request(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise ProtocolError("request header truncated")
    t, nl, seed, plen = _HEADER.unpack_from(buf, 0)
    start = _HEADER.size
    if len(buf) < start + plen:
        raise ProtocolError("prompt truncated")
    try:
        prompt = buf[start:start + plen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"prompt is not UTF-8: {exc}") from None
    arr, end = decode_array(buf, start + plen)
    if end != len(buf):
        raise ProtocolError(f"{len(buf) - end} trailing bytes after array")
    return {"timestep": t, "noise_level": nl, "seed": seed, "prompt": prompt, "array": arr}


class RemoteProvider(GuidanceProvider):
    """Guidance provider backed by an HTTP service speaking the wire format above.

    The encoder stays local and is the identity unless one with an adjoint
    is supplied; a remote latent encoder cannot be differentiated over the wire.
    """

    def __init__(self, url: str, timeout: float = 30.0, encoder=None, session=None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.encoder = encoder if encoder is not None else IdentityEncoder()
        self.session = session or requests.Session()

    def _call(self, method, path, data=None):
        try:
            resp = self.session.request(method, self.url + path, data=data, timeout=self.timeout,
                                        headers={"Content-Type": CONTENT_TYPE} if data else None)
        except requests.Timeout as exc:
            raise ProviderTimeout(f"{path}: timed out after {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise ProviderUnavailable(f"{path}: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderUnavailable(f"{path}: HTTP {resp.status_code} {resp.text[:200]}")
        return resp.content

    def health(self) -> dict:
        body = self._call("GET", "/health")
        try:
            info = json.loads(body)
        except ValueError as exc:
            raise MalformedResponse(f"/health: not JSON ({exc})") from None
        if not isinstance(info, dict) or "protocol" not in info:
            raise MalformedResponse("/health: missing protocol field")
        return info

    def _array_call(self, path, array, **header):
        body = self._call("POST", path, encode_request(array, **header))
        try:
            out, end = decode_array(body)
        except ProtocolError as exc:
            raise MalformedResponse(f"{path}: {exc}") from None
        if end != len(body):
            raise MalformedResponse(f"{path}: {len(body) - end} trailing bytes")
        a = np.asarray(array)
        want = a.shape if a.ndim == 3 else a.shape + (1,)
        if out.shape != want:
            raise DimensionMismatch(f"{path}: sent {want}, got {out.shape}")
        return out.reshape(a.shape).astype(a.dtype, copy=False)

    def predict_noise(self, z_t, t, cond: Conditioning):
        return self._array_call("/predict_noise", z_t, timestep=t, seed=cond.seed,
                                prompt=cond.prompt)

    def denoise(self, image, noise_level, cond: Conditioning):
        return self._array_call("/denoise", image, noise_level=noise_level, seed=cond.seed,
                                prompt=cond.prompt)


class _Handler(BaseHTTPRequestHandler):
    server_version = "pgim-provider/1"

    def log_message(self, fmt, *args):
        log.debug("provider server: " + fmt, *args)

    def _reply(self, code, body: bytes, ctype=CONTENT_TYPE):
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/health":
            return self._reply(404, b"unknown endpoint", "text/plain")
        body = json.dumps({"protocol": PROTOCOL_VERSION, "status": "ok",
                           "provider": type(self.server.provider).__name__}).encode()
        self._reply(200, body, "application/json")

    def do_POST(self):
        if self.path not in ("/predict_noise", "/denoise"):
            return self._reply(404, b"unknown endpoint", "text/plain")
        n = int(self.headers.get("Content-Length", 0))
        try:
            req = decode_request(self.rfile.read(n))
        except ProtocolError as exc:
            return self._reply(400, str(exc).encode(), "text/plain")
        arr = req["array"]
        cond = Conditioning(req["prompt"], req["seed"])
        prov = self.server.provider
        try:
            if self.path == "/predict_noise":
                out = prov.predict_noise(arr, req["timestep"], cond)
            else:
                out = prov.denoise(arr, req["noise_level"], cond)
        except Exception as exc:  # report provider faults to the client
            log.exception("provider raised")
            return self._reply(500, str(exc).encode(), "text/plain")
        self._reply(200, encode_array(out))


class ProviderServer:
    """Serve a local provider over HTTP on a background thread.

    Use as a context manager; ``url`` is valid once started.  Port 0 picks a
    free port.
    """

    def __init__(self, provider: GuidanceProvider, host="127.0.0.1", port=0):
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.provider = provider
        self.httpd.daemon_threads = True
        self.thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self.thread is not None:
            self.thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
