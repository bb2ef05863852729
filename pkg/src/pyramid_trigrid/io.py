"""Persistence and configuration.

Grid file (``.ptg``), all integers u32 little-endian::

    "PTG1" | version | level_count | (resolution, depth, channels) * level_count
    | per level: float32 LE values in (plane, layer, channel, row, col) order

Weights file (``.ptw``) holds named arrays::

    "PTW1" | version | count | per array:
        name_len u32 | name UTF-8 | kind u8 (0 float32, 1 int64) | ndim u32 | dims u32*
        | payload LE

Images are written as 8-bit PNG for viewing plus a float32 sidecar in the
``PGIM`` array format for exact reuse.
"""
from __future__ import annotations

import os
import re
import struct
import tempfile
from io import BytesIO
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .grid import InvalidInput, PyramidTriGrid, TriGrid
from .remote import ProtocolError, decode_array, encode_array
from .render import Decoder, Renderer, ToRGB
from .synthesis import SynthesisLayer, SynthesisNetwork

GRID_MAGIC = b"PTG1"
GRID_VERSION = 1
WEIGHTS_MAGIC = b"PTW1"
WEIGHTS_VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes):
    """Write via a temporary file in the target directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


# -- grid files -----------------------------------------------------------------

def grid_to_bytes(pyr: PyramidTriGrid) -> bytes:
    head = [GRID_MAGIC, struct.pack("<II", GRID_VERSION, len(pyr.levels))]
    head += [struct.pack("<III", lv.resolution, lv.depth_layers, lv.channels) for lv in pyr.levels]
    body = [np.ascontiguousarray(lv.values, dtype="<f4").tobytes() for lv in pyr.levels]
    return b"".join(head + body)


def grid_from_bytes(buf: bytes) -> PyramidTriGrid:
    if buf[:4] != GRID_MAGIC:
        raise FormatError("not a grid file (bad magic)")
    if len(buf) < 12:
        raise FormatError("grid header truncated")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid file version {version}")
    off = 12
    if len(buf) < off + 12 * count:
        raise FormatError("grid level table truncated")
    dims = [struct.unpack_from("<III", buf, off + 12 * i) for i in range(count)]
    off += 12 * count
    levels = []
    for res, depth, ch in dims:
        n = 3 * depth * ch * res * res
        if len(buf) < off + 4 * n:
            raise FormatError(f"payload of level {res} truncated")
        vals = np.frombuffer(buf, "<f4", n, off).reshape(3, depth, ch, res, res).astype(np.float32)
        if not np.isfinite(vals).all():
            raise FormatError(f"level {res} contains non-finite values")
        off += 4 * n
        try:
            levels.append(TriGrid(vals))
        except InvalidInput as exc:
            raise FormatError(str(exc)) from None
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes in grid file")
    try:
        return PyramidTriGrid(levels)
    except InvalidInput as exc:
        raise FormatError(str(exc)) from None


def save_grid(path, pyr: PyramidTriGrid):
    atomic_write(path, grid_to_bytes(pyr))


def load_grid(path) -> PyramidTriGrid:
    return grid_from_bytes(Path(path).read_bytes())


# -- weights files --------------------------------------------------------------

def weights_to_bytes(arrays: dict) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr)
        kind = 1 if np.issubdtype(a.dtype, np.integer) else 0
        # astype keeps 0-d arrays 0-d (ascontiguousarray would promote to 1-d)
        a = a.astype("<i8" if kind else "<f4", order="C")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<BI", kind, a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())
    return b"".join(out)


def weights_from_bytes(buf: bytes) -> dict:
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a weights file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weights file version {version}")
        off, arrays = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            kind, ndim = struct.unpack_from("<BI", buf, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = np.dtype("<i8" if kind == 1 else "<f4")
            n = int(np.prod(shape))
            if len(buf) < off + n * dt.itemsize:
                raise FormatError(f"array {name!r} truncated")
            a = np.frombuffer(buf, dt, n, off).reshape(shape)
            arrays[name] = a.astype(np.int64 if kind == 1 else np.float32)
            off += n * dt.itemsize
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt weights file: {exc}") from None
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes in weights file")
    for name, a in arrays.items():
        if a.dtype == np.float32 and not np.isfinite(a).all():
            raise FormatError(f"array {name!r} contains non-finite values")
    return arrays


def save_weights(path, arrays: dict):
    atomic_write(path, weights_to_bytes(arrays))


def load_weights(path) -> dict:
    return weights_from_bytes(Path(path).read_bytes())


def renderer_arrays(r: Renderer) -> dict:
    out = {f"decoder.{k}": v for k, v in r.decoder.params().items()}
    out.update({f"torgb.{k}": v for k, v in r.torgb.params().items()})
    return out


def renderer_from_arrays(arrays: dict, **kw) -> Renderer:
    try:
        dec = Decoder(*(arrays[f"decoder.{k}"] for k in ("w1", "b1", "w2", "b2")))
        tr = ToRGB(*(arrays[f"torgb.{k}"] for k in ("affine", "affine_bias", "linear")))
    except KeyError as exc:
        raise FormatError(f"weights file lacks {exc}") from None
    return Renderer(dec, tr, **kw)


def network_arrays(net: SynthesisNetwork) -> dict:
    out = {f"net.{k}": v for k, v in net.params().items()}
    out["net.meta.resolutions"] = np.array(net.resolutions, np.int64)
    out["net.meta.shape"] = np.array([net.channels, net.depth_layers], np.int64)
    return out


def network_from_arrays(arrays: dict) -> SynthesisNetwork:
    try:
        res = tuple(int(r) for r in arrays["net.meta.resolutions"])
        channels, depth = (int(v) for v in arrays["net.meta.shape"])
        keys = [f.name for f in fields(SynthesisLayer)]
        layers = [SynthesisLayer(*(arrays[f"net.layer{i}.{k}"] for k in keys)) for i in range(len(res))]
        return SynthesisNetwork(arrays["net.const"], layers, res, channels, depth)
    except KeyError as exc:
        raise FormatError(f"weights file lacks {exc}") from None


# -- images ---------------------------------------------------------------------

def save_image(path, rgb, sidecar=True):
    """8-bit PNG at ``path`` and, optionally, an exact float32 ``.pgim`` sidecar next to it."""
    path = Path(path)
    rgb = np.asarray(rgb)
    img = np.clip(np.rint(np.clip(rgb, 0, 1) * 255), 0, 255).astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(img.squeeze(-1) if img.shape[-1] == 1 else img).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
    if sidecar:
        atomic_write(path.with_suffix(".pgim"), encode_array(rgb))


def load_image(path) -> np.ndarray:
    """Float image in [0, 1]; prefers the float sidecar when one exists."""
    path = Path(path)
    side = path if path.suffix == ".pgim" else path.with_suffix(".pgim")
    if side.exists():
        try:
            arr, _ = decode_array(side.read_bytes())
        except ProtocolError as exc:
            raise FormatError(f"{side}: {exc}") from None
        return arr
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), np.float32) / 255.0


# -- configuration --------------------------------------------------------------

class ConfigError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _int(lo=None, hi=None):
    def parse(s):
        v = int(s)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return parse


def _float(lo=None, hi=None, lo_open=False, hi_open=False):
    def parse(s):
        v = float(s)
        if not np.isfinite(v):
            raise ValueError("must be finite")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}")
        return v
    return parse


def _bool(s):
    t = s.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _choice(*opts):
    def parse(s):
        if s not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return s
    return parse


def _resolutions(s):
    vals = [int(v) for v in s.replace(",", " ").split()]
    if not vals:
        raise ValueError("empty resolution list")
    for v in vals:
        if v < 2 or v & (v - 1):
            raise ValueError(f"resolution {v} is not a power of two >= 2")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError("resolutions must be strictly increasing")
    return tuple(vals)


def _str(s):
    return s


SCHEMA = {
    "render": {"image_size": (_int(1), 32), "samples_per_ray": (_int(2), 48),
               "fov_y": (_float(0, 180, True, True), 30.0), "radius": (_float(0, lo_open=True), 2.7),
               "near_far_margin": (_float(0, lo_open=True), 1.3), "workers": (_int(1), 1)},
    "pyramid": {"resolutions": (_resolutions, (8, 16, 32)), "channels": (_int(1), 12),
                "depth_layers": (_int(1), 3)},
    "network": {"latent_dim": (_int(1), 64), "width": (_int(1), 32), "head_channels": (_int(1), 16),
                "hidden": (_int(1), 64), "color_features": (_int(1), 8), "seed": (_int(0), 0),
                "weights": (_str, "")},
    "inversion": {"enabled": (_bool, True), "iters": (_int(0), 100), "lr": (_float(0, lo_open=True), 0.02),
                  "reg": (_float(0), 0.0), "reference": (_str, "")},
    "sds": {"t_min": (_float(0, 1), 0.02), "t_max": (_float(0, 1), 0.98),
            "weighting": (_choice("constant", "snr", "zero"), "constant"), "steps": (_int(0), 2000),
            "lr": (_float(0, lo_open=True), 1e-2), "lr_final": (_float(0, lo_open=True), 1e-3),
            "prompt": (_str, ""), "max_retries": (_int(0), 3)},
    "refine": {"noise_level": (_float(0, 1, hi_open=True), 0.4), "steps": (_int(0), 200),
               "lr": (_float(0, lo_open=True), 1e-2), "min_views": (_int(1), 8),
               "max_backtracks": (_int(0), 8)},
    "fit": {"steps": (_int(0), 2000), "lr": (_float(0, lo_open=True), 2e-2),
            "lr_final": (_float(0, lo_open=True), 2e-3), "batch_rays": (_int(1), 512),
            "views": (_int(2), 8)},
    "provider": {"kind": (_choice("oracle", "remote"), "oracle"), "url": (_str, ""),
                 "timeout": (_float(0, lo_open=True), 30.0)},
    "run": {"seed": (_int(0), 0), "deterministic": (_bool, True), "out": (_str, "out"),
            "turntable_frames": (_int(1), 36)},
}


@dataclass
class PipelineConfig:
    sections: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                    for s, keys in SCHEMA.items()})
    lines: dict = field(default_factory=dict)   # (section, key) -> line number

    def __getitem__(self, section):
        return self.sections[section]

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        self.sections[section][key] = value
        self.validate()

    def validate(self):
        s = self.sections["sds"]
        if not s["t_min"] < s["t_max"]:
            raise ConfigError("sds.t_min must be < sds.t_max", self.lines.get(("sds", "t_max")))
        p = self.sections["provider"]
        if p["kind"] == "remote" and not p["url"]:
            raise ConfigError("provider.url is required for a remote provider",
                              self.lines.get(("provider", "kind")))
        return self

    def to_text(self) -> str:
        out = []
        for sec, vals in self.sections.items():
            out.append(f"[{sec}]")
            for k, v in vals.items():
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                out.append(f"{k} = {v}")
            out.append("")
        return "\n".join(out)


_SECTION = re.compile(r"^\[([A-Za-z_][A-Za-z0-9_]*)\]$")


def parse_config(text: str) -> PipelineConfig:
    """Parse the ``[section]`` / ``key = value`` format; ``#`` starts a comment line."""
    cfg = PipelineConfig()
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", no)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", no)
        if section is None:
            raise ConfigError("key outside of any [section]", no)
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}", no)
        if (section, key) in cfg.lines:
            raise ConfigError(f"duplicate key {section}.{key} "
                              f"(first set on line {cfg.lines[(section, key)]})", no)
        parse = SCHEMA[section][key][0]
        try:
            cfg.sections[section][key] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key} = {value!r}: {exc}", no) from None
        cfg.lines[(section, key)] = no
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
