"""Image, depth and config file formats shared by the pipeline.

Netpbm is used for images: binary PPM for 8-bit color and 16-bit PGM
(big-endian, maxval 65535) for depth in millimeters. Text configs are a
small TOML subset: ``[section]`` headers and ``key = value`` lines.
"""
from __future__ import annotations

import ast
import struct
from pathlib import Path

import numpy as np


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} netpbm file")
    w, h, maxval = (int(t) for t in tokens[1:])
    return raw[pos + 1:], w, h, maxval


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM expects (H, W, 3) uint8")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    body, w, h, maxval = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    return np.frombuffer(body, np.uint8, w * h * 3).reshape(h, w, 3).copy()


def write_pgm16(path, values) -> None:
    values = np.asarray(values)
    if values.dtype != np.uint16 or values.ndim != 2:
        raise ValueError("PGM16 expects (H, W) uint16")
    h, w = values.shape
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (w, h) + values.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    body, w, h, maxval = _read_netpbm(path, b"P5")
    if maxval != 65535:
        raise ValueError(f"{path}: expected 16-bit PGM")
    return np.frombuffer(body, ">u2", w * h).reshape(h, w).astype(np.uint16)


def depth_to_mm(depth) -> np.ndarray:
    """Meters to uint16 millimeters, 0 stays invalid."""
    mm = np.rint(np.asarray(depth, dtype=np.float64) * 1000.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def write_depth_mm(path, depth) -> None:
    write_pgm16(path, depth_to_mm(depth))


def read_depth_mm(path) -> np.ndarray:
    return read_pgm16(path).astype(np.float64) / 1000.0


_DEPTH_MAGIC = b"BTDF"


def write_depth_raw(path, depth) -> None:
    """float32 meters with a magic + (width, height) header."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(_DEPTH_MAGIC + struct.pack("<2I", w, h) + d.tobytes())


def read_depth_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _DEPTH_MAGIC:
        raise ValueError(f"{path}: not a raw depth file")
    w, h = struct.unpack_from("<2I", raw, 4)
    return np.frombuffer(raw, "<f4", w * h, 12).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Text configs
# ---------------------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise TypeError(f"unsupported config value {v!r}")


def _parse_value(text: str):
    text = text.strip()
    if text in ("true", "false"):
        return text == "true"
    return ast.literal_eval(text)


def dumps_config(cfg: dict) -> str:
    lines, sections = [], []
    for k, v in cfg.items():
        if isinstance(v, dict):
            sections.append((k, v))
        else:
            lines.append(f"{k} = {_format_value(v)}")
    for name, sub in sections:
        lines.append(f"\n[{name}]")
        lines += [f"{k} = {_format_value(v)}" for k, v in sub.items()]
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> dict:
    out: dict = {}
    cur = out
    for n, ln in enumerate(text.splitlines(), 1):
        s = ln.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("[") and s.endswith("]"):
            cur = out.setdefault(s[1:-1].strip(), {})
            continue
        if "=" not in s:
            raise ValueError(f"config line {n}: expected 'key = value'")
        k, v = s.split("=", 1)
        try:
            cur[k.strip()] = _parse_value(v)
        except (ValueError, SyntaxError) as exc:
            raise ValueError(f"config line {n}: bad value {v.strip()!r}") from exc
    return out


def write_config(path, cfg: dict) -> None:
    Path(path).write_text(dumps_config(cfg))


def read_config(path) -> dict:
    return loads_config(Path(path).read_text())
