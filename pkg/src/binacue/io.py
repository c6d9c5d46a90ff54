"""File helpers shared by the toolkit: WAV codec, atomic writes, config files."""
from __future__ import annotations

import hashlib
import json
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy.io import wavfile

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class FormatError(ValueError):
    """Raised when an input file exists but violates its declared format."""


def read_wav(path):
    """Read a PCM or float WAV file.

    Returns
    -------
    fs : int
    data : np.ndarray
        float64, shape (channels, samples). Integer PCM is scaled to [-1, 1).
    """
    try:
        fs, raw = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if raw.dtype == np.int16:
        data = raw.astype(np.float64) / 2.0**15
    elif raw.dtype == np.int32:
        # scipy left-aligns 24-bit samples in int32, so one scale fits both widths
        data = raw.astype(np.float64) / 2.0**31
    elif raw.dtype == np.uint8:
        data = (raw.astype(np.float64) - 128.0) / 128.0
    elif raw.dtype in (np.float32, np.float64):
        data = raw.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {raw.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return int(fs), np.ascontiguousarray(data.T)


def write_wav(path, fs, data, dtype=np.float32):
    """Write (channels, samples) data as WAV; float32 by default."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if dtype == np.int16:
        payload = np.clip(np.round(data * 2**15), -(2**15), 2**15 - 1).astype(np.int16)
    else:
        payload = data.astype(dtype)
    with atomic_path(path) as tmp:
        wavfile.write(str(tmp), int(fs), payload.T)


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that is renamed onto ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text):
    with atomic_path(path) as tmp:
        Path(tmp).write_text(text, encoding="utf-8")


def write_json(path, obj):
    write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def load_config(path):
    """Load a TOML or JSON mapping, chosen by file extension."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            try:
                return tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise FormatError(f"{path}: {exc}") from exc
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: top level must be a mapping")
    return obj


def config_hash(obj):
    """Stable SHA-256 over the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()
