"""Config and weight file formats.

Config files are flat ``key=value`` text with a fixed key set and order:
name, c1, cprime, l1, l2, l3, l4, ffn_ratio, layer_scale, num_classes,
seed.  l2 and l4 are written explicitly and must equal l1 on load.

Weight files are sectioned binary: an 8-byte magic string, one version
byte, a little-endian uint32 record count, then per-tensor records of
``uint32 name length | utf-8 name | uint8 rank | uint32 dims... |
raw little-endian float64 data``.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import Model, ModelConfig, StackConfig

CONFIG_KEYS = (
    "name", "c1", "cprime", "l1", "l2", "l3", "l4",
    "ffn_ratio", "layer_scale", "num_classes", "seed",
)

WEIGHTS_MAGIC = b"DFRMNETW"
WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def config_to_text(cfg: ModelConfig) -> str:
    values = {
        "name": cfg.name,
        "c1": cfg.stack.c1,
        "cprime": cfg.stack.cprime,
        "l1": cfg.stack.l1,
        "l2": cfg.stack.l1,
        "l3": cfg.stack.l3,
        "l4": cfg.stack.l1,
        "ffn_ratio": cfg.ffn_ratio,
        "layer_scale": int(cfg.layer_scale),
        "num_classes": cfg.num_classes,
        "seed": cfg.seed,
    }
    return "".join(f"{k}={values[k]}\n" for k in CONFIG_KEYS)


def write_config(cfg: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(cfg))


def config_from_text(text: str) -> ModelConfig:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    missing = [k for k in CONFIG_KEYS if k not in entries]
    if missing:
        raise ConfigError(f"config missing keys: {', '.join(missing)}")
    unknown = [k for k in entries if k not in CONFIG_KEYS]
    if unknown:
        raise ConfigError(f"config has unknown keys: {', '.join(unknown)}")

    def intval(key: str) -> int:
        try:
            return int(entries[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key} must be an integer, got {entries[key]!r}") from exc

    l1, l2, l3, l4 = (intval(k) for k in ("l1", "l2", "l3", "l4"))
    if l2 != l1 or l4 != l1:
        raise ConfigError(f"l2 and l4 must equal l1 (AABA pattern), got {l1},{l2},{l3},{l4}")
    return ModelConfig(
        name=entries["name"],
        stack=StackConfig(intval("c1"), intval("cprime"), l1, l3),
        ffn_ratio=intval("ffn_ratio"),
        layer_scale=bool(intval("layer_scale")),
        num_classes=intval("num_classes"),
        seed=intval("seed"),
    )


def read_config(path: str | Path) -> ModelConfig:
    return config_from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def save_weights(model: Model, path: str | Path) -> None:
    records = list(model.named_params())
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<B", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_weight_records(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise ConfigError(f"{path}: not a weights file (bad magic)")
    pos = len(WEIGHTS_MAGIC)
    version = data[pos]
    pos += 1
    if version != WEIGHTS_VERSION:
        raise ConfigError(f"{path}: unsupported weights version {version}")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = data[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        records[name] = arr.astype(np.float64)
    if pos != len(data):
        raise ConfigError(f"{path}: {len(data) - pos} trailing bytes after last record")
    return records


def load_weights(model: Model, path: str | Path) -> None:
    """Copy stored tensors into ``model`` in place; shapes must match."""
    records = read_weight_records(path)
    seen = set()
    for name, arr in model.named_params():
        if name not in records:
            raise ConfigError(f"weights file missing tensor {name}")
        stored = records[name]
        if stored.shape != arr.shape:
            raise ConfigError(
                f"tensor {name}: stored shape {stored.shape} != model shape {arr.shape}"
            )
        arr[...] = stored
        seen.add(name)
    extra = set(records) - seen
    if extra:
        raise ConfigError(f"weights file has unknown tensors: {', '.join(sorted(extra))}")
