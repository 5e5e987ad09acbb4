"""Binary checkpoint format with named parameter blobs.

Layout (all integers little-endian):

    magic              4 bytes   b"LIPW"
    version            u32       currently 1
    variant            u32 length + UTF-8 string
    header             u32 length + UTF-8 JSON {"config": {...}, "meta": {...}}
    blob count         u32
    per blob:
        name           u32 length + UTF-8 string
        rank           u32
        extents        rank x u64
        data           prod(extents) x float32, raw little-endian

Blobs cover every learnable parameter and every batch-norm running
statistic, so save -> load -> forward is bit-identical.  Partial loading
(stage hand-off) copies blobs whose name and shape match and reports
which target blobs stayed freshly initialized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, DataError
from .networks import ModelConfig, build_variant, variant_recipe

MAGIC = b"LIPW"
VERSION = 1


def _net_blobs(net):
    """All persistable arrays of a network, keyed by name."""
    blobs = {name: p.data for name, p in net.named_parameters().items()}
    blobs.update(net.named_buffers())
    return blobs


def save_checkpoint(net, path, meta=None):
    """Write the network's parameters, buffers, config and metadata."""
    blobs = _net_blobs(net)
    header = json.dumps({"config": net.config.to_dict(), "meta": meta or {}}).encode()
    variant = net.variant.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(variant)))
        fh.write(variant)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype=np.float32)
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"checkpoint truncated while reading {what}")
    return buf


def read_checkpoint(path):
    """Parse a checkpoint file into (variant, config_dict, meta, blobs)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version} (expected {VERSION})")
        (vlen,) = struct.unpack("<I", _read_exact(fh, 4, "variant length"))
        variant = _read_exact(fh, vlen, "variant").decode()
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header"))
            config = header["config"]
            meta = header.get("meta", {})
        except (ValueError, KeyError) as exc:
            raise DataError(f"malformed checkpoint header: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "blob count"))
        blobs = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "blob name length"))
            name = _read_exact(fh, nlen, "blob name").decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            extents = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"extents of {name}"))
            size = int(np.prod(extents)) if rank else 1
            raw = _read_exact(fh, 4 * size, f"data of {name}")
            blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(extents).copy()
        if fh.read(1):
            raise DataError("trailing bytes after the last blob")
    return variant, config, meta, blobs


def _assign(net, blobs, strict):
    params = net.named_parameters()
    buffers = net.named_buffers()
    loaded, fresh = [], []

    def matches(name, shape):
        src = blobs.get(name)
        if src is None:
            fresh.append(name)
            return None
        if tuple(src.shape) != tuple(shape):
            # a same-named blob of another topology: unmatched for partial
            # loads, a corrupt file for strict ones
            if strict:
                raise DataError(f"blob {name} has shape {tuple(src.shape)}, "
                                f"network expects {tuple(shape)}")
            fresh.append(name)
            return None
        return src

    for name, param in params.items():
        src = matches(name, param.shape)
        if src is not None:
            param.data = src.astype(param.data.dtype)
            loaded.append(name)
    owners = net.buffer_owners()
    for name in buffers:
        src = matches(name, buffers[name].shape)
        if src is not None:
            owner, attr = owners[name]
            setattr(owner, attr, src.astype(buffers[name].dtype))
            loaded.append(name)
    unused = sorted(set(blobs) - set(loaded))
    if strict:
        if fresh:
            raise DataError(f"checkpoint is missing blobs: {', '.join(sorted(fresh)[:5])} ...")
        if unused:
            raise DataError(f"checkpoint holds unknown parameter names: {', '.join(unused[:5])} ...")
    return LoadReport(loaded=sorted(loaded), fresh=sorted(fresh), unused=unused)


@dataclass
class LoadReport:
    """What a partial load touched: restored blobs, freshly initialized
    target blobs, and file blobs with no matching target."""

    loaded: list
    fresh: list
    unused: list

    def summary(self):
        return (f"{len(self.loaded)} blobs restored, {len(self.fresh)} freshly initialized, "
                f"{len(self.unused)} unused")


def load_checkpoint(path, seed=0):
    """Rebuild the stored variant and restore every blob (strict)."""
    variant, config, meta, blobs = read_checkpoint(path)
    cfg = ModelConfig.from_dict(config)
    net = build_variant(variant, cfg, seed=seed)
    _assign(net, blobs, strict=True)
    return net, meta


def load_partial(path, net):
    """Copy matching blobs from a checkpoint into an existing network.

    Used for stage hand-off: blobs matching by name and shape are
    restored, everything else keeps its fresh initialization, and the
    report says which.  The stored model config must equal the target's;
    differently named back-ends are expected, differently sized models
    are a mistake.
    """
    variant, config, _, blobs = read_checkpoint(path)
    if ModelConfig.from_dict(config) != net.config:
        raise ConfigError(f"checkpoint config {config} does not match the target network's "
                          f"{net.config.to_dict()}")
    src = variant_recipe(variant)
    dst = variant_recipe(net.variant)

    def component_kind(recipe, comp):
        kind = recipe[comp] if comp != "backend" else (recipe["backend"], recipe.get("layers"))
        return kind

    allowed = tuple(comp for comp in ("frontend", "core", "backend")
                    if component_kind(src, comp) == component_kind(dst, comp))
    usable = {name: blob for name, blob in blobs.items() if name.startswith(allowed)}
    report = _assign(net, usable, strict=False)
    report.unused = sorted(set(report.unused) | (set(blobs) - set(usable)))
    return report
