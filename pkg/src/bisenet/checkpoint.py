"""Checkpoint directories: a text manifest plus one BT2 file per tensor.

Layout::

    <dir>/manifest.txt
    <dir>/tensors/<name>.bt2    # parameters and batch-norm running statistics

The manifest records the architecture (same key = value syntax as run
configs), the architecture hash, the module topology and every tensor's
name, kind and shape.  Nothing time-dependent is written, so saving the same
state twice produces identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import arch_from_text, arch_to_text
from .errors import CheckpointMismatch, ConfigError
from .io import load_bt2, save_bt2
from .model import build_bisenetv2

MAGIC = "bisenet-checkpoint 1"


def _shape_text(shape):
    return "x".join(str(s) for s in shape) or "scalar"


def manifest_text(net):
    lines = [MAGIC, f"arch_hash = {net.arch_hash()}", "[arch]"]
    lines += arch_to_text(net.cfg).splitlines()
    lines.append("[topology]")
    for name, mod in net.named_modules():
        lines.append(f"{name or '<root>'} {type(mod).__name__}")
    lines.append("[tensors]")
    for name, p in net.named_parameters():
        lines.append(f"param {name} {_shape_text(p.shape)} tensors/{name}.bt2")
    for name, mod, attr in net.named_buffers():
        lines.append(f"buffer {name} {_shape_text(getattr(mod, attr).shape)} "
                     f"tensors/{name}.bt2")
    return "\n".join(lines) + "\n"


def save_checkpoint(net, path):
    """Write ``net``'s parameters and running statistics under directory ``path``."""
    if not net.initialized:
        raise ConfigError("cannot checkpoint a network with uninitialized parameters")
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    for old in (root / "tensors").glob("*.bt2"):
        old.unlink()
    for name, p in net.named_parameters():
        save_bt2(root / "tensors" / f"{name}.bt2", p.data)
    for name, mod, attr in net.named_buffers():
        save_bt2(root / "tensors" / f"{name}.bt2", getattr(mod, attr))
    (root / "manifest.txt").write_text(manifest_text(net))
    return root


def _parse_manifest(text, source):
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointMismatch(f"{source}: not a checkpoint manifest")
    if not lines[1].startswith("arch_hash = "):
        raise CheckpointMismatch(f"{source}: missing arch_hash line")
    digest = lines[1].split(" = ", 1)[1]
    sections, current = {}, None
    for line in lines[2:]:
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], [])
        elif current is not None:
            current.append(line)
    return digest, sections


def read_manifest(path):
    root = Path(path)
    text = (root / "manifest.txt").read_text()
    return _parse_manifest(text, str(root / "manifest.txt"))


def load_checkpoint(path, expected_hash=None):
    """Rebuild the network recorded under ``path`` and load its tensors.

    Raises :class:`CheckpointMismatch` if the rebuilt architecture hashes
    differently from the manifest (or from ``expected_hash``), or if any
    stored tensor disagrees with the registry.
    """
    root = Path(path)
    if not (root / "manifest.txt").is_file():
        raise CheckpointMismatch(f"{root}: no manifest.txt")
    digest, sections = read_manifest(root)
    if expected_hash is not None and digest != expected_hash:
        raise CheckpointMismatch(f"checkpoint arch hash {digest} != expected {expected_hash}")
    try:
        cfg = arch_from_text("\n".join(sections.get("arch", [])), str(root / "manifest.txt"))
    except ConfigError as exc:
        raise CheckpointMismatch(f"unreadable architecture: {exc}") from None
    net = build_bisenetv2(cfg)
    if net.arch_hash() != digest:
        raise CheckpointMismatch(f"manifest hash {digest} does not match rebuilt "
                                 f"architecture {net.arch_hash()}")
    stored = {}
    for line in sections.get("tensors", []):
        kind, name, shape, rel = line.split(" ")
        stored[name] = (kind, shape, rel)
    params = dict(net.named_parameters())
    buffers = {name: (mod, attr) for name, mod, attr in net.named_buffers()}
    if set(stored) != set(params) | set(buffers):
        missing = sorted(set(params) | set(buffers) - set(stored))
        extra = sorted(set(stored) - set(params) - set(buffers))
        raise CheckpointMismatch(f"tensor registry differs: missing {missing[:3]}, "
                                 f"unexpected {extra[:3]}")
    for name, (kind, _, rel) in stored.items():
        array = load_bt2(root / rel)
        if kind == "param":
            p = params[name]
            if array.shape != p.shape:
                raise CheckpointMismatch(f"{name}: stored shape {array.shape} != {p.shape}")
            p.data = array
        else:
            mod, attr = buffers[name]
            if array.shape != (mod.c,):
                raise CheckpointMismatch(f"{name}: stored shape {array.shape} != {(mod.c,)}")
            setattr(mod, attr, array.astype(np.float64))
    return net


def checkpoints_equal(a, b):
    """Byte-for-byte comparison of two checkpoint directories."""
    a, b = Path(a), Path(b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return files_a == files_b and all(
        (a / f).read_bytes() == (b / f).read_bytes() for f in files_a)
