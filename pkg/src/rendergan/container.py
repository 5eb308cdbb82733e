"""Dataset container: one binary tensor blob per sample plus a JSON manifest.

Layout of a sample file:

    magic "GBUF1" | uint32 LE header length | header JSON | raw payload

The header lists every channel (name, dtype, shape, byte offset) in payload
order; arrays are stored little-endian, C order. Round trips are bit exact.
Truncation or header damage raises IntegrityError carrying the sample index.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .scenegen import CLASS_NAMES, GBufferSet, LayoutConfig, SceneSample

MAGIC = b"GBUF1"
SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def _sample_arrays(sample: SceneSample) -> list[tuple[str, np.ndarray]]:
    items = [("image", sample.image), ("labels", sample.labels)]
    items.extend(sample.gbuffers.channel_items())
    return items


def _le(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr.astype(dt, copy=False))


def write_sample(sample: SceneSample, path: Path, index: int) -> dict:
    arrays = [(name, _le(arr)) for name, arr in _sample_arrays(sample)]
    channels = []
    offset = 0
    for name, arr in arrays:
        channels.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    header = {
        "schema": SCHEMA_VERSION,
        "index": index,
        "seed": sample.seed,
        "style_tag": sample.style_tag,
        "channels": channels,
        "payload_nbytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in arrays:
            f.write(arr.tobytes())
    return header


def read_sample(path: Path, index: int) -> SceneSample:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read sample file {path}: {exc}", index) from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"bad magic in {path}", index)
    if len(raw) < len(MAGIC) + 4:
        raise IntegrityError(f"truncated header length in {path}", index)
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if len(raw) < header_end:
        raise IntegrityError(f"truncated header in {path}", index)
    try:
        header = json.loads(raw[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt header in {path}: {exc}", index) from exc
    payload = raw[header_end:]
    if len(payload) != header["payload_nbytes"]:
        raise IntegrityError(
            f"payload size mismatch in {path}: expected "
            f"{header['payload_nbytes']}, got {len(payload)}", index)
    arrays = {}
    for ch in header["channels"]:
        start, stop = ch["offset"], ch["offset"] + ch["nbytes"]
        if stop > len(payload):
            raise IntegrityError(f"channel {ch['name']} overruns payload in {path}", index)
        arr = np.frombuffer(payload[start:stop], dtype=np.dtype(ch["dtype"]))
        arrays[ch["name"]] = arr.reshape(ch["shape"]).copy()
    gbuf_kwargs = {name: arrays[name] for name in GBufferSet.CHANNEL_NAMES}
    return SceneSample(
        image=arrays["image"],
        labels=arrays["labels"],
        gbuffers=GBufferSet(**gbuf_kwargs),
        style_tag=header["style_tag"],
        seed=header["seed"],
    )


def write_dataset(samples: list[SceneSample], path: str | Path,
                  config: LayoutConfig | None = None,
                  dataset_seed: int | None = None) -> dict:
    """Write samples and a manifest under `path`; returns the manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    channel_table = None
    for i, sample in enumerate(samples):
        name = f"sample_{i:05d}.gbuf"
        header = write_sample(sample, out / name, i)
        if channel_table is None:
            channel_table = header["channels"]
        entries.append({
            "file": name,
            "index": i,
            "seed": sample.seed,
            "style_tag": sample.style_tag,
            "payload_nbytes": header["payload_nbytes"],
        })
    first = samples[0]
    h, w = first.labels.shape
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "magic": MAGIC.decode("ascii"),
        "n_samples": len(samples),
        "height": h,
        "width": w,
        "class_names": list(CLASS_NAMES),
        "channel_names": list(GBufferSet.CHANNEL_NAMES),
        "channels": channel_table,
        "style_tag": first.style_tag,
        "dataset_seed": dataset_seed,
        "camera": (config.camera.intrinsics(h, w) if config is not None else None),
        "config": (dataclasses.asdict(config) if config is not None else None),
        "samples": entries,
    }
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def read_manifest(path: str | Path) -> dict:
    mpath = Path(path) / MANIFEST_NAME
    if not mpath.exists():
        raise IntegrityError(f"no manifest at {mpath}")
    with open(mpath, encoding="utf-8") as f:
        return json.load(f)


def read_dataset(path: str | Path) -> list[SceneSample]:
    """Read all samples listed in the manifest; verifies container integrity."""
    root = Path(path)
    manifest = read_manifest(root)
    samples = []
    for entry in manifest["samples"]:
        sample = read_sample(root / entry["file"], entry["index"])
        if sample.labels.shape != (manifest["height"], manifest["width"]):
            raise IntegrityError(
                f"sample {entry['index']} has unexpected spatial size", entry["index"])
        samples.append(sample)
    return samples
