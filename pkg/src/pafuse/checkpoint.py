"""Self-describing checkpoint container with bit-exact round-trips.

Layout on disk: an 8-byte magic, a little-endian uint64 header length,
a canonical JSON header (sorted keys, no whitespace), then the raw
C-order array bytes in the order the header lists them. Writing the
result of a load reproduces the original file byte for byte; there are
no timestamps or other ambient state in the format.

The header records the format version, the resolved training config, the
skeleton layout plus its hash, the noise-schedule parameters, and the
network configs/groupings needed to rebuild a DenoiserBank.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .denoiser import Denoiser, DenoiserBank, DenoiserConfig, _parameter_shapes
from .diffusion import NoiseSchedule, cosine_schedule
from .errors import DataError
from .skeleton import SkeletonLayout

MAGIC = b"PFCKPT01"
FORMAT_VERSION = 1


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "arrays": [
            {"name": n, "dtype": np.dtype(arrays[n].dtype).str, "shape": list(arrays[n].shape)}
            for n in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n]).tobytes())


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"unsupported checkpoint format {header.get('format_version')} in {path}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = start + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * (int(np.prod(shape)) if shape else 1)
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise DataError(f"truncated checkpoint {path}: array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"trailing bytes in checkpoint {path}")
    return header["meta"], arrays


def save_checkpoint(
    path,
    bank: DenoiserBank,
    schedule: NoiseSchedule,
    config: dict,
    extra: dict | None = None,
) -> None:
    meta = {
        "config": config,
        "layout": bank.layout.to_json_dict(),
        "layout_hash": bank.layout.hash(),
        "schedule": {"timesteps": schedule.timesteps, "offset": schedule.offset},
        "nets": {
            key: {
                "part": net.config.part,
                "joints": net.config.joints,
                "frames": net.config.frames,
                "channels": net.config.channels,
                "depth": net.config.depth,
            }
            for key, net in bank.nets.items()
        },
        "groups": [[key, list(names)] for key, names in bank.groups],
        "extra": extra or {},
    }
    arrays = {
        f"{key}/{name}": arr
        for key, net in bank.nets.items()
        for name, arr in net.params.items()
    }
    save_arrays(path, meta, arrays)


def load_checkpoint(path) -> tuple[DenoiserBank, NoiseSchedule, dict]:
    meta, arrays = load_arrays(path)
    try:
        layout = SkeletonLayout.from_json_dict(meta["layout"])
        nets: dict[str, Denoiser] = {}
        for key, cfg in meta["nets"].items():
            config = DenoiserConfig(
                part=cfg["part"],
                joints=int(cfg["joints"]),
                frames=int(cfg["frames"]),
                channels=int(cfg["channels"]),
                depth=int(cfg["depth"]),
            )
            prefix = f"{key}/"
            params = {
                name[len(prefix):]: arr for name, arr in arrays.items() if name.startswith(prefix)
            }
            expected = {n: s for n, s, _ in _parameter_shapes(config)}
            if {n: p.shape for n, p in params.items()} != expected:
                raise DataError(
                    f"checkpoint {path}: network {key!r} parameters do not match its config"
                )
            nets[key] = Denoiser(config, params)
        groups = tuple((key, tuple(names)) for key, names in meta["groups"])
        bank = DenoiserBank(layout, nets, groups)
        sched = meta["schedule"]
        schedule = cosine_schedule(int(sched["timesteps"]), float(sched["offset"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed checkpoint meta in {path}: {exc}") from exc
    if meta.get("layout_hash") != layout.hash():
        raise DataError(f"checkpoint {path}: layout hash mismatch")
    return bank, schedule, meta
