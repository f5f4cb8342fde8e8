"""Self-describing model checkpoints.

Layout: magic line, u32 header length, JSON header (config, step, rng state,
tensor table), then every named tensor in declaration order as 32-bit
little-endian floats.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np
import torch

from icwm.errors import ConfigError
from icwm.seqmodel.model import GsaConfig, GsaWorldModel

MAGIC = b"ICWMGSA1\n"
FORMAT_VERSION = 1


def save_checkpoint(path, model: GsaWorldModel, step: int = 0, generator: torch.Generator | None = None, extra=None) -> None:
    tensors = [(name, t.detach().cpu()) for name, t in model.state_dict().items()]
    rng = None
    if generator is not None:
        rng = base64.b64encode(generator.get_state().numpy().tobytes()).decode()
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "rng_state": rng,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in tensors:
            f.write(t.numpy().astype("<f4").tobytes())


def load_checkpoint(path, dtype=torch.float32) -> tuple[GsaWorldModel, dict]:
    """Returns (model, header). Parameters come back at 32-bit precision cast to ``dtype``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigError(f"{path} is not a model checkpoint")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen])
    off += hlen
    if header["format_version"] != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {header['format_version']}")
    model = GsaWorldModel(GsaConfig.from_dict(header["config"])).to(dtype)
    state = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(entry["shape"])
        off += 4 * n
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, header


def restore_generator(header: dict) -> torch.Generator | None:
    if header.get("rng_state") is None:
        return None
    g = torch.Generator()
    g.set_state(torch.from_numpy(np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8).copy()))
    return g
