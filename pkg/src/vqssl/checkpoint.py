"""Checkpoint directory: ``manifest.txt`` (plain text) + ``payload.bin``.

Manifest lines are ``key=value``. Scalars: ``format_version``, ``step``,
``epoch``, ``config_hash``, ``payload_sha256``. Each config entry appears as
``config.<key>=<value>`` and each array as
``array=<name>;<dtype>;<shape>;<offset>;<nbytes>`` with dtype ``<f4``/``<f8``
(little-endian) and the shape comma-separated. Arrays are stored row-major in
manifest order.
"""

import hashlib
import os

import numpy as np

from . import vq
from .config import parse_overrides, TrainConfig
from .nn import ParamStore

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def state_arrays(state):
    """Flat, ordered (name, array) listing of everything a state carries."""
    out = []
    for prefix, store in (("theta", state.theta), ("pred", state.pred), ("phi", state.phi),
                          ("vqproj", state.vqproj), ("serf", state.serf.mlp)):
        out += [(f"{prefix}/{k}", v) for k, v in store.items()]
    out.append(("serf/alpha", state.serf.alpha))
    for s in sorted(state.codebooks):
        cb = state.codebooks[s]
        for field in ("entries", "ema_count", "ema_sum", "usage"):
            out.append((f"codebook/{s}/{field}", getattr(cb, field)))
    for key in sorted(state.velocity):
        out += [(f"opt/{key}/{k}", v) for k, v in state.velocity[key].items()]
    return out


def save_checkpoint(state, path):
    os.makedirs(path, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, arr in state_arrays(state):
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        blob = a.astype(dt).tobytes()
        shape = ",".join(str(s) for s in a.shape)
        index.append(f"array={name};{dt.str};{shape};{offset};{len(blob)}")
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    with open(os.path.join(path, "payload.bin"), "wb") as fh:
        fh.write(payload)
    lines = [f"format_version={FORMAT_VERSION}", f"step={state.step}", f"epoch={state.epoch}",
             f"config_hash={state.cfg.hash()}",
             f"payload_sha256={hashlib.sha256(payload).hexdigest()}"]
    lines += [f"config.{line}" for line in state.cfg.to_lines()]
    lines += index
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(path):
    """Returns (scalars dict, config dict, array index list)."""
    scalars, cfg, arrays = {}, {}, []
    mpath = os.path.join(path, "manifest.txt")
    if not os.path.exists(mpath):
        raise CheckpointError(f"no manifest at {path}")
    with open(mpath) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            k, v = line.split("=", 1)
            if k == "array":
                name, dt, shape, off, nb = v.split(";")
                shp = tuple(int(s) for s in shape.split(",")) if shape else ()
                arrays.append((name, dt, shp, int(off), int(nb)))
            elif k.startswith("config."):
                cfg[k[len("config."):]] = v
            else:
                scalars[k] = v
    version = int(scalars.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    return scalars, cfg, arrays


def load_arrays(path, verify=True):
    scalars, cfg, index = read_manifest(path)
    with open(os.path.join(path, "payload.bin"), "rb") as fh:
        payload = fh.read()
    expected = sum(nb for *_, nb in index)
    if len(payload) != expected:
        raise IntegrityError(f"payload has {len(payload)} bytes, manifest says {expected}")
    if verify and hashlib.sha256(payload).hexdigest() != scalars.get("payload_sha256"):
        raise IntegrityError("payload checksum mismatch")
    arrays = {}
    for name, dt, shape, off, nb in index:
        arrays[name] = np.frombuffer(payload, dtype=np.dtype(dt), count=nb // np.dtype(dt).itemsize,
                                     offset=off).reshape(shape).astype(np.dtype(dt).newbyteorder("="))
    return scalars, cfg, arrays


def load_checkpoint(path):
    from .trainer import init_state

    scalars, cfg_pairs, arrays = load_arrays(path)
    cfg = TrainConfig().replace(**parse_overrides(cfg_pairs))
    state = init_state(cfg)

    def fill(store, prefix):
        for k in store:
            store[k] = arrays[f"{prefix}/{k}"].copy()

    fill(state.theta, "theta")
    fill(state.pred, "pred")
    fill(state.phi, "phi")
    fill(state.vqproj, "vqproj")
    fill(state.serf.mlp, "serf")
    state.serf.alpha = arrays["serf/alpha"].copy()
    for s, cb in state.codebooks.items():
        for field in ("entries", "ema_count", "ema_sum", "usage"):
            setattr(cb, field, arrays[f"codebook/{s}/{field}"].copy())
    for key, store in state.velocity.items():
        fill(store, f"opt/{key}")
    state.step = int(scalars["step"])
    state.epoch = int(scalars["epoch"])
    return state


def payload_digest(path):
    with open(os.path.join(path, "payload.bin"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
