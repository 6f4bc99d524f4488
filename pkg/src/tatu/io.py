"""File formats. This module is the only place that reads or writes files.

* Datasets: JSON lines. A header line (format, version, descriptor, dims), one
  line per transition, and a trailer with the row count and a CRC32 of the
  record lines. Python's float repr round-trips, so load(save(x)) is bitwise.
* Checkpoints: ``MAGIC | u32 version | u32 meta_len | meta JSON | u32 n_tensors |
  tensors | u32 crc32``. Each tensor is ``u16 name_len | name | u8 ndim |
  u64 shape... | float64 LE data``. The CRC covers every preceding byte and is
  checked before anything is decoded.
* Metrics: JSON lines ``{run_id, step, name, value, tags}``, append-only, with
  non-decreasing step per ``(run_id, name)``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .envs import Dataset
from .errors import ChecksumError, MissingArtifactError, SchemaError

DATASET_FORMAT = "tatu-dataset"
DATASET_VERSION = 1
MAGIC = b"TATUCKPT"
CHECKPOINT_VERSION = 1


def _path(p) -> Path:
    return Path(p)


def _require(path: Path) -> None:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _row_values(x):
    x = np.asarray(x)
    if x.ndim == 0:
        return x.item()
    return x.tolist()


def dataset_to_lines(ds: Dataset) -> list:
    desc = ds.env_descriptor
    header = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION, "env_descriptor": desc,
        "behavior_tag": ds.behavior_tag, "n": len(ds),
        "state_dim": desc.get("state_dim"), "action_dim": desc.get("action_dim"),
        "start_state_pool": ds.start_state_pool.tolist(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(ds)):
        rec = {"s": _row_values(ds.states[i]), "a": _row_values(ds.actions[i]), "r": float(ds.rewards[i]),
               "s_next": _row_values(ds.next_states[i]), "done": bool(ds.dones[i])}
        lines.append(json.dumps(rec, sort_keys=True))
    crc = zlib.crc32("\n".join(lines[1:]).encode())
    lines.append(json.dumps({"end": True, "n": len(ds), "crc32": crc}, sort_keys=True))
    return lines


def save_dataset(ds: Dataset, path) -> Path:
    path = _path(path)
    _atomic_write(path, ("\n".join(dataset_to_lines(ds)) + "\n").encode())
    return path


def load_dataset(path) -> Dataset:
    path = _path(path)
    _require(path)
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise SchemaError(f"{path}: truncated dataset file")
    try:
        header = json.loads(lines[0])
        trailer = json.loads(lines[-1])
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: unreadable header or trailer ({e})") from None
    if header.get("format") != DATASET_FORMAT:
        raise SchemaError(f"{path}: not a dataset file")
    if header.get("version") != DATASET_VERSION:
        raise SchemaError(f"{path}: dataset version {header.get('version')} unsupported (want {DATASET_VERSION})")
    if not isinstance(trailer, dict) or not trailer.get("end"):
        raise SchemaError(f"{path}: truncated dataset file (no trailer)")
    body = lines[1:-1]
    if len(body) != header["n"] or trailer.get("n") != header["n"]:
        raise SchemaError(f"{path}: expected {header['n']} records, found {len(body)}")
    if zlib.crc32("\n".join(body).encode()) != trailer.get("crc32"):
        raise ChecksumError(f"{path}: dataset checksum mismatch")
    recs = [json.loads(x) for x in body]
    desc = header["env_descriptor"]
    tabular = desc.get("kind") == "tabular"
    ds_dim, da_dim = header["state_dim"], header["action_dim"]
    for k, rec in enumerate(recs):
        for key, dim in (("s", ds_dim), ("s_next", ds_dim), ("a", da_dim)):
            v = rec[key]
            got = 1 if not isinstance(v, list) else len(v)
            if tabular and isinstance(v, list) or (not tabular and got != dim):
                raise SchemaError(f"{path}: record {k} field {key!r} has dim {got}, header says {dim}")
    dt = np.int64 if tabular else np.float64
    return Dataset(
        states=np.array([r["s"] for r in recs], dtype=dt), actions=np.array([r["a"] for r in recs], dtype=dt),
        rewards=np.array([r["r"] for r in recs], dtype=np.float64),
        next_states=np.array([r["s_next"] for r in recs], dtype=dt),
        dones=np.array([r["done"] for r in recs], dtype=bool), env_descriptor=desc,
        behavior_tag=header.get("behavior_tag", ""),
        start_state_pool=np.array(header["start_state_pool"], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(tensors: dict, meta: dict | None = None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes):
    if len(blob) < len(MAGIC) + 16 or blob[:len(MAGIC)] != MAGIC:
        raise SchemaError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"checkpoint version {version} unsupported (want {CHECKPOINT_VERSION})")
    meta = json.loads(body[pos:pos + meta_len].decode())
    pos += meta_len
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as e:
        raise SchemaError(f"malformed checkpoint ({e})") from None
    if pos != len(body):
        raise SchemaError("trailing bytes in checkpoint")
    return tensors, meta


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = _path(path)
    _atomic_write(path, encode_checkpoint(tensors, meta))
    return path


def load_checkpoint(path):
    path = _path(path)
    _require(path)
    return decode_checkpoint(path.read_bytes())


# ---------------------------------------------------------------------------
# model <-> tensors
# ---------------------------------------------------------------------------


def _mlp_tensors(prefix: str, params) -> dict:
    return {f"{prefix}.{k}": a for k, a in enumerate(params.arrays())}


def _mlp_from(prefix: str, tensors: dict, activations) -> "object":
    from .nn import MlpParams

    arrays = []
    k = 0
    while f"{prefix}.{k}" in tensors:
        arrays.append(tensors[f"{prefix}.{k}"])
        k += 1
    return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), tuple(activations))


def ensemble_to_checkpoint(ens):
    from dataclasses import asdict

    tensors = {"in_mean": ens.in_mean, "in_std": ens.in_std, "out_scale": ens.out_scale}
    for k, m in enumerate(ens.members):
        tensors.update(_mlp_tensors(f"member{k}", m))
    meta = {"kind": "dynamics_ensemble", "elite_indices": list(ens.elite_indices),
            "activations": list(ens.members[0].activations), "config": asdict(ens.config),
            "lv_min": ens.head.lv_min, "lv_max": ens.head.lv_max, "u_max": ens.u_max,
            "val_nll": [float(v) for v in ens.history.get("val_nll", [])]}
    return tensors, meta


def ensemble_from_checkpoint(tensors, meta):
    from .dynamics import DynamicsEnsemble, EnsembleConfig
    from .nn import GaussianHead

    if meta.get("kind") != "dynamics_ensemble":
        raise SchemaError("checkpoint does not hold a dynamics ensemble")
    cfg = dict(meta["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    config = EnsembleConfig(**cfg)
    members = [_mlp_from(f"member{k}", tensors, meta["activations"]) for k in range(config.n_total)]
    return DynamicsEnsemble(members, GaussianHead(meta["lv_min"], meta["lv_max"]), tensors["in_mean"],
                            tensors["in_std"], tensors["out_scale"], tuple(meta["elite_indices"]), config,
                            dict(meta["u_max"]), {"val_nll": meta.get("val_nll", [])})


def cvae_to_checkpoint(model):
    tensors = {"s_mean": model.s_mean, "s_std": model.s_std}
    tensors.update(_mlp_tensors("encoder", model.encoder))
    tensors.update(_mlp_tensors("decoder", model.decoder))
    meta = {"kind": "cvae", "latent_dim": model.latent_dim, "action_bound": model.action_bound,
            "z_clip": model.z_clip, "enc_act": list(model.encoder.activations),
            "dec_act": list(model.decoder.activations), "loss": list(model.history.get("loss", []))}
    return tensors, meta


def cvae_from_checkpoint(tensors, meta):
    from .cvae import CvaeModel

    if meta.get("kind") != "cvae":
        raise SchemaError("checkpoint does not hold a CVAE")
    return CvaeModel(_mlp_from("encoder", tensors, meta["enc_act"]), _mlp_from("decoder", tensors, meta["dec_act"]),
                     meta["latent_dim"], meta["action_bound"], tensors["s_mean"], tensors["s_std"], meta["z_clip"],
                     {"loss": meta.get("loss", [])})


_AC_NETS = ("actor", "critic1", "critic2", "actor_t", "critic1_t", "critic2_t")


def actor_critic_to_checkpoint(model):
    from dataclasses import asdict

    tensors = {"s_mean": model.s_mean, "s_std": model.s_std}
    for name in _AC_NETS:
        tensors.update(_mlp_tensors(name, getattr(model, name)))
    for name in ("opt_actor", "opt_c1", "opt_c2"):
        st = getattr(model, name)
        for k, (m, v) in enumerate(zip(st.m, st.v)):
            tensors[f"{name}.m{k}"] = m
            tensors[f"{name}.v{k}"] = v
    meta = {"kind": "actor_critic", "action_bound": model.action_bound, "step": model.step,
            "config": asdict(model.config), "opt_t": [model.opt_actor.t, model.opt_c1.t, model.opt_c2.t],
            "acts": {n: list(getattr(model, n).activations) for n in _AC_NETS}}
    return tensors, meta


def actor_critic_from_checkpoint(tensors, meta):
    from .learners import ActorCritic, TD3BCConfig
    from .nn import AdamState

    if meta.get("kind") != "actor_critic":
        raise SchemaError("checkpoint does not hold an actor-critic")
    cfg = dict(meta["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    nets = {n: _mlp_from(n, tensors, meta["acts"][n]) for n in _AC_NETS}
    opts = {}
    for name, t in zip(("opt_actor", "opt_c1", "opt_c2"), meta["opt_t"]):
        k, ms, vs = 0, [], []
        while f"{name}.m{k}" in tensors:
            ms.append(tensors[f"{name}.m{k}"])
            vs.append(tensors[f"{name}.v{k}"])
            k += 1
        opts[name] = AdamState(tuple(ms), tuple(vs), t)
    return ActorCritic(**nets, **opts, s_mean=tensors["s_mean"], s_std=tensors["s_std"],
                       action_bound=meta["action_bound"], config=TD3BCConfig(**cfg), step=meta["step"])


def buffer_to_checkpoint(buf):
    from .augmentation import _COLUMNS

    tensors = {k: np.asarray(buf[k], dtype=np.float64) for k in _COLUMNS} if len(buf) else {}
    meta = {"kind": "model_buffer", "capacity": buf.capacity, "n": len(buf),
            "shapes": {k: list(np.shape(buf[k])) for k in _COLUMNS} if len(buf) else {}}
    return tensors, meta


def buffer_from_checkpoint(tensors, meta):
    from .augmentation import _COLUMNS, ModelBuffer

    if meta.get("kind") != "model_buffer":
        raise SchemaError("checkpoint does not hold a model buffer")
    buf = ModelBuffer(meta["capacity"])
    if meta["n"]:
        ints = {"traj_id", "step"}
        data = {}
        for k in _COLUMNS:
            v = tensors[k]
            data[k] = v.astype(np.int64) if k in ints else v.astype(bool) if k == "dones" else v
        buf.add(data)
    return buf


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class MetricsWriter:
    """Append-only metric log with a monotone step per ``(run_id, name)``."""

    def __init__(self, path, run_id: str):
        self.path = _path(path)
        self.run_id = run_id
        self._last: dict = {}
        if self.path.exists():
            for rec in read_metrics(self.path):
                self._last[(rec["run_id"], rec["name"])] = rec["step"]
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, step: int, name: str, value, tags: dict | None = None) -> None:
        key = (self.run_id, name)
        if key in self._last and step < self._last[key]:
            raise SchemaError(f"metric {name!r}: step {step} after {self._last[key]}")
        self._last[key] = step
        rec = {"run_id": self.run_id, "step": int(step), "name": name, "value": _jsonable(value),
               "tags": tags or {}}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def read_metrics(path) -> list:
    path = _path(path)
    _require(path)
    out = []
    for k, line in enumerate(path.read_text().splitlines()):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise SchemaError(f"{path}: line {k + 1} is not valid JSON") from None
        if not {"run_id", "step", "name", "value"} <= rec.keys():
            raise SchemaError(f"{path}: line {k + 1} lacks metric fields")
        out.append(rec)
    return out


def write_json(path, obj) -> Path:
    path = _path(path)
    _atomic_write(path, (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode())
    return path


def read_json(path):
    path = _path(path)
    _require(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from None


__all__ = [
    "save_dataset", "load_dataset", "save_checkpoint", "load_checkpoint", "encode_checkpoint", "decode_checkpoint",
    "MetricsWriter", "read_metrics", "write_json", "read_json", "ensemble_to_checkpoint", "ensemble_from_checkpoint",
    "cvae_to_checkpoint", "cvae_from_checkpoint", "actor_critic_to_checkpoint", "actor_critic_from_checkpoint",
    "buffer_to_checkpoint", "buffer_from_checkpoint",
]
