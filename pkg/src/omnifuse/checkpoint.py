"""OMNF checkpoint container.

Layout: ``b"OMNF"``, u32 format version, u64 manifest length, UTF-8 JSON
manifest, then the tensor payload as little-endian float64 blobs. Integer
and boolean arrays are widened to float64 on disk and narrowed back on load;
their manifest entry records the original dtype.
"""

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from omnifuse.distill import MtModel, StudentEncoder
from omnifuse.embeddings import EmbeddingSet
from omnifuse.engine import Sequential
from omnifuse.fusion import FusionOperator, Rescaler
from omnifuse.world import Expert, ExpertBank, ExpertSpec, LatentBatch, SyntheticDataset, World, WorldConfig

MAGIC = b"OMNF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = ("float64", "int64", "bool")


class CheckpointError(Exception):
    code = "checkpoint_error"


class BadMagic(CheckpointError):
    code = "bad_magic"


class UnsupportedVersion(CheckpointError):
    code = "unsupported_version"


class TruncatedPayload(CheckpointError):
    code = "truncated_payload"


class CorruptPayload(CheckpointError):
    code = "corrupt_payload"


class DigestMismatch(CheckpointError):
    code = "digest_mismatch"


def _to_disk(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        kind = "bool"
    elif np.issubdtype(arr.dtype, np.integer):
        kind = "int64"
        if arr.size and np.abs(arr).max() > 2 ** 53:
            raise ValueError("integer tensor exceeds the exactly representable float64 range")
    elif arr.dtype == np.float64:
        kind = "float64"
    else:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    return kind, np.require(arr.astype("<f8", copy=False), requirements="C")


def write_container(path, content_type, tensors, meta=None, seed=0, config_digest=""):
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        kind, data = _to_disk(tensors[name])
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "dtype": kind, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "content_type": content_type,
        "seed": int(seed),
        "config_digest": config_digest,
        "meta": meta or {},
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(head)))
        f.write(head)
        f.write(payload)
    tmp.replace(path)
    return path


def read_container(path, expected_digest=None):
    """Returns ``(manifest, tensors)``; raises a CheckpointError subclass on any defect."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        if not MAGIC.startswith(blob[:4]):
            raise BadMagic(f"{path}: not an OMNF file")
        raise TruncatedPayload(f"{path}: header cut short")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise TruncatedPayload(f"{path}: manifest cut short")
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"{path}: unreadable manifest") from exc
    payload = blob[start + mlen:]
    if len(payload) < manifest["payload_bytes"]:
        raise TruncatedPayload(f"{path}: payload has {len(payload)} of {manifest['payload_bytes']} bytes")
    payload = payload[:manifest["payload_bytes"]]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CorruptPayload(f"{path}: payload checksum mismatch")
    if expected_digest is not None and manifest["config_digest"] != expected_digest:
        raise DigestMismatch(f"{path}: written under config {manifest['config_digest'][:12]}, "
                             f"expected {expected_digest[:12]}")
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(e["dtype"]) if e["dtype"] != "float64" else arr.astype(np.float64)
    return manifest, tensors


# object codecs -----------------------------------------------------------

def _prefixed(prefix, d):
    return {f"{prefix}/{k}": v for k, v in d.items()}


def _unprefixed(prefix, d):
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in d.items() if k.startswith(prefix + "/")}


def _net_meta(net):
    return {"name": net.name, "spec": net.spec()}


def _net_load(meta, tensors, prefix):
    return Sequential.from_spec(meta["spec"], _unprefixed(prefix, tensors), name=meta["name"])


def _encode(obj):
    if isinstance(obj, Sequential):
        return "sequential", _net_meta(obj), _prefixed("net", obj.state())
    if isinstance(obj, StudentEncoder):
        return "student", {"mode": obj.mode, "net": _net_meta(obj.backbone)}, _prefixed("net", obj.backbone.state())
    if isinstance(obj, MtModel):
        meta = {"backbone": _net_meta(obj.backbone), "decoder": _net_meta(obj.decoder)}
        return "mt", meta, {**_prefixed("backbone", obj.backbone.state()), **_prefixed("decoder", obj.decoder.state())}
    if isinstance(obj, FusionOperator):
        meta = {"kind": obj.kind, "names": obj.names, "widths": obj.widths, "latent": obj.latent}
        tensors = {}
        for part in ("encoder", "decoder"):
            net = getattr(obj, part)
            if net is not None:
                meta[part] = _net_meta(net)
                tensors.update(_prefixed(part, net.state()))
        if obj.kind == "pca":
            tensors["mean"], tensors["components"] = obj.mean, obj.components
        return "fusion", meta, tensors
    if isinstance(obj, Rescaler):
        tensors = {}
        for i, (lo, hi) in enumerate(zip(obj.lo, obj.hi)):
            tensors[f"lo/{i}"], tensors[f"hi/{i}"] = lo, hi
        return "rescaler", {"n": len(obj.lo)}, tensors
    if isinstance(obj, EmbeddingSet):
        return "embeddings", {"names": obj.names}, {f"m/{i}": m for i, m in enumerate(obj.matrices)}
    if isinstance(obj, ExpertBank):
        meta = {"d_x": obj.d_x, "experts": []}
        tensors = {}
        for i, e in enumerate(obj.experts):
            meta["experts"].append({"spec": e.spec.to_dict(), "val_metric": e.val_metric, "chance": e.chance,
                                    "weak": e.weak, "encoder": _net_meta(e.encoder), "head": _net_meta(e.head)})
            tensors.update(_prefixed(f"{i}/encoder", e.encoder.state()))
            tensors.update(_prefixed(f"{i}/head", e.head.state()))
        return "bank", meta, tensors
    if isinstance(obj, SyntheticDataset):
        tensors = {"observations": obj.observations, "split": obj.split, "missing": obj.missing}
        tensors.update({f"labels/{k}": v for k, v in obj.labels.items()})
        for name, (l, r, s) in obj.pairs.items():
            tensors.update({f"pairs/{name}/left": l, f"pairs/{name}/right": r, f"pairs/{name}/same": s})
        if obj.latents is not None:
            tensors.update({f"latents/{k}": v for k, v in vars(obj.latents).items()})
        meta = {"domain_id": obj.domain_id, "labels": sorted(obj.labels), "pairs": sorted(obj.pairs),
                "latents": obj.latents is not None}
        return "dataset", meta, tensors
    if isinstance(obj, World):
        return "world", {"config": asdict(obj.cfg), "seed": obj.seed}, {}
    raise TypeError(f"no checkpoint codec for {type(obj).__name__}")


def _decode(content_type, meta, t):
    if content_type == "sequential":
        return _net_load(meta, t, "net")
    if content_type == "student":
        return StudentEncoder(_net_load(meta["net"], t, "net"), meta["mode"])
    if content_type == "mt":
        return MtModel(_net_load(meta["backbone"], t, "backbone"), _net_load(meta["decoder"], t, "decoder"))
    if content_type == "fusion":
        nets = {p: _net_load(meta[p], t, p) for p in ("encoder", "decoder") if p in meta}
        return FusionOperator(meta["kind"], meta["names"], meta["widths"], meta["latent"],
                              mean=t.get("mean"), components=t.get("components"), **nets)
    if content_type == "rescaler":
        n = meta["n"]
        return Rescaler([t[f"lo/{i}"] for i in range(n)], [t[f"hi/{i}"] for i in range(n)])
    if content_type == "embeddings":
        return EmbeddingSet(meta["names"], [t[f"m/{i}"] for i in range(len(meta["names"]))])
    if content_type == "bank":
        experts = []
        for i, e in enumerate(meta["experts"]):
            spec = ExpertSpec(**{**e["spec"], "hidden": tuple(e["spec"]["hidden"])})
            experts.append(Expert(spec, _net_load(e["encoder"], t, f"{i}/encoder"),
                                  _net_load(e["head"], t, f"{i}/head"), e["val_metric"], e["chance"], e["weak"]))
        return ExpertBank(experts, meta["d_x"])
    if content_type == "dataset":
        pairs = {n: (t[f"pairs/{n}/left"], t[f"pairs/{n}/right"], t[f"pairs/{n}/same"]) for n in meta["pairs"]}
        latents = None
        if meta["latents"]:
            latents = LatentBatch(**{k[len("latents/"):]: v for k, v in t.items() if k.startswith("latents/")})
        return SyntheticDataset(t["observations"], t["split"], meta["domain_id"],
                                {k: t[f"labels/{k}"] for k in meta["labels"]}, latents, pairs, t["missing"])
    if content_type == "world":
        return World(WorldConfig(**meta["config"]), meta["seed"])
    raise CheckpointError(f"unknown content type {content_type!r}")


def save_checkpoint(obj, path, seed=0, config_digest=""):
    content_type, meta, tensors = _encode(obj)
    return write_container(path, content_type, tensors, meta, seed, config_digest)


def load_checkpoint(path, expected_digest=None):
    manifest, tensors = read_container(path, expected_digest)
    return _decode(manifest["content_type"], manifest["meta"], tensors)


def read_manifest(path):
    return read_container(path)[0]
