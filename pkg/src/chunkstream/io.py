"""On-disk formats: binary tensors, weight/adapter manifests, alignments,
datasets and timelines.

Binary tensor layout (little-endian)::

    b"CWTF" | u32 version=1 | u32 rows | u32 cols | rows*cols float32, row-major
"""

from __future__ import annotations

import json
import struct
from collections.abc import Iterable, Sequence
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError
from .finetune import AlignedUtterance, TimedToken
from .metrics import ReferenceAlignment, StreamEvent, TimedWord
from .model import LoraAdapter, ModelConfig, ModelWeights, tensor_shapes

MAGIC = b"CWTF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


# ---------------------------------------------------------------------------
# tensors


def tensor_bytes(m: np.ndarray) -> bytes:
    m = np.asarray(m)
    if m.ndim != 2:
        raise FormatError(f"only 2-D tensors can be stored, got shape {m.shape}")
    return _HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1]) + np.ascontiguousarray(m, dtype="<f4").tobytes()


def parse_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"tensor header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", 4)
    want = _HEADER.size + 4 * rows * cols
    if len(buf) != want:
        raise FormatError(f"expected {want} bytes for a {rows}x{cols} tensor, got {len(buf)}", min(len(buf), want))
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(data.ravel()))
    if bad.size:
        raise FormatError("tensor holds a non-finite value", _HEADER.size + 4 * int(bad[0]))
    return data


def write_tensor(path: str | Path, m: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(m))


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e.strerror}") from e
    try:
        return parse_tensor(buf)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# JSON helpers


def read_json(path: str | Path) -> Any:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e.strerror}") from e
    try:
        return json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8", e.start) from None
    except json.JSONDecodeError as e:
        offset = len(e.doc[: e.pos].encode("utf-8"))
        raise FormatError(f"{path}: {e.msg}", offset) from None


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def _field(obj: dict, key: str, kind: type | tuple[type, ...], where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}: missing key {key!r}")
    val = obj[key]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise FormatError(f"{where}: key {key!r} has the wrong type")
    return val


# ---------------------------------------------------------------------------
# model weights and adapters


def default_vocab(config: ModelConfig) -> list[str]:
    return ["<eot>", "<sot>"] + [f"w{i}" for i in range(2, config.vocab)]


def save_weights(directory: str | Path, weights: ModelWeights, vocab: Sequence[str] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in tensor_shapes(weights.config):
        fname = f"{name}.cwtf"
        write_tensor(directory / fname, weights[name])
        entries.append({"name": name, "shape": list(weights[name].shape), "file": fname})
    manifest = {
        "kind": "weights",
        "config": asdict(weights.config),
        "vocab": list(vocab) if vocab is not None else default_vocab(weights.config),
        "tensors": entries,
    }
    path = directory / "manifest.json"
    write_json(path, manifest)
    return path


def load_weights(manifest_path: str | Path) -> tuple[ModelWeights, list[str]]:
    manifest_path = Path(manifest_path)
    m = read_json(manifest_path)
    where = str(manifest_path)
    cfg_raw = _field(m, "config", dict, where)
    try:
        config = ModelConfig(**cfg_raw)
    except TypeError as e:
        raise FormatError(f"{where}: bad config ({e})") from None
    vocab = _field(m, "vocab", list, where)
    if len(vocab) != config.vocab:
        raise FormatError(f"{where}: vocab lists {len(vocab)} entries, config says {config.vocab}")
    shapes = tensor_shapes(config)
    tensors = {}
    for entry in _field(m, "tensors", list, where):
        name = _field(entry, "name", str, where)
        t = read_tensor(manifest_path.parent / _field(entry, "file", str, where))
        if name not in shapes:
            raise FormatError(f"{where}: unknown tensor {name!r}")
        if t.shape != shapes[name]:
            raise FormatError(f"{where}: tensor {name} has shape {t.shape}, expected {shapes[name]}")
        tensors[name] = t
    missing = set(shapes) - set(tensors)
    if missing:
        raise FormatError(f"{where}: missing tensors {sorted(missing)}")
    return ModelWeights(config, tensors), [str(v) for v in vocab]


def save_adapters(directory: str | Path, adapters: dict[str, LoraAdapter]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(adapters):
        ad = adapters[name]
        write_tensor(directory / f"{name}.a.cwtf", ad.a)
        write_tensor(directory / f"{name}.b.cwtf", ad.b)
        entries.append({"name": name, "a": f"{name}.a.cwtf", "b": f"{name}.b.cwtf", "scale": ad.scale})
    path = directory / "manifest.json"
    write_json(path, {"kind": "lora", "adapters": entries})
    return path


def load_adapters(manifest_path: str | Path) -> dict[str, LoraAdapter]:
    manifest_path = Path(manifest_path)
    m = read_json(manifest_path)
    where = str(manifest_path)
    out = {}
    for entry in _field(m, "adapters", list, where):
        name = _field(entry, "name", str, where)
        a = read_tensor(manifest_path.parent / _field(entry, "a", str, where))
        b = read_tensor(manifest_path.parent / _field(entry, "b", str, where))
        scale = float(_field(entry, "scale", (int, float), where))
        if a.shape[1] != b.shape[0]:
            raise FormatError(f"{where}: adapter {name} has mismatched rank")
        out[name] = LoraAdapter(a, b, scale)
    return out


# ---------------------------------------------------------------------------
# alignments and datasets


def alignment_json(utt: AlignedUtterance) -> dict:
    return {
        "words": [{"w": w, "end_ms": int(t)} for w, t in utt.words],
        "tokens": [{"id": int(t.id), "end_ms": int(t.end_ms)} for t in utt.tokens],
    }


def parse_alignment(obj: Any, where: str) -> tuple[list[tuple[str, int]], list[TimedToken]]:
    words = [(_field(w, "w", str, where), _field(w, "end_ms", int, where)) for w in _field(obj, "words", list, where)]
    tokens = [
        TimedToken(_field(t, "id", int, where), _field(t, "end_ms", int, where))
        for t in (obj.get("tokens", []) if isinstance(obj, dict) else [])
    ]
    return words, tokens


def read_alignment(path: str | Path) -> ReferenceAlignment:
    words, _ = parse_alignment(read_json(path), str(path))
    return ReferenceAlignment.from_pairs(words)


def save_dataset(directory: str | Path, utterances: Iterable[AlignedUtterance]) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    (directory / "alignments").mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in utterances:
        feat = f"features/{utt.uid}.cwtf"
        ali = f"alignments/{utt.uid}.json"
        write_tensor(directory / feat, utt.features)
        write_json(directory / ali, alignment_json(utt))
        entries.append({"id": utt.uid, "features": feat, "alignment": ali})
    path = directory / "manifest.json"
    write_json(path, {"utterances": entries})
    return path


def load_dataset(manifest_path: str | Path) -> list[AlignedUtterance]:
    manifest_path = Path(manifest_path)
    m = read_json(manifest_path)
    where = str(manifest_path)
    out = []
    for entry in _field(m, "utterances", list, where):
        uid = _field(entry, "id", str, where)
        feats = read_tensor(manifest_path.parent / _field(entry, "features", str, where))
        ali_path = manifest_path.parent / _field(entry, "alignment", str, where)
        words, tokens = parse_alignment(read_json(ali_path), str(ali_path))
        out.append(AlignedUtterance(uid, feats, tuple(tokens), tuple(words)))
    return out


# ---------------------------------------------------------------------------
# timelines and timestamps


TIMELINE_KEYS = ("k", "time_ms", "tokens", "text", "latency_ms", "committed")


def timeline_line(record: dict) -> str:
    return json.dumps({k: record[k] for k in TIMELINE_KEYS}, separators=(",", ":"))


def write_timeline(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(timeline_line(r) + "\n")


def read_timeline(path: str | Path) -> list[dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e.strerror}") from e
    records = []
    offset = 0
    for line in raw.split(b"\n"):
        if line.strip():
            try:
                obj = json.loads(line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise FormatError(f"{path}: malformed timeline line", offset) from None
            where = f"{path} (byte {offset})"
            for key, kind in (("k", int), ("time_ms", int), ("tokens", list), ("text", str), ("latency_ms", (int, float))):
                _field(obj, key, kind, where)
            records.append(obj)
        offset += len(line) + 1
    if not records:
        raise FormatError(f"{path}: empty timeline", 0)
    ks = [r["k"] for r in records]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise FormatError(f"{path}: chunk indices must strictly increase")
    return records


def timeline_events(records: Sequence[dict]) -> list[StreamEvent]:
    return [StreamEvent(int(r["time_ms"]), tuple(r["text"].split())) for r in records]


def write_timestamps(path: str | Path, words: Sequence[TimedWord]) -> None:
    write_json(path, {"words": [{"w": w.word, "start_ms": w.start_ms, "end_ms": w.end_ms} for w in words]})


def read_timestamps(path: str | Path) -> list[TimedWord]:
    obj = read_json(path)
    where = str(path)
    return [
        TimedWord(_field(w, "w", str, where), _field(w, "start_ms", int, where), _field(w, "end_ms", int, where))
        for w in _field(obj, "words", list, where)
    ]
