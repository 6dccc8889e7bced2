"""Pair datasets and persistence.

A PairSample is one matching problem: source keypoints, target keypoints,
and the ground-truth injective mapping from source to target indices.
Synthetic pairs jitter and permute points in the unit square, standing in
for coordinate-only keypoint data.  Pair files are UTF-8 JSON lines, one
record per pair; checkpoints are a single binary file of named float64
parameter blocks.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import Graph, build_graph, normalize_feature_mode
from .matcher import MatcherModel, create_model
from .nn import AdamState, adam_init

__all__ = [
    "PairSample",
    "SynthConfig",
    "synth_pair",
    "synth_pairs",
    "save_pairs",
    "load_pairs",
    "pair_graphs",
    "save_checkpoint",
    "load_checkpoint",
    "convert_labeled_csv",
]

_MAGIC = b"KMCHKPT\x00"
_VERSION = 1


@dataclass
class PairSample:
    """A source/target keypoint pair with ground-truth mapping."""

    src: np.ndarray                     # (n_s, 2) float64
    tgt: np.ndarray                     # (n_t, 2) float64
    pi: np.ndarray                      # (n_s,) int64, injective into target
    src_feat: np.ndarray | None = None  # (n_s, d) float64
    tgt_feat: np.ndarray | None = None  # (n_t, d) float64

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.tgt = np.asarray(self.tgt, dtype=np.float64).reshape(-1, 2)
        self.pi = np.asarray(self.pi, dtype=np.int64).reshape(-1)
        n_s, n_t = len(self.src), len(self.tgt)
        if n_s > n_t:
            raise DataError("source larger than target")
        if len(self.pi) != n_s:
            raise DataError("mapping length does not match source size")
        if np.any(self.pi < 0) or np.any(self.pi >= n_t):
            raise DataError("mapping target index out of range")
        if len(np.unique(self.pi)) != n_s:
            raise DataError("mapping is not injective")


@dataclass
class SynthConfig:
    """Synthetic pair recipe: size, jitter, outliers, seed."""

    n: int = 20
    jitter: float = 0.02
    outliers: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.outliers < 0:
            raise ValueError("outliers must be >= 0")


def synth_pair(cfg: SynthConfig) -> PairSample:
    """One synthetic pair, deterministic in the seed.

    Source points are uniform in the unit square; targets are the jittered
    sources plus uniform outliers, shuffled together by a random
    permutation recorded in the ground-truth mapping.
    """
    rng = np.random.default_rng(cfg.seed)
    src = rng.uniform(size=(cfg.n, 2))
    noise = cfg.jitter * rng.standard_normal((cfg.n, 2))
    extra = rng.uniform(size=(cfg.outliers, 2))
    unshuffled = np.vstack([src + noise, extra])
    n_t = len(unshuffled)
    perm = rng.permutation(n_t)
    tgt = unshuffled[perm]
    position = np.empty(n_t, dtype=np.int64)
    position[perm] = np.arange(n_t)
    return PairSample(src=src, tgt=tgt, pi=position[: cfg.n])


def synth_pairs(cfg: SynthConfig, count: int) -> list[PairSample]:
    """A list of pairs with per-pair seeds derived from ``cfg.seed``."""
    child_seeds = np.random.SeedSequence(cfg.seed).generate_state(max(count, 1))
    return [
        synth_pair(
            SynthConfig(n=cfg.n, jitter=cfg.jitter, outliers=cfg.outliers,
                        seed=int(child_seeds[i]))
        )
        for i in range(count)
    ]


def _pair_to_record(pair: PairSample) -> dict:
    record = {
        "src": pair.src.tolist(),
        "tgt": pair.tgt.tolist(),
        "pi": pair.pi.tolist(),
    }
    if pair.src_feat is not None:
        record["src_feat"] = pair.src_feat.tolist()
    if pair.tgt_feat is not None:
        record["tgt_feat"] = pair.tgt_feat.tolist()
    return record


def save_pairs(pairs: list[PairSample], path) -> None:
    """Write pairs as JSON lines; floats round-trip bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(_pair_to_record(pair), sort_keys=True))
            fh.write("\n")


def load_pairs(path) -> list[PairSample]:
    """Read a JSON-lines pair file, validating every record."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                pairs.append(
                    PairSample(
                        src=np.asarray(record["src"], dtype=np.float64),
                        tgt=np.asarray(record["tgt"], dtype=np.float64),
                        pi=np.asarray(record["pi"], dtype=np.int64),
                        src_feat=_opt_array(record.get("src_feat")),
                        tgt_feat=_opt_array(record.get("tgt_feat")),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise DataError(f"line {lineno}: missing or malformed field ({exc})") from exc
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
    return pairs


def _opt_array(value):
    return None if value is None else np.asarray(value, dtype=np.float64)


def pair_graphs(pair: PairSample, feature_mode: str) -> tuple[Graph, Graph]:
    """Build the source and target graphs of one pair."""
    mode = normalize_feature_mode(feature_mode)
    g_s = build_graph(pair.src, mode)
    g_t = build_graph(pair.tgt, mode)
    if pair.src_feat is not None:
        g_s.x = np.asarray(pair.src_feat, dtype=np.float64)
    if pair.tgt_feat is not None:
        g_t.x = np.asarray(pair.tgt_feat, dtype=np.float64)
    return g_s, g_t


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _model_meta(model: MatcherModel, feature_mode: str | None, extra: dict) -> dict:
    return {
        "model": {
            "node_dim": model.node_dim,
            "hidden_dim": model.hidden_dim,
            "num_stages": model.num_stages,
            "layers_per_stack": len(model.gnn0.layers),
            "edge_dim": model.edge_dim,
            "kernel_size": model.gnn0.layers[0].kernel_size,
            "coloring_dim": model.coloring_dim,
            "normalization": model.normalization,
            "feature_mode": feature_mode,
        },
        "extra": extra,
    }


def save_checkpoint(
    model: MatcherModel,
    optimizer: AdamState | None,
    path,
    feature_mode: str | None = None,
    extra: dict | None = None,
) -> None:
    """Serialize model (and optionally optimizer) to one binary file.

    Layout: magic, version, JSON metadata, then named blocks of
    little-endian float64 with explicit shapes.  Saving, loading, and
    saving again produces identical bytes.
    """
    meta = _model_meta(model, feature_mode, extra or {})
    blocks: list[tuple[str, np.ndarray]] = list(model.named_parameters())
    blocks = [(name, p.data) for name, p in blocks]
    meta["optimizer"] = {"present": optimizer is not None}
    if optimizer is not None:
        meta["optimizer"]["step"] = optimizer.step
        names = [name for name, _ in model.named_parameters()]
        blocks += [(f"adam.m.{n}", arr) for n, arr in zip(names, optimizer.m)]
        blocks += [(f"adam.v.{n}", arr) for n, arr in zip(names, optimizer.v)]

    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise DataError("truncated checkpoint")
    return data


def load_checkpoint(path) -> tuple[MatcherModel, AdamState | None, dict]:
    """Rebuild a model (and optimizer state) from a checkpoint file.

    Returns (model, optimizer_or_None, metadata).  The metadata dict
    carries the stored feature_mode and any extra fields.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise DataError(
                f"unsupported checkpoint version {version} (expected {_VERSION})"
            )
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (num_blocks,) = struct.unpack("<I", _read_exact(fh, 4))
        blocks: dict[str, np.ndarray] = {}
        for _ in range(num_blocks):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
            blocks[name] = data.reshape(shape).astype(np.float64)
        if fh.read(1):
            raise DataError("trailing bytes after checkpoint payload")

    mm = meta["model"]
    model = create_model(
        node_dim=mm["node_dim"],
        hidden_dim=mm["hidden_dim"],
        num_stages=mm["num_stages"],
        layers_per_stack=mm["layers_per_stack"],
        edge_dim=mm["edge_dim"],
        rng=np.random.default_rng(0),
        kernel_size=mm["kernel_size"],
        coloring_dim=mm["coloring_dim"],
        normalization=mm["normalization"],
    )
    for name, param in model.named_parameters():
        if name not in blocks:
            raise DataError(f"checkpoint is missing parameter block {name!r}")
        stored = blocks[name]
        if stored.shape != param.data.shape:
            raise DataError(
                f"parameter {name!r} has shape {stored.shape}, "
                f"expected {param.data.shape}"
            )
        param.data = stored

    optimizer = None
    if meta.get("optimizer", {}).get("present"):
        optimizer = adam_init(model.parameters())
        optimizer.step = int(meta["optimizer"]["step"])
        for i, (name, param) in enumerate(model.named_parameters()):
            for kind, store in (("m", optimizer.m), ("v", optimizer.v)):
                key = f"adam.{kind}.{name}"
                if key not in blocks:
                    raise DataError(f"checkpoint is missing optimizer block {key!r}")
                if blocks[key].shape != param.data.shape:
                    raise DataError(f"optimizer block {key!r} has wrong shape")
                store[i] = blocks[key]
    return model, optimizer, meta


# ---------------------------------------------------------------------------
# External coordinate-pair import
# ---------------------------------------------------------------------------


def convert_labeled_csv(path) -> list[PairSample]:
    """Import labeled keypoint pairs from CSV.

    Expected columns: ``pair, side, label, x, y`` where ``side`` is
    ``src`` or ``tgt`` and matching keypoints of one pair share a label.
    Every source keypoint must have exactly one same-labeled target
    keypoint; extra target keypoints become outliers.
    """
    groups: dict[str, dict[str, list[tuple[str, float, float]]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"pair", "side", "label", "x", "y"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"CSV must have columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            side = row["side"].strip()
            if side not in ("src", "tgt"):
                raise DataError(f"line {lineno}: side must be 'src' or 'tgt'")
            try:
                x, y = float(row["x"]), float(row["y"])
            except ValueError as exc:
                raise DataError(f"line {lineno}: bad coordinate ({exc})") from exc
            pair_id = row["pair"].strip()
            if pair_id not in groups:
                groups[pair_id] = {"src": [], "tgt": []}
                order.append(pair_id)
            groups[pair_id][side].append((row["label"].strip(), x, y))

    pairs = []
    for pair_id in order:
        src_rows = groups[pair_id]["src"]
        tgt_rows = groups[pair_id]["tgt"]
        tgt_index = {label: i for i, (label, _, _) in enumerate(tgt_rows)}
        if len(tgt_index) != len(tgt_rows):
            raise DataError(f"pair {pair_id!r}: duplicate target label")
        pi = []
        for label, _, _ in src_rows:
            if label not in tgt_index:
                raise DataError(f"pair {pair_id!r}: source label {label!r} has no target")
            pi.append(tgt_index[label])
        pairs.append(
            PairSample(
                src=np.array([[x, y] for _, x, y in src_rows]),
                tgt=np.array([[x, y] for _, x, y in tgt_rows]),
                pi=np.array(pi, dtype=np.int64),
            )
        )
    return pairs
