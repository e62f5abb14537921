"""Configs, tabular CSV ingestion, metrics files and model checkpoints."""

from __future__ import annotations

import csv
import json
import math
import struct
import zlib
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from .layers import EmbeddingLayer
from .model import Architecture, CrossSpec, Model, TabularInputs, Task
from .optim import ArrayDataset, TrainConfig, TrainHistory

COMMANDS = ("synth-fit", "train", "gradcheck", "oracle", "analyze")
SYNTHETIC_SETS = ("f1", "f2", "f3", "homogeneous3", "homogeneous4", "combined")
METRICS_HEADER = ["step", "split", "loss", "metric", "seconds"]


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class DataError(ValueError):
    """Malformed tabular input."""


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


# -- configuration ------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list[int]:
    text = text.strip()
    return [int(p) for p in text.split(",") if p.strip()] if text else []


@dataclass
class ExperimentConfig:
    command: str = "synth-fit"
    # architecture
    structure: str = "cross_only"
    num_cross: int = 1
    cross_kind: str = "full"
    rank: int = 1
    num_experts: int = 1
    gate: str = "softmax"
    use_c: bool = False
    cross_activation: str = "tanh"
    use_bias: bool = True
    use_residual: bool = True
    deep_sizes: list[int] = field(default_factory=list)
    deep_activation: str = "relu"
    task: str = "regression_mse"
    # optimisation
    learning_rate: float = 1e-3
    batch_size: int = 512
    steps: int = 1000
    clip_norm: float = 10.0
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    l2: float = 0.0
    seed: int = 0
    eval_every: int = 0
    repeats: int = 1
    wall_clock: bool = True
    # data
    dataset: str = "f1"
    data_seed: int = 0
    num_samples: int = 0
    split: float = 0.8
    data_path: str = ""
    columns: str = ""
    embed_size: int = 0
    # analysis and oracle
    checkpoint: str = ""
    feature_sizes: list[int] = field(default_factory=list)
    rank_tolerance: float = 1e-2
    oracle_dim: int = 3
    instances: int = 20
    out_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}, got {self.command!r}")
        try:
            self.architecture()
            self.train_config()
            Task(self.task)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must lie in (0, 1)")
        if self.num_samples < 0 or self.embed_size < 0 or self.data_seed < 0:
            raise ConfigError("num_samples, embed_size and data_seed must be non-negative")
        if self.command == "synth-fit" and self.dataset not in SYNTHETIC_SETS:
            raise ConfigError(f"dataset must be one of {SYNTHETIC_SETS}")
        if self.command == "train" and not (self.data_path and self.columns):
            raise ConfigError("train needs data_path and columns")
        if self.command == "train":
            parse_columns(self.columns)
        if self.command == "analyze" and not self.checkpoint:
            raise ConfigError("analyze needs a checkpoint")
        if not 0.0 < self.rank_tolerance < 1.0:
            raise ConfigError("rank_tolerance must lie in (0, 1)")
        if not 1 <= self.oracle_dim <= 8 or self.instances < 1:
            raise ConfigError("oracle_dim must be in 1..8 and instances >= 1")

    def architecture(self) -> Architecture:
        spec = dict(
            kind=self.cross_kind,
            rank=self.rank,
            num_experts=self.num_experts,
            gate=self.gate,
            use_c=self.use_c,
            activation=self.cross_activation,
            use_bias=self.use_bias,
            use_residual=self.use_residual,
        )
        n_cross = 0 if self.structure == "dnn_only" else self.num_cross
        if n_cross < 0:
            raise ValueError("num_cross must be non-negative")
        if any(s < 1 for s in self.deep_sizes):
            raise ValueError("deep layer widths must be positive")
        crosses = [CrossSpec(**spec) for _ in range(n_cross)]
        for c in crosses:
            if c.rank < 1 or c.num_experts < 1:
                raise ValueError("rank and num_experts must be >= 1")
        return Architecture(self.structure, crosses, list(self.deep_sizes), self.deep_activation)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            steps=self.steps,
            clip_norm=self.clip_norm,
            ema_decay=self.ema_decay,
            ema_warmup=self.ema_warmup,
            l2=self.l2,
            seed=self.seed if seed is None else seed,
            eval_every=self.eval_every,
        )


def _field_parsers():
    by_type = {"bool": _parse_bool, "int": int, "float": float, "str": str, "list[int]": _parse_int_list}
    return {f.name: by_type[f.type] for f in fields(ExperimentConfig)}


_PARSERS = _field_parsers()


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment). Unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "command" in values and "command" in overrides and values["command"] != overrides["command"]:
        raise ConfigError(f"config is for {values['command']!r}, not {overrides['command']!r}")
    values.update(overrides)
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, list):
            text = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# -- tabular data ---------------------------------------------------------------


class ColumnKind(str, Enum):
    CATEGORICAL = "categorical"
    MULTIVALENT = "multivalent"
    DENSE = "dense"
    LABEL = "label"


@dataclass
class ColumnSpec:
    name: str
    kind: ColumnKind
    vocab: list[str] | None = None
    open_vocab: bool = False
    log_offset: float | None = None

    def __post_init__(self):
        self.kind = ColumnKind(self.kind)
        if self.log_offset is not None and self.kind is not ColumnKind.DENSE:
            raise ValueError(f"column {self.name}: log transform only applies to dense columns")


@dataclass
class TabularSchema:
    columns: list[ColumnSpec]

    def __post_init__(self):
        labels = [c for c in self.columns if c.kind is ColumnKind.LABEL]
        if len(labels) != 1:
            raise ValueError("schema needs exactly one label column")
        if len(self.columns) < 2:
            raise ValueError("schema needs at least one feature column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")

    @property
    def label(self) -> ColumnSpec:
        return next(c for c in self.columns if c.kind is ColumnKind.LABEL)

    @property
    def sparse(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind in (ColumnKind.CATEGORICAL, ColumnKind.MULTIVALENT)]

    @property
    def dense(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind is ColumnKind.DENSE]


def parse_columns(text: str) -> TabularSchema:
    """Schema from ``name:kind[:option]`` items; options are ``open`` and ``log=<c>``."""
    cols = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad column spec {item!r}")
        kwargs = {}
        if len(parts) == 3:
            opt = parts[2].strip()
            if opt == "open":
                kwargs["open_vocab"] = True
            elif opt.startswith("log="):
                kwargs["log_offset"] = float(opt[4:])
            else:
                raise ConfigError(f"unknown column option {opt!r}")
        try:
            cols.append(ColumnSpec(parts[0].strip(), parts[1].strip(), **kwargs))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return TabularSchema(cols)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


class Vocab:
    """Category -> index mapping in first-occurrence order.

    Open vocabularies reserve index 0 for values never seen while fitting.
    """

    def __init__(self, values=(), open_vocab: bool = False, frozen: bool = False):
        self.open_vocab = open_vocab
        self.index: dict[str, int] = {}
        self.frozen = False
        for v in values:
            self.lookup(v)
        self.frozen = frozen

    def __len__(self):
        return len(self.index) + (1 if self.open_vocab else 0)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.index == other.index and self.open_vocab == other.open_vocab

    def lookup(self, value: str) -> int:
        idx = self.index.get(value)
        if idx is not None:
            return idx
        if self.frozen:
            if self.open_vocab:
                return 0
            raise DataError(f"value {value!r} not in vocabulary")
        idx = len(self)
        self.index[value] = idx
        return idx

    def freeze(self) -> Vocab:
        self.frozen = True
        return self


def _label_value(text: str, task: Task, row: int) -> float:
    try:
        y = float(text)
    except ValueError:
        raise DataError(f"row {row}: unparseable label {text!r}") from None
    if not math.isfinite(y):
        raise DataError(f"row {row}: non-finite label")
    if task is Task.BINARY and y not in (0.0, 1.0):
        raise DataError(f"row {row}: binary label must be 0 or 1, got {text!r}")
    return y


def load_tabular_csv(path, schema: TabularSchema, task=Task.BINARY, vocabs: dict[str, Vocab] | None = None):
    """Read a CSV into ``(ArrayDataset, vocabs)``.

    Passing ``vocabs`` from an earlier call reuses (and freezes) them, which is
    how held-out files are mapped consistently.
    """
    task = Task(task)
    path = Path(path)
    fitted = {}
    for col in schema.sparse:
        if vocabs and col.name in vocabs:
            fitted[col.name] = vocabs[col.name].freeze()
        elif col.vocab is not None:
            fitted[col.name] = Vocab(col.vocab, col.open_vocab, frozen=True)
        else:
            fitted[col.name] = Vocab(open_vocab=col.open_vocab)
    sparse = {c.name: [] for c in schema.sparse}
    dense = {c.name: [] for c in schema.dense}
    labels = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c.name for c in schema.columns if c.name not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        pos = {name: i for i, name in enumerate(header)}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            for col in schema.columns:
                cell = row[pos[col.name]].strip()
                if col.kind is ColumnKind.LABEL:
                    labels.append(_label_value(cell, task, row_no))
                elif col.kind is ColumnKind.CATEGORICAL:
                    sparse[col.name].append(fitted[col.name].lookup(cell))
                elif col.kind is ColumnKind.MULTIVALENT:
                    items = [s.strip() for s in cell.split("|") if s.strip()]
                    if not items:
                        if not col.open_vocab:
                            raise DataError(f"row {row_no}: empty multivalent cell in {col.name!r}")
                        sparse[col.name].append([0])
                    else:
                        sparse[col.name].append([fitted[col.name].lookup(s) for s in items])
                else:
                    try:
                        value = float(cell)
                    except ValueError:
                        raise DataError(f"row {row_no}: unparseable dense value {cell!r} in {col.name!r}") from None
                    if col.log_offset is not None:
                        if value + col.log_offset <= 0:
                            raise DataError(f"row {row_no}: log({value} + {col.log_offset}) undefined")
                        value = math.log(value + col.log_offset)
                    dense[col.name].append(value)
    if not labels:
        raise DataError(f"{path}: no data rows")
    sparse_cols = []
    for col in schema.sparse:
        vals = sparse[col.name]
        if col.kind is ColumnKind.CATEGORICAL:
            sparse_cols.append(np.asarray(vals, dtype=np.int64))
        else:
            sparse_cols.append([np.asarray(v, dtype=np.int64) for v in vals])
    dense_arr = np.column_stack([dense[c.name] for c in schema.dense]) if schema.dense else None
    return ArrayDataset(TabularInputs(sparse_cols, dense_arr), labels), fitted


def embed_size_rule(vocab_size: int) -> int:
    """``round(6 * v^(1/4))``, at least 1."""
    if vocab_size < 1:
        raise ValueError("vocab_size must be >= 1")
    return max(1, int(round(6.0 * vocab_size**0.25)))


def build_embedding(schema: TabularSchema, vocabs: dict[str, Vocab], embed_size: int = 0) -> EmbeddingLayer:
    """Embedding layer for ``schema``; ``embed_size=0`` applies ``embed_size_rule`` per feature."""
    sizes = [len(vocabs[c.name]) for c in schema.sparse]
    dims = [embed_size or embed_size_rule(v) for v in sizes]
    return EmbeddingLayer(sizes, dims, num_dense=len(schema.dense), names=[c.name for c in schema.sparse])


# -- metrics ------------------------------------------------------------------------


def write_metrics(path, history: TrainHistory, wall_clock: bool = True) -> Path:
    """One ``train``, ``test`` (EMA weights) and ``test_raw`` row per evaluation.

    Train rows report the mean mini-batch loss since the previous evaluation;
    their metric column is ``nan`` because no full pass is made. With
    ``wall_clock=False`` the seconds column is written as 0 so reruns are
    byte-identical.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in history.records:
            secs = repr(round(r.seconds, 6)) if wall_clock else "0"
            w.writerow([r.step, "train", repr(r.train_loss), "nan", secs])
            w.writerow([r.step, "test", repr(r.eval_loss), repr(r.eval_metric), secs])
            w.writerow([r.step, "test_raw", repr(r.raw_eval_loss), repr(r.raw_eval_metric), secs])
    return path


def read_metrics(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise DataError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [
            {"step": int(r["step"]), "split": r["split"], "loss": float(r["loss"]), "metric": float(r["metric"]),
             "seconds": float(r["seconds"])}
            for r in reader
        ]


# -- checkpoints ---------------------------------------------------------------------

MAGIC = b"DCN2CKPT"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def model_descriptor(model: Model) -> dict:
    emb = model.embedding
    return {
        "input_dim": model.input_dim,
        "task": model.task.value,
        "architecture": model.arch.to_dict(),
        "head_bias": model.head_bias is not None,
        "embedding": None
        if emb is None
        else {
            "vocab_sizes": emb.vocab_sizes,
            "embed_sizes": emb.embed_sizes,
            "num_dense": emb.num_dense,
            "names": emb.names,
        },
    }


def model_from_descriptor(desc: dict) -> Model:
    emb = None
    if desc.get("embedding"):
        e = desc["embedding"]
        emb = EmbeddingLayer(e["vocab_sizes"], e["embed_sizes"], e["num_dense"], e["names"])
    arch = Architecture(**desc["architecture"])
    return Model(desc["input_dim"], arch, desc["task"], embedding=emb, head_bias=desc["head_bias"])


def save_checkpoint(model: Model, path) -> Path:
    """Magic, version, JSON descriptor, then length-prefixed named float64 arrays and a CRC32."""
    body = bytearray()
    body += _pack_str(json.dumps(model_descriptor(model), sort_keys=True))
    state = model.state()
    body += _U32.pack(len(state))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        body += _pack_str(name)
        body += _U32.pack(arr.ndim)
        for n in arr.shape:
            body += _U64.pack(n)
        raw = arr.tobytes()
        body += _U64.pack(len(raw)) + raw
    blob = MAGIC + _U32.pack(FORMAT_VERSION) + bytes(body) + _U32.pack(zlib.crc32(body))
    path = Path(path)
    path.write_bytes(blob)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, expected_input_dim: int | None = None) -> Model:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(blob)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body = blob[r.pos : -4]
    if len(blob) < r.pos + 4 or zlib.crc32(body) != _U32.unpack(blob[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    r = _Reader(body)
    try:
        desc = json.loads(r.string())
        count = r.u32()
        state = {}
        for _ in range(count):
            name = r.string()
            shape = tuple(r.u64() for _ in range(r.u32()))
            raw = r.take(r.u64())
            arr = np.frombuffer(raw, dtype="<f8")
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"array {name!r}: {arr.size} values for shape {shape}")
            state[name] = arr.reshape(shape).astype(np.float64)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc
    if expected_input_dim is not None and desc["input_dim"] != expected_input_dim:
        raise CheckpointError(f"checkpoint declares d={desc['input_dim']}, expected {expected_input_dim}")
    try:
        model = model_from_descriptor(desc)
        params = model.named_params()
        for name, arr in state.items():
            if name in params and params[name].value.shape != arr.shape:
                raise CheckpointError(
                    f"array {name!r} has shape {arr.shape} but the declared architecture needs {params[name].value.shape}"
                )
        model.load_state(state)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: {exc}") from exc
    return model
