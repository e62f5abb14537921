import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcnv2.core import Rng
from dcnv2.io import (
    FORMAT_VERSION,
    MAGIC,
    METRICS_HEADER,
    CheckpointError,
    ColumnSpec,
    ConfigError,
    DataError,
    ExperimentConfig,
    TabularSchema,
    Vocab,
    build_embedding,
    embed_size_rule,
    load_checkpoint,
    load_config,
    load_tabular_csv,
    parse_columns,
    parse_config,
    read_metrics,
    save_checkpoint,
    serialize_config,
    write_metrics,
)
from dcnv2.layers import EmbeddingLayer
from dcnv2.model import Architecture, Model, Task
from dcnv2.optim import EvalRecord, TrainHistory

# -- config --------------------------------------------------------------------------------


def test_parse_config_basic():
    cfg = parse_config(
        """
        # a comment
        command = synth-fit
        dataset = f2      # trailing comment
        num_cross = 2
        deep_sizes = 8, 4
        structure = stacked
        use_bias = false
        learning_rate = 3e-3
        """
    )
    assert cfg.command == "synth-fit" and cfg.dataset == "f2" and cfg.num_cross == 2
    assert cfg.deep_sizes == [8, 4] and cfg.use_bias is False and cfg.learning_rate == 0.003
    arch = cfg.architecture()
    assert len(arch.cross) == 2 and arch.deep_sizes == [8, 4] and not arch.cross[0].use_bias


@pytest.mark.parametrize(
    "text,match",
    [
        ("bogus = 1", "unknown key"),
        ("seed = 1\nseed = 2", "duplicate"),
        ("seed = one", "bad value"),
        ("use_bias = maybe", "bad value"),
        ("just words", "key = value"),
        ("command = fly", "command"),
        ("learning_rate = -1", "learning_rate"),
        ("dataset = f9", "dataset"),
        ("cross_kind = tiny", "tiny"),
        ("repeats = 0", "repeats"),
        ("split = 1.5", "split"),
        ("structure = cross_only\ndeep_sizes = 4", "deep"),
        ("command = train", "data_path"),
        ("command = analyze", "checkpoint"),
        ("rank = 0\ncross_kind = lowrank", "rank"),
    ],
)
def test_parse_config_rejects(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_overrides_and_command_conflict(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("command = oracle\nseed = 4\n")
    cfg = load_config(path, seed=9, out_dir=None)
    assert cfg.seed == 9 and cfg.out_dir == "out"
    with pytest.raises(ConfigError, match="oracle"):
        load_config(path, command="synth-fit")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.cfg")


def test_dnn_only_ignores_cross_count():
    cfg = parse_config("structure = dnn_only\ndeep_sizes = 5\nnum_cross = 3")
    assert cfg.architecture().cross == []


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["stacked", "parallel"]),
    st.integers(0, 5),
    st.lists(st.integers(1, 64), min_size=1, max_size=3),
    st.floats(1e-5, 1.0),
    st.booleans(),
    st.sampled_from(["full", "lowrank", "mixture"]),
)
def test_config_round_trip_is_idempotent(structure, num_cross, deep, lr, ema_warmup, kind):
    cfg = ExperimentConfig(
        structure=structure, num_cross=num_cross, deep_sizes=deep, learning_rate=lr, ema_warmup=ema_warmup,
        cross_kind=kind, rank=2, num_experts=3,
    )
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


# -- tabular CSV ------------------------------------------------------------------------------


def write_csv(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_categorical_first_occurrence(tmp_path):
    p = write_csv(tmp_path, "colour,y\na,1\nb,0\na,1\n")
    ds, vocabs = load_tabular_csv(p, parse_columns("colour:categorical,y:label"))
    assert len(vocabs["colour"]) == 2
    assert ds.inputs.sparse[0].tolist() == [0, 1, 0]
    assert ds.labels.tolist() == [1.0, 0.0, 1.0]


def test_dense_log_transform_and_multivalent(tmp_path):
    p = write_csv(tmp_path, "tags,count,y\na|b,0,0\nb,3,1\n")
    ds, vocabs = load_tabular_csv(p, parse_columns("tags:multivalent,count:dense:log=1,y:label"))
    assert ds.inputs.dense[0, 0] == 0.0
    assert ds.inputs.dense[1, 0] == pytest.approx(math.log(4.0))
    assert ds.inputs.sparse[0][0].tolist() == [0, 1]
    assert ds.inputs.sparse[0][1].tolist() == [1]


def test_vocab_stable_across_reads_and_reuse(tmp_path):
    p = write_csv(tmp_path, "c,y\nz,1\nx,0\ny,1\nx,0\n")
    schema = parse_columns("c:categorical,y:label")
    _, v1 = load_tabular_csv(p, schema)
    _, v2 = load_tabular_csv(p, schema)
    assert v1 == v2 and v1["c"].index == {"z": 0, "x": 1, "y": 2}
    held_out = write_csv(tmp_path, "c,y\ny,1\nw,0\n", "held.csv")
    with pytest.raises(DataError, match="'w'"):
        load_tabular_csv(held_out, schema, vocabs=v1)


def test_open_vocab_reserves_index_zero(tmp_path):
    p = write_csv(tmp_path, "c,y\nz,1\nx,0\n")
    schema = parse_columns("c:categorical:open,y:label")
    ds, vocabs = load_tabular_csv(p, schema)
    assert ds.inputs.sparse[0].tolist() == [1, 2] and len(vocabs["c"]) == 3
    other = write_csv(tmp_path, "c,y\nnew,1\nx,0\n", "other.csv")
    ds2, _ = load_tabular_csv(other, schema, vocabs=vocabs)
    assert ds2.inputs.sparse[0].tolist() == [0, 2]


def test_declared_vocab(tmp_path):
    schema = TabularSchema([ColumnSpec("c", "categorical", vocab=["p", "q"]), ColumnSpec("y", "label")])
    ds, _ = load_tabular_csv(write_csv(tmp_path, "c,y\nq,1\np,0\n"), schema)
    assert ds.inputs.sparse[0].tolist() == [1, 0]


@pytest.mark.parametrize(
    "text,task,match",
    [
        ("a,y\n1,1\n", "binary_logloss", "missing column"),
        ("c,d,y\nx,abc,1\n", "binary_logloss", "unparseable dense"),
        ("c,d,y\nx,1,2\n", "binary_logloss", "0 or 1"),
        ("c,d,y\nx,1,yes\n", "regression_mse", "unparseable label"),
        ("c,d,y\nx,1\n", "binary_logloss", "fields"),
        ("c,d,y\n", "binary_logloss", "no data rows"),
        ("", "binary_logloss", "empty"),
        ("c,d,y\nx,-5,1\n", "binary_logloss", "log"),
    ],
)
def test_csv_errors(tmp_path, text, task, match):
    schema = parse_columns("c:categorical,d:dense:log=1,y:label")
    with pytest.raises(DataError, match=match):
        load_tabular_csv(write_csv(tmp_path, text), schema, task)


def test_regression_labels_any_real(tmp_path):
    ds, _ = load_tabular_csv(write_csv(tmp_path, "d,y\n1,2.5\n2,-3\n"), parse_columns("d:dense,y:label"), "regression_mse")
    assert ds.labels.tolist() == [2.5, -3.0]


@pytest.mark.parametrize(
    "text", ["c:categorical", "c:categorical,y:label,z:label", "c:weird,y:label", "c:dense:bad,y:label", "c,y:label",
             "c:categorical:log=1,y:label", "c:dense,c:dense,y:label"]
)
def test_schema_errors(text):
    with pytest.raises(ConfigError):
        parse_columns(text)


def test_vocab_object():
    v = Vocab(["a", "b"])
    assert v.lookup("b") == 1 and v.lookup("c") == 2 and len(v) == 3
    v.freeze()
    with pytest.raises(DataError):
        v.lookup("d")


def test_embed_size_rule_examples():
    assert embed_size_rule(10000) == 60
    assert embed_size_rule(1) == 6
    assert embed_size_rule(16) == 12
    with pytest.raises(ValueError):
        embed_size_rule(0)


def test_build_embedding(tmp_path):
    p = write_csv(tmp_path, "c,t,d,y\na,x|y,1,1\nb,y,2,0\n")
    schema = parse_columns("c:categorical,t:multivalent,d:dense,y:label")
    _, vocabs = load_tabular_csv(p, schema)
    emb = build_embedding(schema, vocabs)
    assert emb.vocab_sizes == [2, 2] and emb.embed_sizes == [embed_size_rule(2)] * 2 and emb.num_dense == 1
    assert build_embedding(schema, vocabs, embed_size=3).output_dim == 7


# -- metrics ---------------------------------------------------------------------------------------


def make_history():
    h = TrainHistory()
    h.append(EvalRecord(10, 0.5, 0.4, 0.63, 0.41, 0.64, 1.25))
    h.append(EvalRecord(20, 0.3, 0.2, 0.44, 0.21, 0.45, 2.5))
    return h


def test_metrics_csv(tmp_path):
    p = write_metrics(tmp_path / "m.csv", make_history())
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    rows = read_metrics(p)
    assert [r["split"] for r in rows] == ["train", "test", "test_raw"] * 2
    steps = [r["step"] for r in rows]
    assert steps == sorted(steps)
    assert math.isnan(rows[0]["metric"]) and rows[1]["metric"] == 0.63 and rows[2]["metric"] == 0.64
    assert rows[4]["seconds"] == 2.5


def test_metrics_without_wall_clock_are_byte_identical(tmp_path):
    a = write_metrics(tmp_path / "a.csv", make_history(), wall_clock=False).read_bytes()
    h = make_history()
    h.records[0].seconds = 99.0
    b = write_metrics(tmp_path / "b.csv", h, wall_clock=False).read_bytes()
    assert a == b


def test_read_metrics_rejects_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_metrics(tmp_path / "m.csv")


# -- checkpoints ---------------------------------------------------------------------------------------


def trained_like(model, seed=0):
    model.init_params(Rng(seed))
    for p in model.params():
        p.assign(p.value + Rng(seed + 1).gaussian(0, 0.1, p.shape))
    return model


@pytest.mark.parametrize(
    "arch",
    [
        Architecture.uniform("cross_only", 2),
        Architecture.uniform("stacked", 1, [3], kind="lowrank", rank=2),
        Architecture.uniform("parallel", 2, [4, 2], kind="mixture", rank=2, num_experts=3, use_c=True, gate="sigmoid"),
        Architecture.uniform("dnn_only", 0, [5], deep_activation="hard_tanh"),
        Architecture.uniform("cross_only", 1, kind="dcn_v1"),
        Architecture.uniform("cross_only", 2, use_bias=False, use_residual=False),
    ],
    ids=["full", "lowrank", "mixture", "dnn", "dcn_v1", "ablation"],
)
def test_checkpoint_round_trip_is_bit_exact(tmp_path, arch):
    model = trained_like(Model(5, arch, "binary_logloss"))
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.arch == model.arch and back.task is Task.BINARY
    for k, v in model.state().items():
        assert v.tobytes() == back.state()[k].tobytes()
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert np.array_equal(model.predict(x), back.predict(x))
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_with_embedding(tmp_path):
    emb = EmbeddingLayer([3, 4], [2, 3], num_dense=1, names=["a", "b"])
    model = trained_like(Model(architecture=Architecture.uniform("stacked", 1, [2]), embedding=emb))
    back = load_checkpoint(save_checkpoint(model, tmp_path / "e.ckpt"))
    assert back.embedding.names == ["a", "b"] and back.param_count() == model.param_count()


def test_large_mixture_checkpoint_restores_param_count(tmp_path):
    model = Model(70, Architecture.uniform("cross_only", 1, kind="mixture", rank=64, num_experts=4), "regression_mse")
    model.init_params(Rng(0))
    back = load_checkpoint(save_checkpoint(model, tmp_path / "k4.ckpt"))
    assert back.param_count() == model.param_count() == 4 * (2 * 70 * 64 + 70 + 70) + 70


def test_checkpoint_dimension_mismatch(tmp_path):
    path = save_checkpoint(trained_like(Model(4, Architecture.uniform("cross_only", 1))), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="d=4"):
        load_checkpoint(path, expected_input_dim=5)
    assert load_checkpoint(path, expected_input_dim=4).input_dim == 4


def test_checkpoint_corruption_detected(tmp_path):
    path = save_checkpoint(trained_like(Model(4, Architecture.uniform("cross_only", 1))), tmp_path / "m.ckpt")
    blob = bytearray(path.read_bytes())
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    version = bytes(blob[:8]) + struct.pack("<I", FORMAT_VERSION + 1) + bytes(blob[12:])
    (tmp_path / "ver.ckpt").write_bytes(version)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "trunc.ckpt").write_bytes(bytes(blob[:20]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    assert blob.startswith(MAGIC)
