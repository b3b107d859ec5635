import csv
import io
import json
from pathlib import Path

import pytest

from fedpara.cli import CSV_COLUMNS, OUTPUT_ENV, main, rank_trials
from fedpara.config import ConfigError, parse_config
from fedpara.parameterization import Scheme

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = Path(__file__).resolve().parent / "golden"

MINIMAL = """\
seed: 3
dataset: {kind: blobs, num_classes: 3, dim: 6, per_class_train: 20, per_class_test: 10}
model:
  input_shape: [6]
  layers:
    - {kind: fc, out: 8, activation: relu}
    - {kind: fc, out: 3}
federation: {clients: 3, clients_per_round: 2, rounds: 1}
"""


@pytest.fixture
def minimal(tmp_path):
    p = tmp_path / "min.yaml"
    p.write_text(MINIMAL)
    return p


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


# ----------------------------------------------------------------------------
# config parsing


def test_minimal_config_resolves():
    cfg = parse_config(MINIMAL)
    spec = cfg.model_spec()
    assert [l.scheme for l in spec.layers] == [Scheme.FEDPARA, Scheme.FEDPARA]
    assert cfg.federation.per_round == 2
    assert cfg.sgd_config().lam == 1.0


def test_unknown_key_located():
    text = MINIMAL.replace("{kind: fc, out: 3}", "{kind: fc, out: 3, colour: red}")
    with pytest.raises(ConfigError) as e:
        parse_config(text, "x.yaml")
    assert e.value.errors[0][0] == "line 7, field model.layers.1.colour"


def test_bad_value_located():
    text = MINIMAL.replace("rounds: 1", "rounds: -4")
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    where, _ = e.value.errors[0]
    assert where.startswith("line 8") and where.endswith("federation.rounds")


def test_per_layer_rank_and_scheme_override():
    text = MINIMAL.replace("{kind: fc, out: 8, activation: relu}", "{kind: fc, out: 8, activation: relu, rank: 2}")
    text = text.replace("{kind: fc, out: 3}", "{kind: fc, out: 3, scheme: original}")
    spec = parse_config(text).model_spec()
    assert spec.layers[0].rank == 2 and spec.layers[1].scheme is Scheme.ORIGINAL


def test_personalized_needs_personalized_layers():
    with pytest.raises(ConfigError) as e:
        parse_config(MINIMAL, overrides=["federation.algorithm=pfedpara"])
    assert "federation.algorithm" in e.value.errors[0][0]


def test_override_parsing():
    cfg = parse_config(MINIMAL, overrides=["federation.rounds=7", "model.gamma=0.25"])
    assert cfg.federation.rounds == 7 and cfg.model.gamma == 0.25
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, overrides=["no_equals_sign"])


def test_shipped_configs_validate():
    for p in sorted((ROOT / "configs").glob("*.yaml")):
        parse_config(p.read_text(), str(p)).model_spec()


# ----------------------------------------------------------------------------
# train


def test_train_writes_one_row(minimal, tmp_path):
    out = tmp_path / "out"
    assert main(["train", str(minimal), "--out", str(out), "-q"]) == 0
    rows = read_csv(out / "rounds.csv")
    assert len(rows) == 2 and rows[1][0] == "1"


def test_golden_schemas(minimal, tmp_path):
    out = tmp_path / "out"
    main(["train", str(minimal), "--out", str(out), "-q"])
    assert (out / "rounds.csv").read_text().splitlines()[0] + "\n" == (GOLDEN / "rounds_header.csv").read_text()
    assert ",".join(CSV_COLUMNS) + "\n" == (GOLDEN / "rounds_header.csv").read_text()
    golden = json.loads((GOLDEN / "summary_schema.json").read_text())
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema_version"] == golden["schema_version"]
    assert sorted(summary) == golden["top"]
    assert sorted(summary["final"]) == golden["final"]
    assert all(sorted(l) == golden["layer"] for l in summary["layers"])
    assert sorted(summary["config"]) == golden["config"]


def test_replay_byte_identical_across_workers(minimal, tmp_path):
    args = ["train", str(minimal), "-q", "--set", "federation.rounds=3"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b"), "--workers", "3"])
    assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()


def test_output_env_override(minimal, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["train", str(minimal), "-q"]) == 0
    assert (tmp_path / "env" / "rounds.csv").exists()
    main(["train", str(minimal), "-q", "--out", str(tmp_path / "flag")])
    assert (tmp_path / "flag" / "summary.json").exists()


def test_personalized_vector_in_summary(tmp_path):
    out = tmp_path / "p"
    cfg = ROOT / "configs" / "personalized_pathological.yaml"
    assert main(["train", str(cfg), "-q", "--out", str(out), "--set", "federation.rounds=2"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    vec = summary["personalized_accuracy"]
    assert len(vec) == 10 and all(0.0 <= a <= 1.0 for a in vec)
    assert summary["initial_broadcast_bytes"] > 0


def test_config_error_exit_2(minimal, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL.replace("seed: 3", "seed: 3\nsede: 4"))
    assert main(["train", str(bad), "-q", "--out", str(tmp_path / "o")]) == 2
    assert "line 2, field sede" in capsys.readouterr().err


def test_divergence_exit_3(minimal, tmp_path):
    code = main(["train", str(minimal), "-q", "--out", str(tmp_path / "o"),
                 "--set", "federation.lr=1e30", "--set", "federation.rounds=3"])
    assert code == 3


# ----------------------------------------------------------------------------
# cost


def cost_json(capsys, *args):
    assert main(["cost", *args, "--json"]) == 0
    return json.loads(capsys.readouterr().out)


def test_cost_zero_rounds(minimal, capsys):
    rep = cost_json(capsys, str(minimal), "--set", "federation.rounds=0")
    assert rep["total_bytes"] == 0 and rep["total_seconds"] == 0 and rep["total_joules"] == 0


def test_cost_linear_in_rounds(minimal, capsys):
    a = cost_json(capsys, str(minimal), "--set", "federation.rounds=5")
    b = cost_json(capsys, str(minimal), "--set", "federation.rounds=15")
    assert b["total_bytes"] == 3 * a["total_bytes"]


def test_cost_vgg_ratio(capsys):
    vgg = str(ROOT / "configs" / "vgg16_cifar10_cost.yaml")
    small = cost_json(capsys, vgg, "--set", "model.gamma=0.1")
    full = cost_json(capsys, vgg, "--set", "model.scheme=original")
    assert small["total_bytes"] / full["total_bytes"] == pytest.approx(1.55 / 15.25, rel=0.01)


def test_cost_text_output(minimal, capsys):
    assert main(["cost", str(minimal)]) == 0
    assert "total transferred" in capsys.readouterr().out


# ----------------------------------------------------------------------------
# auditors


def test_param_count_csv(capsys):
    assert main(["param-count", "--fc", "4", "6", "-R", "2", "--csv"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["scheme", "count", "max_rank"]
    assert rows[1] == ["fc-original", "24", "4"]


def test_param_count_rejects_zero_rank():
    with pytest.raises(SystemExit) as e:
        main(["param-count", "--fc", "4", "4", "-R", "0"])
    assert e.value.code == 2


def test_rank_verify_rank_one_and_determinism(capsys):
    hist = rank_trials(20, 20, 1, 1, 30, 0)
    assert hist == {1: 30}
    assert rank_trials(20, 20, 3, 3, 20, 5) == rank_trials(20, 20, 3, 3, 20, 5)
    assert main(["rank-verify", "--m", "20", "--n", "20", "--r", "3", "--trials", "10"]) == 0
    assert "rank-9 fraction: 1.0000" in capsys.readouterr().out


def test_rank_verify_rejects_bad_dims():
    with pytest.raises(SystemExit) as e:
        main(["rank-verify", "--m", "0"])
    assert e.value.code != 0
