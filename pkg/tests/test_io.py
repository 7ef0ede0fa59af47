import json

import numpy as np
import pytest
from conftest import make_moe

from vdd.errors import CheckpointVersionError, ConfigError
from vdd.io import (RunConfig, apply_overrides, config_from_dict, dataset_from_jsonl,
                    dataset_to_jsonl, dump_config, load_checkpoint, load_config, parse_config,
                    read_csv, rows_to_csv, save_checkpoint, write_csv)
from vdd.moe import moe_log_pdf
from vdd.scorenet import ScoreNet, scorenet_forward
from vdd.tasks import Avoid2DTask, generate_dataset


def test_config_roundtrip_unchanged():
    cfg = apply_overrides(RunConfig(), ["seed=42", "vdd.Z=3", "task.params.n_modes=4",
                                        "teacher.widths=[32, 16]", "vdd.timestep=min"])
    back = parse_config(dump_config(cfg))
    assert back == cfg
    assert back.vdd.Z == 3 and back.task.params == {"n_modes": 4} and back.vdd.timestep == "min"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("[vdd]\nZZ = 3\n")
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["vdd.nonsense=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["nosection=1"])


def test_type_checks():
    with pytest.raises(ConfigError):
        parse_config("[vdd]\nZ = 2.5\n")
    with pytest.raises(ConfigError):
        parse_config('[vdd]\ncheck_bound = "yes"\n')
    with pytest.raises(ConfigError):
        parse_config("seed = -1\n")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("[vdd\n")
    assert parse_config("[vdd]\nlr = 1\n").vdd.lr == 1.0


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_decimal_precision_kept():
    cfg = parse_config("[vdd]\nlr = 0.1234567890123456789\n")
    assert cfg.vdd.lr == 0.1234567890123456789
    assert parse_config(dump_config(cfg)).vdd.lr == cfg.vdd.lr


def test_seeds_are_independent_and_reproducible():
    a = RunConfig(seed=7).seeds()
    assert a == RunConfig(seed=7).seeds()
    assert len(set(a.values())) == len(a)
    assert a != RunConfig(seed=8).seeds()
    with pytest.raises(ConfigError):
        dump_config(config_from_dict({"seed": 2 ** 63}))


def test_every_vdd_field_has_a_config_key():
    from dataclasses import fields

    from vdd.io import VDDSection
    from vdd.train import VDDConfig

    section = {f.name for f in fields(VDDSection)}
    renamed = {"n_experts": "Z", "seed": None}
    for f in fields(VDDConfig):
        key = renamed.get(f.name, f.name)
        assert key is None or key in section, f.name


def test_moe_checkpoint_roundtrip(tmp_path, rng):
    m = make_moe(rng, Z=4, kind="fourier")
    save_checkpoint(m, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    a, s = rng.standard_normal((100, 2)), rng.standard_normal((100, 2))
    np.testing.assert_array_equal(moe_log_pdf(m, a, s), moe_log_pdf(back, a, s))


def test_scorenet_checkpoint_roundtrip(tmp_path, rng):
    net = ScoreNet.init(2, 2, (8, 8), rng=rng)
    save_checkpoint(net, tmp_path / "n.json")
    back = load_checkpoint(tmp_path / "n.json", "scorenet")
    x = rng.standard_normal((100, 5))
    np.testing.assert_array_equal(scorenet_forward(net, x)[0], scorenet_forward(back, x)[0])


def test_scorenet_checkpoint_keeps_schedule(tmp_path, rng):
    from vdd.io import load_schedule
    from vdd.sde import NoiseSchedule

    net = ScoreNet.init(2, 2, (4, 4), rng=rng)
    sched = NoiseSchedule("vp", beta_max=0.3)
    save_checkpoint(net, tmp_path / "n.json", schedule=sched)
    assert load_schedule(tmp_path / "n.json") == sched
    save_checkpoint(net, tmp_path / "m.json")
    assert load_schedule(tmp_path / "m.json") is None


def test_tampered_version(tmp_path, rng):
    save_checkpoint(make_moe(rng), tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["version"] = 2
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(CheckpointVersionError, match="2"):
        load_checkpoint(tmp_path / "m.json")
    d["version"] = 1
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(CheckpointVersionError, match="scorenet"):
        load_checkpoint(tmp_path / "m.json", "scorenet")
    with pytest.raises(TypeError):
        save_checkpoint("not a model", tmp_path / "x.json")


def test_dataset_jsonl_roundtrip():
    ds = generate_dataset(Avoid2DTask(), 2, seed=0)
    text = dataset_to_jsonl(ds)
    back = dataset_from_jsonl(text)
    np.testing.assert_array_equal(back.states, ds.states)
    np.testing.assert_array_equal(back.actions, ds.actions)
    np.testing.assert_array_equal(back.behaviors, ds.behaviors)
    assert back.behavior_counts() == ds.behavior_counts()
    rec = json.loads(text.splitlines()[1])
    assert set(rec) == {"traj_id", "step", "s", "a", "behavior"}
    with pytest.raises(CheckpointVersionError):
        dataset_from_jsonl(text.replace('"version": 1', '"version": 5'))


def test_csv_exact_floats(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": 3, "c": "x"}, {"a": np.float64(1e-17), "b": 4, "c": "y"}]
    write_csv(tmp_path / "m.csv", rows)
    back = read_csv(tmp_path / "m.csv")
    assert float(back[0]["a"]) == 0.1 + 0.2 and float(back[1]["a"]) == 1e-17
    assert rows_to_csv(rows) == (tmp_path / "m.csv").read_text()
    assert rows_to_csv([]) == ""
