import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

import engine
import predictor as pr
from errors import ConfigError
from utils import data_processing as dp


def test_minimal_config_fills_defaults():
    cfg = dp.load_config(dp.CONFIG_DIR / "minimal.yaml")
    assert cfg == dp.ExperimentConfig()
    echo = yaml.safe_load(dp.dump_config(cfg))
    assert echo["schedule"] == dp.DEFAULT_SCHEDULE
    assert echo["grid"] == [16, 16, 1]
    assert echo["predictor"] == {"gamma": 0.05, "omega": 1.0, "constant": None}
    assert echo["strategies"][0]["variant"] == "naive"
    assert echo["strategies"][0]["branches"] == 1
    assert echo["instances"] == 50


@pytest.mark.parametrize("name", ["default.yaml", "minimal.yaml", "small.yaml"])
def test_shipped_configs_load(name):
    cfg = dp.load_config(dp.CONFIG_DIR / name)
    dp.make_schedule(cfg)
    dp.make_predictor(cfg)


def test_dump_then_parse_gives_same_config(tmp_path):
    cfg = dp.load_config(dp.CONFIG_DIR / "small.yaml")
    path = tmp_path / "echo.yaml"
    dp.dump_config(cfg, path)
    assert dp.load_config(path) == cfg


def test_unknown_top_level_field(write_config):
    path = write_config("seed: 1\nseeds: 2\n")
    with pytest.raises(ConfigError) as info:
        dp.load_config(path)
    assert info.value.field == "seeds"
    assert info.value.line == 2
    assert str(info.value).startswith("line 2: seeds: unknown field")


def test_unknown_nested_field_names_path_and_line():
    text = "grid: [8, 8, 1]\nmixture:\n  components:\n    - {pattern: ring, sigmaa: 0.3}\n"
    with pytest.raises(ConfigError) as info:
        dp.parse_config(text)
    assert info.value.field == "mixture.components[0].sigmaa"
    assert info.value.line == 4


def test_rotation_symmetry_needs_square_grid():
    with pytest.raises(ConfigError, match="H == W") as info:
        dp.parse_config("grid: [8, 6, 1]\n")
    assert info.value.field == "mixture.symmetrize"


def test_non_square_grid_without_symmetry():
    cfg = dp.parse_config("grid: [8, 6, 1]\nmixture: {symmetrize: none}\nstrategies: [{variant: freeinv, pool: flip}]\n")
    assert dp.make_mixture(cfg).shape == (8, 6, 1)


def test_strategy_errors_point_at_entry():
    text = "grid: [8, 8, 1]\nstrategies:\n  - {variant: naive}\n  - {variant: mbdi, branches: 3, branch_source: rotations-of-input}\n"
    with pytest.raises(ConfigError, match="branches must be 4") as info:
        dp.parse_config(text)
    assert info.value.field == "strategies[1]"
    assert info.value.line == 4


@pytest.mark.parametrize("text, field", [
    ("schedule: {builder: quadratic}\n", "schedule.builder"),
    ("schedule: {infer_steps: 2000}\n", "schedule"),
    ("schedule: {builder: cosine, beta_end: 0.02}\n", "schedule.beta_end"),
    ("grid: [8, 8]\n", "grid"),
    ("instances: 0\n", "instances"),
    ("instances: 2.5\n", "instances"),
    ("seed: abc\n", "seed"),
    ("predictor: {gamma: -0.1}\n", "predictor.gamma"),
    ("mixture: {components: [{pattern: spiral}]}\n", "mixture.components[0].pattern"),
    ("mixture: {components: [{weight: 0}]}\n", "mixture.components[0].weight"),
    ("mixture: {symmetrize: c8}\n", "mixture.symmetrize"),
])
def test_invalid_values(text, field):
    with pytest.raises(ConfigError) as info:
        dp.parse_config(text)
    assert info.value.field == field


def test_invalid_yaml_reports_line():
    with pytest.raises(ConfigError, match="invalid YAML") as info:
        dp.parse_config("seed: 1\ngrid: [8, 8\n")
    assert info.value.line is not None


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        dp.load_config(tmp_path / "absent.yaml")


def test_cosine_schedule_config():
    cfg = dp.parse_config("schedule: {builder: cosine, infer_steps: 20}\n")
    assert cfg.schedule_params == {"builder": "cosine", "train_steps": 1000, "infer_steps": 20, "s": 0.008}
    assert dp.make_schedule(cfg).num_steps == 20


def test_explicit_mean_grid():
    text = ("grid: [2, 2, 1]\nmixture:\n  symmetrize: none\n  components:\n"
            "    - {mean: [[[1.0], [2.0]], [[3.0], [4.0]]], sigma: 0.3}\n"
            "    - {mean: -1.5, weight: 3}\n")
    cfg = dp.parse_config(text)
    mix = dp.make_mixture(cfg)
    np.testing.assert_array_equal(mix.means[0].ravel(), [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(mix.means[1], -1.5)
    np.testing.assert_allclose(mix.weights, [0.25, 0.75])
    again = dp.parse_config(dp.dump_config(cfg))
    assert again == cfg


def test_explicit_mean_shape_checked():
    text = "grid: [2, 2, 1]\nmixture:\n  symmetrize: none\n  components:\n    - {mean: [[1.0, 2.0]]}\n"
    with pytest.raises(ConfigError, match="shape") as info:
        dp.parse_config(text)
    assert info.value.field == "mixture.components[0].mean"


OMEGA_GRID = "grid: [2, 2, 1]\nmixture: {symmetrize: none, components: [{mean: 0.0}]}\n"


@pytest.mark.parametrize("omega", ["[0.5, 1.0, 1.5, 2.0]", "[[[0.5], [1.0]], [[1.5], [2.0]]]"])
def test_per_dimension_omega(omega):
    cfg = dp.parse_config(OMEGA_GRID + f"predictor:\n  gamma: 0.1\n  omega: {omega}\n")
    assert cfg.predictor.omega == (0.5, 1.0, 1.5, 2.0)
    predictor = dp.make_predictor(cfg)
    np.testing.assert_array_equal(predictor.omega.ravel(), [0.5, 1.0, 1.5, 2.0])
    sched = dp.make_schedule(cfg)
    x = np.array([1.0, -2.0, 0.5, 3.0]).reshape(2, 2, 1)
    bent = pr.predict_noise(predictor, sched, x, 10)
    exact = pr.predict_noise(replace(predictor, gamma=0.0), sched, x, 10)
    np.testing.assert_allclose(bent - exact, 0.1 * np.sin(predictor.omega * x), rtol=0, atol=1e-12)
    assert dp.parse_config(dp.dump_config(cfg)) == cfg


def test_per_dimension_omega_length_checked():
    with pytest.raises(ConfigError, match="needs 4 values") as info:
        dp.parse_config(OMEGA_GRID + "predictor:\n  omega: [1.0, 2.0, 3.0]\n")
    assert info.value.field == "predictor.omega"
    assert info.value.line == 4
    with pytest.raises(ConfigError, match="list of numbers"):
        dp.parse_config(OMEGA_GRID + "predictor:\n  omega: [1.0, two, 3.0, 4.0]\n")


def test_symmetrized_mixture_from_config():
    cfg = dp.load_config(dp.CONFIG_DIR / "default.yaml")
    mix = dp.make_mixture(cfg)
    assert mix.num_components == 4
    assert mix.weights.sum() == pytest.approx(1.0)


def test_constant_predictor_from_config():
    cfg = dp.parse_config("grid: [8, 8, 1]\npredictor: {constant: 0.0}\n")
    predictor = dp.make_predictor(cfg)
    assert predictor.constant_mode
    np.testing.assert_array_equal(predictor.constant, 0.0)


def test_config_hash_ignores_host_fields():
    cfg = dp.ExperimentConfig()
    h = dp.config_hash(cfg)
    assert len(h) == 64
    assert dp.config_hash(replace(cfg, output_dir="elsewhere", n_jobs=8)) == h
    assert dp.config_hash(replace(cfg, seed=1)) != h


def test_canonical_json_is_key_order_free():
    assert dp.canonical_json({"b": 1, "a": [1, 2]}) == dp.canonical_json({"a": [1, 2], "b": 1})


def test_n_jobs_environment_override(monkeypatch):
    cfg = dp.ExperimentConfig(n_jobs=2)
    monkeypatch.delenv("INVLAB_N_JOBS", raising=False)
    assert dp.resolve_n_jobs(cfg) == 2
    monkeypatch.setenv("INVLAB_N_JOBS", "4")
    with pytest.warns(UserWarning, match="overrides"):
        assert dp.resolve_n_jobs(cfg) == 4
    monkeypatch.setenv("INVLAB_N_JOBS", "many")
    with pytest.warns(UserWarning, match="not an integer"):
        assert dp.resolve_n_jobs(cfg) == 2


def test_checksum_is_stable(latent):
    x = latent(0)
    assert dp.checksum(x) == dp.checksum(x.copy())
    assert dp.checksum(x) != dp.checksum(x + 1e-15 * np.abs(x).max())
    assert len(dp.checksum(x)) == 16


def test_write_run_record(tmp_path, perturbed, short_sched, latent):
    strategy = engine.StrategyConfig("freeinv", pool="rotation")
    inv, rec = engine.round_trip(strategy, perturbed, short_sched, latent(1), seed=3)
    path = dp.write_run_record(inv, rec, tmp_path / "runs" / "freeinv.json", "abc", dump_latents=True)
    doc = json.loads(path.read_text())
    assert doc["header"]["config_hash"] == "abc"
    assert doc["header"]["num_steps"] == 10
    assert doc["header"]["schedule_digest"] == inv.schedule.digest()
    assert [s["step"] for s in doc["steps"]] == list(range(10))
    assert all("transform" in s for s in doc["steps"])
    assert doc["steps"][0]["inversion_latent"] == dp.checksum(inv.latents[1])
    with np.load(path.with_suffix(".npz")) as dump:
        np.testing.assert_array_equal(dump["reconstruction"], rec.latents)


def test_write_run_record_mc_selections(tmp_path, perturbed, short_sched, latent):
    strategy = engine.StrategyConfig("mc", branches=4, samples=2)
    inv, rec = engine.round_trip(strategy, perturbed, short_sched, latent(2), seed=3)
    path = dp.write_run_record(inv, rec, tmp_path / "mc.json")
    steps = json.loads(path.read_text())["steps"]
    assert steps[4]["inversion_selections"] == [int(i) for i in inv.selections[4]]
    assert len(steps[4]["reconstruction_selections"]) == 2
    assert not path.with_suffix(".npz").exists()


def test_make_mixture_matches_hand_built(grid):
    cfg = dp.parse_config("grid: [8, 8, 1]\nmixture: {symmetrize: none, components: [{pattern: ring, sigma: 0.4}]}\n")
    mix = dp.make_mixture(cfg)
    np.testing.assert_array_equal(mix.means[0], pr.mean_pattern("ring", grid))
    assert mix.sigmas.tolist() == [0.4]
