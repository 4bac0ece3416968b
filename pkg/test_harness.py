import json
from dataclasses import replace

import joblib
import numpy as np
import pandas as pd
import pytest

import engine
import harness
from errors import ConfigError, InvariantError
from utils import data_processing as dp
from utils.plots import PLOT_FLOOR, mean_curves

S = engine.StrategyConfig


def small_config(tmp_path, **changes):
    cfg = dp.load_config(dp.CONFIG_DIR / "small.yaml")
    return replace(cfg, output_dir=str(tmp_path / "out"), **changes)


def test_constant_predictor_run_is_exact(tmp_path):
    cfg = replace(small_config(tmp_path, instances=1, strategies=(S("naive"),)),
                  predictor=dp.PredictorDecl(constant=0.0))
    record = harness.run_experiment(cfg)
    assert record.mean("naive", "mse") <= 1e-20
    assert record.mean("naive", "mean_mismatch_l2") == 0.0


def test_rows_and_steps(tmp_path):
    cfg = small_config(tmp_path)
    record = harness.run_experiment(cfg)
    assert len(record.rows) == 2 * cfg.instances
    assert [r["strategy"] for r in record.rows[:3]] == ["naive"] * 3
    assert len(record.step_rows) == 2 * cfg.instances * 11
    last = [r for r in record.step_rows if r["step"] == 10]
    assert all(np.isnan(r["mismatch_l2"]) and r["deviation_l2"] == 0.0 for r in last)
    assert record.strategy_names() == ["naive", "FreeInv(rotation)"]
    assert record.rows[0]["nfe_inversion"] == 10
    assert json.loads(record.rows[-1]["strategy_config"])["pool"] == "rotation"


def test_same_config_same_record(tmp_path):
    a = harness.run_experiment(small_config(tmp_path))
    b = harness.run_experiment(small_config(tmp_path))
    assert a.config_hash == b.config_hash
    assert a.rows == b.rows
    pd.testing.assert_frame_equal(a.aggregates, b.aggregates)


def test_worker_count_does_not_change_results(tmp_path):
    serial = harness.run_experiment(small_config(tmp_path))
    with joblib.parallel_config(backend="threading"):
        threaded = harness.run_experiment(small_config(tmp_path, n_jobs=2))
    assert serial.rows == threaded.rows
    assert serial.config_hash == threaded.config_hash


def test_instances_share_starting_latents_across_strategies(tmp_path):
    cfg = small_config(tmp_path, strategies=(S("naive"), S("naive", label="again")))
    record = harness.run_experiment(cfg)
    first = [r["mse"] for r in record.rows if r["strategy"] == "naive"]
    second = [r["mse"] for r in record.rows if r["strategy"] == "again"]
    assert first == second


def test_duplicate_strategy_names_rejected(tmp_path):
    cfg = small_config(tmp_path, strategies=(S("naive"), S("naive")))
    with pytest.raises(ConfigError, match="unique"):
        harness.run_experiment(cfg)


def test_aggregates_are_population_statistics(tmp_path):
    record = harness.run_experiment(small_config(tmp_path))
    mses = [r["mse"] for r in record.rows if r["strategy"] == "naive"]
    assert record.mean("naive", "mse") == pytest.approx(np.mean(mses), rel=1e-12)
    agg = record.aggregates.set_index("strategy")
    assert agg.loc["naive", "mse_std"] == pytest.approx(np.std(mses, ddof=0), rel=1e-12)
    with pytest.raises(KeyError):
        record.mean("ddpm", "mse")


def test_csv_matches_summary(tmp_path):
    record = harness.run_experiment(small_config(tmp_path))
    out = tmp_path / "emit"
    harness.emit(record, ["csv", "json"], out)
    table = pd.read_csv(out / "results.csv")
    summary = json.loads((out / "summary.json").read_text())
    assert list(table.columns) == dp.RESULT_COLUMNS
    assert len(table) == len(record.rows) + 2 * len(record.strategy_names())
    for entry in summary["strategies"]:
        rows = table[table["strategy"] == entry["name"]]
        per_instance = rows[rows["row"] == "instance"]
        for stat in ("mean", "std"):
            emitted = rows[rows["row"] == stat].iloc[0]
            for c in dp.METRIC_COLUMNS:
                assert emitted[c] == pytest.approx(entry[stat][c], rel=1e-12, abs=1e-300)
        recomputed = per_instance["mse"].astype(float).mean()
        assert recomputed == pytest.approx(entry["mean"]["mse"], rel=1e-12)
        assert json.loads(per_instance["strategy_config"].iloc[0]) == entry["config"]


def test_emitted_files_are_byte_identical(tmp_path):
    outputs = []
    for run in ("a", "b"):
        record = harness.run_experiment(small_config(tmp_path))
        out = tmp_path / run
        harness.emit(record, ["csv", "json", "svg"], out)
        outputs.append({name: (out / name).read_bytes()
                        for name in ("results.csv", "steps.csv", "summary.json", "mismatch.svg", "deviation.svg")})
    assert outputs[0] == outputs[1]


def test_summary_leaves_out_timings_and_host_fields(tmp_path):
    record = harness.run_experiment(small_config(tmp_path))
    out = tmp_path / "emit"
    harness.emit(record, ["json"], out)
    summary = json.loads((out / "summary.json").read_text())
    assert "output_dir" not in summary["config"]
    assert "timings" not in summary
    timings = json.loads((out / "timings.json").read_text())
    assert set(timings["per_strategy"]) == {"naive", "FreeInv(rotation)"}


def test_empty_format_set_writes_nothing(tmp_path):
    record = harness.run_experiment(small_config(tmp_path, instances=1))
    out = tmp_path / "nothing"
    assert harness.emit(record, [], out) == []
    assert not out.exists()
    with pytest.raises(ValueError, match="Unknown output formats"):
        harness.emit(record, ["pdf"], out)


def test_constant_run_plots_at_floor(tmp_path):
    cfg = replace(small_config(tmp_path, instances=1), predictor=dp.PredictorDecl(constant=0.0))
    record = harness.run_experiment(cfg)
    paths = harness.emit(record, ["svg", "html"], tmp_path / "plots")
    assert sorted(p.name for p in paths) == ["deviation.svg", "mismatch.svg", "report.html"]
    assert "invlab-report" in (tmp_path / "plots" / "report.html").read_text()
    curves = mean_curves(pd.DataFrame(record.step_rows), "mismatch_l2")
    assert (curves["mismatch_l2"] == PLOT_FLOOR).all()


def test_run_records_written(tmp_path):
    record_dir = tmp_path / "records"
    harness.run_experiment(small_config(tmp_path, instances=2), record_dir=str(record_dir))
    files = sorted(p.relative_to(record_dir).as_posix() for p in record_dir.rglob("*.json"))
    assert files == ["freeinv-rotation/instance-0000.json", "freeinv-rotation/instance-0001.json",
                     "naive/instance-0000.json", "naive/instance-0001.json"]


def test_failure_leaves_partial_marker(tmp_path, monkeypatch):
    real = harness._run_instance

    def flaky(strategy, predictor, sched, x0, seed, instance, *rest):
        if strategy.variant == "freeinv":
            raise RuntimeError("predictor exploded")
        return real(strategy, predictor, sched, x0, seed, instance, *rest)

    monkeypatch.setattr(harness, "_run_instance", flaky)
    cfg = small_config(tmp_path)
    with pytest.raises(RuntimeError):
        harness.run_experiment(cfg)
    payload = json.loads((tmp_path / "out" / "partial.json").read_text())
    assert payload["status"] == "failed"
    assert "predictor exploded" in payload["error"]
    assert payload["completed_runs"] == len(payload["rows"])
    assert payload["config_hash"] == dp.config_hash(cfg)


def test_record_round_trip(tmp_path):
    record = harness.run_experiment(small_config(tmp_path, instances=1))
    path = harness.save_record(record, tmp_path / "record.joblib")
    again = harness.load_record(path)
    assert again.rows == record.rows
    assert again.config == record.config
    joblib.dump({"not": "a record"}, tmp_path / "other.joblib")
    with pytest.raises(ValueError):
        harness.load_record(tmp_path / "other.joblib")


@pytest.mark.parametrize("preset, count", [("mc-count", 4), ("branch-type", 4), ("transform-type", 6),
                                           ("inverse-noise", 3)])
def test_preset_sizes(preset, count):
    strategies = harness.preset_strategies(preset)
    assert len(strategies) == count
    assert len({s.name for s in strategies}) == count


def test_branch_type_has_naive_baseline():
    assert harness.preset_strategies("branch-type")[0] == S("naive")
    with pytest.raises(ValueError, match="Unknown ablation preset"):
        harness.preset_strategies("noise-type")


def test_ablate_on_small_problem(tmp_path):
    record = harness.ablate("mc-count", small_config(tmp_path, instances=2))
    assert record.preset == "mc-count"
    assert record.config.output_dir.endswith("mc-count")
    assert len(record.rows) == 4 * 2
    assert record.triangle_violations == 0


def test_golden_round_trip(tmp_path):
    record = harness.ablate("inverse-noise", small_config(tmp_path, instances=2))
    path = harness.write_golden(record, tmp_path / "goldens")
    assert path.name == "inverse-noise.json"
    assert harness.check_golden(record, tmp_path / "goldens") == []
    doc = json.loads(path.read_text())
    assert doc["baseline"] == "naive"
    assert doc["rtol"] == harness.GOLDEN_RTOL
    assert doc["config_hash"] == record.config_hash
    assert doc["rows"]["naive"]["mse_ratio_to_baseline"] == 1.0
    doc["rows"]["naive"]["mse_mean"] *= 1.5
    path.write_text(json.dumps(doc))
    with pytest.raises(InvariantError, match="naive.mse_mean"):
        harness.check_golden(record, tmp_path / "goldens")


def banded_golden(record, tmp_path, rtol=0.02, **extra):
    rows = {name: {"mse_mean": float(f"{record.mean(name, 'mse'):.3g}")} for name in record.strategy_names()}
    doc = dict({"preset": record.preset, "baseline": "naive", "rtol": rtol, "rows": rows}, **extra)
    (tmp_path / f"{record.preset}.json").write_text(json.dumps(doc))
    return doc


def test_banded_golden_checks_recorded_keys(tmp_path):
    record = harness.ablate("inverse-noise", small_config(tmp_path, instances=2))
    doc = banded_golden(record, tmp_path)
    assert harness.check_golden(record, tmp_path) == []
    doc["rows"]["FreeInv(rotation)"]["mse_mean"] *= 1.05
    (tmp_path / "inverse-noise.json").write_text(json.dumps(doc))
    with pytest.raises(InvariantError, match="rtol 0.02"):
        harness.check_golden(record, tmp_path)


def test_golden_for_other_instance_count_fails(tmp_path):
    record = harness.ablate("inverse-noise", small_config(tmp_path, instances=2))
    banded_golden(record, tmp_path, instances=50)
    with pytest.raises(InvariantError, match="instances"):
        harness.check_golden(record, tmp_path)


def test_missing_golden_fails(tmp_path):
    record = harness.ablate("inverse-noise", small_config(tmp_path, instances=1))
    with pytest.raises(InvariantError, match="no golden"):
        harness.check_golden(record, tmp_path / "empty")


def test_committed_goldens_cover_every_preset():
    for preset in harness.PRESETS:
        doc = harness.load_golden(preset)
        assert doc["preset"] == preset
        names = {s.name for s in harness.preset_strategies(preset)}
        assert doc["baseline"] == harness.preset_strategies(preset)[0].name
        assert set(doc["rows"]) <= names


def test_multi_branch_ensembles_beat_naive_on_a_few_instances(tmp_path):
    cfg = replace(dp.load_config(dp.CONFIG_DIR / "default.yaml"), instances=4, output_dir=str(tmp_path),
                  strategies=(S("naive"), S("mbdi", branches=4),
                              S("mbdi", branches=4, branch_source="rotations-of-input")))
    record = harness.run_experiment(cfg)
    naive = record.mean("naive", "mse")
    assert record.mean("MB-I(N=4)", "mse") <= naive
    assert record.mean("MB-R(N=4)", "mse") <= naive
    assert record.triangle_violations == 0


# --- Audited runs on the default desk-scale problem --------------------------------

@pytest.fixture(scope="module")
def default_config(tmp_path_factory):
    cfg = dp.load_config(dp.CONFIG_DIR / "default.yaml")
    return replace(cfg, output_dir=str(tmp_path_factory.mktemp("audit")))


@pytest.fixture(scope="module")
def preset_record(default_config):
    records = {}

    def run(preset):
        if preset not in records:
            records[preset] = harness.ablate(preset, default_config)
        return records[preset]
    return run


@pytest.mark.audit
@pytest.mark.parametrize("preset", harness.PRESETS)
def test_goldens(preset, preset_record):
    record = preset_record(preset)
    assert harness.check_golden(record) == []
    assert record.triangle_violations == 0


@pytest.mark.audit
def test_multi_branch_ensembles_beat_naive(preset_record):
    record = preset_record("branch-type")
    naive = record.mean("naive", "mse")
    for name in ("MB-I(N=4)", "MB-R(N=4)"):
        assert record.mean(name, "mse") <= naive


@pytest.mark.audit
def test_freeinv_against_naive_matches_recorded_margin(preset_record):
    record = preset_record("inverse-noise")
    naive = record.mean("naive", "mse")
    # equivariant predictor: inverse-noise FreeInv follows the naive trajectory
    assert record.mean("FreeInv(rotation, inverse-noise)", "mse") == pytest.approx(naive, rel=1e-6)
    margin = harness.load_golden("branch-type")["rows"]["FreeInv(rotation)"]["mse_ratio_to_baseline"]
    assert record.mean("FreeInv(rotation)", "mse") / naive == pytest.approx(margin, rel=0.02)


@pytest.mark.audit
def test_one_draw_sampling_stays_near_full_average(preset_record):
    record = preset_record("mc-count")
    mbdi, m1, m2, m4 = (record.mean(name, "mse") for name in record.strategy_names())
    assert max(m1, m2, m4) <= 1.15 * mbdi
    assert mbdi <= m4 <= m2 <= m1
