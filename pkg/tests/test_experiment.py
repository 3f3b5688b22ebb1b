from __future__ import annotations

import json
import math

import pandas as pd
import pytest

from hierspec.experiment import (
    FIGURES,
    MANIFEST,
    PARTIAL_CSV,
    Cell,
    ConfigError,
    SweepConfig,
    cells,
    emit_figure_data,
    load_results,
    readout_label,
    run_group,
    run_sweep,
    run_trial,
    sample_size,
    worker_count,
)
from hierspec.tensor_hermite import DeskScaleError


def _config(tmp_path, name="out", **kw) -> SweepConfig:
    base = dict(
        teacher={"gamma": 0.4},
        d_list=(9,),
        alpha_grid=(1.5, 2.0, 2.5, 3.0),
        seeds=(0, 1),
        n_test=2000,
        hyper_grid=((1, 1e-5),),
        output_dir=str(tmp_path / name),
        record_wall_time=False,
    )
    base.update(kw)
    return SweepConfig(**base)


def test_sample_size_floor_and_guard() -> None:
    assert sample_size(64, 2.0) == 4096
    assert sample_size(10, 3.0) == 1000
    assert sample_size(64, 1.5) == 512
    assert sample_size(40, 3.5) == math.floor(40**3.5)


def test_config_round_trip_and_overrides() -> None:
    cfg = SweepConfig.from_dict({"d_list": [16], "alpha_grid": [1.5, 2.0], "seeds": 3, "hyper_grid": [[3, 1e-5]]})
    assert cfg.seeds == (0, 1, 2)
    assert SweepConfig.from_dict(cfg.to_dict()) == cfg
    new = cfg.with_overrides(["teacher.gamma=0.8", "seeds=[5]", "solver=iterative"])
    assert new.teacher["gamma"] == 0.8 and new.seeds == (5,) and new.solver == "iterative"
    with pytest.raises(ConfigError):
        cfg.with_overrides(["nonsense"])
    with pytest.raises(ConfigError):
        SweepConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize(
    "change",
    [
        {"alpha_grid": ()},
        {"alpha_grid": (2.0, 1.5)},
        {"d_list": ()},
        {"seeds": ()},
        {"teacher": {"colour": 1}},
        {"teacher": {"gamma": -1.0}},
        {"solver": "qr"},
        {"readout_split": 1.5},
        {"hyper_grid": ((-1, 0.0),)},
        {"max_elements": 100},
    ],
)
def test_config_validation_errors(tmp_path, change) -> None:
    with pytest.raises(ConfigError):
        _config(tmp_path, **change).validate()


def test_semantic_hash_ignores_operational_fields(tmp_path) -> None:
    a = _config(tmp_path)
    assert a.semantic_hash() == _config(tmp_path, name="elsewhere", workers=3, record_wall_time=True).semantic_hash()
    assert a.semantic_hash() != _config(tmp_path, seeds=(0,)).semantic_hash()
    assert a.semantic_hash() == _config(tmp_path, teacher={"gamma": 0.4, "q": 2}).semantic_hash()


def test_cells_and_labels(tmp_path) -> None:
    cfg = _config(tmp_path, hyper_grid=((1, 1e-5), (3, 1e-6)))
    assert len(cells(cfg)) == 4 * 2 * 2
    assert Cell(9, 2.0, 1, (3, 1e-6)).key() == "9|2.0|1|3|1e-06"
    assert readout_label("tanh", (3, 1e-5)) == "tanh|r=3|rho=1e-05"
    assert cfg.n_test_for(9) == 2000
    assert SweepConfig(d_list=(9,)).n_test_for(9) == 5000


def test_group_matches_single_trials(tmp_path) -> None:
    cfg = _config(tmp_path)
    group = run_group(cfg, 9, 1, (1, 1e-5), cfg.alpha_grid)
    for a in cfg.alpha_grid:
        alone = run_trial(cfg, Cell(9, a, 1, (1, 1e-5)))
        assert group.results[Cell(9, a, 1, (1, 1e-5)).key()] == alone


def test_trial_fields_are_sane(tmp_path) -> None:
    res = run_trial(_config(tmp_path), Cell(9, 3.0, 0, (1, 1e-5)))
    assert res.n == 729 and res.d1 == 3
    assert 0 <= res.feature_overlap <= 1
    assert res.bulk_edge > 0 and res.wall_time is None
    assert res.readout == "identity|r=1|rho=1e-05"
    assert len(res.spectrum_top) == 3


def test_sweep_is_byte_identical_and_sorted(tmp_path) -> None:
    a = run_sweep(_config(tmp_path, "a"))
    b = run_sweep(_config(tmp_path, "b", workers=2))
    assert a.status == "complete" and a.exit_code == 0
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert not (tmp_path / "a" / PARTIAL_CSV).exists()
    df = load_results(a.csv_path)
    assert len(df) == 8
    assert list(df[["alpha", "seed"]].itertuples(index=False, name=None)) == sorted(
        zip(df["alpha"], df["seed"])
    )
    assert df["wall_time"].isna().all()
    manifest = json.loads((tmp_path / "a" / MANIFEST).read_text())
    assert manifest["status"] == "complete" and len(manifest["completed"]) == 8


def test_resume_after_interruption_and_torn_line(tmp_path) -> None:
    reference = run_sweep(_config(tmp_path, "ref")).csv_path.read_bytes()
    cfg = _config(tmp_path, "crash")
    first = run_sweep(cfg, stop_after=1)
    assert first.status == "partial" and first.exit_code == 1
    partial = tmp_path / "crash" / PARTIAL_CSV
    with open(partial, "a") as fh:
        fh.write("9,2,0.5,0.4,8")  # torn row
    done = run_sweep(cfg, resume=True)
    assert done.status == "complete"
    assert done.csv_path.read_bytes() == reference
    again = run_sweep(cfg, resume=True)
    assert again.csv_path.read_bytes() == reference


def test_resume_rejects_other_config(tmp_path) -> None:
    run_sweep(_config(tmp_path, "x"), stop_after=1)
    with pytest.raises(ConfigError):
        run_sweep(_config(tmp_path, "x", seeds=(0, 1, 2)), resume=True)


def test_cells_over_memory_cap_are_skipped(tmp_path) -> None:
    cfg = _config(tmp_path, "cap", alpha_grid=(1.5, 3.5), seeds=(0,), n_test=500, max_elements=10_000)
    out = run_sweep(cfg)
    assert out.status == "partial"
    assert list(out.skipped) == [Cell(9, 3.5, 0, (1, 1e-5)).key()]
    assert len(load_results(out.csv_path)) == 1
    with pytest.raises(DeskScaleError):
        run_trial(cfg, Cell(9, 3.5, 0, (1, 1e-5)))


def test_keep_spectrum_writes_files(tmp_path) -> None:
    out = run_sweep(_config(tmp_path, "spec", alpha_grid=(2.0,), seeds=(0,), keep_spectrum=True))
    files = list((tmp_path / "spec").glob("spectrum_*.csv"))
    assert len(files) == 1
    emitted = emit_figure_data(files[0], "spectrum", tmp_path / "fig")
    assert len(pd.read_csv(emitted[0])) == 45
    assert out.status == "complete"


def test_worker_count_respects_env(monkeypatch, tmp_path) -> None:
    cfg = _config(tmp_path, workers=4)
    monkeypatch.setenv("HIERSPEC_THREADS", "2")
    assert worker_count(cfg) == 2
    monkeypatch.delenv("HIERSPEC_THREADS")
    assert worker_count(cfg) == 4


def test_figure_tables(tmp_path) -> None:
    out = run_sweep(_config(tmp_path, "figs"))
    df = load_results(out.csv_path)
    for figure in FIGURES:
        if figure == "spectrum":
            continue
        (path,) = emit_figure_data(df, figure, tmp_path / "tables")
        table = pd.read_csv(path)
        assert len(table) > 0
        assert "x" in table.columns or "direction" in table.columns
    staircase = pd.read_csv(tmp_path / "tables" / "staircase.csv")
    assert staircase["m_th"].is_monotonic_increasing
    with pytest.raises(KeyError, match="test_mse"):
        emit_figure_data(df.drop(columns=["test_mse"]), "mse_vs_alpha", tmp_path / "t2")
    with pytest.raises(ValueError):
        emit_figure_data(df, "heatmap", tmp_path / "t3")


def test_large_dimension_needs_explicit_flag(tmp_path) -> None:
    with pytest.raises(ConfigError, match="desk scale"):
        _config(tmp_path, d_list=(70,)).validate()
    with pytest.raises(ConfigError, match="iterative"):
        _config(tmp_path, d_list=(70,), large=True).validate()
    _config(tmp_path, d_list=(70,), large=True, solver="iterative").validate()
