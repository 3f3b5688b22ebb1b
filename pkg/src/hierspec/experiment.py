"""Sweep configuration, seeded trial execution, crash-safe persistence and figure tables."""
from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .metrics import TrialResult
from .spectral import FitOptions, ReadoutHyper, fit, fit_path
from .teacher import DEFAULT_MAX_ELEMENTS, TeacherSpec, sample_dataset, sample_teacher
from .tensor_hermite import DeskScaleError, basis_size, project_features

TRACKED_DIRECTIONS = (1, 3, 5, 8, 12, 15, 18, 20)
HYPER_GRID = tuple((r, rho) for r in (3, 5, 7, 9) for rho in (1e-7, 1e-6, 1e-5))
PARTIAL_CSV = "results.partial.csv"
FINAL_CSV = "results.csv"
MANIFEST = "manifest.json"

DESK_D = 2080

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_THEORY = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def sample_size(d: int, alpha: float) -> int:
    """``floor(d ** alpha)``, robust to ``d ** alpha`` landing just below an integer."""
    value = float(d) ** float(alpha)
    near = round(value)
    if abs(value - near) <= 1e-9 * value:
        return int(near)
    return int(math.floor(value))


def _teacher_fields() -> set:
    return {f.name for f in dataclasses.fields(TeacherSpec)} - {"d", "seed"}


@dataclass(frozen=True)
class SweepConfig:
    teacher: dict = field(default_factory=dict)
    d_list: tuple = (64,)
    alpha_grid: tuple = ()
    seeds: tuple = (0,)
    n_test: int | None = None
    hyper_grid: tuple = ((3, 1e-5),)
    workers: int = 1
    output_dir: str = "sweep_out"
    max_elements: int = DEFAULT_MAX_ELEMENTS
    solver: str = "dense"
    dtype: str = "float64"
    selection: str = "abs"
    bulk_edge: bool = True
    keep_spectrum: bool = False
    record_wall_time: bool = True
    # None: fresh readout batch of size n; else the held-out fraction of the training batch
    readout_split: float | None = None
    # allow feature dimensions above DESK_D (q = 2, d = 64); such runs need the iterative solver
    large: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepConfig":
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        doc = dict(doc)
        seeds = doc.get("seeds", (0,))
        doc["seeds"] = tuple(range(seeds)) if isinstance(seeds, int) else tuple(int(s) for s in seeds)
        for key in ("d_list", "alpha_grid"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "hyper_grid" in doc:
            doc["hyper_grid"] = tuple((int(r), float(rho)) for r, rho in doc["hyper_grid"])
        return cls(**doc)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("d_list", "alpha_grid", "seeds"):
            out[key] = list(out[key])
        out["hyper_grid"] = [list(h) for h in self.hyper_grid]
        return out

    def with_overrides(self, pairs) -> "SweepConfig":
        """Apply ``dotted.path=value`` overrides; values parse as JSON when possible."""
        doc = self.to_dict()
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form path=value")
            path, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = doc
            keys = path.split(".")
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
        return SweepConfig.from_dict(doc)

    def teacher_spec(self, d: int, seed: int) -> TeacherSpec:
        return TeacherSpec(d=d, seed=seed, **self.teacher)

    def d1(self, d: int) -> int:
        return self.teacher_spec(d, 0).d1

    def n_test_for(self, d: int) -> int:
        return self.n_test if self.n_test is not None else max(5000, 10 * self.d1(d) ** 2)

    def validate(self) -> "SweepConfig":
        bad = set(self.teacher) - _teacher_fields()
        if bad:
            raise ConfigError(f"unknown teacher fields: {sorted(bad)}")
        if not self.d_list:
            raise ConfigError("d_list is empty")
        if not self.alpha_grid:
            raise ConfigError("alpha_grid is empty")
        if any(b <= a for a, b in zip(self.alpha_grid, self.alpha_grid[1:])):
            raise ConfigError("alpha_grid must be strictly increasing")
        if not self.seeds:
            raise ConfigError("no seeds")
        if not self.hyper_grid:
            raise ConfigError("hyper_grid is empty")
        if self.solver not in ("dense", "iterative") or self.dtype not in ("float32", "float64"):
            raise ConfigError("solver must be dense|iterative and dtype float32|float64")
        if self.readout_split is not None and not 0.0 < self.readout_split < 1.0:
            raise ConfigError("readout_split must lie in (0, 1)")
        for d in self.d_list:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    self.teacher_spec(d, 0).validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            D = basis_size(d, self.teacher.get("q", 2))
            if D > DESK_D and not self.large:
                raise ConfigError(f"D = {D} at d = {d} is beyond desk scale; pass --large (iterative solver)")
            if D > DESK_D and self.solver != "iterative":
                raise ConfigError("large runs need solver = iterative")
            if D * D > self.max_elements:
                raise ConfigError(f"D = {D} at d = {d}: the D x D moment matrix exceeds the memory cap")
            if any(sample_size(d, a) < 1 for a in self.alpha_grid):
                raise ConfigError("every derived n must be at least 1")
        for r, rho in self.hyper_grid:
            if r < 0 or rho < 0:
                raise ConfigError("readout degree and ridge must be nonnegative")
        return self

    def semantic_hash(self) -> str:
        """Hash over the fields that change results (not workers, paths or timing)."""
        doc = self.to_dict()
        for key in ("workers", "output_dir", "record_wall_time", "large"):
            doc.pop(key)
        doc["teacher"] = dataclasses.asdict(TeacherSpec(d=1, **self.teacher))
        doc["n_test"] = [self.n_test_for(d) for d in self.d_list]
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def d1max(self) -> int:
        return max(self.d1(d) for d in self.d_list)


@dataclass(frozen=True)
class Cell:
    d: int
    alpha: float
    seed: int
    hyper: tuple

    def key(self) -> str:
        r, rho = self.hyper
        return f"{self.d}|{self.alpha!r}|{self.seed}|{r}|{rho!r}"


def readout_label(readout: str, hyper) -> str:
    r, rho = hyper
    return f"{readout}|r={r}|rho={rho!r}"


def cells(config: SweepConfig) -> list:
    return [
        Cell(d, float(a), s, tuple(h))
        for d in config.d_list
        for a in config.alpha_grid
        for s in config.seeds
        for h in config.hyper_grid
    ]


# --------------------------------------------------------------------------
# trials


@dataclass
class GroupOutcome:
    results: dict = field(default_factory=dict)  # cell key -> TrialResult
    skipped: dict = field(default_factory=dict)  # cell key -> reason
    failed: dict = field(default_factory=dict)
    spectra: dict = field(default_factory=dict)  # cell key -> full spectrum


def run_group(config: SweepConfig, d: int, seed: int, hyper, alphas) -> GroupOutcome:
    """All cells sharing ``(d, seed, hyper)``.

    The training and readout batches for the largest feasible ``n`` are drawn
    once and every smaller ``n`` uses their prefixes, which gives the same
    numbers as running each cell alone.
    """
    out = GroupOutcome()
    alphas = sorted(float(a) for a in alphas)
    spec = config.teacher_spec(d, seed)
    keys = {a: Cell(d, a, seed, tuple(hyper)).key() for a in alphas}
    feasible = []
    for a in alphas:
        n = sample_size(d, a)
        if n * d > config.max_elements:
            out.skipped[keys[a]] = f"n*d = {n * d} exceeds memory cap {config.max_elements}"
        else:
            feasible.append(a)
    if not feasible:
        return out
    try:
        teacher = sample_teacher(spec)
        ns = [sample_size(d, a) for a in feasible]
        n_max = ns[-1]
        train = sample_dataset(teacher, n_max, seed, "train", config.max_elements)
        test = sample_dataset(teacher, config.n_test_for(d), seed, "test", config.max_elements)
        h1_true = project_features(test.x, teacher.a1.T, teacher.basis)
        hyp = ReadoutHyper(int(hyper[0]), float(hyper[1]))
        options = FitOptions(
            solver=config.solver,
            selection=config.selection,
            dtype=config.dtype,
            keep_spectrum=config.keep_spectrum,
            readout_split=config.readout_split or 0.5,
        )
        dims = (d, spec.q, spec.d1)
        if config.readout_split is None:
            readout = sample_dataset(teacher, n_max, seed, "readout", config.max_elements)
            fits = fit_path(train, readout, dims, ns, hyp, options)
        else:
            fits = ((n, fit(train.head(n), None, dims, hyp, options)) for n in ns)
        clock = time.perf_counter()
        for a, (n, f) in zip(feasible, fits):
            overlap, deficient = metrics.feature_overlap(h1_true, f.latent(test.x), return_flag=True)
            cos2 = metrics.direction_cos2(f.u_hat, teacher.a1)
            edge = math.nan
            if config.bulk_edge:
                edge = metrics.bulk_edge_from_inputs(train.x[:n], train.y[:n], teacher.basis, seed, np.dtype(config.dtype))
            now = time.perf_counter()
            out.results[keys[a]] = TrialResult(
                d=d, q=spec.q, epsilon=spec.epsilon, gamma=spec.gamma, n=n, alpha=a, seed=seed,
                readout=readout_label(spec.readout, hyper),
                test_mse=metrics.mse_on(f, test),
                feature_overlap=overlap,
                per_direction_cos2=tuple(float(c) for c in cos2),
                per_direction_err=tuple(float(1.0 - math.sqrt(c)) for c in cos2),
                spectrum_top=tuple(float(abs(v)) for v in f.eigvals),
                bulk_edge=edge,
                m_empirical=metrics.count_recovered(cos2),
                rank_deficient=deficient,
                wall_time=(now - clock) if config.record_wall_time else None,
            )  # fmt: skip
            if f.full_spectrum is not None:
                out.spectra[keys[a]] = f.full_spectrum
            clock = now
    except DeskScaleError as exc:
        for a in feasible:
            out.results.pop(keys[a], None)
            out.skipped[keys[a]] = str(exc)
    except Exception as exc:  # noqa: BLE001 - recorded per cell, the sweep continues
        for a in feasible:
            if keys[a] not in out.results:
                out.failed[keys[a]] = f"{type(exc).__name__}: {exc}"
    return out


def run_trial(config: SweepConfig, cell: Cell) -> TrialResult:
    """One cell on its own; raises DeskScaleError when the cell is beyond the memory cap."""
    outcome = run_group(config, cell.d, cell.seed, cell.hyper, [cell.alpha])
    key = cell.key()
    if key in outcome.skipped:
        raise DeskScaleError(outcome.skipped[key])
    if key in outcome.failed:
        raise RuntimeError(outcome.failed[key])
    return outcome.results[key]


def _group_job(config_doc: dict, d: int, seed: int, hyper, alphas) -> GroupOutcome:
    return run_group(SweepConfig.from_dict(config_doc), d, seed, tuple(hyper), alphas)


# --------------------------------------------------------------------------
# sweeps


def _row_text(row: list) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(row)
    return buf.getvalue()


def _row_key(row: list, header: list) -> str:
    rec = dict(zip(header, row))
    readout = rec["readout"].split("|")
    r = int(readout[1].split("=")[1])
    rho = float(readout[2].split("=")[1])
    return Cell(int(rec["d"]), float(rec["alpha"]), int(rec["seed"]), (r, rho)).key()


def _sort_key(row: list, header: list):
    rec = dict(zip(header, row))
    return (int(rec["d"]), float(rec["alpha"]), int(rec["seed"]), rec["readout"])


def _read_partial(path: Path, header: list) -> dict:
    rows = {}
    if not path.exists():
        return rows
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            return rows
        for row in reader:
            if len(row) == len(header):  # a torn final line from a crash is dropped
                rows[_row_key(row, header)] = row
    return rows


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@dataclass
class SweepOutcome:
    status: str
    csv_path: Path
    manifest_path: Path
    completed: int
    skipped: dict
    failed: dict

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.status == "complete" else EXIT_PARTIAL


def worker_count(config: SweepConfig) -> int:
    cap = os.environ.get("HIERSPEC_THREADS")
    n = config.workers
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def run_sweep(config: SweepConfig, resume: bool = False, stop_after: int | None = None) -> SweepOutcome:
    """Run every cell, appending rows as groups finish; the final CSV is sorted by (d, alpha, seed).

    ``stop_after`` halts after that many groups, leaving a resumable partial
    state behind (used to exercise crash recovery).
    """
    config.validate()
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    partial, final, manifest_path = out_dir / PARTIAL_CSV, out_dir / FINAL_CSV, out_dir / MANIFEST
    header = TrialResult.header(config.d1max())
    digest = config.semantic_hash()
    done: dict = {}
    if resume and manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("config_hash") != digest:
            raise ConfigError("existing manifest belongs to a different configuration")
        done = _read_partial(partial, header)
        if not done and final.exists():
            done = _read_partial(final, header)
    with open(partial, "w", newline="") as fh:
        fh.write(_row_text(header))
        fh.writelines(_row_text(done[k]) for k in done)
        fh.flush()
        os.fsync(fh.fileno())

    manifest = {
        "config_hash": digest,
        "config": config.to_dict(),
        "status": "running",
        "completed": sorted(done),
        "skipped": {},
        "failed": {},
    }
    _write_json(manifest_path, manifest)

    groups: dict = {}
    for c in cells(config):
        if c.key() not in done:
            groups.setdefault((c.d, c.seed, c.hyper), []).append(c.alpha)

    def record(outcome: GroupOutcome, fh) -> None:
        for key, res in outcome.results.items():
            row = res.csv_row(config.d1max())
            done[key] = row
            fh.write(_row_text(row))
        for key, spec in outcome.spectra.items():
            name = "spectrum_" + key.replace("|", "_") + ".csv"
            with open(out_dir / name, "w") as sf:
                sf.write("eigenvalue\n")
                sf.writelines(f"{v!r}\n" for v in spec)
        fh.flush()
        os.fsync(fh.fileno())
        manifest["completed"] = sorted(done)
        manifest["skipped"].update(outcome.skipped)
        manifest["failed"].update(outcome.failed)
        _write_json(manifest_path, manifest)

    jobs = sorted(groups.items())
    if stop_after is not None:
        jobs = jobs[:stop_after]
    workers = worker_count(config)
    with open(partial, "a", newline="") as fh:
        if workers == 1:
            for (d, seed, hyper), alphas in jobs:
                record(run_group(config, d, seed, hyper, alphas), fh)
        else:
            doc = config.to_dict()
            with cf.ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_group_job, doc, d, s, h, al) for (d, s, h), al in jobs]
                for fut in cf.as_completed(futures):
                    record(fut.result(), fh)

    expected = {c.key() for c in cells(config)}
    complete = expected <= set(done)
    rows = sorted(done.values(), key=lambda r: _sort_key(r, header))
    tmp = final.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(_row_text(header))
        fh.writelines(_row_text(r) for r in rows)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, final)
    if complete:
        partial.unlink(missing_ok=True)
    manifest["status"] = "complete" if complete else "partial"
    _write_json(manifest_path, manifest)
    return SweepOutcome(manifest["status"], final, manifest_path, len(done), manifest["skipped"], manifest["failed"])


def load_results(path):
    import pandas as pd

    return pd.read_csv(path)


# --------------------------------------------------------------------------
# figure tables

FIGURES = ("mse_vs_alpha", "overlap_vs_alpha", "spectrum", "directionwise", "staircase", "gamma_family")
_NEEDS = {
    "mse_vs_alpha": ("d", "q", "gamma", "alpha", "n", "test_mse"),
    "overlap_vs_alpha": ("d", "alpha", "feature_overlap"),
    "directionwise": ("d", "q", "gamma", "alpha", "n", "cos2_1"),
    "staircase": ("d", "q", "gamma", "alpha", "n", "m_empirical", "cos2_1"),
    "gamma_family": ("gamma", "d", "q", "alpha", "n", "test_mse"),
    "spectrum": ("eigenvalue",),
}


def _band(df, keys, column):
    g = df.groupby(keys, sort=True)[column]
    out = g.mean().rename("y_mean").to_frame()
    out["y_q25"] = g.quantile(0.25)
    out["y_q75"] = g.quantile(0.75)
    return out.reset_index()


def _d1_of(df) -> int:
    cols = [c for c in df.columns if c.startswith("cos2_")]
    return int(df[cols].notna().sum(axis=1).max())


def _quiet(fn, *args, **kwargs) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", metrics.OutOfWindowWarning)
        try:
            return fn(*args, **kwargs)
        except ValueError:
            return math.nan


def emit_figure_data(results, figure: str, out_dir, tracked=TRACKED_DIRECTIONS) -> list:
    """Write plot-ready CSV(s) for ``figure``; returns the written paths.

    ``results`` is a DataFrame or a CSV path: sweep results for every figure
    except 'spectrum', which takes a one-column eigenvalue table.
    """
    import pandas as pd

    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {FIGURES}")
    df = results if isinstance(results, pd.DataFrame) else pd.read_csv(results)
    missing = [c for c in _NEEDS[figure] if c not in df.columns]
    if missing:
        raise KeyError(f"results lack columns needed for {figure}: {missing}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    def write(frame, name):
        path = out_dir / name
        frame.to_csv(path, index=False, float_format="%.10g")
        paths.append(path)

    if figure == "spectrum":
        write(df[["eigenvalue"]], "spectrum.csv")
        return paths
    if figure == "overlap_vs_alpha":
        band = _band(df, ["d", "alpha"], "feature_overlap").rename(columns={"alpha": "x"})
        write(band, "overlap_vs_alpha.csv")
        return paths
    if figure in ("mse_vs_alpha", "gamma_family"):
        keys = ["d", "q", "gamma", "alpha"] if figure == "mse_vs_alpha" else ["gamma", "d", "q", "alpha"]
        band = _band(df, keys, "test_mse")
        d1 = _d1_of(df) if "cos2_1" in df.columns else None
        band["predicted_mse"] = [
            _quiet(metrics.predicted_mse, sample_size(int(r.d), r.alpha), int(r.d), int(r.q), float(r.gamma), d1)
            if d1 else math.nan
            for r in band.itertuples()
        ]
        write(band.rename(columns={"alpha": "x"}), f"{figure}.csv")
        return paths
    d1 = _d1_of(df)
    if figure == "staircase":
        band = _band(df, ["d", "q", "gamma", "alpha"], "m_empirical")
        band["m_th"] = [
            math.floor(metrics.predicted_count(sample_size(int(r.d), r.alpha), int(r.d), int(r.q), float(r.gamma), d1))
            for r in band.itertuples()
        ]
        write(band.rename(columns={"alpha": "x"}), "staircase.csv")
        return paths
    frames = []
    for i in [t for t in tracked if t <= d1]:
        col = f"cos2_{i}"
        keys = ["d", "q", "gamma", "alpha", "n"]
        band = _band(df, keys, col)
        band.insert(0, "direction", i)
        err = df.assign(err=1.0 - np.sqrt(df[col])).groupby(keys, sort=True)["err"]
        band["err_mean"] = err.mean().to_numpy()
        band["guide_1_over_n"] = [
            metrics.predicted_threshold(i, int(r.d), int(r.q), float(r.gamma), d1) / r.n for r in band.itertuples()
        ]
        frames.append(band)
    write(pd.concat(frames, ignore_index=True).rename(columns={"alpha": "x"}), "directionwise.csv")
    return paths
