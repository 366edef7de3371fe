"""Sweeps over noise levels and strategies, with on-disk artifacts.

Spec files are flat ``key = value`` text; ``#`` starts a comment and arrays
are comma-separated. Keys:

==================  =========================================================
name                run name (default ``experiment``)
dataset             ``idx`` | ``grid`` | ``blobs``
train_images,       IDX paths for ``dataset = idx``, relative to the spec file
train_labels,
test_images,
test_labels
limit, test_limit   truncate train / test sets
clients             number of clients N
noise_levels        comma list of noise rates
noise_mode          ``product`` (every N-tuple of levels) or ``shared``
noise_vectors       explicit vectors instead, ``0/0.1, 0.2/0``; ``/`` splits clients
strategies          comma list from fedavg, scaffold, fednova
rounds, epochs      R and E
global_lr, local_lr
batch_size
layer_dims          comma list; several networks separated by ``;``
hidden_bias         true | false
seed                master seed
output              output directory, relative to the spec file
bound_variant       cf | pnp | poly (Omega used in the CSV bound columns)
c0                  constant for the ``poly`` Omega
snapshot_every      write a model snapshot every K rounds (0 = never)
grid_side,          grid worlds: side length and draws per client
grid_samples
blob_dim, blob_classes, blob_train, blob_test, blob_spread
==================  =========================================================

Every cell uses the same partition, initial model, per-client flip order and
training seeds, all derived from the master seed, so cells differ only in
their noise vector, strategy and network.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, _kernels
from .data import LabeledDataset, inject_label_noise, load_idx, make_blobs, partition_iid
from .errors import ConfigError, DataError, ParseError, VerificationError
from .federation import STRATEGIES, FederationConfig, run_federation
from .grid import flip_fraction_world
from .metrics import BOUND_SLACK, OMEGA_VARIANTS, PairedShards, RoundEvaluator, RoundMetrics, fit_accuracy_vs_noise
from .nn import SgdConfig, init_mlp

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "noisyfed-manifest v1"
FIGURES = ("fig3a", "fig3b", "fig4", "fig5", "fig6", "fig7", "fig8")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    dataset: str = "grid"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int = 0
    test_limit: int = 0
    clients: int = 2
    noise_levels: tuple[float, ...] = (0.0,)
    noise_mode: str = "product"
    noise_vectors: tuple[tuple[float, ...], ...] = ()
    strategies: tuple[str, ...] = ("fedavg",)
    rounds: int = 40
    epochs: int = 5
    global_lr: float = 1.0
    local_lr: float = 0.1
    batch_size: int = 32
    layer_dims: tuple[tuple[int, ...], ...] = ((3, 16, 16, 2),)
    hidden_bias: bool = True
    seed: int = 0
    output: str = "runs/experiment"
    bound_variant: str = "pnp"
    c0: float = 1.0
    snapshot_every: int = 0
    grid_side: int = 5
    grid_samples: int = 200
    blob_dim: int = 2
    blob_classes: int = 3
    blob_train: int = 600
    blob_test: int = 300
    blob_spread: float = 0.12
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.dataset not in ("idx", "grid", "blobs"):
            raise ConfigError(f"dataset must be idx, grid or blobs, not {self.dataset!r}")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.noise_mode not in ("product", "shared"):
            raise ConfigError("noise_mode must be product or shared")
        grid = self.noise_grid()
        if not grid:
            raise ConfigError("noise grid is empty")
        for vec in grid:
            if len(vec) != self.clients:
                raise ConfigError(f"noise vector {vec} does not have {self.clients} entries")
            if any(not 0.0 <= v <= 1.0 for v in vec):
                raise ConfigError(f"noise vector {vec} has a rate outside [0, 1]")
        if not self.strategies or any(s not in STRATEGIES for s in self.strategies):
            raise ConfigError(f"strategies must be drawn from {STRATEGIES}")
        if self.bound_variant not in OMEGA_VARIANTS:
            raise ConfigError(f"bound_variant must be one of {OMEGA_VARIANTS}")
        if self.rounds < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, epochs and batch_size must be >= 1")
        if not 0.0 <= self.global_lr <= 1.0 or self.local_lr <= 0:
            raise ConfigError("need 0 <= global_lr <= 1 and local_lr > 0")
        if not self.layer_dims or any(len(d) < 2 or min(d) < 1 for d in self.layer_dims):
            raise ConfigError("layer_dims must list at least two positive widths per network")
        if self.dataset == "idx" and not (self.train_images and self.train_labels
                                          and self.test_images and self.test_labels):
            raise ConfigError("dataset = idx needs train_images, train_labels, test_images, test_labels")

    def noise_grid(self) -> list[tuple[float, ...]]:
        if self.noise_vectors:
            return [tuple(v) for v in self.noise_vectors]
        if self.noise_mode == "shared":
            return [(lvl,) * self.clients for lvl in self.noise_levels]
        return [tuple(v) for v in itertools.product(self.noise_levels, repeat=self.clients)]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(os.path.normpath(Path(self.base_dir) / p))

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.output)

    def canonical_text(self) -> str:
        """Normalized ``key = value`` lines; paths and output location are excluded."""
        skip = {"base_dir", "output"}
        lines = []
        for f in fields(self):
            if f.name in skip:
                continue
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def federation_config(self, strategy: str) -> FederationConfig:
        sgd = SgdConfig(self.local_lr, self.batch_size, self.epochs, 0)
        return FederationConfig(self.rounds, self.global_lr, sgd, strategy,
                                derived_seed(self.seed, "federation"), self.snapshot_every)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            sep = ";" if all(isinstance(x, int) for x in v[0]) else ", "
            inner = "," if sep == ";" else "/"
            return sep.join(inner.join(_format_value(x) for x in t) for t in v)
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_INT_KEYS = {"limit", "test_limit", "clients", "rounds", "epochs", "batch_size", "seed", "snapshot_every",
             "grid_side", "grid_samples", "blob_dim", "blob_classes", "blob_train", "blob_test"}
_FLOAT_KEYS = {"global_lr", "local_lr", "c0", "blob_spread"}


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_spec(text: str, base_dir: str | Path = ".") -> ExperimentSpec:
    values: dict = {}
    known = {f.name for f in fields(ExperimentSpec)} - {"base_dir"}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key == "hidden_bias":
                values[key] = _parse_bool(value)
            elif key == "noise_levels":
                values[key] = tuple(float(v) for v in value.split(",") if v.strip())
            elif key == "noise_vectors":
                values[key] = tuple(tuple(float(x) for x in vec.split("/")) for vec in value.split(",") if vec.strip())
            elif key == "strategies":
                values[key] = tuple(s.strip().lower() for s in value.split(",") if s.strip())
            elif key == "layer_dims":
                values[key] = tuple(tuple(int(x) for x in net.split(",")) for net in value.split(";") if net.strip())
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return ExperimentSpec(**values, base_dir=str(base_dir))


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from None
    return parse_spec(text, path.parent)


def derived_seed(master: int, role: str, *extra: int) -> int:
    role_id = int.from_bytes(hashlib.sha256(role.encode()).digest()[:4], "little")
    ss = np.random.SeedSequence([int(master), role_id, *[int(e) for e in extra]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# cells


@dataclass(frozen=True)
class Cell:
    strategy: str
    net: int
    noise: tuple[float, ...]

    @property
    def cell_id(self) -> str:
        wp = "-".join(f"{v:g}" for v in self.noise)
        return f"{self.strategy}-net{self.net}-wp{wp}"


def expand_cells(spec: ExperimentSpec) -> list[Cell]:
    return [Cell(s, n, v) for n in range(len(spec.layer_dims)) for s in spec.strategies
            for v in spec.noise_grid()]


@dataclass
class PreparedData:
    train: LabeledDataset | None
    test: LabeledDataset | None
    shards: list[LabeledDataset] | None
    feature_dim: int
    class_count: int


def prepare_data(spec: ExperimentSpec) -> PreparedData:
    """Load and partition the clean data once per sweep (grid worlds are built per cell)."""
    if spec.dataset == "grid":
        return PreparedData(None, None, None, 2, 2)
    if spec.dataset == "blobs":
        train = make_blobs(spec.blob_train, spec.blob_dim, spec.blob_classes,
                           derived_seed(spec.seed, "blobs-train"), spec.blob_spread,
                           centers_seed=derived_seed(spec.seed, "blobs-centers"))
        test = make_blobs(spec.blob_test, spec.blob_dim, spec.blob_classes,
                          derived_seed(spec.seed, "blobs-test"), spec.blob_spread,
                          centers_seed=derived_seed(spec.seed, "blobs-centers"))
    else:
        try:
            train = load_idx(spec.resolve(spec.train_images), spec.resolve(spec.train_labels), spec.limit or None)
            test = load_idx(spec.resolve(spec.test_images), spec.resolve(spec.test_labels), spec.test_limit or None)
        except (OSError, ParseError) as exc:
            raise DataError(f"cannot load dataset: {exc}") from None
    if len(train) < spec.clients:
        raise DataError(f"{len(train)} training examples cannot cover {spec.clients} clients")
    shards = partition_iid(train, spec.clients, derived_seed(spec.seed, "partition"))
    return PreparedData(train, test, shards, train.dim, train.class_count)


def check_networks(spec: ExperimentSpec, data: PreparedData) -> None:
    for dims in spec.layer_dims:
        if dims[0] != data.feature_dim + 1:
            raise ConfigError(f"layer_dims {dims}: input width must be {data.feature_dim + 1} (features + bias)")
        if dims[-1] != data.class_count:
            raise ConfigError(f"layer_dims {dims}: output width must be {data.class_count}")


def cell_inputs(spec: ExperimentSpec, data: PreparedData, cell: Cell):
    """Client training sets and the evaluation source for one cell."""
    if spec.dataset == "grid":
        world = flip_fraction_world(cell.noise, derived_seed(spec.seed, "grid-flips"), spec.grid_side)
        datasets = [world.sample(k, spec.grid_samples, derived_seed(spec.seed, "grid-sample", k))
                    for k in range(spec.clients)]
        return datasets, world, None
    noisy = [inject_label_noise(s, wp, derived_seed(spec.seed, "noise", k))
             for k, (s, wp) in enumerate(zip(data.shards, cell.noise))]
    return noisy, PairedShards(tuple(noisy), tuple(data.shards)), data.test


def csv_header(n_clients: int) -> list[str]:
    return (["run_id", "strategy"] + [f"wp_{k + 1}" for k in range(n_clients)] + ["round"]
            + [f"loss_{k + 1}" for k in range(n_clients)]
            + ["test_accuracy", "L", "L_dagger", "G", "pnp", "bound_variant", "bound_value", "bound_holds"])


def _f(x: float) -> str:
    return repr(float(x))


def metrics_row(run_id: str, strategy: str, noise: Sequence[float], m: RoundMetrics) -> list[str]:
    b = m.bound
    return ([run_id, strategy] + [_f(v) for v in noise] + [str(m.round)]
            + [_f(x) for x in m.client_losses]
            + [_f(m.test_accuracy), _f(m.empirical_risk), _f(m.ground_truth_risk), _f(m.generalization_error),
               _f(m.path_norm), b.variant, _f(b.bound), "true" if b.holds else "false"])


def _csv_text(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def run_cell(spec: ExperimentSpec, data: PreparedData, cell: Cell, out_dir: Path) -> Path:
    datasets, source, test = cell_inputs(spec, data, cell)
    dims = spec.layer_dims[cell.net]
    model = init_mlp(dims, derived_seed(spec.seed, "init", cell.net), spec.hidden_bias)
    config = spec.federation_config(cell.strategy)
    evaluator = RoundEvaluator(source, test, variant=spec.bound_variant, c0=spec.c0, epochs=spec.epochs)
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    snap_dir = None
    if spec.snapshot_every > 0:
        snap_dir = out_dir / "snapshots" / cell.cell_id
        snap_dir.mkdir(parents=True, exist_ok=True)
    events = io.StringIO()
    result = run_federation(model, datasets, config, evaluate=evaluator, event_log=events, snapshot_dir=snap_dir)
    rows = [csv_header(spec.clients)]
    rows += [metrics_row(spec.name, cell.strategy, cell.noise, m) for m in result.history]
    path = cell_dir / f"{cell.cell_id}.csv"
    atomic_write_text(cell_dir / f"{cell.cell_id}.events.tsv", events.getvalue())
    atomic_write_text(path, _csv_text(rows))
    log.info("cell %s final accuracy %.4f", cell.cell_id, result.history[-1].test_accuracy)
    return path


# ---------------------------------------------------------------------------
# manifest


@dataclass
class CellRecord:
    cell: Cell
    status: str
    path: str


@dataclass
class RunManifest:
    name: str
    spec_hash: str
    version: str
    master_seed: int
    clients: int
    seeds: dict[str, int]
    cells: list[CellRecord]
    root: Path
    rounds: int = 0
    layer_dims: tuple[tuple[int, ...], ...] = ()

    def completed(self) -> list[CellRecord]:
        return [c for c in self.cells if c.status == "complete"]

    def to_text(self) -> str:
        lines = [MANIFEST_HEADER, f"name {self.name}", f"spec_hash {self.spec_hash}",
                 f"version {self.version}", f"seed {self.master_seed}", f"clients {self.clients}",
                 f"rounds {self.rounds}",
                 "networks " + ";".join(",".join(str(d) for d in net) for net in self.layer_dims),
                 "seeds " + " ".join(f"{k}={v}" for k, v in sorted(self.seeds.items()))]
        for rec in self.cells:
            c = rec.cell
            wp = ",".join(_f(v) for v in c.noise)
            lines.append(f"cell {c.cell_id} {c.strategy} {c.net} {wp} {rec.status} {rec.path}")
        lines += ["summary summary.csv", "regression regression.json"]
        return "\n".join(lines) + "\n"


def read_manifest(path: str | Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ParseError("manifest", f"{path} is not a noisyfed manifest")
    meta: dict[str, str] = {}
    cells = []
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "cell":
            cid, strategy, net, wp, status, rel = rest.split(" ")
            cell = Cell(strategy, int(net), tuple(float(v) for v in wp.split(",")))
            if cell.cell_id != cid:
                raise ParseError("manifest", f"cell id {cid} does not match its fields")
            cells.append(CellRecord(cell, status, rel))
        else:
            meta[key] = rest
    seeds = {k: int(v) for k, v in (tok.split("=") for tok in meta.get("seeds", "").split())}
    nets = tuple(tuple(int(x) for x in n.split(",")) for n in meta.get("networks", "").split(";") if n)
    return RunManifest(meta.get("name", ""), meta.get("spec_hash", ""), meta.get("version", ""),
                       int(meta.get("seed", 0)), int(meta.get("clients", 0)), seeds, cells, path.parent,
                       int(meta.get("rounds", 0)), nets)


def read_cell_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _regressions(manifest: RunManifest, finals: dict[str, float]) -> dict[str, dict]:
    groups: dict[str, list] = {}
    for rec in manifest.completed():
        key = f"{rec.cell.strategy}-net{rec.cell.net}"
        groups.setdefault(key, []).append((rec.cell.noise, finals[rec.cell.cell_id]))
    out = {}
    for key, pts in sorted(groups.items()):
        if len(pts) >= len(pts[0][0]) + 2:
            out[key] = fit_accuracy_vs_noise(pts).to_json_dict()
    return out


def write_summary(manifest: RunManifest) -> dict[str, float]:
    n = manifest.clients
    rows = [["cell_id", "strategy", "net"] + [f"wp_{k + 1}" for k in range(n)] + ["final_accuracy", "final_G", "final_pnp"]]
    finals = {}
    for rec in manifest.completed():
        last = read_cell_csv(manifest.root / rec.path)[-1]
        finals[rec.cell.cell_id] = float(last["test_accuracy"])
        rows.append([rec.cell.cell_id, rec.cell.strategy, str(rec.cell.net)] + [_f(v) for v in rec.cell.noise]
                    + [last["test_accuracy"], last["G"], last["pnp"]])
    atomic_write_text(manifest.root / "summary.csv", _csv_text(rows))
    regressions = _regressions(manifest, finals)
    atomic_write_text(manifest.root / "regression.json", json.dumps(regressions, indent=2, sort_keys=True) + "\n")
    return finals


def run_sweep(spec: ExperimentSpec, threads: int = 1, force: bool = False) -> RunManifest:
    """Run every (noise vector, strategy, network) cell and write the artifacts.

    Cells whose CSV already exists under a manifest with the same spec hash
    are kept, so deleting one cell's CSV and rerunning regenerates only it.
    """
    data = prepare_data(spec)
    check_networks(spec, data)
    out_dir = spec.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    spec_hash = spec.spec_hash()

    reusable: set[str] = set()
    previous = out_dir / MANIFEST_NAME
    if previous.exists() and not force:
        try:
            old = read_manifest(previous)
            if old.spec_hash == spec_hash:
                reusable = {r.cell.cell_id for r in old.completed() if (out_dir / r.path).exists()}
        except (ParseError, ValueError):
            reusable = set()

    cells = expand_cells(spec)
    todo = [c for c in cells if c.cell_id not in reusable]
    log.info("%d cells, %d to run (%s backend)", len(cells), len(todo), _kernels.backend_name())
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda c: run_cell(spec, data, c, out_dir), todo))
    else:
        for c in todo:
            run_cell(spec, data, c, out_dir)

    seeds = {"partition": derived_seed(spec.seed, "partition"), "federation": derived_seed(spec.seed, "federation")}
    for k in range(spec.clients):
        seeds[f"noise{k + 1}"] = derived_seed(spec.seed, "noise", k)
    for n in range(len(spec.layer_dims)):
        seeds[f"init{n}"] = derived_seed(spec.seed, "init", n)
    records = [CellRecord(c, "complete", f"cells/{c.cell_id}.csv") for c in cells]
    manifest = RunManifest(spec.name, spec_hash, __version__, spec.seed, spec.clients, seeds, records, out_dir,
                           spec.rounds, spec.layer_dims)
    atomic_write_text(out_dir / "spec.txt", spec.canonical_text())
    write_summary(manifest)
    atomic_write_text(out_dir / MANIFEST_NAME, manifest.to_text())
    return manifest


# ---------------------------------------------------------------------------
# figure tables


def _require_cells(manifest: RunManifest) -> list[CellRecord]:
    if not manifest.cells:
        raise VerificationError("manifest has no cells")
    missing = [r.cell.cell_id for r in manifest.cells
               if r.status != "complete" or not (manifest.root / r.path).exists()]
    if missing:
        raise VerificationError("missing cells: " + ", ".join(missing))
    return manifest.cells


def emit_figure_data(manifest: RunManifest | str | Path, figure: str) -> Path:
    """Write the plot-ready table for ``figure`` to ``<run>/figures/<figure>.csv``."""
    if not isinstance(manifest, RunManifest):
        manifest = read_manifest(manifest)
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; expected one of {FIGURES}")
    records = _require_cells(manifest)
    n = manifest.clients
    wp_cols = [f"wp_{k + 1}" for k in range(n)]
    tables = {r.cell.cell_id: read_cell_csv(manifest.root / r.path) for r in records}

    def depth(rec: CellRecord) -> str:
        if manifest.layer_dims and rec.cell.net < len(manifest.layer_dims):
            return str(len(manifest.layer_dims[rec.cell.net]) - 1)
        return ""

    rows: list[list[str]]
    if figure in ("fig3a", "fig3b"):
        head = ["strategy", "net", "depth"] + wp_cols + ["round", "pnp"]
        if figure == "fig3b":
            head += ["log_round", "log_pnp"]
        rows = [head]
        for rec in records:
            for row in tables[rec.cell.cell_id]:
                line = [rec.cell.strategy, str(rec.cell.net), depth(rec)] + [row[c] for c in wp_cols] + [row["round"], row["pnp"]]
                if figure == "fig3b":
                    pnp = float(row["pnp"])
                    line += [_f(math.log(float(row["round"]))), _f(math.log(pnp)) if pnp > 0 else "nan"]
                rows.append(line)
    elif figure in ("fig4", "fig5"):
        finals = {cid: float(t[-1]["test_accuracy"]) for cid, t in tables.items()}
        regress = {}
        if figure == "fig5":
            groups: dict[str, list] = {}
            for rec in records:
                groups.setdefault(f"{rec.cell.strategy}-net{rec.cell.net}", []).append(
                    (rec.cell.noise, finals[rec.cell.cell_id]))
            regress = {k: fit_accuracy_vs_noise(v) for k, v in groups.items() if len(v) >= n + 2}
        head = ["strategy", "net"] + wp_cols + ["accuracy"] + (["fitted"] if figure == "fig5" else [])
        rows = [head]
        for rec in records:
            line = [rec.cell.strategy, str(rec.cell.net)] + [_f(v) for v in rec.cell.noise] + [_f(finals[rec.cell.cell_id])]
            if figure == "fig5":
                fit = regress.get(f"{rec.cell.strategy}-net{rec.cell.net}")
                line.append(_f(fit.predict(rec.cell.noise)) if fit else "nan")
            rows.append(line)
    elif figure in ("fig6", "fig7"):
        value = ["loss_1", "mean_loss"] if figure == "fig6" else ["test_accuracy"]
        rows = [["strategy", "net"] + wp_cols + ["round"] + value]
        for rec in records:
            for row in tables[rec.cell.cell_id]:
                line = [rec.cell.strategy, str(rec.cell.net)] + [row[c] for c in wp_cols] + [row["round"]]
                if figure == "fig6":
                    losses = [float(row[f"loss_{k + 1}"]) for k in range(n)]
                    line += [row["loss_1"], _f(sum(losses) / n)]
                else:
                    line.append(row["test_accuracy"])
                rows.append(line)
    else:  # fig8
        rows = [["strategy", "net", "mean_wp"] + wp_cols + ["final_accuracy"]]
        for rec in records:
            last = tables[rec.cell.cell_id][-1]
            rows.append([rec.cell.strategy, str(rec.cell.net), _f(sum(rec.cell.noise) / n)]
                        + [_f(v) for v in rec.cell.noise] + [last["test_accuracy"]])
    path = manifest.root / "figures" / f"{figure}.csv"
    atomic_write_text(path, _csv_text(rows))
    return path


# ---------------------------------------------------------------------------
# verification


def verify_manifest(manifest: RunManifest | str | Path) -> list[str]:
    """Re-check stored artifacts; returns a list of problems (empty when clean)."""
    if not isinstance(manifest, RunManifest):
        manifest = read_manifest(manifest)
    problems = []
    if not manifest.cells:
        return ["manifest has no cells"]
    summary_path = manifest.root / "summary.csv"
    summary = {}
    if summary_path.exists():
        summary = {r["cell_id"]: r for r in read_cell_csv(summary_path)}
    else:
        problems.append("summary.csv missing")
    for rec in manifest.cells:
        cid = rec.cell.cell_id
        path = manifest.root / rec.path
        if rec.status != "complete":
            problems.append(f"{cid}: status {rec.status}")
            continue
        if not path.exists():
            problems.append(f"{cid}: metrics file {rec.path} missing")
            continue
        rows = read_cell_csv(path)
        if not rows:
            problems.append(f"{cid}: no rounds recorded")
            continue
        if manifest.rounds and len(rows) != manifest.rounds:
            problems.append(f"{cid}: {len(rows)} rounds recorded, expected {manifest.rounds}")
        for row in rows:
            r = row["round"]
            L, Ld, G = float(row["L"]), float(row["L_dagger"]), float(row["G"])
            if abs(G - abs(Ld - L)) > 1e-12:
                problems.append(f"{cid} round {r}: G != |L_dagger - L|")
            acc = float(row["test_accuracy"])
            if not 0.0 <= acc <= 1.0:
                problems.append(f"{cid} round {r}: accuracy {acc} outside [0, 1]")
            if not float(row["pnp"]) >= 0.0:
                problems.append(f"{cid} round {r}: negative path norm")
            holds = row["bound_holds"] == "true"
            if holds != (G <= float(row["bound_value"]) + BOUND_SLACK):
                problems.append(f"{cid} round {r}: bound_holds flag inconsistent")
            if row["bound_variant"] in ("cf", "pnp") and not holds:
                problems.append(f"{cid} round {r}: bound violated ({row['bound_variant']})")
        if cid in summary and summary[cid]["final_accuracy"] != rows[-1]["test_accuracy"]:
            problems.append(f"{cid}: summary accuracy differs from last round")
        elif summary and cid not in summary:
            problems.append(f"{cid}: missing from summary")
    return problems


def verify_or_raise(manifest) -> None:
    problems = verify_manifest(manifest)
    if problems:
        raise VerificationError("; ".join(problems))
