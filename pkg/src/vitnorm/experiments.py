"""Experiment drivers behind the CLI: training runs, sweeps, ablations,
gradient-norm instrumentation, scale export and gradient checks.

Every driver writes plain files (CSV, PGM, checkpoints) and is deterministic
in its spec and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from . import tensor as T
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .data import Dataset, load_cifar10, load_mnist, synthetic_dataset, value_range
from .model import ConfigError, ModelConfig, ParamTree, STEM_NORMS, BLOCK_EXTRAS, init_params, placement_grid, vit_forward
from .train import LOSS_FNS, MetricsRecord, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

DATASETS = ("synthetic", "mnist", "cifar10")
SPEC_KEYS = ("name", "dataset", "data_dir", "synthetic", "train_limit", "eval_limit", "out", "model", "train")
SYNTHETIC_KEYS = ("n", "n_eval", "seed", "noise")
BASELINE_RUN = "sa-pre_mlp-pre"
DPN_RUN = "dpn"


# ---------------------------------------------------------------------------
# run specs


@dataclass(frozen=True)
class RunSpec:
    name: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "synthetic"
    data_dir: str | None = None
    synthetic: dict[str, Any] = field(default_factory=dict)
    train_limit: int | None = None
    eval_limit: int | None = None
    out: str | None = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset={self.dataset!r} is invalid; valid options: {', '.join(DATASETS)}")
        for key in self.synthetic:
            if key not in SYNTHETIC_KEYS:
                raise ConfigError(f"unknown synthetic key {key!r}; valid keys: {', '.join(SYNTHETIC_KEYS)}")

    def replace(self, **changes) -> "RunSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "data_dir": self.data_dir,
            "synthetic": dict(self.synthetic),
            "train_limit": self.train_limit,
            "eval_limit": self.eval_limit,
            "out": self.out,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunSpec":
        d = dict(d or {})
        for key in d:
            if key not in SPEC_KEYS:
                raise ConfigError(f"unknown spec key {key!r}; valid keys: {', '.join(SPEC_KEYS)}")
        d["model"] = ModelConfig.from_dict(d.get("model") or {})
        d["train"] = TrainConfig.from_dict(d.get("train") or {})
        d["synthetic"] = dict(d.get("synthetic") or {})
        return cls(**d)


def load_spec(path: str | Path | None, **overrides) -> RunSpec:
    """Read a YAML spec; ``seed``/``dataset``/``data_dir``/``out`` overrides apply when not None."""
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: spec must be a mapping")
    spec = RunSpec.from_dict(raw)
    if overrides.get("seed") is not None:
        spec = spec.replace(train=spec.train.replace(seed=int(overrides["seed"])))
    for key in ("dataset", "data_dir", "out"):
        if overrides.get(key) is not None:
            spec = spec.replace(**{key: overrides[key]})
    RunSpec.__post_init__(spec)
    return spec


def load_datasets(spec: RunSpec) -> tuple[Dataset, Dataset]:
    """Train and eval splits, mapped to [-1, 1]."""
    m = spec.model
    if spec.dataset == "synthetic":
        syn = {"n": 256, "n_eval": 128, "seed": 0, "noise": 0.05, **spec.synthetic}
        h, w = m.image_size
        common = dict(class_count=m.num_classes, height=h, width=w, channels=m.channels, noise=syn["noise"])
        # eval split uses a distinct noise stream but the same class templates
        full = synthetic_dataset(n=syn["n"] + syn["n_eval"], seed=syn["seed"], **common)
        tr = Dataset(full.images[: syn["n"]], full.labels[: syn["n"]], full.class_count)
        ev = Dataset(full.images[syn["n"] :], full.labels[syn["n"] :], full.class_count)
    else:
        if spec.data_dir is None:
            raise ConfigError(f"dataset {spec.dataset} needs data_dir (or --data-dir)")
        loader = load_mnist if spec.dataset == "mnist" else load_cifar10
        tr, ev = loader(spec.data_dir, "train"), loader(spec.data_dir, "test")
    if spec.train_limit:
        tr = tr.subset(spec.train_limit)
    if spec.eval_limit:
        ev = ev.subset(spec.eval_limit)
    if tr.images.shape[1:] != (*m.image_size, m.channels):
        raise ConfigError(f"dataset images {tr.images.shape[1:]} do not match model image_size/channels")
    if tr.class_count != m.num_classes:
        raise ConfigError(f"dataset has {tr.class_count} classes, model num_classes={m.num_classes}")
    return value_range(tr), value_range(ev)


# ---------------------------------------------------------------------------
# CSV helpers


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    atomic_write(path, csv_text(header, rows))
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def metrics_csv(records: Sequence[MetricsRecord]) -> tuple[list[str], list[list[Any]]]:
    layers: list[str] = []
    for r in records:
        for k in r.grad_norms:
            if k not in layers:
                layers.append(k)
    header = ["step", "loss", "learning_rate", "eval_accuracy"] + [f"grad_norm/{k}" for k in layers]
    rows = [[r.step, r.loss, r.learning_rate, r.eval_accuracy] + [r.grad_norms.get(k) for k in layers] for r in records]
    return header, rows


# ---------------------------------------------------------------------------
# training runs


def run_training(spec: RunSpec, out_dir, datasets=None, on_step=None) -> tuple[ParamTree, list[MetricsRecord]]:
    """Train one spec; write metrics.csv and checkpoint.ckpt into out_dir."""
    out_dir = Path(out_dir)
    tr, ev = datasets if datasets is not None else load_datasets(spec)
    params, records = train(spec.model, spec.train, tr, ev, on_step=on_step)
    write_csv(out_dir / "metrics.csv", *metrics_csv(records))
    save_checkpoint(out_dir / "checkpoint.ckpt", spec.model, params, {"name": spec.name, "train": spec.train.to_dict()})
    return params, records


def _run_job(spec_dict: dict[str, Any], out_dir: str) -> tuple[str, float | None]:
    spec = RunSpec.from_dict(spec_dict)
    try:
        _, records = run_training(spec, out_dir)
    except Exception as exc:  # a failed run is recorded, not fatal to the sweep
        log.warning("run %s failed: %s", spec.name, exc)
        return f"failed: {type(exc).__name__}: {exc}", None
    return "ok", records[-1].eval_accuracy


def _run_many(runs: list[RunSpec], out_dir: Path, jobs: int) -> list[tuple[str, float | None]]:
    args = [(r.to_dict(), str(out_dir / "runs" / r.name)) for r in runs]
    if jobs <= 1:
        return [_run_job(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, *zip(*args)))


def placement_runs(spec: RunSpec) -> list[RunSpec]:
    """Nine block placements, then NormFormer, Sub-LN and the DPN stem (all else default)."""
    base = spec.model.replace(stem_norm="none", stem_norm_type="layernorm", block_extra="none")
    configs = [(f"sa-{sa}_mlp-{mlp}", base.replace(block_sa_ln=sa, block_mlp_ln=mlp)) for sa, mlp in placement_grid()]
    pre = base.replace(block_sa_ln="pre", block_mlp_ln="pre")
    configs += [
        ("normformer", pre.replace(block_extra="normformer")),
        ("subln", pre.replace(block_extra="subln")),
        (DPN_RUN, pre.replace(stem_norm="dpn")),
    ]
    return [spec.replace(name=name, model=cfg) for name, cfg in configs]


def ablation_runs(spec: RunSpec) -> list[RunSpec]:
    """Stem ablations: no stem norm, the four LN positions, and DPN with each norm variant."""
    base = spec.model.replace(stem_norm_type="layernorm")
    configs = [(s, base.replace(stem_norm=s)) for s in ("none", "pre", "post", "post_posemb", "dpn")]
    configs += [
        ("only_learnable", base.replace(stem_norm="dpn", stem_norm_type="affine_only")),
        ("rmsnorm", base.replace(stem_norm="dpn", stem_norm_type="rmsnorm")),
        ("no_learnable", base.replace(stem_norm="dpn", stem_norm_type="normalize_only")),
    ]
    return [spec.replace(name=name, model=cfg) for name, cfg in configs]


def _delta(acc, ref):
    return None if acc is None or ref is None else acc - ref


def sweep_placements(spec: RunSpec, out_dir, jobs: int = 1) -> Path:
    out_dir = Path(out_dir)
    runs = placement_runs(spec)
    results = _run_many(runs, out_dir, jobs)
    accs = {r.name: acc for r, (_, acc) in zip(runs, results)}
    ref = accs[BASELINE_RUN]
    header = ["run", "stem_norm", "block_sa_ln", "block_mlp_ln", "block_extra", "status", "final_eval_accuracy", "delta_vs_baseline"]
    rows = [
        [r.name, r.model.stem_norm, r.model.block_sa_ln, r.model.block_mlp_ln, r.model.block_extra, status, acc, _delta(acc, ref)]
        for r, (status, acc) in zip(runs, results)
    ]
    return write_csv(out_dir / "sweep_placements.csv", header, rows)


def ablate_stem(spec: RunSpec, out_dir, jobs: int = 1) -> Path:
    out_dir = Path(out_dir)
    runs = ablation_runs(spec)
    results = _run_many(runs, out_dir, jobs)
    accs = {r.name: acc for r, (_, acc) in zip(runs, results)}
    ref = accs[DPN_RUN]
    header = ["run", "stem_norm", "stem_norm_type", "status", "final_eval_accuracy", "delta_vs_dpn"]
    rows = [
        [r.name, r.model.stem_norm, r.model.stem_norm_type, status, acc, _delta(acc, ref)]
        for r, (status, acc) in zip(runs, results)
    ]
    return write_csv(out_dir / "ablate_stem.csv", header, rows)


# ---------------------------------------------------------------------------
# gradient norms


@dataclass
class GradNormResult:
    depth_csv: Path
    series_csv: Path
    summary_csv: Path
    stem_ratio: float


def grad_norms(spec: RunSpec, out_dir, final_fraction: float = 0.2) -> GradNormResult:
    """Twin runs without and with DPN; per-layer gradient norms at every step.

    Depth profile: mean norm per layer (stem, block<i>, head) over the final
    ``final_fraction`` of steps.  Series: stem (patch embedding) norm per step.
    """
    out_dir = Path(out_dir)
    datasets = load_datasets(spec)
    series: dict[str, list[dict[str, float]]] = {}
    for stem in ("none", "dpn"):
        run = spec.replace(name=f"stem-{stem}", model=spec.model.replace(stem_norm=stem, stem_norm_type="layernorm"))
        steps: list[dict[str, float]] = []
        run_training(run, out_dir / "runs" / run.name, datasets, on_step=lambda s, loss, n, acc=steps: acc.append(dict(n)))
        series[stem] = steps
    total = spec.train.total_steps
    start = min(int(math.floor(total * (1 - final_fraction))), total - 1)
    depth_rows, window_means = [], {}
    for stem, steps in series.items():
        layers = list(steps[0])
        means = {k: float(np.mean([s[k] for s in steps[start:]])) for k in layers}
        window_means[stem] = means
        depth_rows += [[f"stem-{stem}", i, k, "block", means[k]] for i, k in enumerate(layers)]
    depth_csv = write_csv(out_dir / "grad_norm_vs_depth.csv", ["run", "depth_index", "layer", "granularity", "mean_grad_norm"], depth_rows)
    series_csv = write_csv(
        out_dir / "embed_grad_norm_vs_step.csv",
        ["step", "stem_grad_norm_none", "stem_grad_norm_dpn"],
        ([i, a["stem"], b["stem"]] for i, (a, b) in enumerate(zip(series["none"], series["dpn"]))),
    )
    ratio = window_means["none"]["stem"] / window_means["dpn"]["stem"]
    log.info("stem gradient norm ratio none/dpn over final %d steps: %.4f", total - start, ratio)
    summary_csv = write_csv(
        out_dir / "grad_norm_summary.csv",
        ["metric", "value"],
        [["window_start_step", start], ["window_steps", total - start], ["stem_ratio_none_over_dpn", ratio]],
    )
    return GradNormResult(depth_csv, series_csv, summary_csv, ratio)


# ---------------------------------------------------------------------------
# scale export


def pgm_text(image: np.ndarray) -> str:
    """Plain (P2) PGM, maxval 255, from an integer array [H, W] in 0..255."""
    h, w = image.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in image]
    return "\n".join(lines) + "\n"


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if values.size != w * h or values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise ValueError(f"{path}: pixel data does not match {w}x{h}, maxval {maxval}")
    return values.reshape(h, w)


def to_gray(channel: np.ndarray) -> np.ndarray:
    """Min-max map to 0..255; a constant channel maps to an all-zero image."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi == lo:
        return np.zeros(channel.shape, dtype=np.int64)
    return np.rint((channel.astype(np.float64) - lo) / (hi - lo) * 255).astype(np.int64)


def scales_from_params(cfg: ModelConfig, params: ParamTree) -> np.ndarray:
    """First stem LN scale as a [P, P, C] array (the inverse of the patch flattening)."""
    if cfg.stem_norm not in ("pre", "dpn") or "stem/ln0/gamma" not in params:
        raise ConfigError(
            f"checkpoint has no pixel-space norm scale (stem_norm={cfg.stem_norm}, "
            f"stem_norm_type={cfg.stem_norm_type}); need stem_norm pre or dpn with a learnable scale"
        )
    gamma = params["stem/ln0/gamma"].data
    return gamma.reshape(cfg.patch_size, cfg.patch_size, cfg.channels)


def scales_csv_rows(scales: np.ndarray):
    P1, P2, C = scales.shape
    for c in range(C):
        for r in range(P1):
            for col in range(P2):
                yield [c, r, col, scales[r, col, c]]


def read_scales_csv(path, dtype=np.float32) -> np.ndarray:
    rows = read_csv(path)
    C = 1 + max(int(r["channel"]) for r in rows)
    H = 1 + max(int(r["row"]) for r in rows)
    W = 1 + max(int(r["col"]) for r in rows)
    out = np.zeros((H, W, C), dtype=dtype)
    for r in rows:
        out[int(r["row"]), int(r["col"]), int(r["channel"])] = dtype(float(r["value"]))
    return out


def export_scales(checkpoint, out_dir) -> list[Path]:
    """One P x P grayscale PGM per channel plus scales.csv with the raw values."""
    out_dir = Path(out_dir)
    cfg, params, _ = load_checkpoint(checkpoint)
    scales = scales_from_params(cfg, params)
    written = []
    for c in range(scales.shape[2]):
        path = out_dir / f"scale_channel{c}.pgm"
        atomic_write(path, pgm_text(to_gray(scales[:, :, c])))
        written.append(path)
    written.append(write_csv(out_dir / "scales.csv", ["channel", "row", "col", "value"], scales_csv_rows(scales)))
    return written


# ---------------------------------------------------------------------------
# gradient check


MICRO_MODEL = ModelConfig(
    image_size=(4, 4), channels=1, patch_size=2, hidden=16, depth=2, heads=2, mlp_dim=32, num_classes=3
)


def grad_check_variants(base: ModelConfig = MICRO_MODEL) -> list[tuple[str, ModelConfig]]:
    """Every stem x placement x block extra, plus DPN with each norm variant."""
    out = []
    for stem in STEM_NORMS:
        for sa, mlp in placement_grid():
            for extra in BLOCK_EXTRAS:
                cfg = base.replace(stem_norm=stem, block_sa_ln=sa, block_mlp_ln=mlp, block_extra=extra, stem_norm_type="layernorm")
                out.append((f"{stem}/{sa}/{mlp}/{extra}", cfg))
    for kind in ("rmsnorm", "affine_only", "normalize_only"):
        out.append((f"dpn-{kind}/pre/pre/none", base.replace(stem_norm="dpn", stem_norm_type=kind)))
    return out


@dataclass
class GradCheckRow:
    variant: str
    path: str
    size: int
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


def check_model_gradients(
    cfg: ModelConfig,
    seed: int = 0,
    probes: int = 2,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-4,
    batch: int = 2,
    variant: str = "",
) -> list[GradCheckRow]:
    """Directional central differences per parameter tensor (double precision).

    For each parameter path and each of ``probes`` random unit directions v,
    compares <grad, v> with (L(p + h v) - L(p - h v)) / 2h.  One row per path,
    holding the worst probe.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    params = init_params(cfg, seed, dtype=np.float64, loss="sigmoid_xent")
    # perturb scales/shifts away from (1, 0) so norm gradients are generic
    for path, t in params.items():
        if path.endswith(("/gamma", "/beta", "embed/cls")):
            params[path] = T.Tensor(t.data + 0.1 * rng.standard_normal(t.shape), requires_grad=True)
    h, w = cfg.image_size
    images = rng.uniform(-1, 1, (batch, h, w, cfg.channels))
    targets = np.eye(cfg.num_classes)[rng.integers(0, cfg.num_classes, batch)]
    loss_fn = LOSS_FNS["sigmoid_xent"]
    names = list(params)

    def loss(tree):
        return loss_fn(vit_forward(images, cfg, tree), targets)

    grads = T.backward(loss(params), [params[n] for n in names])
    rows = []
    with T.no_grad():
        for name, g in zip(names, grads):
            worst = None
            for _ in range(probes):
                v = rng.standard_normal(g.shape)
                v /= np.linalg.norm(v)
                base = params[name].data
                tree = dict(params)
                tree[name] = T.Tensor(base + step * v)
                up = loss(tree).item()
                tree[name] = T.Tensor(base - step * v)
                down = loss(tree).item()
                numeric = (up - down) / (2 * step)
                analytic = float(np.sum(g * v))
                err = float(T.relative_error(np.array(analytic), np.array(numeric), floor))
                if worst is None or err > worst[2]:
                    worst = (analytic, numeric, err)
            rows.append(GradCheckRow(variant, name, g.size, worst[0], worst[1], worst[2], worst[2] < tolerance))
    return rows


def grad_check(base: ModelConfig = MICRO_MODEL, out_dir=None, seed: int = 0, tolerance: float = 1e-4) -> tuple[bool, list[GradCheckRow]]:
    rows: list[GradCheckRow] = []
    for name, cfg in grad_check_variants(base):
        rows += check_model_gradients(cfg, seed=seed, tolerance=tolerance, variant=name)
    if out_dir is not None:
        header = [f.name for f in dataclasses.fields(GradCheckRow)]
        write_csv(Path(out_dir) / "grad_check.csv", header, ([getattr(r, k) for k in header] for r in rows))
    return all(r.passed for r in rows), rows


def eval_checkpoint(checkpoint, spec: RunSpec, out_dir=None) -> float:
    cfg, params, _ = load_checkpoint(checkpoint)
    _, ev = load_datasets(spec.replace(model=cfg))
    acc = evaluate(params, cfg, ev)
    if out_dir is not None:
        write_csv(Path(out_dir) / "eval.csv", ["checkpoint", "dataset", "examples", "accuracy"], [[Path(checkpoint).name, spec.dataset, len(ev), acc]])
    return acc


def dump_spec(spec: RunSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False)
