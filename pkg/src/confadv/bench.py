"""Transferability experiments: attack a source network, replay on a target.

An experiment picks manipulated test patches that the source network (SN)
detects, attacks them for every confidence margin on the grid, and checks
how many SN-successful adversarial patches the target network (TN) also
calls pristine.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as A
from . import dataforge as DF
from . import detectors as D

log = logging.getLogger(__name__)

TASKS = {
    "median5": {"kind": "median", "k": 5},
    "resize08": {"kind": "resize", "factor": 0.8},
}

CSV_HEADER = ("c", "asr_sn", "asr_tn", "psnr_mean", "n_success", "mean_iters")

MANIPULATED = 1


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    source_model: str
    target_model: str
    attack: A.AttackConfig
    confidence_grid: tuple[float, ...]
    dataset: str | dict
    sample_count: int = 500
    seed: int = 0
    output_dir: str = "results"
    name: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        grid = tuple(float(c) for c in self.confidence_grid)
        if not grid:
            raise ValueError("confidence_grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"confidence_grid must be strictly ascending, got {list(grid)}")
        if grid[0] < 0:
            raise ValueError("confidence values must be >= 0")
        object.__setattr__(self, "confidence_grid", grid)
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


def load_experiments(path) -> list[ExperimentConfig]:
    """Parse experiment.json; an ``attack`` list yields one config per entry.

    Relative paths are resolved against the file's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BenchError(f"experiment file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise BenchError(f"{path}: invalid JSON: {exc}") from None
    base = path.parent

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    required = ("task", "source_model", "target_model", "attack", "confidence_grid", "dataset")
    missing = [k for k in required if k not in raw]
    if missing:
        raise BenchError(f"{path}: missing keys {missing}")
    attacks = raw["attack"] if isinstance(raw["attack"], list) else [raw["attack"]]
    dataset = raw["dataset"]
    if isinstance(dataset, str):
        dataset = resolve(dataset)
    out = []
    try:
        for a in attacks:
            out.append(ExperimentConfig(
                task=raw["task"],
                source_model=resolve(raw["source_model"]),
                target_model=resolve(raw["target_model"]),
                attack=A.AttackConfig.from_dict(a),
                confidence_grid=tuple(raw["confidence_grid"]),
                dataset=dataset,
                sample_count=int(raw.get("sample_count", 500)),
                seed=int(raw.get("seed", 0)),
                output_dir=resolve(raw.get("output_dir", "results")),
                name=str(raw.get("name", path.stem)),
            ))
    except (TypeError, ValueError) as exc:
        raise BenchError(f"{path}: {exc}") from None
    return out


@dataclass
class ReportRow:
    c: float
    asr_sn: float
    asr_tn: float
    psnr_mean: float
    n_success: int
    mean_iters: float
    n_attempted: int = 0
    n_inf_psnr: int = 0
    asr_tn_all: float = math.nan
    n_reverified: int = 0
    histogram: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Data and models
# ---------------------------------------------------------------------------

def load_test_split(dataset) -> tuple[DF.Split, DF.Manifest]:
    """Test split from a dataset directory, a manifest file, or a manifest dict."""
    if isinstance(dataset, dict):
        ds = DF.generate(DF.Manifest.from_dict(dataset))
        return ds.splits["test"], ds.manifest
    p = Path(dataset)
    if p.is_dir():
        ds = DF.read_dataset(p)
    elif p.is_file():
        ds = DF.generate(DF.Manifest.from_dict(json.loads(p.read_text(encoding="utf-8"))))
    else:
        raise BenchError(f"dataset not found: {p}")
    return ds.splits["test"], ds.manifest


def _load(path, role):
    try:
        return D.load_model(path)
    except FileNotFoundError:
        raise BenchError(f"{role} model not found: {path}") from None
    except D.ModelFormatError as exc:
        raise BenchError(f"{role} model {path}: {exc}") from None


def select_patches(model, split: DF.Split, count: int, seed: int) -> np.ndarray:
    """Indices of up to ``count`` manipulated patches the model detects.

    Candidates are visited in a seeded order; missed ones are skipped and
    replaced by the next candidate.
    """
    pool = np.flatnonzero(split.labels == MANIPULATED)
    pool = pool[np.random.default_rng(np.random.SeedSequence([seed, 31337])).permutation(len(pool))]
    if not len(pool):
        return pool
    pred = model.predict(split.patches[pool])
    keep = pool[pred == MANIPULATED]
    return keep[:count]


def logit_percentiles(model, patches, qs=(5, 25, 50, 75, 95, 99)) -> dict:
    """Percentiles of the manipulated-class logit lead z_1 - z_0; guides c grids."""
    z = model.logits(patches).astype(np.float64)
    lead = z[:, 1] - z[:, 0]
    return {f"p{q:g}": float(np.percentile(lead, q)) for q in qs} if len(lead) else {}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def iteration_histogram(results, max_steps: int) -> dict:
    """Percent of attempts per iteration count 0..max_steps, plus a failure bin."""
    if not results:
        raise ValueError("iteration_histogram needs at least one result")
    bins = {str(k): 0 for k in range(max_steps + 1)}
    bins["fail"] = 0
    for r in results:
        if r.success:
            if r.iterations_used > max_steps:
                raise ValueError(f"iterations_used {r.iterations_used} exceeds {max_steps}")
            bins[str(r.iterations_used)] += 1
        else:
            bins["fail"] += 1
    n = len(results)
    return {k: 100.0 * v / n for k, v in bins.items()}


def histogram_median(hist: dict) -> float:
    """Median bin, counting failures as beyond the last iteration bin."""
    keys = [k for k in hist if k != "fail"]
    values = [hist[k] for k in keys] + [hist.get("fail", 0.0)]
    positions = [float(k) for k in keys] + [math.inf]
    acc = 0.0
    for pos, v in zip(positions, values):
        acc += v
        if acc >= 50.0 - 1e-9:
            return pos
    return positions[-1]


def summarise(c: float, results, target_logits, reverified: np.ndarray, max_steps: int) -> ReportRow:
    n = len(results)
    wins = [i for i, r in enumerate(results) if r.success]
    ns = len(wins)
    fooled = int(sum(D.decide(target_logits[i][None])[0] != MANIPULATED for i in wins))
    finite = [results[i].psnr_to_original for i in wins if math.isfinite(results[i].psnr_to_original)]
    if finite:
        psnr = float(np.mean(finite))
    elif ns:
        psnr = math.inf
    else:
        psnr = math.nan
    return ReportRow(
        c=c,
        asr_sn=100.0 * ns / n,
        asr_tn=100.0 * fooled / ns if ns else math.nan,
        psnr_mean=psnr,
        n_success=ns,
        mean_iters=float(np.mean([results[i].iterations_used for i in wins])) if ns else math.nan,
        n_attempted=n,
        n_inf_psnr=ns - len(finite),
        asr_tn_all=100.0 * fooled / n,
        n_reverified=int(reverified.sum()),
        histogram=iteration_histogram(results, max_steps),
    )


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

@dataclass
class ExperimentOutcome:
    config: ExperimentConfig
    rows: list[ReportRow]
    indices: np.ndarray
    results: dict  # c -> list[AttackResult]
    meta: dict


def run_experiment(cfg: ExperimentConfig, parallelism: int = 1) -> ExperimentOutcome:
    sn = _load(cfg.source_model, "source")
    tn = _load(cfg.target_model, "target")
    for role, m in (("source", sn), ("target", tn)):
        task = m.fingerprint.get("task")
        if task and task != cfg.task:
            log.warning("%s model was trained on %s, experiment task is %s", role, task, cfg.task)
    split, manifest = load_test_split(cfg.dataset)
    if manifest.manipulation != TASKS[cfg.task]:
        log.warning("dataset manipulation %s does not match task %s", manifest.manipulation, cfg.task)

    idx = select_patches(sn, split, cfg.sample_count, cfg.seed)
    if not len(idx):
        raise BenchError(f"no manipulated test patch is detected by the source model {cfg.source_model}")
    if len(idx) < cfg.sample_count:
        log.warning("only %d eligible patches (wanted %d)", len(idx), cfg.sample_count)
    x = split.patches[idx]
    labels = np.full(len(idx), MANIPULATED)

    sweep = A.attack_sweep(sn, x, labels, cfg.attack, cfg.confidence_grid, parallelism)
    rows = []
    for c in cfg.confidence_grid:
        results = sweep[c]
        wins = [i for i, r in enumerate(results) if r.success]
        reverified = np.zeros(len(results), dtype=bool)
        target_logits = np.zeros((len(results), 2))
        if wins:
            adv = np.stack([results[i].adversarial for i in wins])
            reverified[wins] = A.verify_margins(sn, adv, labels[wins]) > c
            target_logits[wins] = A.per_patch_logits(tn, adv)
            if not reverified[wins].all():
                log.error("c=%g: %d successes failed re-verification", c, int((~reverified[wins]).sum()))
        rows.append(summarise(c, results, target_logits, reverified, cfg.attack.iteration_cap))
    meta = {
        "source_hash": sn.weight_hash(),
        "target_hash": tn.weight_hash(),
        "source_family": sn.spec.family,
        "target_family": tn.spec.family,
        "eligible": int(len(idx)),
        "manifest": manifest.to_dict(),
    }
    return ExperimentOutcome(cfg, rows, idx, sweep, meta)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _num(v: float, digits: int = 1) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.{digits}f}"


def csv_text(rows) -> str:
    if not rows:
        raise ValueError("no rows to emit")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([f"{r.c:g}", _num(r.asr_sn), _num(r.asr_tn), _num(r.psnr_mean),
                    str(int(r.n_success)), _num(r.mean_iters)])
    return buf.getvalue()


def emit_csv(rows, path) -> None:
    text = csv_text(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def parse_csv(path) -> list[ReportRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [ReportRow(float(c), float(a), float(t), float(p), int(n), float(m))
                for c, a, t, p, n, m in reader]


def markdown_table(rows, title: str = "") -> str:
    if not rows:
        raise ValueError("no rows to emit")
    lines = [f"### {title}", ""] if title else []
    lines.append("| c | ASR_SN | ASR_TN | PSNR (dB) | n_success | mean iters | ASR_TN (all) |")
    lines.append("|---:|---:|---:|---:|---:|---:|---:|")
    for r in rows:
        lines.append(f"| {r.c:g} | {_num(r.asr_sn)} | {_num(r.asr_tn)} | {_num(r.psnr_mean)} | "
                     f"{int(r.n_success)} | {_num(r.mean_iters)} | {_num(r.asr_tn_all)} |")
    return "\n".join(lines) + "\n"


def emit_markdown(rows, path, title: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(markdown_table(rows, title))


def _title(cfg: ExperimentConfig, meta: dict) -> str:
    return (f"{cfg.name}: {cfg.attack.algorithm}, {cfg.task}, "
            f"{meta['source_family']} -> {meta['target_family']}")


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_outputs(outcome: ExperimentOutcome) -> dict:
    """Write <ALG>.csv, <ALG>.md and <ALG>.json under the output directory."""
    cfg = outcome.config
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BenchError(f"cannot create output directory {out}: {exc}") from None
    stem = cfg.attack.algorithm
    paths = {"csv": out / f"{stem}.csv", "md": out / f"{stem}.md", "json": out / f"{stem}.json"}
    title = _title(cfg, outcome.meta)
    emit_csv(outcome.rows, paths["csv"])
    emit_markdown(outcome.rows, paths["md"], title)
    record = {
        "name": cfg.name,
        "title": title,
        "task": cfg.task,
        "attack": cfg.attack.to_dict(),
        "confidence_grid": list(cfg.confidence_grid),
        "sample_count": cfg.sample_count,
        "seed": cfg.seed,
        "meta": outcome.meta,
        "rows": [asdict(r) for r in outcome.rows],
    }
    paths["json"].write_text(json.dumps(_jsonable(record), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def _row_from_json(d: dict) -> ReportRow:
    d = dict(d)
    for k in ("c", "asr_sn", "asr_tn", "psnr_mean", "mean_iters", "asr_tn_all"):
        d[k] = float(d[k])
    return ReportRow(**d)


def render_report(results_dir) -> str:
    """Combined markdown for every experiment record found under ``results_dir``."""
    root = Path(results_dir)
    if not root.is_dir():
        raise BenchError(f"results directory not found: {root}")
    records = []
    for p in sorted(root.rglob("*.json")):
        try:
            rec = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            continue
        if isinstance(rec, dict) and "rows" in rec and "title" in rec:
            records.append(rec)
    if not records:
        raise BenchError(f"no experiment results under {root}")
    parts = ["# Transferability report", ""]
    for rec in records:
        parts.append(markdown_table([_row_from_json(r) for r in rec["rows"]], rec["title"]))
    return "\n".join(parts)
