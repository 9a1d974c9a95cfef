"""Command line: dataset generation, training, single attacks and benchmarks.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import attacks as A
from . import bench as B
from . import dataforge as DF
from . import detectors as D
from . import imgops

log = logging.getLogger("confadv")

RUNTIME_ERRORS = (
    B.BenchError, DF.DatasetError, D.ModelFormatError, D.TrainingDiverged, imgops.PGMError,
    OSError, ValueError, json.JSONDecodeError,
)

seed_option = click.option("--seed", type=int, default=None, help="Override the master seed.")


def _load_dataset(path: str, seed: int | None) -> DF.Dataset:
    p = Path(path)
    if p.is_dir():
        if seed is not None:
            log.warning("--seed is ignored for a stored dataset")
        return DF.read_dataset(p)
    if not p.is_file():
        raise B.BenchError(f"dataset not found: {p}")
    m = DF.Manifest.from_dict(json.loads(p.read_text(encoding="utf-8")))
    if seed is not None:
        m = replace(m, seed=seed)
    return DF.generate(m)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Confidence-controlled counter-forensic attacks and transferability benchmarks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("gen-data")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: next to the manifest, named after it).")
@seed_option
def gen_data(manifest, out, seed):
    """Generate a patch dataset from MANIFEST (JSON)."""
    p = Path(manifest)
    if not p.is_file():
        raise B.BenchError(f"manifest not found: {p}")
    m = DF.Manifest.from_dict(json.loads(p.read_text(encoding="utf-8")))
    if seed is not None:
        m = replace(m, seed=seed)
    root = Path(out) if out else p.with_suffix("")
    ds = DF.generate(m)
    DF.write_dataset(ds, root)
    counts = {s: len(sp) for s, sp in ds.splits.items()}
    click.echo(f"wrote {root} {json.dumps(counts)} sha256={DF.dataset_digest(root)}")


@cli.command()
@click.argument("spec")
@click.argument("dataset", type=click.Path())
@click.argument("out_model", type=click.Path(dir_okay=False))
@click.option("--epochs", type=int, default=None, help="Training epochs (family default if omitted).")
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@seed_option
def train(spec, dataset, out_model, epochs, lr, batch_size, seed):
    """Train a detector.

    SPEC is a family name (BS_like, BCplus_like, VGG_like) or a JSON file with
    an architecture description. DATASET is a dataset directory or a manifest.
    """
    if spec in D.FAMILIES:
        arch = D.ArchitectureSpec.default(spec)
    else:
        sp = Path(spec)
        if not sp.is_file():
            raise click.BadParameter(f"{spec!r} is neither a family {D.FAMILIES} nor a file", param_hint="SPEC")
        arch = D.ArchitectureSpec.from_dict(json.loads(sp.read_text(encoding="utf-8")))
    ds = _load_dataset(dataset, None)
    seed = 0 if seed is None else seed
    kw = {"seed": seed, "lr": lr, "batch_size": batch_size}
    if epochs is not None:
        kw["epochs"] = epochs
    cfg = D.TrainConfig.for_family(arch.family, **kw)
    tr, va, te = ds.splits["train"], ds.splits["val"], ds.splits["test"]
    model, _ = D.train(D.build_model(arch, seed), tr.patches, tr.labels, va.patches, va.labels, cfg,
                       manifest_hash=ds.manifest_hash(), task=ds.manifest.manipulation_tag(),
                       progress=lambda m: log.info("epoch %d val %.4f", m.epoch, m.val_accuracy))
    D.save_model(model, out_model)
    metrics = D.evaluate(model, te.patches, te.labels) if len(te) else {}
    click.echo(json.dumps({"model": str(out_model), "test": metrics}))


def _parse_params(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--param")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


@cli.command()
@click.argument("model", type=click.Path(dir_okay=False))
@click.argument("patch", type=click.Path(dir_okay=False))
@click.option("--alg", type=click.Choice(A.ALGORITHMS), default="IFGSM", show_default=True)
@click.option("--c", "c", type=float, default=0.0, show_default=True, help="Confidence margin.")
@click.option("--label", type=click.IntRange(0, 1), default=1, show_default=True, help="Source label.")
@click.option("--param", "params", multiple=True, help="Attack parameter override, key=value.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the adversarial patch (rounded to 8 bits) as PGM.")
@seed_option
def attack(model, patch, alg, c, label, params, out, seed):
    """Attack a single PGM PATCH with MODEL and print the result."""
    m = D.load_model(model)
    x = imgops.load_pgm(patch)
    cfg = A.AttackConfig.from_dict({"algorithm": alg, "c": c, **_parse_params(params)})
    r = A.attack_batch(m, x[None], [label], cfg)[0]
    if r.error:
        raise B.BenchError(f"attack failed: {r.error}")
    summary = {k: v for k, v in vars(r).items() if k != "adversarial"}
    summary = {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v)) for k, v in summary.items()}
    if out and r.success:
        q = imgops.quantize8(r.adversarial)
        imgops.save_pgm(q, out)
        summary["saved_margin"] = A.verify_margins(m, q[None], [label])[0]
    click.echo(json.dumps(summary))


@cli.command("bench")
@click.argument("experiment", type=click.Path(dir_okay=False))
@click.option("--parallelism", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker processes for the attacks.")
@click.option("--percentiles", is_flag=True, help="Print source-network logit percentiles and exit.")
@seed_option
def bench_cmd(experiment, parallelism, percentiles, seed):
    """Run the experiment(s) described by EXPERIMENT (JSON)."""
    configs = B.load_experiments(experiment)
    if seed is not None:
        configs = [replace(c, seed=seed) for c in configs]
    if percentiles:
        cfg = configs[0]
        split, _ = B.load_test_split(cfg.dataset)
        sn = D.load_model(cfg.source_model)
        pct = B.logit_percentiles(sn, split.patches[split.labels == B.MANIPULATED])
        click.echo(json.dumps(pct))
        return
    for cfg in configs:
        outcome = B.run_experiment(cfg, parallelism=parallelism)
        paths = B.write_outputs(outcome)
        bad = [r.c for r in outcome.rows if r.n_reverified != r.n_success]
        if bad:
            raise B.BenchError(f"{cfg.attack.algorithm}: successes failed re-verification at c={bad}")
        click.echo(f"{cfg.attack.algorithm}: {paths['csv']}")
        click.echo(B.markdown_table(outcome.rows))


@cli.command()
@click.argument("results_dir", type=click.Path())
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Markdown file (default: RESULTS_DIR/report.md).")
@seed_option
def report(results_dir, out, seed):
    """Render every experiment record under RESULTS_DIR as markdown."""
    text = B.render_report(results_dir)
    path = Path(out) if out else Path(results_dir) / "report.md"
    path.write_text(text, encoding="utf-8")
    click.echo(text)


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="confadv", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except RUNTIME_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
