"""Command-line surface: register pairs, build GT, evaluate, score, self-test,
and run the toy training loop."""

from __future__ import annotations

import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np

from . import fileio, losses, pipeline, scorer, selftest, synth, warpfield
from .config import TOY
from .errors import ArchiveError, MetricError, RegistrationError, RidgeAlignError
from .fine_refine import CorrespondenceSet
from .weights import WeightArchive, init_weights

EXIT_REGISTRATION = 2
EXIT_ARCHIVE = 3
EXIT_IO = 4
EXIT_METRIC = 5


def _setup_logging():
    level = os.environ.get("RIDGEALIGN_LOG", "warn").upper()
    level = {"WARN": "WARNING"}.get(level, level)
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")


def _load_weights(path, theta, window, lam):
    try:
        wa = WeightArchive.load(path)
    except FileNotFoundError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_IO)
    except ArchiveError as e:
        click.echo(f"archive error: {e}", err=True)
        sys.exit(EXIT_ARCHIVE)
    cfg = wa.cfg.with_overrides(theta=theta, window=window, tps_lambda=lam)
    return wa, cfg


def _read_image(path) -> np.ndarray:
    try:
        return fileio.read_pgm(path)
    except (OSError, RidgeAlignError) as e:
        click.echo(f"i/o error reading {path}: {e}", err=True)
        sys.exit(EXIT_IO)


def _read_mask(path):
    return _read_image(path) >= 0.5 if path else None


@click.group()
def main():
    """Single-step fingerprint registration toolkit."""
    _setup_logging()


weights_opt = click.option("--weights", required=True, type=click.Path())
theta_opt = click.option("--theta", type=float, default=None)
window_opt = click.option("--window", type=int, default=None)
lambda_opt = click.option("--lambda", "lam", type=float, default=None)
out_opt = click.option("--out", type=click.Path(), default=".")


@main.command()
@click.argument("img_a", type=click.Path())
@click.argument("img_b", type=click.Path())
@weights_opt
@theta_opt
@window_opt
@lambda_opt
@out_opt
@click.option("--mask-a", type=click.Path(), default=None)
@click.option("--mask-b", type=click.Path(), default=None)
def register(img_a, img_b, weights, theta, window, lam, out, mask_a, mask_b):
    """Register IMG_A onto IMG_B and write all artifacts."""
    wa, cfg = _load_weights(weights, theta, window, lam)
    a = _read_image(img_a)
    b = _read_image(img_b)
    try:
        res = pipeline.register_pair(a, b, wa, cfg, _read_mask(mask_a),
                                     _read_mask(mask_b))
    except RegistrationError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_REGISTRATION)
    os.makedirs(out, exist_ok=True)
    res.corr.save_csv(os.path.join(out, "correspondences.csv"))
    warpfield.save_dfl(res.field, os.path.join(out, "field.dfl"))
    fileio.write_pgm(os.path.join(out, "warped.pgm"), res.warped_a)
    fileio.write_png_rgb(os.path.join(out, "overlay.png"),
                         pipeline.overlay_image(res.warped_a, b if b.shape ==
                                                res.warped_a.shape else
                                                np.pad(b, ((0, res.warped_a.shape[0] - b.shape[0]),
                                                           (0, res.warped_a.shape[1] - b.shape[1]))),
                                                res.mask))
    click.echo(f"matches: {res.n_matches}")
    click.echo(f"ncc_before: {res.ncc_before:.6f}")
    click.echo(f"ncc_after: {res.ncc_after:.6f}")


@main.command("make-gt")
@click.argument("coarse_field", type=click.Path())
@click.argument("fine_field", type=click.Path())
@click.argument("mask_a", type=click.Path())
@click.argument("mask_b", type=click.Path())
@click.option("--stride", type=int, default=8)
@out_opt
def make_gt(coarse_field, fine_field, mask_a, mask_b, stride, out):
    """Compose two deformation fields and build GT correspondences."""
    try:
        dc = warpfield.load_dfl(coarse_field)
        df = warpfield.load_dfl(fine_field)
    except (OSError, RidgeAlignError) as e:
        click.echo(f"i/o error: {e}", err=True)
        sys.exit(EXIT_IO)
    ma = _read_mask(mask_a)
    mb = _read_mask(mask_b)
    try:
        d = warpfield.compose(dc, df)
        corr = warpfield.build_gt(d, ma, mb, stride)
    except RidgeAlignError as e:
        click.echo(str(e), err=True)
        sys.exit(1)
    os.makedirs(out, exist_ok=True)
    corr.save_csv(os.path.join(out, "correspondences.csv"))
    if len(corr) == 0:
        click.echo("warning: empty mask overlap, wrote empty correspondence set")
    click.echo(f"pairs: {len(corr)}")


def _pair_score(args):
    a_path, b_path, wa, cfg = args
    try:
        a = fileio.read_pgm(a_path)
        b = fileio.read_pgm(b_path)
        res = pipeline.register_pair(a, b, wa, cfg)
        return res.ncc_after, res.ncc_before
    except (OSError, RidgeAlignError):
        return -1.0, -1.0


@main.command("eval")
@click.argument("manifest", type=click.Path())
@weights_opt
@theta_opt
@window_opt
@lambda_opt
@out_opt
@click.option("--threads", type=int, default=1)
def eval_cmd(manifest, weights, theta, window, lam, out, threads):
    """Register every pair in a JSON manifest and emit EER/ZeroFMR/DET.

    Manifest: {"genuine": [[a,b],...], "impostor": [[a,b],...],
    "gallery": {"queries": [...], "entries": [...], "gt": [...]} (optional)}.
    """
    wa, cfg = _load_weights(weights, theta, window, lam)
    try:
        with open(manifest) as f:
            man = json.load(f)
    except (OSError, ValueError) as e:
        click.echo(f"manifest error: {e}", err=True)
        sys.exit(EXIT_IO)
    genuine = man.get("genuine", [])
    impostor = man.get("impostor", [])
    if not genuine or not impostor:
        click.echo("metric error: manifest needs genuine and impostor pairs",
                   err=True)
        sys.exit(EXIT_METRIC)
    base = os.path.dirname(os.path.abspath(manifest))

    def absify(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    tasks = [(absify(a), absify(b), wa, cfg) for a, b in genuine + impostor]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_pair_score, tasks))
    else:
        results = [_pair_score(t) for t in tasks]
    after = [r[0] for r in results]
    before = [r[1] for r in results]
    ng = len(genuine)
    scores = scorer.ScoreSet(genuine=after[:ng], impostor=after[ng:])
    failures = sum(1 for s in after if s == -1.0)
    metrics = {
        "eer": scorer.eer(scores),
        "zerofmr": scorer.zero_fmr(scores),
        "mean_genuine_ncc_before": float(np.mean(before[:ng])),
        "mean_genuine_ncc_after": float(np.mean(after[:ng])),
        "failures": float(failures),
    }
    gal = man.get("gallery")
    if gal:
        qs, entries, gt = gal["queries"], gal["entries"], gal["gt"]
        mat = np.zeros((len(qs), len(entries)))
        for qi, q in enumerate(qs):
            for gi, g in enumerate(entries):
                mat[qi, gi] = _pair_score((absify(q), absify(g), wa, cfg))[0]
        metrics["rank1"] = scorer.rank1(mat, np.asarray(gt, dtype=int))
    os.makedirs(out, exist_ok=True)
    scorer.save_metrics_csv(os.path.join(out, "metrics.csv"), metrics)
    scorer.save_det_csv(os.path.join(out, "det.csv"), scorer.det_curve(scores))
    for k, v in metrics.items():
        click.echo(f"{k}: {v:.6f}")


@main.command()
@click.argument("img_a", type=click.Path())
@click.argument("img_b", type=click.Path())
@click.option("--mask", type=click.Path(), default=None)
def score(img_a, img_b, mask):
    """Masked NCC between two (already registered) images."""
    a = _read_image(img_a)
    b = _read_image(img_b)
    m = _read_mask(mask)
    if m is None:
        m = pipeline.auto_segment(a) & pipeline.auto_segment(b)
    try:
        click.echo(f"ncc: {scorer.ncc(a, b, m):.6f}")
    except MetricError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_METRIC)


@main.command("selftest")
def selftest_cmd():
    """Run the built-in invariant/oracle suite."""
    ok = selftest.run_selftest(click.echo)
    sys.exit(0 if ok else 1)


@main.command("train-toy")
@out_opt
@click.option("--seed", type=int, default=0)
@click.option("--steps", type=int, default=200)
@click.option("--lr", type=float, default=0.02)
@click.option("--pairs", "n_pairs", type=int, default=3)
@click.option("--size", type=int, default=64)
def train_toy_cmd(out, seed, steps, lr, n_pairs, size):
    """Train toy weights on synthetic warped pairs; writes weights + trace."""
    fixtures = [synth.warped_pair(synth.ridge_image(size, size, seed + i),
                                  seed + 100 + i, max_disp=5.0)
                for i in range(n_pairs)]
    wa = init_weights(TOY, seed=seed)
    try:
        trace, trained = losses.train_toy(fixtures, wa, TOY, steps=steps, lr=lr)
    except RidgeAlignError as e:
        click.echo(str(e), err=True)
        sys.exit(1)
    os.makedirs(out, exist_ok=True)
    trained.save(os.path.join(out, "weights.rwa"))
    losses.save_trace_csv(os.path.join(out, "trace.csv"), trace)
    click.echo(f"initial L_total: {trace[0].l_total:.4f}")
    click.echo(f"final L_total: {trace[-1].l_total:.4f}")


if __name__ == "__main__":
    main()
