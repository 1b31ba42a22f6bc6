"""LEDA CLI - LLM-guided autoencoder, denoiser training, evaluation and token reports."""

import argparse
import sys
from datetime import datetime
from pathlib import Path

import torch

from autoencoder import load_autoencoder, train_autoencoder
from codebook import LlmCodebook, load_codebook, synthetic_codebook, write_codebook
from config import RunConfig, load_config
from ctdata import CtImage, invert_window
from downloader import default_cache_dir, fetch_artifact
from explain import load_pyramid, render_report, tokens_for_image, write_report
from formats.checkpoint import payload_hash
from leda import PassthroughDenoiser, denoise, load_denoiser, train_denoiser
from loader import MANIFEST, file_hash, generate_dataset, read_split, to_tensor
from metrics import evaluate_pairs, read_metrics_csv, render_table, write_metrics_csv
from plotting import plot_history, plot_metrics
from scorer import PrecomputedScorer, SyntheticScorer, export_scores
from trainer import resolve_checkpoint
from validator import (
    ConfigError,
    FrozenModelError,
    MissingPrerequisiteError,
    NonFiniteLossError,
    ValidationError,
)

# Most specific first.
ERROR_CATEGORIES = (
    (NonFiniteLossError, "nan", 4),
    (ConfigError, "config", 3),
    (MissingPrerequisiteError, "prerequisite", 2),
    (FrozenModelError, "frozen", 1),
    (ValidationError, "validation", 1),
)


def cache_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.cache) if cfg.paths.cache else default_cache_dir()


def make_run_dir(cfg: RunConfig, command: str, out: Path | None = None) -> Path:
    """New timestamped directory under --out (or paths.runs); never reuses one."""
    base = Path(out) if out is not None else Path(cfg.paths.runs)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    name = f"{stamp}_{command}" + (f"_{cfg.run.name}" if cfg.run.name else "")
    run_dir = base / name
    n = 1
    while run_dir.exists():
        run_dir = base / f"{name}-{n}"
        n += 1
    run_dir.mkdir(parents=True)
    return run_dir


def write_run_config(run_dir: Path, cfg: RunConfig, inputs: dict[str, str] | None = None) -> Path:
    """config.txt: the effective configuration plus input hashes as comments."""
    lines = [f"# input {role} {digest}" for role, digest in (inputs or {}).items()]
    path = Path(run_dir) / "config.txt"
    path.write_text("".join(l + "\n" for l in lines) + cfg.echo(), encoding="utf-8")
    return path


def _find_codebook_dir(checkpoint: Path) -> Path | None:
    for parent in [checkpoint, *checkpoint.parents][:4]:
        candidate = parent / "codebook"
        if (candidate / "vocab.txt").exists() and (candidate / "embeddings.bin").exists():
            return candidate
    return None


def resolve_codebook(cfg: RunConfig, checkpoint: Path | None = None) -> LlmCodebook:
    """Codebook from paths.vocab/paths.embeddings, the autoencoder run, or a synthetic table."""
    if cfg.paths.vocab or cfg.paths.embeddings:
        if not (cfg.paths.vocab and cfg.paths.embeddings):
            raise ConfigError("paths.vocab and paths.embeddings must be given together")
        vocab = fetch_artifact(cfg.paths.vocab, cache_dir(cfg))
        embeddings = fetch_artifact(cfg.paths.embeddings, cache_dir(cfg))
        cb = load_codebook(vocab, embeddings, cfg.codebook.normalize)
        source = f"{vocab.name} + {embeddings.name}"
    elif checkpoint is not None and (found := _find_codebook_dir(resolve_checkpoint(checkpoint))):
        cb = load_codebook(found / "vocab.txt", found / "embeddings.bin")
        source = str(found)
    else:
        cb = synthetic_codebook(cfg.codebook.size, cfg.codebook.dim, cfg.run.seed)
        cb = cb.normalized() if cfg.codebook.normalize else cb
        source = f"synthetic (seed {cfg.run.seed})"
    print(f"  Codebook: {cb.size} tokens x {cb.dim} dims from {source}")
    return cb


def make_scorer(cfg: RunConfig, cb: LlmCodebook):
    if cfg.scorer.kind == "synthetic":
        return SyntheticScorer(cb, cfg.window.training)
    if not cfg.paths.scores:
        raise MissingPrerequisiteError("scorer.kind=precomputed requires paths.scores")
    return PrecomputedScorer(fetch_artifact(cfg.paths.scores, cache_dir(cfg)), cb.size)


def _dataset_hash(root: Path) -> str:
    manifest = Path(root) / MANIFEST
    return file_hash(manifest) if manifest.exists() else "unlisted"


def _require(value: str, what: str) -> Path:
    if not value:
        raise MissingPrerequisiteError(f"{what} is required")
    path = Path(value)
    if not path.exists():
        raise MissingPrerequisiteError(f"{what} not found: {path}")
    return path


def cmd_gen_phantoms(cfg: RunConfig, args) -> Path:
    root = Path(args.out) if args.out else Path(cfg.paths.data)
    print(f"[gen-phantoms] {root} (seed {cfg.run.seed}, {cfg.phantom.size}x{cfg.phantom.size})")
    manifest = generate_dataset(root, cfg.phantom, cfg.lowdose, cfg.run.seed, force=args.force)
    print(f"  Wrote manifest: {manifest}")
    print(f"  Wrote config: {write_run_config(root, cfg)}")
    return root


def cmd_score(cfg: RunConfig, args) -> Path:
    if cfg.scorer.kind != "synthetic":
        raise ConfigError("The score export runs the synthetic scorer (scorer.kind=synthetic)")
    root = Path(cfg.paths.data)
    images = [s.ndct for split in ("train", "test") for s in read_split(root, split)]
    cb = resolve_codebook(cfg)
    out = Path(args.out) if args.out else Path(cfg.paths.scores or root / "scores.scores")
    if out.exists() and not args.force:
        raise ValidationError(f"Score file {out} exists (use --force to overwrite)")
    print(f"[score] {len(images)} images x {cb.size} tokens")
    path = export_scores(images, make_scorer(cfg, cb), out, sparse=cfg.scorer.sparse)
    print(f"  Wrote {path}")
    return path


def cmd_train_ae(cfg: RunConfig, args) -> Path:
    root = Path(cfg.paths.data)
    images = [s.ndct for s in read_split(root, "train")]
    cb = resolve_codebook(cfg)
    scorer = make_scorer(cfg, cb)
    run_dir = make_run_dir(cfg, "train-ae", args.out)
    write_codebook(cb, run_dir / "codebook")
    write_run_config(run_dir, cfg, {"dataset": _dataset_hash(root), "codebook": cb.fingerprint()})
    result = train_autoencoder(
        images, cb, cfg.autoencoder, scorer, run_dir, cfg.window.training,
        config_flat=cfg.flat(), cache_dir=cache_dir(cfg),
    )
    print(f"  History: {result.history_path}")
    return run_dir


def cmd_train_denoiser(cfg: RunConfig, args) -> Path:
    ae_path = _require(cfg.paths.autoencoder, "An autoencoder checkpoint (paths.autoencoder)")
    root = Path(cfg.paths.data)
    samples = read_split(root, "train")
    cb = resolve_codebook(cfg, ae_path)
    ae = load_autoencoder(ae_path, cb)
    run_dir = make_run_dir(cfg, "train-denoiser", args.out)
    ae_hash = payload_hash(resolve_checkpoint(ae_path))
    write_run_config(run_dir, cfg, {"dataset": _dataset_hash(root), "autoencoder": ae_hash})
    result = train_denoiser(
        samples, ae, cfg.denoiser, run_dir, cfg.window.training,
        config_flat=cfg.flat(), ae_fingerprint=ae_hash,
    )
    print(f"  History: {result.history_path}")
    return run_dir


def parse_labeled(items, option: str) -> list[tuple[str, str]]:
    """LABEL=PATH entries; a bare PATH is labeled by its file or directory name."""
    out = []
    for item in items or ():
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        if not label or not path:
            raise ConfigError(f"{option} expects LABEL=PATH, got '{item}'")
        out.append((label, path))
    labels = [label for label, _ in out]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"Duplicate {option} labels: {', '.join(labels)}")
    return out


def restore(ldct: CtImage, reference_id: str, model, cfg: RunConfig) -> CtImage:
    """Denoised HU image; the passthrough returns the LDCT pixels untouched."""
    if isinstance(model, PassthroughDenoiser):
        return CtImage(id=reference_id, pixels=ldct.pixels)
    with torch.no_grad():
        out = denoise(to_tensor(ldct, cfg.window.training).unsqueeze(0), model)
    return invert_window(out[0, 0].numpy(), cfg.window.training, image_id=reference_id)


def cmd_eval(cfg: RunConfig, args) -> Path:
    entries = parse_labeled(args.denoiser, "--denoiser")
    if not entries and cfg.paths.denoiser:
        entries = [("denoiser", cfg.paths.denoiser)]
    if args.passthrough:
        entries = [("passthrough", "")] + entries
    if not entries:
        raise MissingPrerequisiteError("eval requires a denoiser checkpoint (--denoiser or paths.denoiser) or --passthrough")
    models, inputs = [], {}
    for label, path in entries:
        if label == "passthrough" and not path:
            models.append((label, PassthroughDenoiser()))
            continue
        ckpt = _require(path, f"Denoiser checkpoint '{label}'")
        models.append((label, load_denoiser(ckpt)))
        inputs[f"denoiser.{label}"] = payload_hash(resolve_checkpoint(ckpt))

    root = Path(cfg.paths.data)
    samples = read_split(root, "test")
    run_dir = make_run_dir(cfg, "eval", args.out)
    write_run_config(run_dir, cfg, {"dataset": _dataset_hash(root), **inputs})
    metric_window = cfg.window.metric
    print(f"[eval] {len(samples)} test pairs, window [{metric_window.lo:g}, {metric_window.hi:g}] HU")
    rows = []
    for label, model in models:
        pairs = [(restore(s.ldct, s.ndct.id, model, cfg), s.ndct) for s in samples]
        reports = evaluate_pairs(pairs, metric_window)
        csv = write_metrics_csv(reports, run_dir / f"metrics_{label}.csv")
        print(f"  {label}: PSNR {reports['psnr'].summary(2)} -> {csv.name}")
        rows.append((label, reports))
    table = render_table(rows, metric_window)
    (run_dir / "summary.txt").write_text(table, encoding="utf-8")
    plot_metrics(rows, run_dir)
    print(table, end="")
    return run_dir


def cmd_explain(cfg: RunConfig, args) -> Path:
    run_dir = make_run_dir(cfg, "explain", args.out)
    layers = list(cfg.eval.layers) or None
    out_dir = run_dir / "tokens"

    if args.pyramid:
        ae_path = Path(cfg.paths.autoencoder) if cfg.paths.autoencoder else None
        cb = resolve_codebook(cfg, ae_path)
        write_run_config(run_dir, cfg, {"codebook": cb.fingerprint()})
        for path in args.pyramid:
            image_id, pyramid = load_pyramid(_require(path, "Pyramid file"), cb)
            report = render_report(pyramid, cb, layers, image_id, cfg.eval.all_layers)
            write_report(report, cb, out_dir)
            print(f"  {image_id}: {report.coverage()}")
        return run_dir

    ae_path = _require(cfg.paths.autoencoder, "An autoencoder checkpoint (paths.autoencoder)")
    cb = resolve_codebook(cfg, ae_path)
    ae = load_autoencoder(ae_path, cb)
    root = Path(cfg.paths.data)
    images = [s.ndct for s in read_split(root, args.split)]
    if args.ids:
        known = {img.id: img for img in images}
        missing = [i for i in args.ids if i not in known]
        if missing:
            raise ValidationError(f"Unknown image id(s) in {args.split}: {', '.join(missing)}")
        images = [known[i] for i in args.ids]
    write_run_config(run_dir, cfg, {
        "dataset": _dataset_hash(root),
        "autoencoder": payload_hash(resolve_checkpoint(ae_path)),
    })
    print(f"[explain] {len(images)} image(s) from {args.split}")
    for img in images:
        pyramid = tokens_for_image(img, ae, cb, cfg.window.training)
        report = render_report(pyramid, cb, layers, img.id, cfg.eval.all_layers)
        write_report(report, cb, out_dir, pyramid)
        print(f"  {img.id}: {report.coverage()}")
    return run_dir


def cmd_plot(cfg: RunConfig, args) -> Path:
    if not args.history and not args.metrics:
        raise ConfigError("plot needs --history and/or --metrics")
    first = Path(args.history[0] if args.history else parse_labeled(args.metrics, "--metrics")[0][1])
    out = Path(args.out) if args.out else first.parent / "figures"
    print(f"[plot] -> {out}")
    for history in args.history or ():
        plot_history(Path(history), out)
    if args.metrics:
        rows = []
        for label, path in parse_labeled(args.metrics, "--metrics"):
            rows.append((label, read_metrics_csv(_require(path, "Metrics CSV"), cfg.window.metric)))
        print(f"  Wrote {plot_metrics(rows, out)}")
    return out


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "score": cmd_score,
    "train-ae": cmd_train_ae,
    "train-denoiser": cmd_train_denoiser,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Flat section.key=value config file")
    common.add_argument("--seed", type=int, default=None, help="Run seed (overrides run.seed)")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--force", action="store_true", help="Overwrite a non-empty output")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key (repeatable)")

    parser = argparse.ArgumentParser(description="LEDA - LLM-guided low-dose CT denoising")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-phantoms", parents=[common], help="Generate paired synthetic phantoms")
    sub.add_parser("score", parents=[common], help="Export image-token similarity scores")
    sub.add_parser("train-ae", parents=[common], help="Train the LLM-guided autoencoder")

    p = sub.add_parser("train-denoiser", parents=[common], help="Train a denoiser with the LEDA loss")
    p.add_argument("--autoencoder", default=None, help="Autoencoder checkpoint or run directory")
    p.add_argument("--mode", default=None, help="Loss mode (sets denoiser.mode)")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/FSIM on the test split")
    p.add_argument("--denoiser", action="append", default=[], metavar="LABEL=CHECKPOINT",
                   help="Denoiser checkpoint to evaluate (repeatable)")
    p.add_argument("--passthrough", action="store_true", help="Also evaluate the noisy input itself")

    p = sub.add_parser("explain", parents=[common], help="Token reports for test images")
    p.add_argument("--autoencoder", default=None, help="Autoencoder checkpoint or run directory")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--ids", nargs="+", default=None, help="Image ids to report (default: all)")
    p.add_argument("--layers", default=None, help="Comma-separated layers (default: 1,2)")
    p.add_argument("--all-layers", action="store_true", help="Report every pyramid layer")
    p.add_argument("--pyramid", nargs="+", default=None, help="Render stored .pyr files instead")

    p = sub.add_parser("plot", parents=[common], help="SVG loss curves and metric bars")
    p.add_argument("--history", action="append", default=[], help="history.csv (repeatable)")
    p.add_argument("--metrics", action="append", default=[], metavar="LABEL=CSV",
                   help="Metrics CSV from eval (repeatable)")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = list(args.set)
    if getattr(args, "autoencoder", None):
        overrides.append(f"paths.autoencoder={args.autoencoder}")
    if getattr(args, "mode", None):
        overrides.append(f"denoiser.mode={args.mode}")
    if getattr(args, "layers", None):
        overrides.append(f"eval.layers={args.layers}")
    if getattr(args, "all_layers", False):
        overrides.append("eval.all_layers=true")
    return load_config(args.config, overrides, args.seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg, args)
    except tuple(cls for cls, _, _ in ERROR_CATEGORIES) as e:
        for cls, category, code in ERROR_CATEGORIES:
            if isinstance(e, cls):
                print(f"error[{category}]: {e}", file=sys.stderr)
                return code
    print("Done!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
