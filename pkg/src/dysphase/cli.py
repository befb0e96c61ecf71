"""``dysphase`` command line: synth, extract, render, train, crossval,
gradcheck and report."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment, featurizer, spectral
from .config import ConfigError, RunConfig, load_config
from .corpus import AudioFormatError, ManifestError, ingest, load_manifest, synthesize_corpus

log = logging.getLogger("dysphase")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-3

# analysis settings of the illustration panels: 20 ms frames, 50% overlap
RENDER_FRAME, RENDER_HOP = 320, 160
RENDER_PANELS = (
    ("log_magnitude", "log magnitude"),
    ("phase", "phase (rad)"),
    ("mgd", "modified group delay"),
    ("if", "instantaneous frequency (rad)"),
)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = cfg.synth
    if args.speakers is not None:
        spec = replace(spec, n_speakers_per_class=args.speakers)
    if args.seconds is not None:
        spec = replace(spec, utterance_seconds=args.seconds)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out or cfg.paths.corpus_dir)
    manifest = synthesize_corpus(spec, out)
    print(f"wrote {len(manifest.entries)} utterances and {out / 'manifest.csv'}")
    return EXIT_OK


def _manifest(args, cfg: RunConfig):
    return load_manifest(args.manifest or cfg.manifest_path)


def cmd_extract(args, cfg: RunConfig) -> int:
    manifest = _manifest(args, cfg)
    cache = args.cache_dir or cfg.paths.cache_dir
    workers = args.workers or cfg.features.workers
    reps = featurizer.REPRESENTATIONS if "all" in args.rep else tuple(dict.fromkeys(args.rep))
    fcfg = cfg.feature_config()
    for rep in reps:
        t0 = time.perf_counter()
        paths = featurizer.extract_corpus(manifest, rep, cache, fcfg, workers)
        print(f"{rep}: {len(paths)} cache files in {Path(cache) / rep} ({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


def render_maps(clip, mgd_params=None) -> dict[str, spectral.FeatureMap]:
    """The four illustration panels of one clip at 20 ms / 10 ms analysis."""
    params = spectral.StftParams(RENDER_FRAME, RENDER_HOP)
    spec = spectral.stft(clip, params)
    mgd_params = mgd_params or spectral.MgdParams()
    return {
        "log_magnitude": spectral.log_magnitude(spec, mgd_params.magnitude_floor),
        "phase": spectral.phase_spectrum(spec),
        "mgd": spectral.modified_group_delay(clip, params, mgd_params),
        "if": spectral.instantaneous_frequency(spec),
    }


def cmd_render(args, cfg: RunConfig) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    clip = ingest(args.input)
    maps = render_maps(clip, cfg.mgd)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hop_s = RENDER_HOP / clip.sample_rate
    nyq = clip.sample_rate / 2
    for name, title in RENDER_PANELS:
        values = maps[name].values
        np.savetxt(out / f"{name}.csv", values, delimiter=",", fmt="%.10g")
        fig, ax = plt.subplots(figsize=(8, 3.2))
        img = ax.imshow(values, origin="lower", aspect="auto", cmap="viridis",
                        extent=(0, values.shape[1] * hop_s, 0, nyq))
        ax.set_xlabel("time (s)")
        ax.set_ylabel("frequency (Hz)")
        ax.set_title(title)
        fig.colorbar(img, ax=ax)
        fig.tight_layout()
        fig.savefig(out / f"{name}.png", dpi=100)
        plt.close(fig)
        print(f"{name}: {values.shape[0]} x {values.shape[1]} -> {out / name}.png, .csv")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .neuralnet import save

    manifest = _manifest(args, cfg)
    cache = args.cache_dir or cfg.paths.cache_dir
    reps = experiment.parse_config(args.model)
    data = experiment.load_feature_data(manifest, reps, cache)
    plan = experiment.make_folds(manifest, cfg.cv.k, cfg.cv.seed)
    if not 0 <= args.fold < plan.k:
        raise ValueError(f"--fold must lie in [0, {plan.k})")
    fold = plan.folds[args.fold]
    tr, dv, te = (experiment.build_segment_set(data, reps, spk, plan.labels)
                  for spk in (fold.train, fold.dev, fold.test))
    mc = cfg.model
    k, b = tr.inputs[0].shape[1:]

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.4f}  dev {rec.dev_loss:.4f}  lr {rec.lr:.3g}")

    from .neuralnet import build_dual_cnn, build_single_cnn

    if len(reps) == 1:
        ck = experiment.train_model(cfg.train, build_single_cnn(k, b, mc.channels, mc.dropout), tr, dv, progress)
    else:
        singles = []
        for rep in reps:
            s_tr, s_dv, _ = (experiment.build_segment_set(data, (rep,), spk, plan.labels)
                             for spk in (fold.train, fold.dev, fold.test))
            print(f"-- single {rep}")
            singles.append(experiment.train_model(
                cfg.train, build_single_cnn(k, b, mc.channels, mc.dropout), s_tr, s_dv, progress))
        print(f"-- dual {args.model}")
        net = build_dual_cnn(*singles, seed=cfg.train.seed, hidden=mc.hidden)
        ck = experiment.train_model(cfg.train, net, tr, dv, progress)
    scores = experiment.speaker_scores(ck, te)
    labels = [plan.labels[s] for s in scores]
    acc = experiment.accuracy(list(scores.values()), labels)
    line = f"fold {args.fold} test: accuracy {acc:.2f}%"
    if len(set(labels)) == 2:
        line += f", AUC {experiment.auc(list(scores.values()), labels):.2f}"
    print(line)
    out = Path(args.checkpoint or Path(cfg.paths.out_dir) / f"{args.model}_fold{args.fold}.pdnn")
    out.parent.mkdir(parents=True, exist_ok=True)
    save(ck, out)
    print(f"checkpoint -> {out}")
    return EXIT_OK


def cmd_crossval(args, cfg: RunConfig) -> int:
    cv = cfg.cv
    if args.configs:
        cv = replace(cv, configs=list(args.configs))
    if args.workers:
        cv = replace(cv, workers=args.workers)
    manifest = _manifest(args, cfg)
    cache = args.cache_dir or cfg.paths.cache_dir
    report = experiment.run_cross_validation(manifest, cache, cv, cfg.train, cfg.model)
    out = Path(args.out or cfg.paths.out_dir)
    experiment.emit_report(report, out)
    print(experiment.format_summary(report), end="")
    print(f"report -> {out}")
    return EXIT_OK


def run_gradcheck(arch="all", seed=0, max_per_tensor=64, K=16, B=12, batch=4):
    """Max relative error of backprop vs finite differences on toy-sized
    float64 networks. Returns ``{arch: error}``."""
    from .neuralnet import Network, build_dual_cnn, build_single_cnn, finite_difference_check

    rng = np.random.default_rng(seed)
    labels = np.arange(batch) % 2
    out = {}
    if arch in ("single", "all"):
        net = Network(build_single_cnn(K, B), seed=seed, dtype=np.float64)
        x = rng.standard_normal((batch, K, B))
        out["single"] = finite_difference_check(net, x, labels, max_per_tensor=max_per_tensor, seed=seed)
    if arch in ("dual", "all"):
        a = Network(build_single_cnn(K, B), seed=seed + 1, dtype=np.float64)
        b = Network(build_single_cnn(K, B), seed=seed + 2, dtype=np.float64)
        net = build_dual_cnn(a, b, seed=seed, dtype=np.float64)
        xs = [rng.standard_normal((batch, K, B)) for _ in range(2)]
        out["dual"] = finite_difference_check(net, xs, labels, max_per_tensor=max_per_tensor, seed=seed)
    return out


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    errs = run_gradcheck(args.arch, args.seed, None if args.full else args.samples)
    worst = max(errs.values())
    for name, e in errs.items():
        print(f"{name}: max relative error {e:.3e}")
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_report(args, cfg: RunConfig) -> int:
    out = Path(args.dir or cfg.paths.out_dir)
    report = experiment.load_report(out)
    print(experiment.format_summary(report), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dysphase", description="Phase-aware dysarthric speech detection pipeline.")
    p.add_argument("--config", help="TOML run configuration (defaults used when omitted)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("synth", help="generate the synthetic two-class corpus")
    s.add_argument("--out", help="corpus directory (default: paths.corpus_dir)")
    s.add_argument("--speakers", type=int, help="speakers per class")
    s.add_argument("--seconds", type=float, help="utterance length")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    def data_args(sp):
        sp.add_argument("--manifest", help="manifest CSV (default: <paths.corpus_dir>/manifest.csv)")
        sp.add_argument("--cache-dir", help="feature cache directory")

    s = sub.add_parser("extract", help="compute feature segments into the cache")
    s.add_argument("--rep", action="append", required=True, choices=featurizer.REPRESENTATIONS + ("all",),
                   help="representation (repeatable)")
    s.add_argument("--workers", type=int)
    data_args(s)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("render", help="write magnitude, phase, MGD and IF panels of one WAV")
    s.add_argument("--input", required=True, help="WAV file")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", help="train one model on one fold and save its checkpoint")
    s.add_argument("--model", default="mag", help="representation or pair, e.g. if, mag+if")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--checkpoint", help="output checkpoint path")
    data_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", help="full cross-validation and report")
    s.add_argument("--configs", nargs="+", help="configurations, e.g. if mag mag+if")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", help="report directory (default: paths.out_dir)")
    data_args(s)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the toy-sized networks")
    s.add_argument("--arch", choices=("single", "dual", "all"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=64, help="entries checked per parameter tensor")
    s.add_argument("--full", action="store_true", help="check every parameter entry (slow)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="print the summary of an emitted report")
    s.add_argument("--dir", help="report directory (default: paths.out_dir)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (ManifestError, AudioFormatError, featurizer.CacheFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
    except (experiment.FoldPlanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
