"""Command line entry point: ``duplexrelay <subcommand>``.

Exit codes: 0 success, 1 invariant violation, 2 bad configuration or input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError, InvariantViolation, load_config

logger = logging.getLogger("duplexrelay")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (default: $DUPLEXRELAY_CONFIG)")
    p.add_argument("--profile", help="backend profile name")
    p.add_argument("--system", choices=harness.SYSTEMS)
    p.add_argument("--threshold", type=float)
    p.add_argument("--prefix-len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scripts", help="directory of .script files")
    p.add_argument("--n-templates", type=int)
    p.add_argument("--weights")
    p.add_argument("--labels", help="oracle label file")
    p.add_argument("--prefixes", help="scripted prefix file")
    p.add_argument("--quality-labels")


def _config(args):
    keys = ("profile", "system", "threshold", "prefix_len", "seed", "scripts", "n_templates", "weights", "labels",
            "prefixes", "quality_labels")
    overrides = {k: getattr(args, k, None) for k in keys}
    return load_config(args.config, **overrides)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    cfg = _config(args)
    report = harness.run_session(cfg)
    _emit(report.dumps(), args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows, _ = harness.run_sweep(cfg, _floats(args.thresholds), _ints(args.prefix_lens))
    _emit(harness.sweep_csv(rows), args.out)
    return 0


def cmd_gen_corpus(args) -> int:
    if args.from_manifest:
        manifest = harness.regenerate_corpus(args.from_manifest, args.out_dir)
    else:
        cfg = _config(args)
        injection = dict(cfg.injection)
        for key in ("interruption_rate", "pause_insertion_rate", "backchannel_rate"):
            value = getattr(args, key)
            if value is not None:
                injection[key] = value
        manifest = harness.generate_corpus(cfg.replace(injection=injection), args.out_dir)
    failed = [e for e in manifest["entries"] if "error" in e]
    print(f"wrote {len(manifest['entries']) - len(failed)} scripts to {args.out_dir}")
    for e in failed:
        print(f"failed: {e['script_id']}: {e['error']}", file=sys.stderr)
    return 2 if failed else 0


def _dataset(cfg, k: int, scripts=None):
    from .verifier import build_kfold_dataset

    scripts = scripts if scripts is not None else harness.load_scripts(cfg)
    return build_kfold_dataset(
        scripts, k, lambda ids, fold: harness.draft_source(cfg, trained_on=ids), harness.label_oracle(cfg),
        prefix_len=cfg.prefix_len, seed=cfg.seed,
    )


def cmd_train_verifier(args) -> int:
    from dataclasses import asdict

    from .verifier import TrainingConfig, leakage_violations, save_model, train, write_dataset

    cfg = _config(args)
    data = _dataset(cfg, args.k)
    leaks = leakage_violations(data)
    if leaks:
        raise InvariantViolation(leaks[0])
    if args.dataset_out:
        write_dataset(data, args.dataset_out)
    model, report = train(data, TrainingConfig(epochs=args.epochs, seed=cfg.seed, max_len=cfg.max_len))
    save_model(model, args.out)
    _emit(json.dumps(asdict(report), indent=2, sort_keys=True) + "\n", args.report)
    return 0


def cmd_eval_verifier(args) -> int:
    from .verifier import PrefixVerifier, load_model, operating_points, ranking_metrics, read_dataset

    cfg = _config(args)
    data = read_dataset(args.dataset) if args.dataset else _dataset(cfg, args.k)
    est = PrefixVerifier.from_model(load_model(args.weights or cfg.weights))
    conf = est.confidence(data)
    labels = [ex.label for ex in data]
    auroc, ap = ranking_metrics(conf, labels)
    doc = dict(n=len(data), auroc=auroc, average_precision_bad=ap,
               operating_points=operating_points(conf, labels, _floats(args.thresholds)))
    _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def _read_events(path):
    from .timeline import ControlToken, loads

    text = Path(path).read_text(encoding="utf-8")
    if "| ref |" in text or "| user |" in text or "| agent |" in text:
        return list(loads(text).reference_actions)
    out = []
    for raw in text.splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            tick, token = (p.strip() for p in line.split("|"))
            out.append((int(tick), ControlToken.parse(token)))
    return out


def cmd_score_events(args) -> int:
    from .metrics import score_events

    report = score_events(_read_events(args.predicted), _read_events(args.reference), args.tolerance)
    _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_plot(args) -> int:
    from . import plots
    from .metrics import SessionReport

    written = []
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    if args.reports:
        reports = {}
        for path in args.reports:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            reports[Path(path).stem] = SessionReport(doc["schema_version"], doc["outputs"], doc["decisions"])
        written += plots.plot_latency(reports, Path(args.out_dir) / "latency")
    if args.sweep:
        cfg = _config(args)
        rows, _ = harness.run_sweep(cfg, _floats(args.thresholds), _ints(args.prefix_lens))
        written += plots.plot_sweep(rows, Path(args.out_dir) / "sweep")
    if not written:
        raise ConfigError("nothing to plot: pass --reports and/or --sweep")
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duplexrelay", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="replay scripts end to end and write a session report")
    _config_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="threshold x prefix-length operating points")
    _config_args(p)
    p.add_argument("--thresholds", default="0.25,0.5,0.75")
    p.add_argument("--prefix-lens", default="5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-corpus", help="write injected scripts and a manifest")
    _config_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--interruption-rate", type=float)
    p.add_argument("--pause-insertion-rate", type=float)
    p.add_argument("--backchannel-rate", type=float)
    p.add_argument("--from-manifest")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-verifier", help="build out-of-fold data and fit the verifier")
    _config_args(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out", required=True, help="weights file (.npz)")
    p.add_argument("--report")
    p.add_argument("--dataset-out")
    p.set_defaults(func=cmd_train_verifier)

    p = sub.add_parser("eval-verifier", help="ranking metrics and operating points")
    _config_args(p)
    p.add_argument("--dataset")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--thresholds", default="0.25,0.5,0.75")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_verifier)

    p = sub.add_parser("score-events", help="precision / recall / F1 with a tick tolerance")
    p.add_argument("--predicted", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--tolerance", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score_events)

    p = sub.add_parser("plot", help="latency CDFs and sweep curves as PNG + CSV")
    _config_args(p)
    p.add_argument("--reports", nargs="*")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--thresholds", default="0.25,0.5,0.75")
    p.add_argument("--prefix-lens", default="5")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
