"""``bccrn`` command line: synth, train, enhance, eval, gradcheck, plot.

Every run that writes artifacts also writes ``config.yaml``, the fully
resolved configuration (including the seed), into its output directory.
The default output directory comes from ``$BCCRN_OUT`` (else ``./bccrn-out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as C

log = logging.getLogger("bccrn")

OUT_ENV = "BCCRN_OUT"


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"time": round(record.created, 3), "level": record.levelname,
                           "logger": record.name, "message": record.getMessage()})


def _setup_logging(as_json: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration value (repeatable), e.g. loss.beta=5")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    if out:
        p.add_argument("--out", type=Path, default=None,
                       help=f"output directory (default ${OUT_ENV} or ./bccrn-out)")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads (default: all cores)")
    p.add_argument("--json", action="store_true", help="machine-readable JSON log lines on stderr")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bccrn", description="Binaural speech enhancement toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="synthesise a binaural train/valid/test dataset")
    _common(p)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    _common(p)
    p.add_argument("--data", type=Path, help="manifest.json (default <out>/data/manifest.json)")
    p.add_argument("--init", type=Path, help="checkpoint to start from")

    p = sub.add_parser("enhance", help="enhance one stereo WAV file")
    _common(p, out=False)
    p.add_argument("--model", type=Path, required=True, help="model checkpoint")
    p.add_argument("--in", dest="input", type=Path, required=True, help="noisy stereo WAV")
    p.add_argument("--out", type=Path, required=True, help="enhanced stereo WAV to write")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--model", required=True, help="model checkpoint, or 'identity' for unprocessed input")
    p.add_argument("--data", type=Path, help="manifest.json (default <out>/data/manifest.json)")
    p.add_argument("--split", default="test")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p, out=False)
    p.add_argument("--component", default="all", help="component name or 'all'")

    p = sub.add_parser("plot", help="overlay evaluation reports as SVG plots")
    _common(p)
    p.add_argument("--report", action="append", required=True, metavar="LABEL=PATH",
                   help="report.json (or its directory) with a legend label; repeatable")
    return parser


def _resolve(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return C.load_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, "bccrn-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(tree: dict, out: Path) -> None:
    (out / "config.yaml").write_text(C.dump_config(tree))


# -- commands ------------------------------------------------------------------

def cmd_synth(args, tree) -> int:
    from .data import HrirSet, build_dataset, load_hrir_set, synthetic_corpus

    out = _out_dir(args)
    _echo_config(tree, out)
    d = tree["data"]
    fs = tree["stft"]["sample_rate"]
    speech = d["speech_dir"] or synthetic_corpus(d["utterances"], d["duration"], fs, tree["seed"])
    hrirs = load_hrir_set(d["hrir_dir"], fs) if d["hrir_dir"] else HrirSet.synthetic(5.0, fs)
    ranges = {name: d["snr_test"] if name == "test" else d["snr_train"] for name in d["splits"]}
    manifest = build_dataset(speech, d["noise_types"], hrirs, d["splits"], out / "data",
                             snr_range=ranges, seed=tree["seed"], sample_rate=fs)
    print(f"wrote {len(manifest.entries)} entries to {out / 'data' / 'manifest.json'}")
    return 0


def cmd_train(args, tree) -> int:
    from .checkpoint import ModelCheckpoint
    from .data import DatasetManifest
    from .engine import train

    out = _out_dir(args)
    _echo_config(tree, out)
    manifest = DatasetManifest.load(args.data or out / "data" / "manifest.json")
    if args.init:
        ckpt = ModelCheckpoint.load(args.init)
    else:
        ckpt = ModelCheckpoint.create(C.model_config(tree), seed=tree["seed"])
    ckpt.meta["seed"] = tree["seed"]
    t0 = time.perf_counter()
    trained, records = train(ckpt, manifest, C.train_config(tree), out / "train_log.jsonl", out,
                             C.stft_config(tree))
    trained.meta["config"] = tree
    trained.save(out / "model.ckpt")
    best = trained.meta["best_validation"]
    print(f"trained {len(records)} epochs in {time.perf_counter() - t0:.1f} s; best validation {best:.4f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_enhance(args, tree) -> int:
    from .checkpoint import ModelCheckpoint
    from .dsp import BinauralWaveform, read_wav, write_wav
    from .evaluation import enhance

    cfg = C.stft_config(tree)
    ckpt = ModelCheckpoint.load(args.model)
    data, sr = read_wav(args.input)
    if data.shape[0] != 2:
        raise ValueError(f"{args.input} has {data.shape[0]} channels; expected stereo")
    if sr != cfg.sample_rate:
        raise ValueError(f"{args.input} is {sr} Hz; the model runs at {cfg.sample_rate} Hz")
    out = enhance(ckpt, BinauralWaveform.from_array(data, sr), cfg)
    write_wav(args.out, out.stacked(), sr)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args, tree) -> int:
    from .checkpoint import ModelCheckpoint
    from .data import DatasetManifest
    from .evaluation import IdentityEnhancer, emit_report, evaluate_dataset

    out = _out_dir(args)
    _echo_config(tree, out)
    manifest = DatasetManifest.load(args.data or out / "data" / "manifest.json")
    model = IdentityEnhancer() if args.model == "identity" else ModelCheckpoint.load(args.model)
    report = evaluate_dataset(manifest, model, args.split, C.stft_config(tree))
    report.meta.update({"seed": tree["seed"], "model": str(args.model)})
    if report.records:
        emit_report(report, out / "eval", label=Path(str(args.model)).stem)
        o = report.overall()
        print(f"{o['n']} utterances: delta fwSegSNR L/R {o['delta_fwsegsnr_l']:.2f}/{o['delta_fwsegsnr_r']:.2f} dB, "
              f"ILD err {o['ild_error_db']:.3f} dB, IPD err {o['ipd_error_rad']:.3f} rad, "
              f"mean per-ear STOI {o['stoi_mean']:.3f}")
    if report.failures:
        for f in report.failures:
            print(f"FAILED {f['id']}: {f['error']}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args, tree) -> int:
    from .gradcheck import COMPONENTS, grad_check

    names = COMPONENTS if args.component == "all" else [args.component]
    ok = True
    print(f"{'component':28s} {'max rel err':>12s} {'tol':>8s}  status")
    for name in names:
        r = grad_check(name, tree["seed"])
        ok &= r.passed
        print(f"{name:28s} {r.max_rel_error:12.3e} {r.tolerance:8.0e}  {'ok' if r.passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_plot(args, tree) -> int:
    from .evaluation import load_report, plot_reports

    reports = {}
    for item in args.report:
        if "=" not in item:
            raise ValueError(f"--report expects LABEL=PATH, got {item!r}")
        label, path = item.split("=", 1)
        reports[label] = load_report(path)
    out = _out_dir(args)
    for p in plot_reports(reports, out):
        print(f"wrote {p}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "enhance": cmd_enhance, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "plot": cmd_plot}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    _setup_logging(args.json, args.verbose)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        tree = _resolve(args)
    except C.ConfigError as err:
        print(err, file=sys.stderr)
        return 2
    np.random.seed(tree["seed"] % 2**32)
    torch.manual_seed(tree["seed"])
    try:
        return COMMANDS[args.command](args, tree)
    except (OSError, ValueError, RuntimeError) as err:
        log.error("%s failed: %s", args.command, err)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
