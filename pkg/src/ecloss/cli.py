"""``ecloss`` command line: data, templates, training, evaluation, heatmaps.

Every subcommand takes ``--config FILE`` (``key = value`` lines) and
``--<key> VALUE`` overrides for any run-config field; overrides win.  The
resolved config is written as ``config.txt`` in ``out_dir`` once a command succeeds.

Exit codes: 0 success, 2 usage or validation error, 3 runtime error
(divergence, I/O).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import os
import sys
from dataclasses import fields

import numpy as np

from . import experiment as ex
from . import metrics, nn, synthdata, templates, viz
from .errors import DivergenceError, DomainError, ParseError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def sha256_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_bytes(path, data: bytes):
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def _csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("ascii")


def _report(label, path, digest):
    print(f"{label}: {path} sha256={digest}")


# -- config ------------------------------------------------------------------

def resolve_config(args) -> ex.RunConfig:
    cfg = ex.RunConfig()
    if args.config:
        cfg = ex.load_config(args.config, cfg)
    pairs = [(f.name, getattr(args, "cfg_" + f.name)) for f in fields(ex.RunConfig)
             if getattr(args, "cfg_" + f.name) is not None]
    return ex.parse_config(pairs, cfg)


def _prepare_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def write_resolved_config(cfg):
    path = os.path.join(cfg.out_dir, "config.txt")
    _report("config", path, _write_bytes(path, cfg.dumps().encode("ascii")))


def _samples(cfg, dataset_path):
    if dataset_path:
        samples, names = synthdata.load_dataset(dataset_path)
        return samples, names
    return synthdata.generate(cfg.dataset_spec()), tuple(p.name for p in synthdata.DEFAULT_PARTS)


def _prepared(cfg, dataset_path):
    samples, names = _samples(cfg, dataset_path)
    if dataset_path:
        labels = {s.identity for s in samples}
        if max(labels) >= cfg.n_identities:
            raise DomainError(f"dataset has identity {max(labels)} but n_identities={cfg.n_identities}")
    return ex.prepare(cfg, samples, names)


def _load_net(cfg, path):
    spec, params = nn.load_checkpoint(path)
    if spec.describe() != cfg.network_spec().describe():
        raise DomainError("checkpoint network does not match the configured network")
    return spec, params


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg, args):
    out = _prepare_out(cfg)
    spec = cfg.dataset_spec()
    synthdata.validate(spec)
    samples = synthdata.generate(spec)
    path = args.out or os.path.join(out, "dataset.ecds")
    digest = synthdata.save_dataset(path, samples)
    print(f"samples: {len(samples)}")
    _report("dataset", path, digest)
    for n in range(min(args.pgm, len(samples))):
        p = os.path.join(out, f"sample_{n}.pgm")
        viz.write_image(np.clip(samples[n].image[0], 0, 1), p)
        _report("image", p, sha256_file(p))
    return EXIT_OK


def cmd_gen_templates(cfg, args):
    out = _prepare_out(cfg)
    tset = cfg.template_set()
    path = args.out or os.path.join(out, "templates.ect")
    digest = _write_bytes(path, templates.serialize(tset))
    counts = tset.counts()
    print(f"templates: {len(tset)} (one_peak={counts['one_peak']} two_peak={counts['two_peak']} "
          f"negative={counts['negative']}) prior={tset.prior!r}")
    _report("templates", path, digest)
    return EXIT_OK


def cmd_train(cfg, args):
    out = _prepare_out(cfg)
    prep = _prepared(cfg, args.dataset)
    if args.templates:
        tset = templates.load(args.templates)
        if tset.params.shape != prep.spec.target_shape[1:]:
            raise DomainError(f"templates {tset.params.shape} do not match target maps {prep.spec.target_shape[1:]}")
        prep.tset = tset
    print(f"network: {prep.spec.describe()} params={prep.spec.n_params}")
    print(f"train samples: {len(prep.train[0])} eval samples: {len(prep.eval[0])} "
          f"ecloss={cfg.ecloss} beta={cfg.loss_config().beta!r}")
    result = ex.train_model(prep)
    ckpt = os.path.join(out, "final.ecnn")
    nn.save_checkpoint(ckpt, prep.spec, result.params)
    log_path = os.path.join(out, "train_log.csv")
    rows = [(s, repr(c), repr(m), repr(t), repr(b)) for s, c, m, t, b in result.log]
    digest = _write_bytes(log_path, _csv_bytes(nn.LOG_FIELDS, rows))
    print(f"steps: {len(result.log)} train accuracy: {result.train_accuracy:.4f}")
    print(f"held-out MI: {result.eval_mi_initial:.6e} -> {result.eval_mi_final:.6e}")
    _report("checkpoint", ckpt, sha256_file(ckpt))
    _report("log", log_path, digest)
    return EXIT_OK


def cmd_eval(cfg, args):
    out = _prepare_out(cfg)
    prep = _prepared(cfg, args.dataset)
    _, params = _load_net(cfg, args.checkpoint)
    report = ex.evaluate_model(prep, params)
    if args.baseline:
        _, base_params = _load_net(cfg, args.baseline)
        base = ex.evaluate_model(prep, base_params)
        rows = metrics.compare_rows(report, base)
        summary = metrics.format_summary({"ecloss": report, "baseline": base})
    else:
        rows = metrics.report_rows(report)
        summary = metrics.format_summary({"model": report})
    path = args.metrics or os.path.join(out, "metrics.csv")
    digest = _write_bytes(path, _csv_bytes(("metric", "scope", "value"), rows))
    print(summary)
    print(f"empty maps: {report.n_empty} degenerate maps: {report.n_degenerate}")
    _report("metrics", path, digest)
    return EXIT_OK


def _indices(text, name):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated integers") from None


def cmd_visualize(cfg, args):
    out = _prepare_out(cfg)
    samples, _ = _samples(cfg, args.dataset)
    spec, params = _load_net(cfg, args.checkpoint)
    c = spec.target_shape[0]
    sample_idx = _indices(args.samples, "sample-index")
    channel_idx = _indices(args.channels, "channel-index")
    for s in sample_idx:
        if not 0 <= s < len(samples):
            raise DomainError(f"sample index {s} out of range [0, {len(samples)})")
    for ch in channel_idx:
        if not 0 <= ch < c:
            raise DomainError(f"channel index {ch} out of range [0, {c})")
    images = np.stack([samples[s].image for s in sample_idx])
    feats = ex.features_of(spec, params, images)
    height, width = images.shape[2:]
    for n, s in enumerate(sample_idx):
        for ch in channel_idx:
            up = viz.upsample_bilinear(feats[n, ch], height, width)
            pixels = viz.render_overlay(np.clip(images[n, 0], 0, 1), metrics.top10_threshold(up))
            path = os.path.join(out, f"s{s}_c{ch}.ppm")
            viz.write_image(pixels, path)
            _report("image", path, sha256_file(path))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-templates": cmd_gen_templates,
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    opts = common.add_argument_group("run config overrides")
    for f in fields(ex.RunConfig):
        opts.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.type.upper(),
                          help=f"default {f.default!r}")

    parser = _Parser(prog="ecloss", description="Activation-template MI loss experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic ECDS1 dataset")
    p.add_argument("--out", help="dataset path (default OUT_DIR/dataset.ecds)")
    p.add_argument("--pgm", type=int, default=0, help="also write the first N samples as PGM")

    p = sub.add_parser("gen-templates", parents=[common], help="write an .ect template set")
    p.add_argument("--out", help="template path (default OUT_DIR/templates.ect)")

    p = sub.add_parser("train", parents=[common], help="train the reference network")
    p.add_argument("--dataset", help="ECDS1 file (default: regenerate from config)")
    p.add_argument("--templates", help=".ect file (default: build from config)")

    p = sub.add_parser("eval", parents=[common], help="metrics on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="second checkpoint; adds delta rows")
    p.add_argument("--dataset")
    p.add_argument("--metrics", help="CSV path (default OUT_DIR/metrics.csv)")

    p = sub.add_parser("visualize", parents=[common], help="heatmap overlays as PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--sample-index", dest="samples", default="0", help="comma-separated dataset indices")
    p.add_argument("--channel-index", dest="channels", default="0", help="comma-separated channel indices")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        code = COMMANDS[args.command](cfg, args)
        write_resolved_config(cfg)
        return code
    except (UsageError, DomainError, ParseError) as exc:
        print(f"ecloss: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, OSError) as exc:
        print(f"ecloss: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
