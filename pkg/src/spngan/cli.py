"""Command-line surface: train | eval | gradcheck | audit | masks | ablate.

Every command takes an optional config path plus repeatable --set key=value
overrides; there are no other positional arguments. Exit codes: 0 success,
1 invalid configuration, 2 runtime failure.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import __version__, checkpoint as ckpt, config as cfgmod, metrics
from .config import ConfigError
from .gradcheck import run_spn_gradcheck
from .models import Generator, audit_table
from .training import Trainer, format_log_rows


def _write_resolved(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.txt"), "w") as fh:
        fh.write(cfgmod.format_resolved(cfg, version=__version__))


def _require_out_dir(cfg):
    if not cfg["out_dir"]:
        raise ConfigError(["out_dir must be set for this command"])
    return cfg["out_dir"]


def _build_trainer(cfg):
    dataset = cfgmod.build_dataset(cfg)
    return Trainer(dataset, cfgmod.build_gen_spec(cfg),
                   cfgmod.build_disc_spec(cfg), cfgmod.build_train_config(cfg))


def _restore_generator(cfg, path):
    if not path:
        raise ConfigError(["a checkpoint path must be set for this command"])
    gen = Generator(cfgmod.build_gen_spec(cfg), np.random.default_rng(0))
    flat = ckpt.load_checkpoint(path)
    ckpt.restore_checkpoint(flat, gen, disc=None)
    return gen


def cmd_train(cfg, sweep):
    out_dir = _require_out_dir(cfg)
    trainer = _build_trainer(cfg)
    _write_resolved(cfg, out_dir)
    rows = trainer.run(out_dir=out_dir, resume=cfg["train.resume"] or None)
    if rows:
        last = rows[-1]
        print("finished %d iters: d_loss %.4f g_loss %.4f"
              % (last["iter"], last["d_loss"], last["g_loss"]))
    print("artifacts in %s" % out_dir)
    return 0


def cmd_eval(cfg, sweep):
    gen = _restore_generator(cfg, cfg["eval.checkpoint"])
    dataset = cfgmod.build_dataset(cfg)
    extractor = metrics.ToyExtractor(input_size=cfg["model.resolution"],
                                     feature_dim=cfg["eval.feature_dim"],
                                     num_classes=max(cfg["model.num_classes"], 10),
                                     seed=cfg["eval.extractor_seed"])
    fid, is_mean, is_std = metrics.evaluate_model(
        gen, extractor, dataset.images, n_samples=cfg["eval.n_samples"],
        batch=cfg["eval.batch"], seed=cfg["eval.seed"], splits=cfg["eval.splits"])
    report = "fid = %.6f\nis_mean = %.6f\nis_std = %.6f\n" % (fid, is_mean, is_std)
    print(report, end="")
    if cfg["out_dir"]:
        os.makedirs(cfg["out_dir"], exist_ok=True)
        with open(os.path.join(cfg["out_dir"], "eval_metrics.txt"), "w") as fh:
            fh.write(report)
    return 0


def cmd_gradcheck(cfg, sweep):
    shape = tuple(cfg["gradcheck.shape"])
    results = run_spn_gradcheck(shape=shape, seed=cfg["gradcheck.seed"])
    worst = 0.0
    for name, err, seconds in results:
        status = "ok" if err < 1e-4 else "FAIL"
        worst = max(worst, err)
        print("%-34s %10.3e  %6.2fs  %s" % (name, err, seconds, status))
    print("worst relative error %.3e on shape %s" % (worst, (shape,)))
    return 0 if worst < 1e-4 else 2


def cmd_audit(cfg, sweep):
    t0 = time.perf_counter()
    spec = cfgmod.build_gen_spec(cfg)
    norms = [spec.norm]
    base = cfgmod.baseline_norm(spec.norm)
    if base != spec.norm:
        norms.insert(0, base)
    kvs = {}
    for norm in norms:
        gen = Generator(cfgmod.with_norm(spec, norm), np.random.default_rng(0))
        text, kv = audit_table(gen, "generator[%s] %dpx" % (norm, spec.resolution))
        kvs[norm] = kv
        print(text)
        print()
    lines = []
    for norm in norms:
        kv = kvs[norm]
        for field in ("params", "macs", "flops_mac1", "flops_mac2"):
            lines.append("%s_%s = %d" % (norm, field, kv[field]))
    if len(norms) == 2:
        a, b = kvs[norms[0]], kvs[norms[1]]
        lines.append("delta_params = %d" % (b["params"] - a["params"]))
        lines.append("delta_macs = %d" % (b["macs"] - a["macs"]))
        lines.append("delta_flops_mac1 = %d" % (b["flops_mac1"] - a["flops_mac1"]))
        lines.append("delta_flops_mac2 = %d" % (b["flops_mac2"] - a["flops_mac2"]))
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if cfg["out_dir"]:
        os.makedirs(cfg["out_dir"], exist_ok=True)
        with open(os.path.join(cfg["out_dir"], "audit.kv"), "w") as fh:
            fh.write(report)
    print("audit took %.3fs" % (time.perf_counter() - t0))
    return 0


def cmd_masks(cfg, sweep):
    gen = _restore_generator(cfg, cfg["masks.checkpoint"])
    rng = np.random.default_rng(cfg["masks.seed"])
    z = rng.standard_normal((cfg["masks.batch"], gen.spec.z_dim))
    z = z.astype(gen.spec.dtype)
    cond = (rng.integers(0, gen.spec.num_classes, cfg["masks.batch"])
            if gen.conditional else None)
    out = cfg["masks.out"]
    if cfg["out_dir"]:
        os.makedirs(cfg["out_dir"], exist_ok=True)
        out = os.path.join(cfg["out_dir"], out)
    metrics.visualize_masks(gen, z, out, cond=cond,
                            layer_index=cfg["masks.layer"],
                            channels=cfg["masks.channels"])
    print("wrote %s" % out)
    return 0


def cmd_ablate(cfg, sweep):
    if not sweep:
        raise ConfigError(["ablate needs a 'sweep = name1, name2' line"])
    out_root = _require_out_dir(cfg)
    summary = []
    for name, overrides in sweep.items():
        vcfg = cfgmod.variant_config(cfg, overrides)
        vcfg["out_dir"] = os.path.join(out_root, name)
        print("=== variant %s ===" % name)
        trainer = _build_trainer(vcfg)
        _write_resolved(vcfg, vcfg["out_dir"])
        rows = trainer.run(out_dir=vcfg["out_dir"])
        last = rows[-1]
        summary.append("%s: d_loss %.4f g_loss %.4f (%d iters)"
                       % (name, last["d_loss"], last["g_loss"], last["iter"]))
    print("\n".join(summary))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "audit": cmd_audit,
    "masks": cmd_masks,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="spngan",
        description="Self pixel-wise normalization GAN experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("config", nargs="?", default=None,
                       help="flat key = value config file (defaults apply)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    args = parser.parse_args(argv)
    try:
        cfg, sweep = cfgmod.load_config(args.config, args.set)
    except (ConfigError, FileNotFoundError) as exc:
        _report_config_error(exc)
        return 1
    try:
        return COMMANDS[args.command](cfg, sweep)
    except ConfigError as exc:
        _report_config_error(exc)
        return 1
    except Exception as exc:  # runtime failure contract: exit 2 with context
        print("error: %s" % exc, file=sys.stderr)
        return 2


def _report_config_error(exc):
    if isinstance(exc, ConfigError):
        print("invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print("  - %s" % problem, file=sys.stderr)
    else:
        print("invalid configuration: %s" % exc, file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
