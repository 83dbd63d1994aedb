"""Flat key = value experiment configs.

Syntax: one `key = value` per line, `#` starts a comment, `include <path>`
splices another file (relative to the including file, cycles rejected), and
later assignments win. A `sweep = name1, name2` line plus `name1.<key> =
value` lines describe ablation variants as overrides on the base config.

All keys are declared in SCHEMA with a type and default; unknown keys and
type or domain violations are collected and reported together so a bad
config fails once with the full list.
"""

import os
from dataclasses import replace

from .data import dataset_from_config
from .models import (CONDITIONAL_NORMS, NORM_KINDS, DiscriminatorSpec,
                     GeneratorSpec, SpnOptions)
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# key: (type, default[, allowed]) where type is one of
# int / float / bool / str / ints (comma-separated integers) / enum / enum_int
SCHEMA = {
    "out_dir": ("str", ""),
    "seed": ("int", 0),
    "data.kind": ("enum", "shapes", ("shapes", "cifar10", "cifar100", "folder")),
    "data.path": ("str", ""),
    "data.n": ("int", 5000),
    "data.size": ("int", 32),
    "data.seed": ("int", 0),
    "model.resolution": ("enum_int", 32, (32, 128)),
    "model.norm": ("enum", "spn", NORM_KINDS),
    "model.gen_width": ("int", 0),
    "model.disc_width": ("int", 0),
    "model.z_dim": ("int", 128),
    "model.num_classes": ("int", 0),
    "model.emb_dim": ("int", 128),
    "model.sn_gen": ("bool", False),
    "model.spatial_attention": ("bool", False),
    "model.spn.kernel_size": ("enum_int", 3, (1, 3, 5)),
    "model.spn.single_channel_mask": ("bool", False),
    "model.spn.standard_conv": ("bool", False),
    "model.spn.latent_bias": ("bool", True),
    "train.loss": ("enum", "hinge", ("hinge", "ce", "lsgan")),
    "train.lr_g": ("float", 2e-4),
    "train.lr_d": ("float", 2e-4),
    "train.adam_beta1": ("float", 0.0),
    "train.adam_beta2": ("float", 0.9),
    "train.n_dis": ("int", 1),
    "train.batch_d": ("int", 64),
    "train.batch_g": ("int", 128),
    "train.total_iters": ("int", 1000),
    "train.decay_last_iters": ("int", 0),
    "train.log_every": ("int", 100),
    "train.checkpoint_every": ("int", 0),
    "train.sample_every": ("int", 0),
    "train.resume": ("str", ""),
    "eval.checkpoint": ("str", ""),
    "eval.n_samples": ("int", 50000),
    "eval.batch": ("int", 100),
    "eval.seed": ("int", 0),
    "eval.splits": ("int", 10),
    "eval.feature_dim": ("int", 64),
    "eval.extractor_seed": ("int", 0),
    "masks.checkpoint": ("str", ""),
    "masks.layer": ("int", -1),
    "masks.channels": ("ints", (0, 1, 2, 3)),
    "masks.batch": ("int", 4),
    "masks.seed": ("int", 0),
    "masks.out": ("str", "masks.png"),
    "gradcheck.shape": ("ints", (2, 8, 8, 4)),
    "gradcheck.seed": ("int", 0),
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _parse_value(key, text, problems):
    spec = SCHEMA[key]
    kind = spec[0]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[text.lower()]
        if kind == "str":
            return text
        if kind == "ints":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind == "enum":
            if text not in spec[2]:
                raise ValueError
            return text
        if kind == "enum_int":
            v = int(text)
            if v not in spec[2]:
                raise ValueError
            return v
    except ValueError:
        allowed = " (one of %s)" % (spec[2],) if len(spec) > 2 else ""
        problems.append("%s: cannot parse %r as %s%s" % (key, text, kind, allowed))
        return None
    raise AssertionError("unhandled schema kind %r" % kind)


def parse_config_file(path, _seen=None):
    """Read one file (plus includes) into an ordered {key: raw string}."""
    _seen = _seen or set()
    apath = os.path.abspath(path)
    if apath in _seen:
        raise ConfigError(["include cycle at %s" % path])
    _seen.add(apath)
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include ") or line == "include":
                target = line[len("include"):].strip()
                if not target:
                    raise ConfigError(["%s:%d: include needs a path"
                                       % (path, lineno)])
                target = os.path.join(os.path.dirname(apath), target)
                raw.update(parse_config_file(target, _seen))
                continue
            if "=" not in line:
                raise ConfigError(["%s:%d: expected 'key = value', got %r"
                                   % (path, lineno, line)])
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


def _split_sweep(raw, problems):
    """Pull `sweep` and its `<name>.<key>` override lines out of raw."""
    names = []
    if "sweep" in raw:
        names = [t.strip() for t in raw.pop("sweep").split(",") if t.strip()]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            problems.append("sweep: duplicate variant names %s" % sorted(dupes))
    overrides = {name: {} for name in names}
    for key in list(raw):
        head = key.split(".", 1)[0]
        if head in overrides:
            _, sub = key.split(".", 1)
            overrides[head][sub] = raw.pop(key)
    return names, overrides


def _coerce(raw, problems):
    cfg = {k: spec[1] for k, spec in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            problems.append("unknown key %r" % key)
            continue
        value = _parse_value(key, text, problems)
        if value is not None:
            cfg[key] = value
    return cfg


def _cross_checks(cfg, problems):
    if cfg["data.kind"] != "shapes" and not cfg["data.path"]:
        problems.append("data.path is required for data.kind = %s"
                        % cfg["data.kind"])
    conditional = cfg["model.norm"] in CONDITIONAL_NORMS
    if conditional and cfg["model.num_classes"] < 1:
        problems.append("model.num_classes must be >= 1 for %s"
                        % cfg["model.norm"])
    if conditional and cfg["model.emb_dim"] < 1:
        problems.append("model.emb_dim must be >= 1 for %s" % cfg["model.norm"])
    if cfg["model.z_dim"] < 1:
        problems.append("model.z_dim must be >= 1")
    if cfg["train.n_dis"] < 1:
        problems.append("train.n_dis must be >= 1")
    if cfg["train.batch_d"] < 1 or cfg["train.batch_g"] < 1:
        problems.append("train batch sizes must be >= 1")
    if cfg["train.total_iters"] < 1:
        problems.append("train.total_iters must be >= 1")
    if not 0 <= cfg["train.decay_last_iters"] <= cfg["train.total_iters"]:
        problems.append("train.decay_last_iters must lie in [0, total_iters]")
    if cfg["eval.n_samples"] < 2 or cfg["eval.batch"] < 1:
        problems.append("eval.n_samples must be >= 2 and eval.batch >= 1")
    if cfg["eval.splits"] < 1:
        problems.append("eval.splits must be >= 1")
    if len(cfg["gradcheck.shape"]) != 4 or min(cfg["gradcheck.shape"]) < 1:
        problems.append("gradcheck.shape must be four positive integers")
    if not cfg["masks.channels"]:
        problems.append("masks.channels must list at least one channel")
    elif min(cfg["masks.channels"]) < 0:
        problems.append("masks.channels must be non-negative")
    if cfg["masks.batch"] < 1:
        problems.append("masks.batch must be >= 1")


def _apply_sets(raw, sets, problems):
    for item in sets or []:
        if "=" not in item:
            problems.append("--set expects key=value, got %r" % item)
            continue
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()


def load_config(path=None, sets=None):
    """-> (typed cfg dict, {variant name: raw override dict}).

    Missing path means pure defaults. --set pairs land after the file so
    they win; sweep overrides stay raw until variant_config applies them."""
    problems = []
    raw = parse_config_file(path) if path else {}
    _apply_sets(raw, sets, problems)
    sweep_names, overrides = _split_sweep(raw, problems)
    cfg = _coerce(raw, problems)
    _cross_checks(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg, {name: overrides[name] for name in sweep_names}


def variant_config(cfg, override_raw):
    """Base typed config + raw override lines -> validated variant config."""
    problems = []
    merged = dict(cfg)
    for key, text in override_raw.items():
        if key not in SCHEMA:
            problems.append("unknown key %r" % key)
            continue
        value = _parse_value(key, text, problems)
        if value is not None:
            merged[key] = value
    _cross_checks(merged, problems)
    if problems:
        raise ConfigError(problems)
    return merged


def format_resolved(cfg, version=""):
    """Dump every key for the artifact directory; reloadable as a config."""
    lines = ["# resolved configuration%s" % (" (spngan %s)" % version
                                             if version else "")]
    for key in sorted(SCHEMA):
        value = cfg[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append("%s = %s" % (key, text))
    return "\n".join(lines) + "\n"


def build_dataset(cfg):
    return dataset_from_config(cfg["data.kind"], path=cfg["data.path"] or None,
                               n=cfg["data.n"], size=cfg["data.size"],
                               seed=cfg["data.seed"])


def build_gen_spec(cfg):
    opts = SpnOptions(kernel_size=cfg["model.spn.kernel_size"],
                      single_channel_mask=cfg["model.spn.single_channel_mask"],
                      standard_conv=cfg["model.spn.standard_conv"],
                      latent_bias=cfg["model.spn.latent_bias"])
    return GeneratorSpec(resolution=cfg["model.resolution"],
                         norm=cfg["model.norm"],
                         base_width=cfg["model.gen_width"],
                         z_dim=cfg["model.z_dim"],
                         num_classes=cfg["model.num_classes"],
                         emb_dim=cfg["model.emb_dim"],
                         spn=opts,
                         spatial_attention=cfg["model.spatial_attention"],
                         sn=cfg["model.sn_gen"])


def build_disc_spec(cfg):
    return DiscriminatorSpec(resolution=cfg["model.resolution"],
                             base_width=cfg["model.disc_width"],
                             num_classes=cfg["model.num_classes"])


def build_train_config(cfg):
    return TrainConfig(loss=cfg["train.loss"],
                       lr_g=cfg["train.lr_g"],
                       lr_d=cfg["train.lr_d"],
                       adam_beta1=cfg["train.adam_beta1"],
                       adam_beta2=cfg["train.adam_beta2"],
                       n_dis=cfg["train.n_dis"],
                       batch_d=cfg["train.batch_d"],
                       batch_g=cfg["train.batch_g"],
                       total_iters=cfg["train.total_iters"],
                       decay_last_iters=cfg["train.decay_last_iters"],
                       seed=cfg["seed"],
                       log_every=cfg["train.log_every"],
                       checkpoint_every=cfg["train.checkpoint_every"],
                       sample_every=cfg["train.sample_every"])


def baseline_norm(norm):
    """The plain-normalization counterpart used in audit comparisons."""
    return {"spn": "bn", "cspn": "cbn", "ccbn": "cbn"}.get(norm, norm)


def with_norm(spec, norm):
    return replace(spec, norm=norm)
