"""Checkpointing: one flat .npz per snapshot.

Key layout (all names use '/' separators):
  gen/<param or buffer name>      generator tensors
  disc/<param or buffer name>     discriminator tensors
  opt_g/<t|m/...|v/...>           generator Adam state
  opt_d/<t|m/...|v/...>           discriminator Adam state
  rng/<stream>                    PCG64 state packed as six uint64 words
  iteration                       scalar int64
  _format_version                 scalar int64, currently 1

Loading a file whose _format_version differs from FORMAT_VERSION raises,
since silent reinterpretation of optimizer state corrupts resumed runs.
"""

import numpy as np

FORMAT_VERSION = 1

_U64 = (1 << 64) - 1


def rng_state_to_array(rng):
    """Pack a PCG64-backed Generator's state into six uint64 words."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("expected a PCG64 generator, got %s" % st["bit_generator"])
    s, inc = st["state"]["state"], st["state"]["inc"]
    words = [s >> 64, s & _U64, inc >> 64, inc & _U64,
             st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.uint64)


def rng_from_array(words):
    words = [int(w) for w in words]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (words[0] << 64) | words[1],
                  "inc": (words[2] << 64) | words[3]},
        "has_uint32": words[4],
        "uinteger": words[5],
    }
    return rng


def _model_arrays(model, prefix):
    out = {}
    for name, p in model.named_parameters():
        out[prefix + name] = p.data
    for name, arr in model.named_buffers():
        out[prefix + name] = arr
    return out


def save_checkpoint(path, gen, disc, opt_g, opt_d, rngs, iteration, extra=None):
    """rngs: dict stream-name -> Generator; extra: dict of plain arrays
    stored under extra/ (e.g. data-iterator position)."""
    flat = {"_format_version": np.array(FORMAT_VERSION, dtype=np.int64),
            "iteration": np.array(iteration, dtype=np.int64)}
    flat.update(_model_arrays(gen, "gen/"))
    flat.update(_model_arrays(disc, "disc/"))
    for key, arr in opt_g.state_arrays().items():
        flat["opt_g/" + key] = arr
    for key, arr in opt_d.state_arrays().items():
        flat["opt_d/" + key] = arr
    for name, rng in rngs.items():
        flat["rng/" + name] = rng_state_to_array(rng)
    for name, arr in (extra or {}).items():
        flat["extra/" + name] = np.asarray(arr)
    np.savez(path, **flat)


def load_checkpoint(path):
    with np.load(path) as zf:
        flat = {k: zf[k] for k in zf.files}
    version = int(flat.pop("_format_version", -1))
    if version != FORMAT_VERSION:
        raise ValueError("checkpoint format %d unsupported (expected %d)"
                         % (version, FORMAT_VERSION))
    return flat


def _restore_model(model, flat, prefix):
    tensors = {k[len(prefix):]: v for k, v in flat.items()
               if k.startswith(prefix)}
    for name, p in model.named_parameters():
        if name not in tensors:
            raise KeyError("checkpoint is missing %s%s" % (prefix, name))
        if tensors[name].shape != p.data.shape:
            raise ValueError("shape mismatch for %s%s: %s vs %s"
                             % (prefix, name, tensors[name].shape, p.data.shape))
        p.data[...] = tensors[name]
    model.load_buffers(tensors)


def restore_checkpoint(flat, gen, disc, opt_g=None, opt_d=None):
    """Load tensors back into live objects.

    Returns (iteration, rng dict, extra dict)."""
    _restore_model(gen, flat, "gen/")
    if disc is not None:
        _restore_model(disc, flat, "disc/")
    if opt_g is not None:
        opt_g.load_state({k[len("opt_g/"):]: v for k, v in flat.items()
                          if k.startswith("opt_g/")})
    if opt_d is not None:
        opt_d.load_state({k[len("opt_d/"):]: v for k, v in flat.items()
                          if k.startswith("opt_d/")})
    rngs = {k[len("rng/"):]: rng_from_array(v) for k, v in flat.items()
            if k.startswith("rng/")}
    extra = {k[len("extra/"):]: v for k, v in flat.items()
             if k.startswith("extra/")}
    return int(flat["iteration"]), rngs, extra
