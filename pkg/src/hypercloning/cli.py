"""``hcln``: command-line front end.

Exit codes: 0 success, 1 verification failure, 2 usage or contract error,
3 I/O or checkpoint error, 4 training divergence.
"""

import argparse
import concurrent.futures
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import analysis as A
from . import checkpoint as CK
from . import cloning as C
from . import model as M
from . import train as TR
from . import verify as V
from .errors import CheckpointError, ContractError, DivergenceError
from .tensor import Rng

log = logging.getLogger("hcln")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _dtype(precision):
    return {"float32": np.float32, "float64": np.float64, "32": np.float32, "64": np.float64}[precision]


def _load_config_arg(value):
    """A preset name or a path to a JSON model config."""
    if value in M.PRESETS:
        return M.get_preset(value)
    if os.path.exists(value):
        with open(value) as fh:
            return M.ModelConfig.from_dict(json.load(fh))
    raise UsageError(f"unknown preset {value!r}; choose from {', '.join(M.PRESETS)} or give a JSON path")


def _shape_table(cs, cd):
    rows = [("n_layers", cs.n_layers, cd.n_layers), ("d_model", cs.d_model, cd.d_model),
            ("n_heads", cs.n_heads, cd.n_heads), ("d_head", cs.d_head, cd.d_head),
            ("d_ffn", cs.d_ffn, cd.d_ffn), ("vocab", cs.vocab_size, cd.vocab_size),
            ("params", M.n_params(cs), M.n_params(cd))]
    lines = [f"{'':<10}{'source':>14}{'destination':>14}"]
    lines += [f"{name:<10}{a:>14,}{b:>14,}" for name, a, b in rows]
    return "\n".join(lines)


def _train_config(args):
    fields = {f.name for f in dataclasses.fields(TR.TrainConfig)}
    kw = {k: getattr(args, k) for k in fields if getattr(args, k, None) is not None}
    return TR.TrainConfig(**kw)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands ------------------------------------------------------------


def cmd_init(args):
    config = _load_config_arg(args.config)
    params = M.init_random(config, Rng(args.seed), _dtype(args.precision))
    CK.save(args.out, config, params)
    print(f"wrote {args.out} ({M.n_params(config):,} parameters)")
    return EXIT_OK


def cmd_clone(args):
    cs, ps, _, _ = CK.load(args.input)
    exp = C.ExpansionConfig(args.embed_fold, args.ffn_fold, args.head_count_fold, args.head_dim_fold,
                            args.strategy, args.snr_db, args.seed)
    if exp.is_identity:
        print("warning: all folds are 1; the destination is a copy of the source", file=sys.stderr)
    pd, cd, receipt = C.expand_model(ps, cs, exp)
    for name, e in receipt.entries.items():
        if e.note:
            print(f"note: {name}: {e.note}", file=sys.stderr)
    CK.save(args.out, cd, pd, receipt)
    print(_shape_table(cs, cd))
    print(f"strategy {exp.strategy}" + (f", snr {exp.snr_db:g} dB" if exp.strategy.startswith("noisy") else ""))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_verify(args):
    cs, ps, _, _ = CK.load(args.source)
    cd, pd, receipt, _ = CK.load(args.dest)
    if receipt is None:
        raise UsageError(f"{args.dest} has no expansion receipt; verification needs clone maps")
    batches = V.random_batches(cs.vocab_size, args.batches, min(args.seq_len, cs.max_seq), 1, args.seed)
    rep = V.verify_preservation(ps, cs, pd, cd, receipt, batches, args.tolerance, args.precision)
    text = rep.to_json(indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    print(text)
    if not rep.passed:
        print(f"FAIL: first mismatch at {rep.first_failure}; worst tensor {rep.worst_tensor} "
              f"(constraint residual {rep.worst_tensor_residual:.3g})", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_analyze(args):
    config, params, receipt, _ = CK.load(args.checkpoint)
    selection = args.tensors or None
    os.makedirs(args.out_dir, exist_ok=True)
    if args.metric == "symmetry":
        A.select_tensors(receipt, selection, require_fold=True)
        sym, _ = A.track(params, receipt, args.step, selection, symmetry=True, spectra=False)
        path = os.path.join(args.out_dir, "symmetry.csv")
        A.append_symmetry_csv(path, sym.rows)
        for r in sym.rows:
            print(f"{r['tensor']}\tfold {r['fold']}\tcosine {r['cosine']:.9f}")
    else:
        _, spec = A.track(params, receipt, args.step, selection, args.threshold, symmetry=False, spectra=True)
        A.append_spectrum_csv(os.path.join(args.out_dir, "spectrum.csv"), spec.rows)
        A.write_spectra_json(os.path.join(args.out_dir, "spectra.json"), spec.rows)
        for r in spec.rows:
            n = len(r["singular_values"])
            print(f"{r['tensor']}\tzero-count {r['zero_count']}/{n}\tsigma_max {r['sigma_max']:.6g}")
    return EXIT_OK


def _initial_model(args):
    """(config, params, receipt, opt_state) from a checkpoint or a random init."""
    if args.init == "random":
        if not args.config:
            raise UsageError("--init random needs --config")
        config = _load_config_arg(args.config)
        return config, M.init_random(config, Rng(args.seed), _dtype(args.precision or "float32")), None, None
    if not args.checkpoint:
        raise UsageError("give a checkpoint or --init random --config PRESET")
    config, params, receipt, opt_state = CK.load(args.checkpoint)
    if args.precision:
        params = M.cast_params(params, _dtype(args.precision))
        opt_state = None
    return config, params, receipt, (opt_state if args.resume else None)


def run_training(config, params, receipt, cfg, corpus_path, out_dir, track_symmetry=False, track_spectrum=False,
                 tensors=None, threshold=1e-6, opt_state=None):
    """Train and write log.csv, final.hcln and analysis files into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    for name in ("symmetry.csv", "spectrum.csv", "spectra.json"):
        p = os.path.join(out_dir, name)
        if os.path.exists(p):
            os.unlink(p)
    corpus = TR.Corpus.from_file(corpus_path)
    hooks = []
    if track_symmetry or track_spectrum:
        hooks.append(A.make_track_hook(receipt, out_dir, tensors, track_symmetry, track_spectrum, threshold))

    def save_ckpt(step, p, state):
        path = os.path.join(out_dir, f"step_{step:06d}.hcln")
        CK.save(path, config, p, receipt, state)
        return path

    result = TR.train(params, config, corpus, cfg, hooks, save_ckpt, opt_state)
    result.to_csv(os.path.join(out_dir, "log.csv"))
    CK.save(os.path.join(out_dir, "final.hcln"), config, result.params, receipt, result.opt_state)
    _write_json(os.path.join(out_dir, "train_config.json"), cfg.to_dict())
    return result


def cmd_train(args):
    config, params, receipt, opt_state = _initial_model(args)
    cfg = _train_config(args)
    result = run_training(config, params, receipt, cfg, args.corpus, args.out_dir, args.track_symmetry,
                          args.track_spectrum, args.tensors or None, args.threshold, opt_state)
    pts = result.eval_points()
    if pts:
        print(f"final eval loss {pts[-1][1]:.6f} at step {pts[-1][0]}")
    print(f"wrote {args.out_dir}")
    return EXIT_OK


def cmd_evaluate(args):
    config, params, _, _ = CK.load(args.checkpoint)
    if args.precision:
        params = M.cast_params(params, _dtype(args.precision))
    corpus = TR.Corpus.from_file(args.corpus)
    ctx = min(args.context_len, config.max_seq)
    loss = TR.eval_loss(params, config, corpus.eval_slice(args.eval_batches, args.batch_size, ctx))
    out = {"checkpoint": args.checkpoint, "eval_loss": loss, "eval_batches": args.eval_batches,
           "batch_size": args.batch_size, "context_len": ctx}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


# -- sweeps -----------------------------------------------------------------


def expand_sweep_spec(spec):
    """List of run dicts from a sweep spec.

    A sweep spec has a shared ``train`` block and either an explicit ``runs``
    list or ``bases`` x ``expansions`` (plus optional ``baselines``). Each
    run has a ``name`` and either ``base`` (checkpoint) with an optional
    ``expansion`` or ``init: "random"`` with ``config`` (preset or dict).
    """
    runs = list(spec.get("runs", []))
    for base, exp in itertools.product(spec.get("bases", []), spec.get("expansions", [])):
        base_name = os.path.splitext(os.path.basename(base))[0]
        exp_name = exp.get("name") or str(exp.get("strategy", "symmetric")).replace("_", "-")
        runs.append({"name": f"{base_name}-{exp_name}", "base": base,
                     "expansion": {k: v for k, v in exp.items() if k != "name"}})
    runs.extend(spec.get("baselines", []))
    names = [r.get("name") for r in runs]
    if any(not n for n in names) or len(set(names)) != len(names):
        raise ContractError("every sweep run needs a unique name")
    return runs


def _sweep_one(run, train_dict, corpus_path, out_root, precision, seed, spec_dir):
    """One sweep run; returns a summary row, never raises."""
    row = {"name": run["name"], "status": "ok", "init": "", "final_eval_loss": "", "first_eval_loss": "",
           "steps": "", "error": ""}
    try:
        cfg = TR.TrainConfig.from_dict({**train_dict, **run.get("train", {})})
        receipt = None
        if run.get("init") == "random":
            c = run["config"]
            config = M.get_preset(c) if isinstance(c, str) else M.ModelConfig.from_dict(c)
            params = M.init_random(config, Rng(run.get("seed", seed)), _dtype(precision))
            row["init"] = "random"
        else:
            base = run["base"] if os.path.isabs(run["base"]) else os.path.join(spec_dir, run["base"])
            config, params, _, _ = CK.load(base)
            params = M.cast_params(params, _dtype(precision))
            row["init"] = os.path.basename(base)
            if run.get("expansion"):
                exp = C.ExpansionConfig.from_dict({"seed": seed, **run["expansion"]})
                params, config, receipt = C.expand_model(params, config, exp)
                row["init"] += f"+{exp.strategy}"
        track = bool(run.get("track", False)) and receipt is not None
        result = run_training(config, params, receipt, cfg, corpus_path, os.path.join(out_root, run["name"]),
                              track, track)
        pts = result.eval_points()
        row["first_eval_loss"] = repr(pts[0][1]) if pts else ""
        row["final_eval_loss"] = repr(pts[-1][1]) if pts else ""
        row["steps"] = cfg.total_steps
    except Exception as e:  # recorded, sweep continues
        row["status"] = "diverged" if isinstance(e, DivergenceError) else "failed"
        row["error"] = f"{type(e).__name__}: {e}"
    return row


SUMMARY_FIELDS = ("rank", "name", "status", "init", "first_eval_loss", "final_eval_loss", "steps", "error")


def run_sweep(spec, out_dir, corpus_path=None, precision="float32", seed=0, jobs=1, spec_dir="."):
    """Execute a sweep spec; writes ``summary.csv`` and returns its rows."""
    runs = expand_sweep_spec(spec)
    train_dict = dict(spec.get("train", {}))
    corpus_path = spec.get("corpus", corpus_path)
    precision = spec.get("precision", precision)
    os.makedirs(out_dir, exist_ok=True)
    argv = [(r, train_dict, corpus_path, out_dir, precision, seed, spec_dir) for r in runs]
    if jobs > 1 and len(runs) > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_sweep_one, *zip(*argv)))
    else:
        rows = [_sweep_one(*a) for a in argv]
    ok = sorted((r for r in rows if r["status"] == "ok" and r["final_eval_loss"] != ""),
                key=lambda r: float(r["final_eval_loss"]))
    for i, r in enumerate(ok, 1):
        r["rank"] = i
    for r in rows:
        r.setdefault("rank", "")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS)
        w.writeheader()
        for r in ok + [r for r in rows if r not in ok]:
            w.writerow(r)
    return rows


def cmd_sweep(args):
    try:
        with open(args.spec) as fh:
            spec = json.load(fh)
    except json.JSONDecodeError as e:
        raise UsageError(f"sweep spec is not valid JSON: {e}") from e
    rows = run_sweep(spec, args.out_dir, args.corpus, args.precision, args.seed, args.jobs,
                     os.path.dirname(os.path.abspath(args.spec)))
    for r in sorted(rows, key=lambda r: (r["rank"] == "", r["rank"] if r["rank"] != "" else 0)):
        loss = r["final_eval_loss"]
        print(f"{str(r['rank']):>4}  {r['name']:<28} {r['status']:<9} {loss if loss == '' else float(loss):.6}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_train_flags(p):
    d = TR.TrainConfig()
    for f in dataclasses.fields(TR.TrainConfig):
        if f.name == "seed":  # shared --seed
            continue
        typ = type(getattr(d, f.name))
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=typ, default=None,
                       help=f"training setting (default {getattr(d, f.name)!r})")


def build_parser():
    parser = argparse.ArgumentParser(prog="hcln", description="Function-preserving width expansion of transformers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--config-file", default=None, help="JSON file whose keys override flag defaults")
        return p

    p = add("init", "Write a randomly initialized checkpoint.")
    p.add_argument("--config", required=True, help=f"preset ({', '.join(M.PRESETS)}) or JSON model config")
    p.add_argument("--precision", choices=["float32", "float64"], default="float64", help="parameter dtype")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_init)

    p = add("clone", "Expand a checkpoint into a wider, function-preserving one.")
    p.add_argument("input", help="source checkpoint")
    p.add_argument("--embed-fold", type=int, default=2, help="hidden-size fold n_e (default 2)")
    p.add_argument("--ffn-fold", type=int, default=2, help="feed-forward fold n_f (default 2)")
    p.add_argument("--head-count-fold", type=int, default=None, help="head-count fold h (default n_e)")
    p.add_argument("--head-dim-fold", type=int, default=None, help="head-dimension fold k (default n_e / h)")
    p.add_argument("--strategy", default="symmetric", type=C.normalize_strategy,
                   help=f"one of {', '.join(C.STRATEGIES)} (underscores accepted)")
    p.add_argument("--snr-db", type=float, default=10.0, help="signal-to-noise ratio of noisy strategies (dB)")
    p.add_argument("--out", required=True, help="destination checkpoint path")
    p.set_defaults(func=cmd_clone)

    p = add("verify", "Check that a clone reproduces its source; exit 1 on mismatch.")
    p.add_argument("source", help="source checkpoint")
    p.add_argument("dest", help="cloned checkpoint (must carry a receipt)")
    p.add_argument("--batches", type=int, default=32, help="number of random sequences")
    p.add_argument("--seq-len", type=int, default=64, help="sequence length")
    p.add_argument("--tolerance", type=float, default=1e-10, help="max abs diff allowed")
    p.add_argument("--precision", choices=["float32", "float64"], default="float64", help="evaluation dtype")
    p.add_argument("--report", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = add("analyze", "Symmetry cosines or singular spectra of a checkpoint.")
    p.add_argument("checkpoint")
    p.add_argument("--metric", choices=["symmetry", "spectrum"], required=True)
    p.add_argument("--tensors", nargs="*", default=None, help="tensor-name globs (default: up-projections, unembedding)")
    p.add_argument("--threshold", type=float, default=1e-6, help="zero threshold relative to sigma_max")
    p.add_argument("--step", type=int, default=0, help="step label for the output rows")
    p.add_argument("--out-dir", default=".", help="directory for CSV/JSON output")
    p.set_defaults(func=cmd_analyze)

    p = add("train", "Train a checkpoint (or a random init) on a byte corpus.")
    p.add_argument("checkpoint", nargs="?", default=None, help="starting checkpoint")
    p.add_argument("--init", choices=["checkpoint", "random"], default="checkpoint")
    p.add_argument("--config", default=None, help="preset or JSON config for --init random")
    p.add_argument("--precision", choices=["float32", "float64"], default=None, help="cast parameters first")
    p.add_argument("--corpus", default=None, help="text file (default: bundled corpus)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint's optimizer state")
    p.add_argument("--track-symmetry", action="store_true", help="write symmetry.csv every track interval")
    p.add_argument("--track-spectrum", action="store_true", help="write spectrum.csv and spectra.json")
    p.add_argument("--tensors", nargs="*", default=None, help="tensor-name globs to track")
    p.add_argument("--threshold", type=float, default=1e-6, help="spectrum zero threshold")
    p.add_argument("--out-dir", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add("evaluate", "Held-out loss of a checkpoint.")
    p.add_argument("checkpoint")
    p.add_argument("--corpus", default=None, help="text file (default: bundled corpus)")
    p.add_argument("--eval-batches", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--context-len", type=int, default=64)
    p.add_argument("--precision", choices=["float32", "float64"], default=None)
    p.set_defaults(func=cmd_evaluate)

    p = add("sweep", "Run every combination in a JSON sweep spec.")
    p.add_argument("spec", help="sweep spec (JSON)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--corpus", default=None, help="text file (default: bundled corpus)")
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from --config-file, if one was given."""
    args = parser.parse_args(argv)
    if not args.config_file:
        return args
    try:
        with open(args.config_file) as fh:
            overrides = json.load(fh)
    except OSError as e:
        raise OSError(e.errno, f"cannot read config file {args.config_file}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}") from e
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    norm = {k.replace("-", "_"): v for k, v in overrides.items()}
    unknown = sorted(set(norm) - known)
    if unknown:
        raise UsageError(f"unknown keys in config file: {', '.join(unknown)}")
    subparser.set_defaults(**norm)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except UsageError as e:
        print(f"hcln: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"hcln: error: {e}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "clone":
        h, k = args.head_count_fold, args.head_dim_fold
        if h is None:
            h = args.embed_fold if k is None else max(1, args.embed_fold // k)
        args.head_count_fold, args.head_dim_fold = h, (k if k is not None else max(1, args.embed_fold // h))
    try:
        return args.func(args)
    except UsageError as e:
        print(f"hcln: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        where = f"; last checkpoint {e.checkpoint}" if e.checkpoint else ""
        print(f"hcln: diverged at step {e.step}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, OSError) as e:
        print(f"hcln: error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:  # contract and strategy errors
        print(f"hcln: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
