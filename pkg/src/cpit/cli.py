"""Command line entry point.

Exit codes: 0 success, 1 invalid input or a failed check, 2 runtime error.
Logs go to stderr; results go to stdout or to the files named by flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config

log = logging.getLogger("cpit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _csv_list(cast=str):
    def parse(text):
        try:
            return tuple(cast(t.strip()) for t in text.split(",") if t.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _print_resolved(config, seed):
    print(f"# seed = {seed}")
    for line in config.to_ini().splitlines():
        print(f"# {line}" if line else "#")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# subcommands


def cmd_oracle(args):
    from .scm import frontdoor_gap, load_scm, random_scm

    tol = 1e-10
    print(f"# seed = {args.seed}")
    if args.scm is not None:
        models = [load_scm(args.scm)]
    else:
        rng = np.random.default_rng(args.seed)
        models = (random_scm(rng, max_card=args.max_card) for _ in range(args.trials))
    worst, failed, n = 0.0, 0, 0
    for i, m in enumerate(models):
        gap = frontdoor_gap(m)
        n += 1
        worst = max(worst, gap)
        failed += gap > tol
        if args.verbose or gap > tol:
            print(f"trial {i}: max_gap={gap:.3e}")
    status = "PASS" if failed == 0 else "FAIL"
    print(f"{status}: {n} SCMs, max gap {worst:.3e} (tolerance {tol:g}), {failed} failures")
    return EXIT_OK if failed == 0 else EXIT_INVALID


def cmd_transform(args):
    from .fourier import fourier_mix, sample_lambda
    from .imaging import load_png, save_png
    from .stain import lab_stats, load_stats, reinhard_normalize

    src = load_png(args.input)
    if args.mode == "fourier":
        if args.style is None:
            raise UsageError("--mode fourier needs --style")
        if args.ref_stats is not None:
            raise UsageError("--ref-stats only applies to --mode stain")
        if args.lam is not None and args.eta is not None:
            raise UsageError("give either --lambda or --eta, not both")
        if args.lam is not None:
            lam = args.lam
        else:
            lam = sample_lambda(1.0 if args.eta is None else args.eta, np.random.default_rng(args.seed))
        print(f"# seed = {args.seed}\n# lambda = {lam!r}")
        out = fourier_mix(src, load_png(args.style), lam)
    else:
        if (args.style is None) == (args.ref_stats is None):
            raise UsageError("--mode stain needs exactly one of --style or --ref-stats")
        if args.lam is not None or args.eta is not None:
            raise UsageError("--lambda/--eta only apply to --mode fourier")
        ref = lab_stats(load_png(args.style)) if args.style else load_stats(args.ref_stats)
        print(f"# reference mean = {ref.mean.tolist()} std = {ref.std.tolist()}")
        out = reinhard_normalize(src, ref)
    save_png(out, args.output)
    log.info("wrote %s", args.output)
    return EXIT_OK


def _gen_overrides(args):
    return {
        ("data", "seed"): args.seed, ("data", "confound_rho"): args.rho,
        ("data", "num_domains"): args.domains, ("data", "patches_per_domain"): args.per_domain,
        ("data", "patch_side"): args.side, ("data", "cast_strength"): args.cast,
        ("data", "artifact_strength"): args.artifact,
    }


def cmd_gen_data(args):
    from .datagen import generate, write_dataset

    config = load_config(args.config, overrides=_gen_overrides(args))
    _print_resolved(config, config.data.seed)
    ds = generate(config.data)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} patches to {args.out}")
    return EXIT_OK


def _train_overrides(args):
    return {
        ("cpit", "seed"): args.seed, ("cpit", "n_styles"): args.n_styles, ("cpit", "gamma"): args.gamma,
        ("cpit", "beta"): args.beta, ("cpit", "eta"): args.eta, ("cpit", "mix_space"): args.mix_space,
        ("train", "epochs"): args.epochs, ("train", "lr"): args.lr, ("train", "hidden_dim"): args.hidden_dim,
        ("train", "input_side"): args.input_side, ("train", "batch_size"): args.batch_size,
    }


def _load_data(path, side=None):
    from .datagen import ingest

    ds = ingest(path, side=side)
    if ds.skipped:
        log.warning("%d undecodable files skipped", ds.skipped)
    return ds


def cmd_train(args):
    from .evaluation import PreparedDataset, fit_method
    from .model import save_checkpoint

    config = load_config(args.config, overrides=_train_overrides(args))
    seed = config.cpit.seed
    _print_resolved(config, seed)
    ds = _load_data(args.data)
    held = tuple(args.hold_out or ())
    unknown = sorted(set(held) - set(ds.domain_names))
    if unknown:
        raise UsageError(f"--hold-out domains {unknown} not in {ds.domain_names}")
    fit = fit_method(PreparedDataset(ds), args.method, held, seed, config.cpit, config.train)
    extra = {
        "method": args.method, "data": str(Path(args.data).resolve()), "held_out": list(held), "seed": seed,
        "val_ba": fit.val_ba, "epoch": fit.epoch,
    }
    if fit.reference is not None:
        extra["reference"] = {"mean": fit.reference.mean.tolist(), "std": fit.reference.std.tolist()}
    save_checkpoint(fit.classifier, args.out, fit.cfg, extra)
    print(f"validation balanced accuracy {fit.val_ba:.4f} at epoch {fit.epoch}; wrote {args.out}")
    return EXIT_OK


def _style_pool(header, pool_dir):
    from .datagen import ingest
    from .evaluation import split_indices
    from .imaging import load_png
    from .model import StylePool

    if pool_dir is not None:
        files = sorted(Path(pool_dir).rglob("*.png"))
        if not files:
            raise UsageError(f"{pool_dir}: no PNG files for the style pool")
        imgs = [load_png(f) for f in files]
        doms = [f.relative_to(pool_dir).parts[0] if len(f.relative_to(pool_dir).parts) > 1 else "pool"
                for f in files]
        return StylePool(np.stack(imgs), np.array(doms))
    extra = header["extra"]
    if "data" not in extra:
        raise UsageError("checkpoint records no training data; pass --pool")
    ds = ingest(extra["data"])
    split = split_indices(ds, tuple(extra["held_out"]), extra["seed"])
    return StylePool(ds.images[split.train], ds.domains[split.train])


def cmd_predict(args):
    from .imaging import load_png
    from .model import load_checkpoint, predict
    from .stain import LabStats, reinhard_normalize

    clf, cfg, header = load_checkpoint(args.checkpoint)
    marginalize = cfg is not None and not args.no_marginalize
    pool = _style_pool(header, args.pool) if marginalize else None
    ref = header["extra"].get("reference")
    ref = None if ref is None else LabStats(ref["mean"], ref["std"])
    rng = np.random.default_rng(args.seed)
    print(f"# seed = {args.seed}\n# marginalize = {marginalize}")
    for path in args.images:
        x = load_png(path)
        if ref is not None:
            x = reinhard_normalize(x, ref)
        label, probs = predict(clf, x, pool, cfg if marginalize else None, rng, marginalize)
        print(path, label, " ".join(f"{p:.6f}" for p in probs))
    return EXIT_OK


def _eval_overrides(args):
    out = _train_overrides(args)
    out.update(_gen_overrides(args))
    out.update({("eval", "methods"): args.methods, ("eval", "seeds"): args.seeds,
                ("eval", "held_out"): args.hold_out})
    return out


def cmd_eval(args):
    from .datagen import generate
    from .evaluation import ExperimentPlan, emit, format_text, run_plan

    config = load_config(args.config, overrides=_eval_overrides(args))
    _print_resolved(config, config.eval.seeds)
    ds = _load_data(args.data) if args.data else generate(config.data)
    held = config.eval.held_out or tuple(ds.domain_names)
    plan = ExperimentPlan(ds, held, config.eval.methods, config.eval.seeds, config.cpit, config.train)
    table = run_plan(plan, partial_csv=args.out if args.format == "csv" else None)
    if args.out:
        emit(table, args.out, args.format)
        log.info("wrote %s", args.out)
    sys.stdout.write(format_text(table))
    return EXIT_OK


def cmd_grad_check(args):
    from .model import CpitConfig, StylePool, grad_check, init_classifier

    tol = 1e-4
    rng = np.random.default_rng(args.seed)
    cfg = CpitConfig(n_styles=args.n_styles, seed=args.seed, mix_space=args.mix_space)
    print(f"# seed = {args.seed}\n# {cfg}")
    side, k = args.side, args.classes
    xs = rng.random((args.batch, side, side, 3))
    ys = rng.integers(k, size=args.batch)
    pool = StylePool(rng.random((6, side, side, 3)), np.array(["a", "a", "a", "b", "b", "b"]))
    worst = 0.0
    for hidden in (0, args.hidden_dim):
        clf = init_classifier(args.input_side, k, hidden, rng)
        if hidden == 0:
            clf.params["W"][:] = rng.normal(0, 0.1, clf.params["W"].shape)
        err = grad_check(clf, xs, ys, pool, cfg, seed=args.seed, n_coords=args.coords)
        print(f"hidden_dim={hidden}: max relative error {err:.3e}")
        worst = max(worst, err)
    status = "PASS" if worst < tol else "FAIL"
    print(f"{status}: max relative error {worst:.3e} (tolerance {tol:g})")
    return EXIT_OK if worst < tol else EXIT_INVALID


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", type=Path, help="INI file (see configs/example.ini)")


def _add_model_flags(p):
    g = p.add_argument_group("model and training (override the config file)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-styles", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--mix-space", choices=("logits", "probs"))
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--hidden-dim", type=int)
    g.add_argument("--input-side", type=int)
    g.add_argument("--batch-size", type=int)


def _add_gen_flags(p, seed=True):
    g = p.add_argument_group("synthetic data (override the config file)")
    if seed:
        g.add_argument("--seed", type=int)
    g.add_argument("--rho", type=float, help="class/colour-cast correlation in [0, 1]")
    g.add_argument("--domains", type=int)
    g.add_argument("--per-domain", type=int)
    g.add_argument("--side", type=int)
    g.add_argument("--cast", type=float, help="colour cast strength")
    g.add_argument("--artifact", type=float, help="scanner grating strength")


def build_parser():
    parser = _Parser(prog="cpit", description="Front-door adjustment and CPIT domain generalization tools.")
    parser.add_argument("--threads", type=int, default=None, help="cap numerical library threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("oracle", help="check the front-door estimate against the truncated factorization")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--max-card", type=int, default=4)
    p.add_argument("--scm", type=Path, help="check one SCM from an INI file instead of random ones")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("transform", help="apply one CPIT transform to a PNG")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--mode", choices=("fourier", "stain"), required=True)
    p.add_argument("--style", type=Path)
    p.add_argument("--ref-stats", type=Path, help="key = value file with mean_l ... std_b")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--eta", type=float, help="draw lambda uniformly from [0, eta)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("gen-data", help="write a synthetic multi-domain patch set")
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    _add_gen_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method on a patch folder")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--hold-out", type=_csv_list(), help="domains excluded from training")
    p.add_argument("--method", default="clear",
                   choices=("baseline", "stainnorm", "clear", "clear_stain_only", "clear_fourier_only"))
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    _add_common(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify PNG patches with a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("images", type=Path, nargs="+")
    p.add_argument("--pool", type=Path, help="folder of style PNGs (default: the training split)")
    p.add_argument("--no-marginalize", action="store_true", help="softmax(F(x)) without transformed views")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="leave-one-domain-out balanced accuracy table")
    p.add_argument("--data", type=Path, help="patch folder (default: generate from [data])")
    p.add_argument("--hold-out", type=_csv_list(), help="held-out domains (default: each in turn)")
    p.add_argument("--methods", type=_csv_list())
    p.add_argument("--seeds", type=_csv_list(int))
    p.add_argument("--out", type=Path, help="results file")
    p.add_argument("--format", choices=("csv", "text"), default="csv")
    _add_common(p)
    _add_model_flags(p)
    _add_gen_flags(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="compare backprop with central differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-styles", type=int, default=2)
    p.add_argument("--mix-space", choices=("logits", "probs"), default="logits")
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--input-side", type=int, default=4)
    p.add_argument("--side", type=int, default=12)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--coords", type=int, default=200)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cpit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, AssertionError) as exc:
        # validation failures raised by the library (bad images, layouts, ranges)
        print(f"cpit {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        log.debug("traceback", exc_info=True)
        print(f"cpit {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
