"""Command-line entry point: simulate, fit, predict, score, diagnose."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .linalg import make_rng
from .metrics import diagnose_chains, parameter_chains, score_predictions
from .model import (GammaPrior, InverseGammaPrior, InverseWishartPrior, ModelConfig, Priors,
                    SigmaMode, UniformPrior)
from .predict import latent_summary, predict_factors, predict_missing, predict_responses
from .sampler import ValidationError, run_mcmc
from .simdata import (Block, GenerativeSpec, RandomFraction, apply_misalignment,
                      builtin_fixture, generate, truncate_fixture)

logger = logging.getLogger("blmc")

MAX_F_DRAWS = 500


class UsageError(Exception):
    pass


# --- simulate -------------------------------------------------------------

SPEC_KEYS = {"fixture", "n", "beta", "lam", "sigma", "decays", "n_holdout", "holdout",
             "domain", "allow_nngp", "name", "misalignment"}


def _spec_from_json(data: dict) -> tuple[GenerativeSpec, list]:
    unknown = set(data) - SPEC_KEYS
    if unknown:
        raise UsageError(f"unknown spec keys: {sorted(unknown)}")
    if "fixture" in data:
        spec = builtin_fixture(data["fixture"])
        if "n" in data:
            spec = truncate_fixture(spec, int(data["n"]))
        over = {k: data[k] for k in ("n_holdout", "holdout", "allow_nngp") if k in data}
        if "domain" in data:
            over["domain"] = tuple(tuple(r) for r in data["domain"])
        spec = spec.with_(**over) if over else spec
    else:
        fields = {k: v for k, v in data.items() if k not in ("fixture", "misalignment")}
        fields["domain"] = tuple(tuple(r) for r in fields.get("domain", ((0, 1), (0, 1))))
        spec = GenerativeSpec(**fields)
    rules = []
    for r in data.get("misalignment", []):
        resp = tuple(r["responses"]) if r.get("responses") is not None else None
        if "fraction" in r:
            rules.append(RandomFraction(float(r["fraction"]), resp))
        elif "lower" in r and "upper" in r:
            rules.append(Block(tuple(r["lower"]), tuple(r["upper"]), resp))
        else:
            raise UsageError(f"misalignment rule needs 'fraction' or 'lower'/'upper': {r}")
    return spec, rules


def cmd_simulate(args) -> None:
    if (args.fixture is None) == (args.spec is None):
        raise UsageError("give exactly one of --fixture or --spec")
    if args.fixture is not None:
        spec, rules = builtin_fixture(args.fixture), []
        if args.n is not None:
            spec = truncate_fixture(spec, args.n)
    else:
        spec, rules = _spec_from_json(io.load_json(args.spec))
    rng = make_rng(args.seed)
    sim = generate(spec, rng)
    train = sim.train
    latent = sim.latent_truth
    held = sim.held_truth()
    if rules:
        train, hold = apply_misalignment(train, rules, rng)
        latent, held = latent[hold.kept], held[hold.kept]
    out = Path(args.out)
    io.write_dataset(train, out / "locations.csv", out / "responses.csv", out / "covariates.csv")
    io.write_matrix(out / "latent.csv", train.ids, train.response_names, latent)
    test_ids = sim.meta["test_ids"]
    if len(test_ids):
        io.write_locations(out / "test_locations.csv", test_ids, sim.test_coords)
        io.write_matrix(out / "test_covariates.csv", test_ids, train.covariate_names, sim.test_X)
        io.write_matrix(out / "test_responses.csv", test_ids, train.response_names, sim.test_Y)
    held_rows = np.flatnonzero(np.isfinite(held).any(axis=1))
    if held_rows.size:
        # cell holdout: truths of hidden training cells, predicted in-sample
        io.write_matrix(out / "test_responses.csv", np.asarray(train.ids)[held_rows],
                        train.response_names, held[held_rows])
    n_held = int(np.isfinite(held).sum())
    meta = {"spec": spec.name, "n": spec.n, "n_train": train.n, "n_test": len(test_ids),
            "held_cells": n_held, "seed": args.seed, "generation": sim.meta["generation"],
            "missing_cells": int((~train.observed).sum())}
    (out / "simulate.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    print(f"simulated {spec.name}: {train.n} training locations, {len(test_ids)} test "
          f"locations, {n_held} held-out cells -> {out}")


# --- fit ------------------------------------------------------------------

FIT_KEYS = {"k", "m", "iters", "burnin", "thin", "sigma", "threads", "f_thin", "intercept",
            "priors"}
PRIOR_KEYS = {"decay", "lambda_var", "sigma"}


def _decay_prior(d: dict):
    kind = d.get("family", "uniform")
    if kind == "uniform":
        return UniformPrior(float(d["lo"]), float(d["hi"]))
    if kind == "gamma":
        return GammaPrior(float(d["shape"]), float(d["scale"]))
    raise UsageError(f"unknown decay prior family {kind!r}")


def build_priors(q: int, p: int, K: int, mode: SigmaMode, spec: dict | None) -> Priors:
    spec = spec or {}
    unknown = set(spec) - PRIOR_KEYS
    if unknown:
        raise UsageError(f"unknown prior keys: {sorted(unknown)}")
    decay = _decay_prior(spec["decay"]) if "decay" in spec else None
    pri = Priors.default(q, p, K, mode, decay=decay, lam_var=float(spec.get("lambda_var", 25.0)))
    if "sigma" in spec:
        s = spec["sigma"]
        if mode is SigmaMode.FULL:
            sig = InverseWishartPrior(np.asarray(s.get("psi", np.eye(q)), float),
                                      float(s.get("nu", q + 1)))
        else:
            b = np.broadcast_to(np.asarray(s.get("b", 1.0), float), (q,)).copy()
            sig = InverseGammaPrior(float(s.get("a", 2.0)), b)
        pri = Priors(beta=pri.beta, lam=pri.lam, sigma=sig, decay=pri.decay)
    return pri


def _fit_settings(args) -> dict:
    cfg = {}
    if args.config is not None:
        cfg = io.load_json(args.config)
        unknown = set(cfg) - FIT_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key in ("k", "m", "iters", "burnin", "thin", "sigma", "threads", "f_thin"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    defaults = {"m": 10, "iters": 2000, "burnin": 1000, "thin": 1, "sigma": "full",
                "threads": 1, "intercept": True}
    for k, v in defaults.items():
        cfg.setdefault(k, v)
    if "k" not in cfg:
        raise UsageError("the number of factors is required (--k)")
    return cfg


def cmd_fit(args) -> None:
    ds = io.read_dataset(args.locations, args.responses, args.covariates)
    cfg = _fit_settings(args)
    iters, burn, thin = int(cfg["iters"]), int(cfg["burnin"]), int(cfg["thin"])
    if iters <= burn:
        raise UsageError(f"--iters ({iters}) must exceed --burnin ({burn})")
    if thin < 1:
        raise UsageError("--thin must be at least 1")
    n_keep = (iters - burn) // thin
    f_thin = int(cfg.get("f_thin") or max(1, -(-n_keep // MAX_F_DRAWS)))
    mode = SigmaMode(cfg["sigma"])
    config = ModelConfig(K=int(cfg["k"]), m=int(cfg["m"]), n_burn=burn, n_keep=n_keep,
                         thin=thin, sigma_mode=mode, seed=args.seed,
                         intercept=bool(cfg["intercept"]), f_thin=f_thin,
                         threads=int(cfg["threads"]))
    priors = build_priors(ds.q, ds.p, config.K, mode, cfg.get("priors"))
    samples = run_mcmc(ds, priors, config, rng=make_rng(args.seed))
    io.write_samples(samples, args.out, ids=ds.ids, response_names=ds.response_names,
                     covariate_names=ds.covariate_names)
    acc = ", ".join(f"{a:.2f}" for a in samples.acceptance)
    print(f"fit K={config.K}: kept {samples.n_draws} draws ({samples.F.shape[0]} with F), "
          f"decay acceptance [{acc}] -> {args.out}")


# --- predict --------------------------------------------------------------

def _check_new_inputs(args, man: dict, problems: list):
    ids, coords = io.read_locations(args.locations)
    if args.covariates is not None:
        X, cnames = io.read_covariates(args.covariates, ids)
    else:
        X, cnames = np.ones((len(ids), 1)), ["intercept"]
    dims = man["dims"]
    if X.shape[1] != dims["p"]:
        raise io.ManifestMismatch(f"new covariates have {X.shape[1]} columns, "
                                  f"the fit used p = {dims['p']}")
    if coords.shape[1] != dims["d"]:
        raise io.ManifestMismatch(f"new locations are {coords.shape[1]}-dimensional, "
                                  f"the fit used d = {dims['d']}")
    if list(cnames) != list(man["covariate_names"]):
        problems.append(f"covariate names {list(cnames)} differ from the fit's "
                        f"{man['covariate_names']}")
    return ids, coords, X


def cmd_predict(args) -> None:
    man = io.read_manifest(args.samples)
    problems = io.manifest_problems(args.samples, man)
    new = None
    if args.locations is not None:
        new = _check_new_inputs(args, man, problems)
    elif args.covariates is not None:
        raise UsageError("--covariates needs --locations")
    if problems and not args.force:
        raise io.ManifestMismatch("; ".join(problems) + " (use --force to override)")
    for p in problems:
        logger.warning("ignored by --force: %s", p)
    samples = io.read_samples(args.samples, verify=False)
    names = man["response_names"]
    out = Path(args.out)
    if new is not None:
        ids, coords, X = new
        rng = make_rng(args.seed)
        F_U = predict_factors(samples, coords, rng, threads=args.threads)
        res = predict_responses(samples, F_U, X, rng, level=args.level)
        what = f"{len(ids)} new locations from {F_U.shape[0]} draws"
    else:
        rows, res = predict_missing(samples, level=args.level)
        ids = [samples.meta["ids"][r] for r in rows]
        what = f"{len(samples.missing_cells)} unobserved cells from {samples.n_draws} draws"
    io.write_predictions(out / "predictions.csv", ids, names, res)
    lat = latent_summary(samples, level=args.level)
    io.write_predictions(out / "latent.csv", samples.meta["ids"], names, lat)
    corr = lat.omega_corr
    io.write_table(out / "omega_cov.csv", ["quantity"] + names,
                   ([f"cov_{r}"] + [io.fmt(v) for v in row] for r, row in
                    zip(names, lat.omega_cov)))
    c12 = corr[0, 1] if corr.shape[0] > 1 else float("nan")
    print(f"predicted {what}; latent correlation[1,2] = {c12:.3f} -> {out}")


# --- score ----------------------------------------------------------------

def cmd_score(args) -> None:
    pid, names, pred = io.read_predictions(args.predictions)
    tnames, tid, truth = io.read_table(args.responses, allow_missing=True)
    if tnames != names:
        raise io.SchemaError(f"{args.responses}: responses {tnames} do not match "
                             f"predictions {names}")
    pos = {k: i for i, k in enumerate(pid)}
    absent = [k for k in tid if k not in pos]
    if absent:
        raise io.SchemaError(f"{args.predictions}: no predictions for ids {absent[:3]}")
    sel = np.array([pos[k] for k in tid], dtype=np.int64)
    pred = {k: v[sel] for k, v in pred.items()}
    gaps = np.isfinite(truth) & ~np.isfinite(pred["mean"])
    if gaps.any():
        r, c = np.argwhere(gaps)[0]
        raise io.SchemaError(f"{args.predictions}: no prediction for {tid[r]}:{names[c]}")
    kw = {}
    if args.latent_truth is not None:
        if args.latent_pred is None:
            raise UsageError("--latent-truth needs --latent-pred")
        lid, lnames, lat = io.read_predictions(args.latent_pred)
        _, ltid, ltruth = io.read_table(args.latent_truth)
        ltruth = ltruth[io._align(lid, ltid, args.latent_truth)]
        kw = dict(latent_mean=lat["mean"], latent_truth=ltruth, latent_sd=lat["sd"],
                  latent_lower=lat["lower"], latent_upper=lat["upper"])
    rep = score_predictions(pred["mean"], pred["sd"], pred["lower"], pred["upper"], truth,
                            names=names, **kw)
    txt = io.write_report(rep, args.out)
    sys.stdout.write(txt.read_text(encoding="utf-8"))


# --- diagnose -------------------------------------------------------------

def cmd_diagnose(args) -> None:
    samples = io.read_samples(args.samples, verify=not args.force)
    diag = diagnose_chains(parameter_chains(samples))
    txt = io.write_diagnostics(diag, args.out)
    sys.stdout.write(txt.read_text(encoding="utf-8"))


# --- parser ---------------------------------------------------------------

def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _level(s: str) -> float:
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blmc", description="Spatial factor models with NNGP "
                                 "priors for misaligned multivariate data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--fixture", choices=["sim1", "sim2"])
    s.add_argument("--spec", help="JSON generative specification")
    s.add_argument("--n", type=_positive_int, help="shrink the fixture to n locations")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the MCMC sampler")
    f.add_argument("--locations", required=True)
    f.add_argument("--responses", required=True)
    f.add_argument("--covariates")
    f.add_argument("--config", help="JSON file with model settings and priors")
    f.add_argument("--k", type=_positive_int)
    f.add_argument("--m", type=_positive_int)
    f.add_argument("--iters", type=_positive_int, help="total sweeps including burn-in")
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=_positive_int)
    f.add_argument("--f-thin", dest="f_thin", type=_positive_int,
                   help=f"keep F every this many kept draws (default: at most {MAX_F_DRAWS})")
    f.add_argument("--sigma", choices=["full", "diag"])
    f.add_argument("--threads", type=_positive_int)
    f.add_argument("--seed", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="posterior predictive draws at new locations")
    p.add_argument("--samples", required=True)
    p.add_argument("--locations", help="new locations; omit to predict the fit's unobserved cells")
    p.add_argument("--covariates")
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--force", action="store_true", help="ignore manifest mismatches")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    c = sub.add_parser("score", help="score predictions against held-out truth")
    c.add_argument("--predictions", required=True)
    c.add_argument("--responses", required=True)
    c.add_argument("--latent-pred", dest="latent_pred")
    c.add_argument("--latent-truth", dest="latent_truth")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_score)

    d = sub.add_parser("diagnose", help="ESS and MCSE per parameter")
    d.add_argument("--samples", required=True)
    d.add_argument("--force", action="store_true", help="skip manifest hash checks")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"blmc: error[ValidationError]: {'; '.join(exc.problems)}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as one line
        msg = " ".join(str(exc).split())
        print(f"blmc: error[{type(exc).__name__}]: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
