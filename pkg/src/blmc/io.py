"""CSV datasets, posterior-sample directories and score reports.

Files are UTF-8, comma separated, LF terminated, with a mandatory header.
Floats are written with 17 significant digits so doubles round-trip exactly;
a missing response is an empty cell ("NaN" is also accepted on input).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .metrics import ChainDiagnostics, ScoreReport
from .model import Dataset, ModelConfig, SigmaMode
from .sampler import PosteriorSamples

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class SchemaError(ValueError):
    """A CSV file does not follow the expected layout."""


class ManifestMismatch(ValueError):
    """Sample files disagree with their manifest."""


def fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return format(float(v), ".17g")


def _parse(cell: str, path, line: int, col: str, allow_missing: bool) -> float:
    s = cell.strip()
    if s == "" or s.lower() == "nan":
        if allow_missing:
            return math.nan
        raise SchemaError(f"{path}:{line}: missing value in column {col!r}")
    try:
        return float(s)
    except ValueError:
        raise SchemaError(f"{path}:{line}: cannot parse {cell!r} in column {col!r}") from None


def write_table(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_table(path, allow_missing: bool = False, id_column: bool = True):
    """Returns (header, ids, values) where values is a float array (rows x data columns)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise SchemaError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    start = 1 if id_column else 0
    if id_column and header[0].lower() != "id":
        raise SchemaError(f"{path}: first column must be 'id', found {header[0]!r}")
    ids, vals = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"{path}:{ln}: expected {len(header)} fields, found {len(row)}")
        if id_column:
            ids.append(row[0].strip())
        vals.append([_parse(c, path, ln, header[j + start], allow_missing)
                     for j, c in enumerate(row[start:])])
    if id_column and len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[:3]
        raise SchemaError(f"{path}: duplicate ids {dup}")
    arr = np.array(vals, dtype=float).reshape(len(vals), len(header) - start)
    return header[start:], ids, arr


def _align(ids_ref, ids, path):
    if list(ids) == list(ids_ref):
        return np.arange(len(ids))
    pos = {k: i for i, k in enumerate(ids)}
    missing = [k for k in ids_ref if k not in pos]
    extra = set(ids) - set(ids_ref)
    if missing or extra:
        raise SchemaError(f"{path}: ids do not match the locations file "
                          f"(missing {missing[:3]}, unexpected {sorted(extra)[:3]})")
    return np.array([pos[k] for k in ids_ref])


# --- datasets -------------------------------------------------------------

def read_locations(path):
    names, ids, coords = read_table(path)
    if coords.shape[1] == 0:
        raise SchemaError(f"{path}: no coordinate columns")
    if np.isnan(coords).any():
        raise SchemaError(f"{path}: NaN coordinates")
    return ids, coords


def read_covariates(path, ids):
    names, cid, X = read_table(path)
    return X[_align(ids, cid, path)], names


def read_dataset(locations, responses, covariates=None) -> Dataset:
    """Dataset from locations/responses(/covariates) CSVs; without covariates X is a column of ones."""
    ids, coords = read_locations(locations)
    rnames, rid, Y = read_table(responses, allow_missing=True)
    Y = Y[_align(ids, rid, responses)]
    if covariates is not None:
        X, cnames = read_covariates(covariates, ids)
    else:
        X, cnames = np.ones((len(ids), 1)), ["intercept"]
    return Dataset.from_arrays(coords, Y, X, ids=tuple(ids), response_names=tuple(rnames),
                               covariate_names=tuple(cnames))


def coord_names(d: int) -> list[str]:
    return [f"c{j + 1}" for j in range(d)]


def write_locations(path, ids, coords) -> None:
    write_table(path, ["id"] + coord_names(coords.shape[1]),
                ([i] + [fmt(v) for v in row] for i, row in zip(ids, coords)))


def write_matrix(path, ids, names, values, observed=None) -> None:
    values = np.asarray(values, float)
    if observed is None:
        observed = ~np.isnan(values)
    write_table(path, ["id"] + list(names),
                ([i] + [fmt(v) if o else "" for v, o in zip(row, orow)]
                 for i, row, orow in zip(ids, values, observed)))


def write_dataset(dataset: Dataset, locations, responses, covariates) -> None:
    write_locations(locations, dataset.ids, dataset.coords)
    write_matrix(responses, dataset.ids, dataset.response_names, dataset.Y, dataset.observed)
    write_matrix(covariates, dataset.ids, dataset.covariate_names, dataset.X)


# --- posterior samples ----------------------------------------------------

def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(config: dict, dims: dict) -> str:
    blob = json.dumps({"config": config, "dims": dims}, sort_keys=True).encode()
    return _hash_bytes(blob)[:16]


def _write_draws(path, names, arr) -> str:
    write_table(path, names, ([fmt(v) for v in row] for row in arr))
    return _hash_bytes(Path(path).read_bytes())


def _idx_names(prefix, a, b):
    return [f"{prefix}[{i + 1},{j + 1}]" for i in range(a) for j in range(b)]


def write_samples(samples: PosteriorSamples, directory, ids=None, response_names=None,
                  covariate_names=None, extra: dict | None = None) -> dict:
    """One CSV per parameter block plus ``manifest.json``; returns the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    S, p, q = samples.beta.shape
    K = samples.K
    n = samples.coords.shape[0]
    ids = list(ids) if ids is not None else [f"s{i + 1}" for i in range(n)]
    rn = list(response_names) if response_names is not None else [f"y{j + 1}" for j in range(q)]
    cn = list(covariate_names) if covariate_names is not None else [f"x{j + 1}" for j in range(p)]
    files = {}
    files["beta.csv"] = _write_draws(d / "beta.csv", _idx_names("beta", p, q),
                                     samples.beta.reshape(S, -1))
    files["lambda.csv"] = _write_draws(d / "lambda.csv", _idx_names("lambda", K, q),
                                       samples.lam.reshape(S, -1))
    files["sigma.csv"] = _write_draws(d / "sigma.csv", _idx_names("sigma", q, q),
                                      samples.sigma.reshape(S, -1))
    files["phi.csv"] = _write_draws(d / "phi.csv", [f"phi[{k + 1}]" for k in range(K)],
                                    samples.psi)
    S_f = 0 if samples.F is None else samples.F.shape[0]
    if samples.F is not None:
        F_rows = ([str(int(samples.f_draws[s])), ids[i]] + [fmt(v) for v in samples.F[s, i]]
                  for s in range(S_f) for i in range(n))
        write_table(d / "F.csv", ["draw", "id"] + [f"f{k + 1}" for k in range(K)], F_rows)
        files["F.csv"] = _hash_bytes((d / "F.csv").read_bytes())
    cells = samples.missing_cells
    files["imputed.csv"] = _write_draws(
        d / "imputed.csv", [f"{ids[r]}:{rn[c]}" for r, c in cells], samples.y_imputed)
    write_table(d / "coords.csv", ["id"] + coord_names(samples.coords.shape[1]),
                ([i] + [fmt(v) for v in row] for i, row in zip(ids, samples.coords)))
    files["coords.csv"] = _hash_bytes((d / "coords.csv").read_bytes())
    write_matrix(d / "covariates.csv", ids, cn, samples.X)
    files["covariates.csv"] = _hash_bytes((d / "covariates.csv").read_bytes())
    write_table(d / "omega.csv", ["id"] + [f"mean_{r}" for r in rn] + [f"var_{r}" for r in rn],
                ([i] + [fmt(v) for v in np.r_[m, v_]]
                 for i, m, v_ in zip(ids, samples.omega_mean, samples.omega_var)))
    files["omega.csv"] = _hash_bytes((d / "omega.csv").read_bytes())

    dims = {"S": S, "S_f": S_f, "n": n, "p": p, "q": q, "K": K, "d": samples.coords.shape[1],
            "n_missing": int(cells.shape[0])}
    cfg = samples.config.as_dict()
    manifest = {
        "format": FORMAT_VERSION,
        "dims": dims,
        "seed": samples.config.seed,
        "config": cfg,
        "config_hash": config_hash(cfg, dims),
        "sigma_mode": SigmaMode(samples.sigma_mode).value,
        "response_names": rn,
        "covariate_names": cn,
        "acceptance": [float(a) for a in samples.acceptance],
        "files": files,
    }
    if extra:
        manifest["extra"] = extra
    with open(d / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path}: no manifest")
    with open(path, encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("format") != FORMAT_VERSION:
        raise ManifestMismatch(f"{path}: unsupported format {man.get('format')!r}")
    return man


def manifest_problems(directory, manifest: dict) -> list[str]:
    """Hash disagreements between the manifest and the files on disk."""
    d = Path(directory)
    out = []
    if config_hash(manifest["config"], manifest["dims"]) != manifest["config_hash"]:
        out.append(f"{d / MANIFEST}: config hash does not match its config and dims")
    for name, digest in manifest["files"].items():
        f = d / name
        if not f.exists():
            out.append(f"{f}: listed in manifest but missing")
        elif _hash_bytes(f.read_bytes()) != digest:
            out.append(f"{f}: content hash differs from manifest")
    return out


def _read_block(d: Path, name: str, cols: int, rows: int) -> np.ndarray:
    header, _, arr = read_table(d / name, id_column=False)
    if arr.shape != (rows, cols):
        raise ManifestMismatch(f"{d / name}: expected {rows} rows x {cols} columns from the "
                               f"manifest, found {arr.shape[0]} x {arr.shape[1]}")
    return arr


def read_samples(directory, verify: bool = True) -> PosteriorSamples:
    """Load a sample directory; dimension mismatches raise naming the file.

    With ``verify`` the content hashes in the manifest must also match.
    """
    d = Path(directory)
    man = read_manifest(d)
    if verify:
        problems = manifest_problems(d, man)
        if problems:
            raise ManifestMismatch("; ".join(problems))
    dm = man["dims"]
    S, S_f, n, p, q, K, dd = (dm[k] for k in ("S", "S_f", "n", "p", "q", "K", "d"))
    beta = _read_block(d, "beta.csv", p * q, S).reshape(S, p, q)
    lam = _read_block(d, "lambda.csv", K * q, S).reshape(S, K, q)
    sigma = _read_block(d, "sigma.csv", q * q, S).reshape(S, q, q)
    psi = _read_block(d, "phi.csv", K, S)
    imp_header, _, imputed = read_table(d / "imputed.csv", allow_missing=False, id_column=False) \
        if dm["n_missing"] else ([], [], np.empty((S, 0)))
    if imputed.shape != (S, dm["n_missing"]):
        raise ManifestMismatch(f"{d / 'imputed.csv'}: expected {S} x {dm['n_missing']}, "
                               f"found {imputed.shape[0]} x {imputed.shape[1]}")
    _, ids, coords = read_table(d / "coords.csv")
    if coords.shape != (n, dd):
        raise ManifestMismatch(f"{d / 'coords.csv'}: expected {n} x {dd}, "
                               f"found {coords.shape[0]} x {coords.shape[1]}")
    _, xid, X = read_table(d / "covariates.csv")
    if X.shape != (n, p):
        raise ManifestMismatch(f"{d / 'covariates.csv'}: expected {n} x {p}, "
                               f"found {X.shape[0]} x {X.shape[1]}")
    _, _, om = read_table(d / "omega.csv")
    if om.shape != (n, 2 * q):
        raise ManifestMismatch(f"{d / 'omega.csv'}: expected {n} x {2 * q}, "
                               f"found {om.shape[0]} x {om.shape[1]}")
    F = None
    f_draws = np.empty(0, dtype=np.int64)
    if S_f:
        fpath = d / "F.csv"
        with open(fpath, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        rows = [r for r in rows if r]
        if len(rows) != S_f * n or any(len(r) != K + 2 for r in rows):
            raise ManifestMismatch(f"{fpath}: expected {S_f * n} rows of {K + 2} fields "
                                   f"(S_f = {S_f}, n = {n}), found {len(rows)} rows")
        F = np.array([[float(c) for c in r[2:]] for r in rows]).reshape(S_f, n, K)
        f_draws = np.array([int(rows[s * n][0]) for s in range(S_f)], dtype=np.int64)
    pos = {k: i for i, k in enumerate(ids)}
    rn = man["response_names"]
    rpos = {k: j for j, k in enumerate(rn)}
    cells = np.array([[pos[h.rsplit(":", 1)[0]], rpos[h.rsplit(":", 1)[1]]] for h in imp_header],
                     dtype=np.int64).reshape(-1, 2)
    cfg = dict(man["config"])
    config = ModelConfig(**cfg)
    return PosteriorSamples(
        beta=beta, lam=lam, sigma=sigma, psi=psi, F=F, f_draws=f_draws, y_imputed=imputed,
        missing_cells=cells, acceptance=np.array(man["acceptance"], float),
        omega_mean=om[:, :q], omega_var=om[:, q:], coords=coords, X=X, config=config,
        sigma_mode=SigmaMode(man["sigma_mode"]),
        meta={"ids": tuple(ids), "response_names": tuple(rn),
              "covariate_names": tuple(man["covariate_names"]), "manifest": man})


# --- predictions and reports ----------------------------------------------

PRED_FIELDS = ("mean", "sd", "lower", "upper")


def write_predictions(path, ids, names, result) -> None:
    header = ["id"] + [f"{f}_{r}" for r in names for f in PRED_FIELDS]
    arrays = [result.mean, np.sqrt(result.var), result.lower, result.upper]
    rows = ([i] + [fmt(arrays[f][row, j]) for j in range(len(names)) for f in range(4)]
            for row, i in enumerate(ids))
    write_table(path, header, rows)


def read_predictions(path):
    """Returns (ids, response names, dict field -> n x q array); empty cells read as NaN."""
    header, ids, arr = read_table(path, allow_missing=True)
    if len(header) % len(PRED_FIELDS):
        raise SchemaError(f"{path}: expected {len(PRED_FIELDS)} columns per response")
    names = [h.split("_", 1)[1] for h in header[:: len(PRED_FIELDS)]]
    q = len(names)
    expect = [f"{f}_{r}" for r in names for f in PRED_FIELDS]
    if header != expect:
        raise SchemaError(f"{path}: unexpected columns {header}")
    cube = arr.reshape(len(ids), q, len(PRED_FIELDS))
    return ids, names, {f: cube[:, :, k] for k, f in enumerate(PRED_FIELDS)}


CRPS_NOTE = ("CRPS columns are negated (reported as -CRPS, larger is better); "
             "INT is the 95% interval score under a Gaussian approximation; "
             "CVG uses empirical-quantile intervals.")


def write_report(report: ScoreReport, path) -> Path:
    """Flat CSV (metric x [responses..., all]) plus a text summary next to it."""
    path = Path(path)
    metrics = list(report.values)
    table = {lab: row for lab, row in report.rows(negate_crps=True)}
    write_table(path, ["metric"] + report.labels,
                ([m] + [fmt(table[lab][m]) for lab in report.labels] for m in metrics))
    txt = path.with_suffix(".txt")
    width = max(10, *(len(lab) for lab in report.labels))
    lines = [CRPS_NOTE, "", "metric".ljust(8) + "".join(lab.rjust(width + 2) for lab in report.labels)]
    for m in metrics:
        lines.append(m.ljust(8) + "".join(f"{table[lab][m]:.3f}".rjust(width + 2)
                                          for lab in report.labels))
    lines.append("cells".ljust(8) + "".join(str(c).rjust(width + 2) for c in report.n_cells))
    txt.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return txt


def read_report(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        header, *rows = list(csv.reader(fh))
    return {r[0]: dict(zip(header[1:], (float(c) if c else math.nan for c in r[1:])))
            for r in rows if r}


def write_diagnostics(diag: ChainDiagnostics, path) -> Path:
    path = Path(path)
    write_table(path, ["parameter", "mean", "sd", "ess", "mcse"],
                ([nm, fmt(mu), fmt(sd), fmt(e), fmt(se)] for nm, mu, sd, e, se in
                 zip(diag.names, diag.mean, diag.sd, diag.ess, diag.mcse)))
    txt = path.with_suffix(".txt")
    lines = [f"chain length {diag.length}; MCSE by batch means (batch size 50)", "",
             f"{'parameter':<16}{'mean':>12}{'sd':>12}{'ess':>10}{'mcse':>12}"]
    for nm, mu, sd, e, se in zip(diag.names, diag.mean, diag.sd, diag.ess, diag.mcse):
        lines.append(f"{nm:<16}{mu:>12.4f}{sd:>12.4f}{e:>10.1f}{se:>12.5f}")
    txt.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return txt


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    return data
