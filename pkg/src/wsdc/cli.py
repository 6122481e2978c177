"""Command-line experiment runner.

Verbs: ``train``, ``sweep-snr``, ``ablate-alpha``, ``channel-report`` and
``grad-check``. Exit codes: 0 ok, 2 config error, 3 artifact error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from .channel import (SUPPORTED_ORDERS, ChannelConfig, awgn, build_constellation, capacity_awgn, demodulate,
                      discrete_entropy, modulate, ser_theoretical)
from .data import CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, gen_gmm, load_cifar10
from .errors import ConfigError, FormatError, NumericalError, WsdcError
from .training import TrainConfig, evaluate, grad_check, init_state, load_model, save_model, train

CSV_HEADER = "# wsdc-csv v1"
EPOCH_COLUMNS = ("epoch", "K", "D", "Q", "alpha", "lam", "snr_db", "seed", "task_loss", "accuracy", "ot_cost",
                 "perplexity", "index_error_rate", "distortion", "wall_time_s")
SWEEP_COLUMNS = ("snr_db", "accuracy", "index_error_rate", "delta_mi_bits", "ot_cost", "perplexity", "symbol_ws")
ABLATION_COLUMNS = ("alpha",) + SWEEP_COLUMNS
CHANNEL_COLUMNS = ("K", "snr_db", "capacity_bits", "ser_theoretical", "ser_simulated", "uniform_entropy_bits")
DEFAULT_SNRS = (4.0, 8.0, 12.0, 16.0, 20.0)
DEFAULT_ALPHAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
GMM_DEFAULTS = dict(n_classes=10, dim=32, separation=6.0, n_per_class=200, n_test_per_class=100)

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERICAL = 0, 2, 3, 4


@dataclass
class ExperimentConfig:
    train: TrainConfig
    snr_test_list: tuple = DEFAULT_SNRS
    alpha_list: tuple = DEFAULT_ALPHAS
    run_id: str = "run"
    out_dir: str = "runs"
    gmm: dict = field(default_factory=lambda: dict(GMM_DEFAULTS))
    cifar_dir: str | None = None

    def to_dict(self):
        d = self.train.to_dict()
        d.update(snr_test_list=list(self.snr_test_list), alpha_list=list(self.alpha_list), run_id=self.run_id,
                 out_dir=self.out_dir, gmm=dict(self.gmm), cifar_dir=self.cifar_dir)
        return d


_EXTRA_KEYS = ("snr_test_list", "alpha_list", "run_id", "out_dir", "gmm", "cifar_dir")
_REQUIRED = ("K", "D", "Q")


def _check_type(name, value, annotation):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "tuple": lambda v: isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
    }
    kinds = [a.strip() for a in str(annotation).split("|")]
    if value is None and "None" in kinds:
        return
    if not any(ok[k](value) for k in kinds if k in ok):
        raise ConfigError(f"field {name!r}: expected {annotation}, got {value!r}")


def _number_list(name, value):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"field {name!r}: expected a nonempty list of numbers")
    out = []
    for v in value:
        if isinstance(v, str) and v.lower() in ("inf", "+inf"):
            out.append(math.inf)
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out.append(float(v))
        else:
            raise ConfigError(f"field {name!r}: {v!r} is not a number")
    return tuple(out)


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document. Unknown and missing keys are errors naming the field."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(doc) - set(train_fields) - set(_EXTRA_KEYS))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise ConfigError(f"missing required config field(s): {', '.join(missing)}")
    kw = {}
    for name, ann in train_fields.items():
        if name in doc:
            _check_type(name, doc[name], ann)
            kw[name] = doc[name]
    exp = ExperimentConfig(train=TrainConfig(**kw))
    if "snr_test_list" in doc:
        exp.snr_test_list = _number_list("snr_test_list", doc["snr_test_list"])
    if "alpha_list" in doc:
        exp.alpha_list = _number_list("alpha_list", doc["alpha_list"])
    for name in ("run_id", "out_dir"):
        if name in doc:
            _check_type(name, doc[name], "str")
            setattr(exp, name, doc[name])
    if "cifar_dir" in doc:
        _check_type("cifar_dir", doc["cifar_dir"], "str | None")
        exp.cifar_dir = doc["cifar_dir"]
    if "gmm" in doc:
        g = doc["gmm"]
        if not isinstance(g, dict):
            raise ConfigError("field 'gmm' must be an object")
        bad = sorted(set(g) - set(GMM_DEFAULTS))
        if bad:
            raise ConfigError(f"unknown config field(s): {', '.join('gmm.' + b for b in bad)}")
        for k, v in g.items():
            _check_type(f"gmm.{k}", v, "float" if k == "separation" else "int")
        exp.gmm.update(g)
    if exp.train.dataset not in ("gmm", "cifar10"):
        raise ConfigError(f"field 'dataset': expected 'gmm' or 'cifar10', got {exp.train.dataset!r}")
    if exp.train.dataset == "cifar10" and not exp.cifar_dir:
        raise ConfigError("field 'cifar_dir' is required when dataset is 'cifar10'")
    if any(not 0.0 <= a <= 1.0 for a in exp.alpha_list):
        raise ConfigError("field 'alpha_list': values must lie in [0, 1]")
    return exp


def read_config(path) -> tuple[ExperimentConfig, bytes]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc), raw


def blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _file_hash(path):
    with open(path, "rb") as fh:
        return blob_hash(fh.read())


def load_datasets(exp: ExperimentConfig):
    if exp.train.dataset == "cifar10":
        return load_cifar10(exp.cifar_dir, "train"), load_cifar10(exp.cifar_dir, "test")
    g, seed = exp.gmm, exp.train.seed
    common = dict(n_classes=g["n_classes"], dim=g["dim"], separation=g["separation"], seed=seed)
    return (gen_gmm(n_per_class=g["n_per_class"], split="train", **common),
            gen_gmm(n_per_class=g["n_test_per_class"], split="test", **common))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path):
    """Rows of a file written by :func:`write_csv`, values kept as strings."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != CSV_HEADER:
            raise FormatError(f"{path}: missing '{CSV_HEADER}' header")
        return list(csv.DictReader(fh))


def _write_manifest(out, command, exp, seed, inputs):
    doc = dict(tool="wsdc", version=__version__, command=command, seed=seed, config=exp.to_dict(),
               inputs=[dict(path=os.path.basename(p), blob=_file_hash(p)) for p in inputs])
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _input_files(exp, config_path):
    files = [config_path]
    if exp.train.dataset == "cifar10":
        files += [os.path.join(exp.cifar_dir, f) for f in (*CIFAR_TRAIN_FILES, CIFAR_TEST_FILE)]
    return files


def _apply_seed(exp, seed):
    if seed is not None:
        exp.train.seed = int(seed)
    return exp


def cmd_train(config_path, out=None, seed=None):
    """Train one model; writes ``model.wsdc``, ``metrics.csv`` and ``manifest.json`` under ``out``."""
    exp, _ = read_config(config_path)
    exp = _apply_seed(exp, seed)
    out = out or os.path.join(exp.out_dir, exp.run_id)
    os.makedirs(out, exist_ok=True)
    train_ds, _ = load_datasets(exp)
    state, history = train(exp.train, train_ds)
    save_model(state, os.path.join(out, "model.wsdc"), extra=dict(experiment=exp.to_dict()))
    write_csv(os.path.join(out, "metrics.csv"), EPOCH_COLUMNS, [r.as_row() for r in history])
    _write_manifest(out, "train", exp, exp.train.seed, _input_files(exp, config_path))
    return out


def _experiment_from_model(extra):
    try:
        return parse_config(extra["experiment"])
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"model container lacks a usable experiment record: {exc}") from None


def sweep_rows(state, test_ds, snrs, seed):
    rows = [evaluate(state, test_ds, s, seed=seed).as_row() for s in sorted(snrs)]
    return [{c: r[c] for c in SWEEP_COLUMNS} for r in rows]


def cmd_sweep_snr(model_path, snrs=None, out=".", seed=None):
    """Evaluate a saved model at each SNR; writes ``sweep.csv`` sorted by SNR."""
    state, extra = load_model(model_path)
    exp = _experiment_from_model(extra)
    snrs = exp.snr_test_list if snrs is None else snrs
    _, test_ds = load_datasets(exp)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "sweep.csv")
    write_csv(path, SWEEP_COLUMNS, sweep_rows(state, test_ds, snrs, exp.train.seed if seed is None else seed))
    return path


def _ablation_job(args):
    exp_dict, alpha, snrs, out = args
    exp = parse_config(exp_dict)
    exp.train.alpha = alpha
    train_ds, test_ds = load_datasets(exp)
    state, _ = train(exp.train, train_ds)
    save_model(state, os.path.join(out, f"model_alpha_{alpha!r}.wsdc"), extra=dict(experiment=exp.to_dict()))
    return [dict(r, alpha=alpha) for r in sweep_rows(state, test_ds, snrs, exp.train.seed)]


def cmd_ablate_alpha(config_path, alphas=None, snrs=None, out=None, seed=None, jobs=1):
    """One model per alpha under a shared seed; ``ablation.csv`` has one row per (alpha, snr)."""
    exp, _ = read_config(config_path)
    exp = _apply_seed(exp, seed)
    alphas = exp.alpha_list if alphas is None else tuple(alphas)
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alpha values must lie in [0, 1]")
    snrs = exp.snr_test_list if snrs is None else tuple(snrs)
    out = out or os.path.join(exp.out_dir, exp.run_id)
    os.makedirs(out, exist_ok=True)
    tasks = [(exp.to_dict(), a, snrs, out) for a in alphas]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_job, tasks))
    else:
        results = [_ablation_job(t) for t in tasks]
    path = os.path.join(out, "ablation.csv")
    write_csv(path, ABLATION_COLUMNS, [row for rows in results for row in rows])
    _write_manifest(out, "ablate-alpha", exp, exp.train.seed, _input_files(exp, config_path))
    return path


def channel_report_rows(orders, snrs, seed=0, n_symbols=10**6):
    rows = []
    for K in orders:
        const = build_constellation(K)
        for j, snr in enumerate(sorted(snrs)):
            idx = np.random.default_rng([seed, K, j]).integers(0, K, size=n_symbols)
            ch = ChannelConfig(snr, seed=[seed, K, j, 1])
            rx = demodulate(awgn(modulate(idx, const), ch), const)
            rows.append(dict(K=K, snr_db=snr, capacity_bits=capacity_awgn(1.0, ch.noise_var) if ch.noise_var
                             else math.inf, ser_theoretical=ser_theoretical(K, snr),
                             ser_simulated=float(np.mean(rx != idx)),
                             uniform_entropy_bits=discrete_entropy(np.full(K, 1.0 / K))))
    return rows


def cmd_channel_report(orders=SUPPORTED_ORDERS, snrs=DEFAULT_SNRS, out=".", seed=0, n_symbols=10**6):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "channel_report.csv")
    write_csv(path, CHANNEL_COLUMNS, channel_report_rows(orders, snrs, seed, n_symbols))
    return path


def cmd_grad_check(config_path, seed=None, n_samples=200):
    """Finite-difference check on a freshly initialized model and the first minibatch."""
    exp, _ = read_config(config_path)
    exp = _apply_seed(exp, seed)
    train_ds, _ = load_datasets(exp)
    cfg = exp.train
    B = min(cfg.batch_size, len(train_ds))
    x = train_ds.inputs[:B].reshape(B, -1)
    state = init_state(cfg, train_ds.dim, train_ds.n_classes,
                       sample=x if cfg.codebook_init == "kmeans-on-sample" else None)
    err = grad_check(state, x, train_ds.labels[:B], n_samples=n_samples, seed=cfg.seed)
    if not math.isfinite(err):
        raise NumericalError("gradient check produced a non-finite error")
    tol = 1e-3 if cfg.lam > 0 else 1e-6
    return dict(max_rel_error=err, lam=cfg.lam, tolerance=tol, passed=bool(err < tol))


def _float_list(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            out.append(float(tok))
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {tok!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return tuple(out)


def _int_list(text):
    return tuple(int(v) for v in _float_list(text))


def build_parser():
    p = argparse.ArgumentParser(prog="wsdc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train one model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)

    s = sub.add_parser("sweep-snr", help="evaluate a saved model across SNRs")
    s.add_argument("--model", required=True)
    s.add_argument("--snr", type=_float_list)
    s.add_argument("--out", default=".")
    s.add_argument("--seed", type=int)

    a = sub.add_parser("ablate-alpha", help="train and sweep one model per alpha")
    a.add_argument("--config", required=True)
    a.add_argument("--alpha", type=_float_list)
    a.add_argument("--snr", type=_float_list)
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("channel-report", help="capacity and SER table")
    c.add_argument("--K", type=_int_list, default=SUPPORTED_ORDERS)
    c.add_argument("--snr", type=_float_list, default=DEFAULT_SNRS)
    c.add_argument("--out", default=".")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--symbols", type=int, default=10**6)

    g = sub.add_parser("grad-check", help="finite-difference gradient check")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--samples", type=int, default=200)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "train":
            print(cmd_train(args.config, args.out, args.seed))
        elif args.verb == "sweep-snr":
            print(cmd_sweep_snr(args.model, args.snr, args.out, args.seed))
        elif args.verb == "ablate-alpha":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            print(cmd_ablate_alpha(args.config, args.alpha, args.snr, args.out, args.seed, args.jobs))
        elif args.verb == "channel-report":
            print(cmd_channel_report(args.K, args.snr, args.out, args.seed, args.symbols))
        elif args.verb == "grad-check":
            print(json.dumps(cmd_grad_check(args.config, args.seed, args.samples), sort_keys=True))
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(f"snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_NUMERICAL
    except WsdcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
