"""Experiment runner: ``swbnlab {train,whiten-demo,heatmap,bench} --config FILE``.

Experiments are described by INI files; the command line only carries the
config path, an optional output directory override and ``--verbose``.
Exit codes: 0 success, 2 configuration error, 3 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, swbn
from .checkpoint import load_model, save_model
from .criteria import Criterion, DivergenceError, to_correlation, whiten_iterate
from .data import Dataset, equicorrelation, gen_blobs, load_mnist, make_rng
from .matrixcore import OpCounter, correlation, mean_abs_offdiag, read_csv, write_csv, write_pgm
from .nn import NORM_KINDS, LayerSpec, Model, ModelSpec, TrainConfig, TrainingDivergence, train, write_metrics_csv

log = logging.getLogger("swbnlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _words(text):
    return [t.strip().lower() for t in text.split(",") if t.strip()]


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default); a default of None marks a key as optional
SCHEMA = {
    "model": {
        "norm": (_words, ["bn"]),
        "hidden": (_ints, [256, 256]),
        "alpha": (float, swbn.DEFAULT_ALPHA),
        "eta": (float, swbn.DEFAULT_ETA),
        "eps": (float, swbn.DEFAULT_EPS),
        "iternorm_t": (int, 5),
        "backward_mode": (str, "faithful"),
    },
    "train": {
        "epochs": (int, 10),
        "batch_size": (int, 128),
        "lr": (float, 0.1),
        "momentum": (float, 0.9),
        "lr_halving_period": (int, 20),
        "seeds": (_ints, [0]),
        "record_time": (_bool, False),
    },
    "data": {
        "dataset": (str, None),
        "path": (str, None),
        "n_train": (int, None),
        "n_test": (int, None),
        "d": (int, 8),
        "classes": (int, 2),
        "rho": (float, 0.8),
        "separation": (float, 4.0),
        "data_seed": (int, 0),
    },
    "output": {
        "out_dir": (str, "runs"),
    },
    "whiten": {
        "criteria": (_words, ["kl", "fro"]),
        "alphas": (_floats, [1e-4, 1e-5, 1e-6]),
        "d": (int, 2),
        "rho": (float, 0.9),
        "sigma_csv": (str, None),
        "max_iters": (int, 10000),
        "tol": (float, 1e-3),
    },
    "heatmap": {
        "checkpoint": (str, None),
        "samples": (int, 2000),
    },
    "bench": {
        "layers": (_words, ["bn", "swbn-kl", "swbn-fro", "iternorm"]),
        "d": (_ints, [256]),
        "n": (int, 64 * 32 * 32),
        "t": (int, 5),
        "repeats": (int, 100),
        "warmup": (int, 1),
        "seed": (int, 0),
    },
}

REQUIRED = {
    "train": [("data", "dataset")],
    "whiten-demo": [],
    "heatmap": [("data", "dataset"), ("heatmap", "checkpoint")],
    "bench": [],
}


@dataclass
class ExperimentConfig:
    values: dict
    out_dir: Path

    def __getitem__(self, section):
        return self.values[section]


def load_config(path, command: str, out_override=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None

    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {key: default for key, (_, default) in keys.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
    for section, key in REQUIRED[command]:
        if values[section][key] is None:
            raise ConfigError(f"{command} requires [{section}] {key}")

    for kind in values["model"]["norm"]:
        if kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm {kind!r}; expected one of {', '.join(NORM_KINDS)}")
    dataset = values["data"]["dataset"]
    if dataset is not None and dataset not in ("mnist-idx", "blobs", "gaussian"):
        raise ConfigError(f"unknown dataset {dataset!r}")
    if dataset == "mnist-idx" and values["data"]["path"] is None:
        raise ConfigError("dataset = mnist-idx requires [data] path")
    for crit in values["whiten"]["criteria"]:
        try:
            Criterion.parse(crit)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for layer in values["bench"]["layers"]:
        if layer not in ("bn", "swbn-kl", "swbn-fro", "iternorm"):
            raise ConfigError(f"unknown bench layer {layer!r}")
    if len(set(values["bench"]["layers"])) != len(values["bench"]["layers"]):
        raise ConfigError("bench layers must not repeat")

    out_dir = Path(out_override or values["output"]["out_dir"])
    return ExperimentConfig(values, out_dir)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    data = cfg["data"]
    kind = data["dataset"]
    n_train = data["n_train"] or 1000
    n_test = data["n_test"] or 500
    if kind == "mnist-idx":
        return load_mnist(data["path"], data["n_train"], data["n_test"])
    rho = 0.0 if kind == "blobs" else data["rho"]
    common = dict(d=data["d"], classes=data["classes"], separation=data["separation"],
                  rho=rho, centers_seed=data["data_seed"])
    train_set = gen_blobs(n=n_train, seed=data["data_seed"], split="train", **common)
    test_set = gen_blobs(n=n_test, seed=data["data_seed"] + 1, split="test", **common)
    return train_set, test_set


def _fmt(v):
    return "" if v is None else "%.17g" % v


def write_aggregate(path, runs: list) -> None:
    """Per-epoch mean and sample standard deviation across seeds."""
    cols = ("loss", "accuracy", "mean_abs_offdiag_lastnorm")
    with open(path, "w", newline="") as fh:
        fh.write("epoch,split,n_seeds," + ",".join(f"{c}_mean,{c}_std" for c in cols) + "\n")
        for i, first in enumerate(runs[0]):
            group = [rows[i] for rows in runs]
            fields = [str(first.epoch), first.split, str(len(group))]
            for c in cols:
                vals = [getattr(r, c) for r in group]
                if any(v is None for v in vals):
                    fields += ["", ""]
                else:
                    arr = np.array(vals)
                    fields += [_fmt(arr.mean()), _fmt(arr.std(ddof=1) if len(arr) > 1 else 0.0)]
            fh.write(",".join(fields) + "\n")


def cmd_train(cfg: ExperimentConfig) -> int:
    train_set, test_set = load_datasets(cfg)
    m, t = cfg["model"], cfg["train"]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for norm in m["norm"]:
        runs = []
        for seed in t["seeds"]:
            spec = ModelSpec(train_set.d, [LayerSpec(w, norm, "relu") for w in m["hidden"]],
                             train_set.classes)
            tcfg = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                               momentum=t["momentum"], lr_halving_period=t["lr_halving_period"],
                               seed=seed, swbn_alpha=m["alpha"], backward_mode=m["backward_mode"],
                               eta=m["eta"], eps=m["eps"], iternorm_t=m["iternorm_t"],
                               record_time=t["record_time"])
            model = Model.build(spec, seed, alpha=m["alpha"], eta=m["eta"], eps=m["eps"],
                                iternorm_t=m["iternorm_t"], backward_mode=m["backward_mode"])
            log.info("training norm=%s seed=%d", norm, seed)
            rows = train(model, train_set, test_set, tcfg)
            write_metrics_csv(cfg.out_dir / f"metrics_{norm}_seed{seed}.csv", rows)
            save_model(cfg.out_dir / f"model_{norm}_seed{seed}.json", model)
            final = rows[-1]
            print(f"{norm} seed={seed} epoch={final.epoch} test_loss={final.loss:.4f} "
                  f"test_acc={final.accuracy:.4f}")
            runs.append(rows)
        if len(runs) > 1:
            write_aggregate(cfg.out_dir / f"aggregate_{norm}.csv", runs)
    return EXIT_OK


def _alpha_tag(alpha: float) -> str:
    return ("%g" % alpha).replace("+", "")


def cmd_whiten_demo(cfg: ExperimentConfig) -> int:
    w = cfg["whiten"]
    if w["sigma_csv"]:
        sigma = to_correlation(read_csv(w["sigma_csv"]))
    else:
        sigma = equicorrelation(w["d"], w["rho"])
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    summary = ["criterion,alpha,iterations,final_distance,converged"]
    for crit in w["criteria"]:
        for alpha in w["alphas"]:
            _, report = whiten_iterate(sigma, crit, alpha, w["max_iters"], w["tol"])
            report.to_csv(cfg.out_dir / f"whiten_{crit}_alpha{_alpha_tag(alpha)}.csv")
            summary.append(f"{crit},{'%.17g' % alpha},{report.iterations},"
                           f"{'%.17g' % report.final_distance},{int(report.converged)}")
            print(f"{crit} alpha={alpha:g} iterations={report.iterations} "
                  f"distance={report.final_distance:.3e} converged={report.converged}")
    (cfg.out_dir / "whiten_summary.csv").write_text("\n".join(summary) + "\n")
    return EXIT_OK


def cmd_heatmap(cfg: ExperimentConfig) -> int:
    ckpt = Path(cfg["heatmap"]["checkpoint"])
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model = load_model(ckpt)
    _, test_set = load_datasets(cfg)
    x = test_set.features[:, :cfg["heatmap"]["samples"]]
    feats = model.last_norm_features(x)
    if feats is None:
        raise ConfigError("checkpointed model has no normalization layer")
    corr = correlation(feats)
    score = mean_abs_offdiag(corr)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out_dir / "heatmap.csv", corr)
    # |corr| so that darker pixels mean weaker correlation
    write_pgm(cfg.out_dir / "heatmap.pgm", np.abs(corr))
    (cfg.out_dir / "heatmap_summary.csv").write_text(
        f"checkpoint,d,samples,mean_abs_offdiag\n{ckpt.name},{corr.shape[0]},{x.shape[1]},{'%.17g' % score}\n")
    print(f"mean_abs_offdiag={score:.6f} d={corr.shape[0]} samples={x.shape[1]}")
    return EXIT_OK


def layer_step(layer: str, x: np.ndarray, grad_out: np.ndarray, T: int):
    """``(forward, backward)`` closures over a fresh layer of the given kind."""
    d = x.shape[0]
    if layer == "bn":
        state = baselines.BnState.fresh(d)
        return (lambda c: baselines.bn_forward_train(x, state),
                lambda cache: baselines.bn_backward(grad_out, cache, state))
    if layer == "iternorm":
        state = baselines.IterNormState.fresh(d, T=T)
        return (lambda c: baselines.iternorm_forward_train(x, state, c),
                lambda cache: baselines.iternorm_backward(grad_out, cache, state))
    state = swbn.SwbnState.fresh(d, layer.split("-")[1])
    return (lambda c: swbn.forward_train(x, state, c),
            lambda cache: swbn.backward(grad_out, cache, state))


def bench_layers(layers, x: np.ndarray, grad_out: np.ndarray, T: int,
                 repeats: int, warmup: int) -> dict[str, tuple[list[float], int]]:
    """Time forward+backward passes, interleaving the layers run by run.

    Interleaving spreads any drift in machine speed evenly over the layers.
    The forward multiplication count comes from one untimed call per layer.
    """
    steps = {name: layer_step(name, x, grad_out, T) for name in layers}
    counts = {}
    for name, (fwd, _) in steps.items():
        counter = OpCounter()
        out, cache = fwd(counter)
        del out, cache
        counts[name] = counter.matmul_mults
    times = {name: [] for name in layers}
    for i in range(max(warmup - 1, 0) + repeats):
        for name, (fwd, bwd) in steps.items():
            start = time.perf_counter()
            out, cache = fwd(None)
            del out
            grads = bwd(cache)
            elapsed = (time.perf_counter() - start) * 1e3
            del cache, grads
            if i >= max(warmup - 1, 0):
                times[name].append(elapsed)
    return {name: (times[name], counts[name]) for name in layers}


def cmd_bench(cfg: ExperimentConfig) -> int:
    b = cfg["bench"]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["layer,d,n,T,mean_ms,std_ms,matmul_count"]
    for d in b["d"]:
        rng = make_rng(b["seed"], d)
        x = rng.standard_normal((d, b["n"]))
        grad_out = rng.standard_normal((d, b["n"]))
        results = bench_layers(b["layers"], x, grad_out, b["t"], b["repeats"], b["warmup"])
        for layer in b["layers"]:
            times, count = results[layer]
            arr = np.array(times)
            t_col = str(b["t"]) if layer == "iternorm" else ""
            lines.append(f"{layer},{d},{b['n']},{t_col},{arr.mean():.6f},{arr.std():.6f},{count}")
            print(f"{layer} d={d} mean={arr.mean():.2f}ms std={arr.std():.2f}ms matmul={count}")
        del x, grad_out
    (cfg.out_dir / "bench.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "whiten-demo": cmd_whiten_demo,
    "heatmap": cmd_heatmap,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="swbnlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="INI experiment file")
    parser.add_argument("--out", help="output directory (overrides [output] out_dir)")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command, args.out)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, DivergenceError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
