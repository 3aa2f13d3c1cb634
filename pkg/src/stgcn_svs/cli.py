"""Command-line surface: generate / train / crossval / eval / assess /
explain / gradcheck.

Exit codes: generate uses 2 for invalid configuration and 1 for I/O failure;
train, crossval and eval use 2 for configuration errors, 3 for dataset or
class errors and 4 when training hits non-finite values; assess answers with
0 (stable) or 10 (unstable) so scripts can branch on the verdict, and 2 on
any error; gradcheck returns 1 when a parameter group fails its tolerance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import datagen as dg
from . import trainer as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NonFiniteValue, SingleClassDataset, StgcnError
from .graph import GENERATORS, load_topology, make_random_connected
from .ioutil import atomic_write_text
from .model import (
    LABEL_NAMES,
    ModelConfig,
    ModelParams,
    NormStats,
    SvsSample,
    bank_for,
    forward_batch,
    influence_weights,
)


def _model_flags(p):
    p.add_argument("--cheb-order", type=int, default=2, help="Chebyshev order K")
    p.add_argument("--blocks", type=int, default=5, help="stacked block count")
    p.add_argument("--hidden", type=int, default=8, help="hidden width per channel")
    p.add_argument("--kernel", type=int, default=3, help="temporal kernel length (odd)")
    p.add_argument("--dropout", type=float, default=0.2)


def _train_flags(p):
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--steps", type=int, default=48, help="steps per epoch")
    p.add_argument("--lr", type=float, default=1e-3)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stgcn-svs",
        description="Spatial-temporal graph convolutional voltage-stability assessment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a labeled synthetic dataset")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--topology", help="edge-list topology file")
    src.add_argument("--gen", choices=sorted(GENERATORS), help="topology generator")
    g.add_argument("--n", type=int, default=10, help="bus count for --gen")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--severity-range", nargs=2, type=float, default=(0.3, 1.0),
                   metavar=("LO", "HI"))
    g.add_argument("--motor-ratios", default="0.3,0.5,0.7,0.9",
                   help="comma-separated choices")
    g.add_argument("--fault-bus", type=int, default=None,
                   help="fix the faulted bus (default: random per case)")
    g.add_argument("--snr", default="none", help="noise SNR in dB, or 'none'")
    g.add_argument("--perturb", type=int, default=0,
                   help="random topology changes before generation")
    g.add_argument("--sample-rate", type=float, default=25.0)
    g.add_argument("--window-seconds", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--test-fraction", type=float, default=0.2,
                   help="held-out fraction for per-epoch test accuracy")
    _model_flags(t)
    _train_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("crossval", help="k-fold cross-validation")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--workers", type=int, default=None,
                   help="parallel fold workers (default: STGCN_THREADS or cpu count)")
    _model_flags(c)
    _train_flags(c)
    c.set_defaults(func=cmd_crossval)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="write metrics JSON here")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("assess", help="assess one case (exit 0 stable / 10 unstable)")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--sample", required=True, help="sample JSON file")
    a.add_argument("--topology", required=True, help="edge-list topology file")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_assess)

    x = sub.add_parser("explain", help="per-bus influence weights of a checkpoint")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--csv", default=None, help="also write the table as CSV")
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_explain)

    d = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    d.add_argument("--tol", type=float, default=1e-4)
    d.add_argument("--buses", type=int, default=5)
    d.add_argument("--window", type=int, default=10)
    d.add_argument("--hidden", type=int, default=2)
    d.add_argument("--blocks", type=int, default=2)
    d.add_argument("--cheb-order", type=int, default=2)
    d.add_argument("--h", dest="fd_h", type=float, default=1e-5,
                   help="finite-difference step")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_gradcheck)
    return parser


def _print_seed(args):
    print(f"seed: {args.seed}")


def _load_data(path):
    try:
        return dg.load_dataset(path)
    except FileNotFoundError as e:
        raise StgcnError(f"dataset not found: {e}") from e


def _model_config(args, dataset):
    return ModelConfig(
        num_buses=dataset.n, window_len=dataset.window_len,
        cheb_order=args.cheb_order, num_blocks=args.blocks, hidden=args.hidden,
        kernel_t=args.kernel, dropout_rate=args.dropout,
    )


def _train_config(args, folds=5):
    return tr.TrainConfig(
        batch_size=args.batch, epochs=args.epochs, steps_per_epoch=args.steps,
        learning_rate=args.lr, seed=args.seed, folds=folds,
    )


def _echo_config(mc, tc):
    print(f"config: K={mc.cheb_order} blocks={mc.num_blocks} hidden={mc.hidden} "
          f"kernel_t={mc.kernel_t} dropout={mc.dropout_rate} lr={tc.learning_rate} "
          f"batch={tc.batch_size} steps={tc.steps_per_epoch} epochs={tc.epochs}")


def cmd_generate(args):
    _print_seed(args)
    if args.topology:
        topology = load_topology(args.topology)
    else:
        topology = GENERATORS[args.gen](args.n, args.seed)
    perturb_changes = None
    if args.perturb:
        topology = dg.perturb_topology(topology, args.perturb, seed=args.seed)
        perturb_changes = args.perturb
    motor = tuple(float(v) for v in args.motor_ratios.split(","))
    cfg = dg.ScenarioConfig(
        fault_bus=args.fault_bus,
        severity=tuple(args.severity_range),
        motor_ratio=motor if len(motor) > 1 else motor[0],
        sample_rate=args.sample_rate,
        window_seconds=args.window_seconds,
        seed=args.seed,
    )
    dataset = dg.generate(topology, cfg, args.count)
    snr = None if str(args.snr).lower() == "none" else float(args.snr)
    if snr is not None:
        dataset = dg.add_noise(dataset, snr, seed=args.seed)
    dataset.perturb_changes = perturb_changes
    try:
        dg.save_dataset(dataset, args.out)
    except OSError as e:
        print(f"error: cannot write dataset: {e}", file=sys.stderr)
        return 1
    balance = dataset.class_balance()
    print(f"wrote {len(dataset)} cases to {args.out}")
    print(f"class balance: stable={balance['stable']} unstable={balance['unstable']} "
          f"({balance['unstable_fraction']:.1%} unstable)")
    if 0 < balance["unstable_fraction"] < 1:
        sig = dg.spatial_signal_report(dataset)
        print(f"label/voltage mutual information: fault neighborhood "
              f"{sig['fault_neighborhood_mi']:.3f}, remote bus {sig['remote_bus_mi']:.3f}")
    return 0


def cmd_train(args):
    _print_seed(args)
    dataset = _load_data(args.data)
    mc = _model_config(args, dataset)
    tc = _train_config(args)
    _echo_config(mc, tc)
    test_ds = None
    train_ds = dataset
    if args.test_fraction > 0:
        if not args.test_fraction < 1:
            raise StgcnError("--test-fraction must be in [0, 1)")
        perm = np.random.default_rng(args.seed).permutation(len(dataset))
        n_test = max(1, int(round(args.test_fraction * len(dataset))))
        test_ds = dataset.subset(np.sort(perm[:n_test]))
        train_ds = dataset.subset(np.sort(perm[n_test:]))
        print(f"split: {len(train_ds)} train / {len(test_ds)} test")
    result = tr.train(train_ds, mc, tc, test_dataset=test_ds)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    result.save(ckpt_path, with_state=True)
    result.save_best(os.path.join(args.out, "checkpoint_best.json"))
    atomic_write_text(os.path.join(args.out, "metrics.csv"),
                      tr.metrics_csv_text(result.history))
    final = result.history[-1]
    summary = {
        "seed": args.seed,
        "epochs": len(result.history),
        "final_loss": final.loss,
        "final_train_acc": final.train_acc,
        "final_test_acc": final.test_acc,
        "best_test_acc": result.best_test_acc,
        "best_epoch": result.best_epoch,
        "accepted": result.accepted,
        "parameters": result.params.count(),
    }
    atomic_write_text(os.path.join(args.out, "summary.json"),
                      json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for h in result.history:
        test = "-" if h.test_acc is None else f"{h.test_acc:.3f}"
        print(f"epoch {h.epoch:3d}  loss {h.loss:.4f}  train {h.train_acc:.3f}  test {test}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_crossval(args):
    _print_seed(args)
    dataset = _load_data(args.data)
    mc = _model_config(args, dataset)
    tc = _train_config(args, folds=args.folds)
    _echo_config(mc, tc)
    result = tr.kfold(dataset, args.folds, mc, tc, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    report = {"seed": args.seed, "folds": [], "mean_train_acc": result.mean_train_acc,
              "mean_test_acc": result.mean_test_acc,
              "mean_final_loss": result.mean_final_loss}
    for f in result.folds:
        atomic_write_text(os.path.join(args.out, f"fold{f.fold}_metrics.csv"),
                          tr.metrics_csv_text(f.history))
        save_checkpoint(os.path.join(args.out, f"fold{f.fold}_checkpoint.json"),
                        mc, f.params(mc), f.checkpoint(mc).stats)
        report["folds"].append({
            "fold": f.fold, "train_acc": f.final_train_acc,
            "test_acc": f.final_test_acc, "loss": f.final_loss,
            "best_test_acc": f.best_test_acc,
        })
        print(f"fold {f.fold}: train {f.final_train_acc:.3f}  "
              f"test {f.final_test_acc:.3f}  loss {f.final_loss:.4f}")
    atomic_write_text(os.path.join(args.out, "crossval.json"),
                      json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"mean: train {result.mean_train_acc:.3f}  test {result.mean_test_acc:.3f}")
    return 0


def cmd_eval(args):
    _print_seed(args)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    metrics = tr.evaluate(ckpt, dataset)
    print(f"accuracy: {metrics.accuracy:.4f} on {metrics.count} cases")
    print(f"confusion: tp={metrics.tp} tn={metrics.tn} fp={metrics.fp} fn={metrics.fn}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "metrics.json"),
                          json.dumps(metrics.to_dict(), sort_keys=True, indent=2) + "\n")
    return 0


def cmd_assess(args):
    _print_seed(args)
    ckpt = load_checkpoint(args.checkpoint)
    sample, _ = dg.load_sample_json(args.sample)
    topology = load_topology(args.topology)
    cfg = ckpt.config
    if topology.n != cfg.num_buses or sample.num_buses != cfg.num_buses \
            or sample.window_len != cfg.window_len:
        raise StgcnError(
            f"dimension mismatch: sample (N={sample.window_len}, n={sample.num_buses}), "
            f"topology n={topology.n}, model (N={cfg.window_len}, n={cfg.num_buses})"
        )
    bank = bank_for(topology, cfg.cheb_order)
    out = forward_batch(sample.panel()[None], None, bank, ckpt.params, ckpt.stats)
    p_stable, p_unstable = out["probs"][0]
    verdict = LABEL_NAMES[int(out["predicted"][0])]
    print(f"probs: stable={p_stable:.4f} unstable={p_unstable:.4f}")
    print(f"verdict: {verdict}")
    return 0 if verdict == "stable" else 10


def cmd_explain(args):
    _print_seed(args)
    ckpt = load_checkpoint(args.checkpoint)
    s = influence_weights(ckpt.params.assign)
    order = np.argsort(s, kind="stable")
    lines = ["bus,influence,sign"]
    print(f"{'bus':>4}  {'influence':>12}  sign")
    for i in order:
        sign = "+" if s[i] > 0 else ("-" if s[i] < 0 else "0")
        print(f"{i:>4}  {s[i]:>12.6f}  {sign}")
        lines.append(f"{i},{float(s[i])!r},{sign}")
    if args.csv:
        atomic_write_text(args.csv, "\n".join(lines) + "\n")
        print(f"wrote {args.csv}")
    return 0


def cmd_gradcheck(args):
    _print_seed(args)
    rng = np.random.default_rng(args.seed)
    topology = make_random_connected(args.buses, extra_edges=args.buses // 2,
                                     seed=args.seed)
    cfg = ModelConfig(
        num_buses=args.buses, window_len=args.window, cheb_order=args.cheb_order,
        num_blocks=args.blocks, hidden=args.hidden, kernel_t=3, dropout_rate=0.0,
    )
    params = ModelParams.init(cfg, rng)
    sample = SvsSample(
        V=rng.normal(1.0, 0.1, size=(args.window, args.buses)),
        P=rng.normal(0.0, 0.5, size=(args.window, args.buses)),
        Q=rng.normal(0.0, 0.5, size=(args.window, args.buses)),
        label=1,
    )
    bank = bank_for(topology, cfg.cheb_order)
    stats = NormStats.identity()

    def loss():
        out = forward_batch(sample.panel()[None], np.array([sample.label]),
                            bank, params, stats)
        return out["loss"]

    report = ad.grad_check(loss, list(params), h=args.fd_h, tol=args.tol)
    for line in report.lines():
        print(line)
    print(f"max relative error: {report.max_error:.3e} (tol {args.tol:g})")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


_CONFIG_ERRORS = (StgcnError,)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    is_generate = args.command == "generate"
    is_assess = args.command == "assess"
    try:
        return args.func(args)
    except NonFiniteValue as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if is_assess else 4
    except SingleClassDataset as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if (is_generate or is_assess) else 3
    except StgcnError as e:
        print(f"error: {e}", file=sys.stderr)
        if is_assess:
            return 2
        if args.command in ("train", "crossval", "eval") and "dataset" in str(e).lower():
            return 3
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1 if is_generate else 2


if __name__ == "__main__":
    sys.exit(main())
