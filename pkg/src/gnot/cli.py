"""Command-line interface: gen-data, train, eval, bench, gradcheck.

Configuration is plain INI text with [model], [data], [train], and [output]
sections; command-line flags override file values, and the effective
configuration is echoed into the output directory.  Unknown sections or keys
are rejected, and validation problems are reported all at once.  Reports are
CSV and JSON text so downstream checks can be scripted without this tool.
"""

import argparse
import configparser
import json
import os
import sys

import numpy as np

from .benchmark import DEFAULT_SIZES, run_scaling_benchmark
from .data import GENERATORS, load_dataset, make_dataset, save_dataset
from .errors import GnotError
from .gradcheck import PROBE_KINDS, gradient_check, probe_model_and_sample
from .model import GnotModel, ModelConfig
from .training import (
    TrainConfig,
    evaluate_model,
    load_checkpoint,
    metric_report,
    save_checkpoint,
    train,
)

_SCHEMA = {
    "model": {
        "embed_dim": (int, 64),
        "heads": (int, 4),
        "experts": (int, 1),
        "blocks": (int, 3),
        "expert_hidden": (int, 0),
        "encoder_layers": (int, 3),
        "gate_hidden": (int, 32),
        "block_order": (str, "cross+self"),
        "gate_mode": (str, "learned"),
    },
    "data": {
        "dataset": (str, ""),
        "generator": (str, ""),
        "n_samples": (int, 1100),
        "points": (int, 128),
        "k_max": (int, 4),
        "gen_seed": (int, 0),
        "test_samples": (int, 100),
    },
    "train": {
        "epochs": (int, 100),
        "batch_size": (int, 16),
        "max_lr": (float, 1e-3),
        "weight_decay": (float, 1e-4),
        "grad_clip_norm": (float, 1.0),
        "seed": (int, 0),
        "val_fraction": (float, 0.1),
        "schedule": (str, "onecycle"),
        "div_factor": (float, 25.0),
        "final_div_factor": (float, 1e4),
        "pct_warmup": (float, 0.3),
        "gamma": (float, 0.9995),
    },
    "output": {
        "dir": (str, "gnot-run"),
    },
}


def read_run_config(path=None):
    """Schema-validated config: defaults, overlaid with the file if given.

    Every problem (unknown section, unknown key, bad value) is collected and
    reported together.
    """
    values = {sec: {k: default for k, (_, default) in keys.items()}
              for sec, keys in _SCHEMA.items()}
    if path is None:
        return values
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise GnotError(f"cannot read config file '{path}'")
    problems = []
    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                problems.append(f"unknown key '{key}' in [{section}]")
                continue
            cast = _SCHEMA[section][key][0]
            try:
                values[section][key] = cast(raw)
            except ValueError:
                problems.append(f"[{section}] {key}: cannot parse '{raw}' as {cast.__name__}")
    if problems:
        raise GnotError("invalid config:\n  " + "\n  ".join(problems))
    return values


def write_effective_config(values, path):
    parser = configparser.ConfigParser()
    for section, keys in values.items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                           for k, v in keys.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def _generate(data_cfg):
    name = data_cfg["generator"]
    if name not in GENERATORS:
        raise GnotError(f"[data] generator: '{name}' not one of {sorted(GENERATORS)}")
    kwargs = dict(n_samples=data_cfg["n_samples"], n_points=data_cfg["points"],
                  seed=data_cfg["gen_seed"])
    if name == "antiderivative":
        kwargs["k_max"] = data_cfg["k_max"]
    return GENERATORS[name](**kwargs)


def _resolve_dataset(data_cfg):
    if data_cfg["dataset"]:
        return load_dataset(data_cfg["dataset"])
    if data_cfg["generator"]:
        return _generate(data_cfg)
    raise GnotError("config must set [data] dataset or [data] generator")


def _model_config_from(values, meta, seed):
    m = values["model"]
    return ModelConfig(
        coord_dim=meta.coord_dim,
        out_dim=meta.out_dim,
        slots=meta.slots,
        embed_dim=m["embed_dim"],
        num_heads=m["heads"],
        num_blocks=m["blocks"],
        num_experts=m["experts"],
        expert_hidden=m["expert_hidden"],
        encoder_layers=m["encoder_layers"],
        gate_hidden=m["gate_hidden"],
        block_order=m["block_order"],
        gate_mode=m["gate_mode"],
        seed=seed,
    )


def _train_config_from(values):
    t = values["train"]
    return TrainConfig(**t)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.task not in GENERATORS:
        raise GnotError(f"unknown task '{args.task}' (choose from {sorted(GENERATORS)})")
    data_cfg = {
        "generator": args.task,
        "n_samples": args.n,
        "points": args.points,
        "k_max": args.k_max,
        "gen_seed": args.seed,
    }
    dataset = _generate(data_cfg)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    print("oracle validation: ok (every target checked at generation time)")
    return 0


def cmd_train(args):
    values = read_run_config(args.config)
    if args.seed is not None:
        values["train"]["seed"] = args.seed
    if args.out is not None:
        values["output"]["dir"] = args.out
    if args.block_order is not None:
        values["model"]["block_order"] = args.block_order
    if args.experts is not None:
        values["model"]["experts"] = args.experts
    if args.epochs is not None:
        values["train"]["epochs"] = args.epochs

    dataset = _resolve_dataset(values["data"])
    n_test = values["data"]["test_samples"]
    if n_test >= len(dataset):
        raise GnotError(f"[data] test_samples: {n_test} leaves no training data "
                        f"(dataset has {len(dataset)} samples)")
    test_samples = dataset.samples[-n_test:] if n_test > 0 else []
    train_ds = make_dataset(dataset.samples[: len(dataset) - n_test])

    out_dir = values["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_effective_config(values, os.path.join(out_dir, "effective_config.ini"))

    seed = values["train"]["seed"]
    train_cfg = _train_config_from(values)
    resume = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = GnotModel(ckpt.model_config, stats=ckpt.stats)
        resume = ckpt.state
    else:
        model = GnotModel(_model_config_from(values, train_ds.meta, seed))

    def log(row):
        print(f"epoch {row['epoch']:4d}  loss {row['train_loss']:.6f}  "
              f"val rel-l2 {row['val_rel_l2']:.6f}  lr {row['lr']:.2e}")

    result = train(model, train_ds, train_cfg, resume=resume, log=log)

    history_path = os.path.join(out_dir, "history.csv")
    with open(history_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_rel_l2,lr\n")
        for row in result.history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['val_rel_l2']!r},{row['lr']!r}\n")

    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    save_checkpoint(ckpt_path, model.config, model.stats, result.best_state,
                    train_config=train_cfg)

    best = GnotModel(model.config, stats=model.stats)
    from .training import _restore_params

    _restore_params(best, result.best_state.params)
    final_samples = test_samples if test_samples else None
    if final_samples is not None:
        report = evaluate_model(best, final_samples)
        scope = "held-out test"
    else:
        report = evaluate_model(best, train_ds.samples)
        scope = "training data"
    report_path = os.path.join(out_dir, "report.json")
    payload = {
        "evaluated_on": scope,
        "best_epoch": result.best_epoch,
        "best_val_rel_l2": result.best_metric,
        "diverged": result.diverged,
        **report.to_dict(),
    }
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(payload, indent=2, sort_keys=True))
    print(f"checkpoint: {ckpt_path}")
    return 1 if result.diverged else 0


def _check_compat(model_config, meta):
    problems = []
    if model_config.coord_dim != meta.coord_dim:
        problems.append(f"coord_dim: checkpoint {model_config.coord_dim}, dataset {meta.coord_dim}")
    if model_config.out_dim != meta.out_dim:
        problems.append(f"out_dim: checkpoint {model_config.out_dim}, dataset {meta.out_dim}")
    if list(model_config.slots) != list(meta.slots):
        problems.append(f"slots: checkpoint {model_config.slots}, dataset {meta.slots}")
    if problems:
        raise GnotError("checkpoint/dataset mismatch:\n  " + "\n  ".join(problems))


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    _check_compat(ckpt.model_config, dataset.meta)
    model = ckpt.build_model()

    from .training import _predictions_for

    preds = _predictions_for(model, dataset.samples, batch_size=32)
    truths = [s.targets for s in dataset.samples]
    if args.self_compare:
        report = metric_report(preds, [p.copy() for p in preds])
        scope = "self-comparison (predictions vs themselves)"
    else:
        report = metric_report(preds, truths)
        scope = args.dataset
    payload = {"evaluated_on": scope, **report.to_dict()}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.per_sample:
        with open(args.per_sample, "w", encoding="utf-8") as fh:
            fh.write("sample,relative_l2\n")
            for i, (p, t) in enumerate(zip(preds, truths)):
                denom = np.linalg.norm(t)
                if denom > 0:
                    fh.write(f"{i},{float(np.linalg.norm(p - t) / denom)!r}\n")
                else:
                    fh.write(f"{i},excluded\n")
        print(f"per-sample relative L2 written to {args.per_sample}")
    return 0


def cmd_bench(args):
    sizes = DEFAULT_SIZES if args.sizes is None else tuple(args.sizes)
    report = run_scaling_benchmark(sizes=sizes, reps=args.reps, seed=args.seed)
    lines = report.csv_lines()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, "bench.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {csv_path}")
    else:
        print("\n".join(lines))
    print(f"direct log-log slope:   {report.direct_slope:.3f}")
    print(f"factored log-log slope: {report.factored_slope:.3f}")
    print(f"max output disagreement: {report.max_disagreement:.3e} "
          f"(gate {report.agreement_tol:g})")
    return 0 if report.outputs_agree else 1


def cmd_gradcheck(args):
    include = tuple(args.include.split(","))
    model, sample = probe_model_and_sample(include=include, seed=args.seed)
    report = gradient_check(model, sample, n_coords=args.coords, seed=args.seed)
    print(f"checked {report.n_coords} coordinates: max relative error {report.max_score:.3e} "
          f"(tolerance 1e-5)")
    if not report.passed():
        print("worst coordinates (autodiff vs finite difference):")
        for name, idx, ad, fd, score in report.worst:
            print(f"  {name}[{idx}]: {ad!r} vs {fd!r}  (score {score:.3e})")
        return 1
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gnot",
        description="operator-learning transformer: data generation, training, "
                    "evaluation, attention benchmarking, gradient checking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("task", choices=sorted(GENERATORS))
    p.add_argument("--n", type=int, default=1100, help="number of samples")
    p.add_argument("--points", type=int, default=128, help="points per sample")
    p.add_argument("--k-max", type=int, default=4, help="sine modes (antiderivative)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model per the run config")
    p.add_argument("--config", help="INI run config")
    p.add_argument("--seed", type=int, help="override [train] seed")
    p.add_argument("--out", help="override [output] dir")
    p.add_argument("--block-order", choices=["cross+self", "self+cross", "cross+cross"])
    p.add_argument("--experts", type=int, help="override [model] experts")
    p.add_argument("--epochs", type=int, help="override [train] epochs")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--per-sample", help="write per-sample relative L2 CSV here")
    p.add_argument("--self-compare", action="store_true",
                   help="compare predictions against themselves (exercises the zero-error path)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="time direct vs factored attention scaling")
    p.add_argument("--out", help="directory for bench.csv")
    p.add_argument("--sizes", type=int, nargs="+", help="override sequence lengths")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="verify autodiff against finite differences")
    p.add_argument("--include", default=",".join(PROBE_KINDS),
                   help="comma-separated encoder kinds to exercise")
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except GnotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
