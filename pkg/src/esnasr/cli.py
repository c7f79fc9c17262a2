"""Command-line driver: ``esnasr {gen-data,train,eval,bench,inspect,reproduce}``."""
from __future__ import annotations

import argparse
import json
import statistics
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from .cells import param_count
from .data import dump_jsonl
from .errors import DivergenceError, EsnAsrError, InvalidConfigError, ModelFileError
from .experiments import (ExperimentConfig, evaluate, longform_dataset, run_training,
                          test_dataset, train_dataset)
from .numerics import estimate_spectral_radius
from .persistence import load_model, save_model, size_breakdown
from .training import batch_order, make_optimizer, train_step
from .transducer import build_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
EXIT_CORRUPT = 5

MODEL_FILE = "model.esrm"
LOG_FILE = "train_log.jsonl"
EXPERIMENT_FILE = "experiment.json"


def _common(p: argparse.ArgumentParser, out_required=False):
    p.add_argument("--seed", type=int, default=0, help="model / training seed")
    p.add_argument("--out", required=out_required, help="output path")
    p.add_argument("--config", default="baseline",
                   help="baseline | rnnt-e | rnnt-d | progressive-K")
    p.add_argument("--enc-dim", type=int, default=64)
    p.add_argument("--dec-dim", type=int, default=64)
    p.add_argument("--joint-dim", type=int, default=64)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--longform-k", type=int, default=10, help="utterances per long-form example")
    p.add_argument("--longform-n", type=int, default=50, help="number of long-form examples")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=ExperimentConfig.lr)
    p.add_argument("--train-size", type=int, default=5000)
    p.add_argument("--test-size", type=int, default=500)
    p.add_argument("--data-seed", type=int, default=ExperimentConfig.data_seed)
    p.add_argument("--embedding-scale", type=float, default=ExperimentConfig.embedding_scale)
    p.add_argument("--noise-sigma", type=float, default=ExperimentConfig.noise_sigma)


def _experiment(args, **overrides) -> ExperimentConfig:
    exp = ExperimentConfig(
        config=args.config, seed=args.seed, steps=args.steps, batch_size=args.batch_size,
        lr=args.lr, enc_dim=args.enc_dim, dec_dim=args.dec_dim, joint_dim=args.joint_dim,
        vocab=args.vocab, train_size=args.train_size, test_size=args.test_size,
        data_seed=args.data_seed, embedding_scale=args.embedding_scale,
        noise_sigma=args.noise_sigma, longform_k=args.longform_k, longform_n=args.longform_n)
    exp = replace(exp, **overrides)
    exp.model_config()   # validates the configuration name and dims early
    return exp


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    exp = _experiment(args)
    if args.split == "train":
        data = train_dataset(exp)
    elif args.split == "test":
        data = test_dataset(exp)
    else:
        data = longform_dataset(exp)
    n = dump_jsonl(data, args.out)
    print(json.dumps({"split": args.split, "utterances": n, "out": args.out}))
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / EXPERIMENT_FILE, exp.to_dict())
    model_cfg = exp.model_config()
    log_path = out / LOG_FILE
    with open(log_path, "w", encoding="utf-8") as log:
        def on_step(rec):
            log.write(json.dumps({"step": rec.step, "loss": rec.loss, "wall_ms": rec.wall_ms,
                                  "grad_norm": rec.grad_norm}) + "\n")
        try:
            model, report = run_training(exp, on_step=on_step)
        except DivergenceError as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGENCE
    size = save_model(model, out / MODEL_FILE)
    trainable = sorted(n for n, _, t in model.named_tensors() if t)
    frozen = sorted(n for n, _, t in model.named_tensors() if not t)
    summary = {
        "config": exp.config, "steps": len(report.records),
        "final_loss": report.losses[-1] if report.records else None,
        "model_file": str(out / MODEL_FILE), "model_bytes": size,
        "trainable_tensors": trainable, "frozen_tensors": frozen,
        "encoder_layers": [s.kind for s in model_cfg.encoder_layers],
        "decoder_layers": [s.kind for s in model_cfg.decoder_layers],
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _experiment_for_model(model_path: Path, args) -> ExperimentConfig:
    sidecar = model_path.parent / EXPERIMENT_FILE
    if sidecar.exists():
        exp = ExperimentConfig.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
    else:
        exp = _experiment(args)
    overrides = {}
    if args.longform_k is not None:
        overrides["longform_k"] = args.longform_k
    if args.longform_n is not None:
        overrides["longform_n"] = args.longform_n
    if args.test_size is not None:
        overrides["test_size"] = args.test_size
    return replace(exp, **overrides)


def format_wer_table(rows: list) -> str:
    head = f"{'split':<12}{'utts':>6}{'WER':>9}{'S':>6}{'I':>6}{'D':>6}"
    lines = [head, "-" * len(head)]
    for name, r in rows:
        lines.append(f"{name:<12}{r['utterances']:>6}{100 * r['wer']:>8.2f}%"
                     f"{r['substitutions']:>6}{r['insertions']:>6}{r['deletions']:>6}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    model_path = Path(args.model)
    model = load_model(model_path)
    exp = _experiment_for_model(model_path, args)
    test = test_dataset(exp)
    rows = [("test", evaluate(model, test)),
            ("longform", evaluate(model, longform_dataset(exp, test)))]
    if args.train_subset:
        rows.insert(0, ("train", evaluate(model, train_dataset(exp)[:args.train_subset])))
    report = {"model": str(model_path), "longform_k": exp.longform_k,
              "splits": {name: r for name, r in rows}}
    print(format_wer_table(rows))
    if args.out:
        _write_json(args.out, report)
    return EXIT_OK


def bench(configs, exp: ExperimentConfig, steps: int, warmup: int = 5) -> dict:
    """Time ``train_step`` for several configurations on identical batches, alternating per step.

    Results are listed in ``configs`` order, so the same name may appear twice.
    """
    data = train_dataset(exp)
    order = batch_order(len(data), exp.batch_size, exp.seed)
    batches = [[data[i] for i in next(order)] for _ in range(steps + warmup)]
    runs = []
    for name in configs:
        model = build_model(replace(exp, config=name).model_config())
        runs.append({"config": name, "model": model,
                     "opt": make_optimizer(model, exp.optimizer, exp.lr),
                     "wall_ms": [], "updated_tensors": 0})
    for k, batch in enumerate(batches):
        for run in runs:
            rec = train_step(run["model"], batch, run["opt"])
            run["updated_tensors"] = rec.updated_tensors
            if k >= warmup:
                run["wall_ms"].append(rec.wall_ms)
    results = []
    for run in runs:
        w, model = run["wall_ms"], run["model"]
        results.append({
            "config": run["config"], "mean_ms": statistics.fmean(w),
            "stdev_ms": statistics.stdev(w) if len(w) > 1 else 0.0,
            "updated_tensors": run["updated_tensors"],
            "trainable_params": model.num_trainable(), "frozen_nonzeros": model.num_frozen()})
    base = results[0]["mean_ms"]
    return {"steps": steps, "warmup": warmup, "batch_size": exp.batch_size, "results": results,
            "ratios": [r["mean_ms"] / base for r in results]}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def cmd_bench(args) -> int:
    exp = _experiment(args)
    configs = [args.config_a, args.config_b]
    for name in configs:
        replace(exp, config=name).model_config()
    with _thread_limit(None if args.threads == 0 else args.threads):
        report = bench(configs, exp, args.bench_steps)
    print(f"{'config':<16}{'mean ms':>10}{'stdev':>9}{'updated':>9}{'trainable':>11}")
    for r in report["results"]:
        print(f"{r['config']:<16}{r['mean_ms']:>10.2f}{r['stdev_ms']:>9.2f}{r['updated_tensors']:>9}"
              f"{r['trainable_params']:>11}")
    print(f"ratio {configs[1]}/{configs[0]} = {report['ratios'][1]:.3f}")
    if args.out:
        _write_json(args.out, report)
    return EXIT_OK


def inspect_model(model, file_bytes=None) -> dict:
    tensors = []
    for name, value, trainable in model.named_tensors():
        if trainable:
            tensors.append({"name": name, "shape": list(value.shape), "trainable": True,
                            "count": int(value.size)})
        else:
            tensors.append({"name": name, "shape": list(value.shape), "trainable": False,
                            "count": int(value.nnz)})
    layers = []
    cfg = model.config
    for stack_name, stack, specs in (("encoder", model.encoder, cfg.encoder_layers),
                                     ("decoder", model.decoder, cfg.decoder_layers)):
        for i, (layer, spec) in enumerate(zip(stack, specs)):
            entry = {"stack": stack_name, "index": i, "kind": spec.kind,
                     "input_dim": layer.input_dim, "state_dim": layer.state_dim}
            if spec.kind == "esn":
                radius = estimate_spectral_radius(layer.w_res)
                entry.update({"trainable_params": 2, "frozen_nonzeros": layer.w_res.nnz + layer.w_in.nnz,
                              "spectral_radius": radius, "rho": float(layer.rho),
                              "gamma": float(layer.gamma),
                              "effective_radius": abs(float(layer.rho)) * radius,
                              "simple_rnn_equivalent": param_count("rnn", layer.input_dim,
                                                                   layer.state_dim),
                              "seed": layer.config.seed})
            else:
                entry.update({"trainable_params": param_count(spec.kind, layer.input_dim,
                                                              layer.state_dim)})
            layers.append(entry)
    sizes = size_breakdown(model)
    return {
        "tensors": tensors, "layers": layers,
        "totals": {"trainable_params": model.num_trainable(),
                   "frozen_nonzeros": model.num_frozen()},
        "file_size": {"header": sizes.header, "config": sizes.config,
                      "reservoir_records": sizes.reservoirs, "tensor_headers": sizes.tensor_headers,
                      "tensor_payload": sizes.tensor_payload, "trailer": sizes.trailer,
                      "predicted_total": sizes.total, "actual_total": file_bytes},
    }


def cmd_inspect(args) -> int:
    path = Path(args.model)
    model = load_model(path)
    info = inspect_model(model, path.stat().st_size)
    if args.json:
        print(json.dumps(info, indent=2))
        return EXIT_OK
    print(f"{'tensor':<22}{'shape':<14}{'tag':<10}{'count':>9}")
    for t in info["tensors"]:
        tag = "trainable" if t["trainable"] else "frozen"
        print(f"{t['name']:<22}{'x'.join(map(str, t['shape'])) or 'scalar':<14}{tag:<10}{t['count']:>9}")
    print()
    for l in info["layers"]:
        line = f"{l['stack']}.{l['index']} {l['kind']:<5} {l['input_dim']}->{l['state_dim']}" \
               f"  trainable={l['trainable_params']}"
        if l["kind"] == "esn":
            line += (f"  radius={l['spectral_radius']:.6f} rho={l['rho']:.4f} "
                     f"gamma={l['gamma']:.4f} seed={l['seed']}")
        print(line)
    t = info["totals"]
    print(f"\ntrainable params: {t['trainable_params']}   frozen nonzeros: {t['frozen_nonzeros']}")
    fs = info["file_size"]
    print("file bytes: " + ", ".join(f"{k}={v}" for k, v in fs.items()))
    return EXIT_OK


def format_table(title: str, header: list, rows: list) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [title, fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def cmd_reproduce(args) -> int:
    base = _experiment(args)
    names = (["baseline", "rnnt-e", "rnnt-d"] if args.table == 1
             else ["progressive-2", "progressive-1", "progressive-0"])
    results = {}
    for name in names:
        exp = replace(base, config=name)
        test = test_dataset(exp)
        model, _ = run_training(exp)
        results[name] = {"test": evaluate(model, test),
                         "longform": evaluate(model, longform_dataset(exp, test))}
    if args.table == 1:
        rows = [[n, base.dec_dim, f"{100 * r['test']['wer']:.2f}", f"{100 * r['longform']['wer']:.2f}"]
                for n, r in results.items()]
        print(format_table("WER (%) by configuration", ["Model", "Dec dim", "test", "longform"], rows))
    else:
        rows = [[n.split("-")[1], f"{100 * r['test']['wer']:.2f}"] for n, r in results.items()]
        print(format_table("Progressive encoder training", ["Num. ESN layers", "WER"], rows))
    if args.out:
        _write_json(args.out, {"experiment": base.to_dict(), "results": results})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esnasr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic split as JSON-lines")
    _common(p, out_required=True)
    p.add_argument("--split", choices=("train", "test", "longform"), default="train")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration and save it")
    _common(p, out_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="token error rate on test and long-form splits")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--train-subset", type=int, default=0,
                   help="also score the first N training utterances")
    p.set_defaults(func=cmd_eval, longform_k=None, longform_n=None, test_size=None)

    p = sub.add_parser("bench", help="compare train_step wall time of two configurations")
    _common(p)
    p.add_argument("--config-a", default="baseline")
    p.add_argument("--config-b", default="rnnt-d")
    p.add_argument("--bench-steps", type=int, default=100)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads; 0 leaves the default")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="summarise a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("reproduce", help="train and tabulate the configuration comparison")
    _common(p)
    p.add_argument("--table", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ModelFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EsnAsrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
