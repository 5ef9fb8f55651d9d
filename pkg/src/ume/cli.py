"""Command-line entry point: generate data, train, evaluate, run inference.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 1 any
other failure. All outputs land under the command's --out directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, load_into_model
from .config import EvalConfig, load_run_config
from .errors import ConfigError, DivergenceError, UmeError
from .evaluate import evaluate, spans_to_seconds, worker_count
from .metrics import write_report_csv, write_report_json, write_rttm
from .model import ModelConfig, build_model
from .simulate import generate_dataset, read_dataset, read_wav, write_dataset, write_wav
from .trainer import train


def _parser():
    parser = argparse.ArgumentParser(prog="ume",
                                     description="unified multi-speaker encoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="synthesize a dataset from a config")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None, help="override data.seed")

    tr = sub.add_parser("train", help="train on a generated dataset")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True, help="manifest.jsonl path")
    tr.add_argument("--out", required=True)
    tr.add_argument("--init-asr", default=None,
                    help="checkpoint from a recognition-only pre-training run")

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--tasks", default="diar,sep,asr")
    ev.add_argument("--collar", type=float, nargs="+", default=[0.0, 0.25])
    ev.add_argument("--median", type=int, default=11)
    ev.add_argument("--oracle", action="store_true",
                    help="debug: score ground truth as if the model produced it")
    ev.add_argument("--figures", type=int, default=4,
                    help="render plots for the first N items (0 disables)")

    inf = sub.add_parser("infer", help="end-to-end inference on one WAV file")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--wav", required=True)
    inf.add_argument("--out", required=True)
    return parser


def _load_model_from_checkpoint(path, dtype=np.float32):
    _, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ConfigError("<checkpoint>", f"{path} carries no model config")
    model = build_model(ModelConfig.from_dict(meta["model"]), dtype)
    load_into_model(model, path)
    return model


def cmd_gen(args):
    run = load_run_config(args.config)
    if args.seed is not None:
        run.data.seed = args.seed
    samples = generate_dataset(run.data)
    manifest = write_dataset(samples, args.out)
    seconds = sum(s.length for s in samples) / run.data.sample_rate
    print(f"wrote {len(samples)} items ({seconds:.1f} s of audio) to {manifest}")
    return 0


def cmd_train(args):
    run = load_run_config(args.config)
    dataset = read_dataset(args.data)
    model = build_model(run.model)
    if args.init_asr:
        load_into_model(model, args.init_asr)
    result = train(model, dataset, run.train, run.weights, args.out)
    from .figures import plot_loss_curves
    curve = plot_loss_curves(result.log_path, os.path.join(args.out, "loss_curves.png"))
    print(f"finished {result.final_step} steps; checkpoint {result.final_checkpoint}")
    print(f"loss log {result.log_path}; curves {curve}")
    return 0


def cmd_eval(args):
    model = _load_model_from_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    eval_cfg = EvalConfig(collars=tuple(args.collar), median_frames=args.median,
                          tasks=tasks, figure_items=args.figures)
    report, extras = evaluate(model, samples, eval_cfg, oracle=args.oracle,
                              max_workers=worker_count())
    os.makedirs(args.out, exist_ok=True)
    jpath = write_report_json(os.path.join(args.out, "report.json"), report)
    cpath = write_report_csv(os.path.join(args.out, "report.csv"), report)
    if "asr" in tasks:
        hyps = {item.id: extra.get("hypotheses", []) for item, extra in zip(samples, extras)}
        with open(os.path.join(args.out, "hyps.json"), "w", encoding="utf-8") as f:
            json.dump(hyps, f, indent=2)
    if args.figures:
        _render_eval_figures(model, samples, extras, eval_cfg, args.out)
    print(f"scored {len(samples)} items; report {jpath} / {cpath}")
    for key, value in report["aggregate"].items():
        print(f"  {key}: {value:.4f}" if isinstance(value, float) else f"  {key}: {value}")
    return 0


def _render_eval_figures(model, samples, extras, eval_cfg, out_dir):
    from . import figures
    from .diar import frame_labels_from_spans
    fig_dir = os.path.join(out_dir, "figures")
    for item, extra in list(zip(samples, extras))[:eval_cfg.figure_items]:
        outputs = extra["outputs"]
        if "estimates" in outputs:
            perm = extra["sep_perm"]
            refs = [item.sources[perm[c]] for c in range(len(perm))]
            figures.plot_separation(item.id, item.sample_rate, item.mixture, refs,
                                    outputs["estimates"],
                                    os.path.join(fig_dir, f"{item.id}_separation.png"))
        if "diar_probs" in outputs:
            probs = outputs["diar_probs"]
            labels = frame_labels_from_spans(item.activity, item.length, probs.shape[0])
            figures.plot_activity(item.id, probs, labels, extra["frame_s"],
                                  os.path.join(fig_dir, f"{item.id}_activity.png"))
    figures.plot_layer_weights(model.fusion.layer_weights(),
                               os.path.join(fig_dir, "layer_weights.png"))


def cmd_infer(args):
    model = _load_model_from_checkpoint(args.ckpt)
    wave, rate = read_wav(args.wav)
    expected = model.config.sample_rate
    if rate != expected:
        raise ConfigError("<wav>", f"{args.wav} is {rate} Hz but the model expects "
                                   f"{expected} Hz")
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.wav))[0]
    result = model.infer_item(wave)

    for c, estimate in enumerate(result["estimates"], start=1):
        write_wav(os.path.join(args.out, f"{stem}_est{c}.wav"), estimate, expected)

    from .diar import probs_to_segments
    probs = result["diar_probs"]
    frame_s = len(wave) / probs.shape[0] / expected
    segments = probs_to_segments(probs, threshold=0.5, median_frames=11)
    segments_s = [[(start * frame_s, (end - start) * frame_s) for start, end in spans]
                  for spans in segments]
    write_rttm(os.path.join(args.out, f"{stem}.rttm"), stem, segments_s)

    hyps = {stem: [h.tokens for h in result["hypotheses"]]}
    with open(os.path.join(args.out, f"{stem}_hyps.json"), "w", encoding="utf-8") as f:
        json.dump(hyps, f, indent=2)
    print(f"wrote {len(result['estimates'])} estimates, RTTM, and hypotheses to {args.out}")
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except UmeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
