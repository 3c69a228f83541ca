"""Command line interface: ``pfctc {gen-data,train,eval,peaks,sweep}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pfctc.ctc import BLANK
from pfctc.encoder import EncoderConfig
from pfctc.errors import PfctcError, UsageError
from pfctc.metrics import LatencyReport, format_csv, report_row
from pfctc.pfr import DEFAULT_TAU, NON_STREAMING_LAMBDAS, STREAMING_LAMBDAS
from pfctc.synthdata import Dataset, SynthConfig, generate_dataset, read_jsonl, write_jsonl
from pfctc.trainer import Checkpoint, TrainConfig, check_compatible, evaluate, posteriors, train

logger = logging.getLogger("pfctc")

SPLITS = ("train", "dev", "test")
PRESETS = {
    "streaming": (0.0,) + STREAMING_LAMBDAS,
    "non-streaming": (0.0,) + NON_STREAMING_LAMBDAS,
}
REPORT_COLS = ("cer", "apl_ms", "pr50_ms", "pr90_ms")
PEAK_FIELDS = ("kind", "frame", "time_ms", "token_id", "posterior")


class SweepError(PfctcError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _parse_lambdas(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("lambdas must be a non-empty list of values >= 0")
    return vals


def _infer_vocab(data_path: Path, dataset: Dataset) -> int:
    manifest = data_path.parent / "manifest.json"
    if manifest.exists():
        return int(json.loads(manifest.read_text())["config"]["vocab_size"])
    return dataset.max_label + 1


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--vocab", type=int, default=None,
                   help="output classes incl. blank (default: from manifest.json or data)")
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--layers", type=int, default=1, choices=(1, 2))
    g.add_argument("--left-context", type=int, default=4)
    g.add_argument("--lookahead", type=int, default=2, help="future frames visible (R)")
    g = p.add_argument_group("optimization")
    g.add_argument("--tau", type=float, default=DEFAULT_TAU)
    g.add_argument("--no-detach", dest="detach", action="store_false",
                   help="let regularizer gradients reach the teacher frame")
    g.add_argument("--epochs", type=int, default=40)
    g.add_argument("--batch-size", type=int, default=8)
    g.add_argument("--lr", type=float, default=0.1, help="base LR of the warmup schedule")
    g.add_argument("--warmup", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--avg-last", type=int, default=5)


def _configs(args, dataset: Dataset, data_path: Path, lam: float):
    vocab = args.vocab if args.vocab is not None else _infer_vocab(data_path, dataset)
    if dataset.max_label >= vocab:
        raise UsageError(f"data uses token id {dataset.max_label} but --vocab is {vocab}")
    enc = EncoderConfig(feature_dim=dataset.feature_dim, hidden_dim=args.hidden,
                        vocab_size=vocab, left_context=args.left_context,
                        right_context=args.lookahead, layers=args.layers)
    tc = TrainConfig(lam=lam, tau=args.tau, detach_teacher=args.detach, epochs=args.epochs,
                     batch_size=args.batch_size, base_lr=args.lr, warmup_steps=args.warmup,
                     seed=args.seed, average_last_k=args.avg_last)
    return enc, tc


def _load_data(path: str) -> Dataset:
    ds = read_jsonl(path)
    if len(ds) == 0:
        raise UsageError(f"{path}: dataset is empty")
    return ds


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    if args.utts < 1 or args.dev_utts < 1 or args.test_utts < 1:
        raise UsageError("utterance counts must be >= 1")
    base = SynthConfig(
        vocab_size=args.vocab, utterance_count=args.utts,
        min_tokens=args.min_tokens, max_tokens=args.max_tokens,
        min_frames_per_token=args.min_token_frames, max_frames_per_token=args.max_token_frames,
        min_silence=args.min_silence, max_silence=args.max_silence,
        feature_dim=args.feature_dim, noise_std=args.noise_std, frame_ms=args.frame_ms,
        prototype_seed=args.prototype_seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": args.utts, "dev": args.dev_utts, "test": args.test_utts}
    seeds = {}
    for i, split in enumerate(SPLITS):
        cfg = SynthConfig(**{**base.to_dict(), "utterance_count": counts[split]})
        seeds[split] = args.seed + i
        write_jsonl(generate_dataset(cfg, seeds[split], id_prefix=f"{split}-"),
                    out / f"{split}.jsonl")
    manifest = {"config": base.to_dict(), "counts": counts, "seeds": seeds}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {', '.join(f'{s}.jsonl' for s in SPLITS)} and manifest.json to {out}")
    return 0


# ---------------------------------------------------------------------------
# train / eval


def cmd_train(args) -> int:
    data_path = Path(args.data)
    ds = _load_data(args.data)
    enc, tc = _configs(args, ds, data_path, args.lam)
    ckpt, log = train(ds, enc, tc, checkpoint_dir=args.ckpt_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    log_path = Path(args.log) if args.log else out.with_name(out.stem + "_log.csv")
    _write(log_path, log.to_csv())
    last = log.records[-1]
    print(f"saved {out} (final ctc {last.ctc_loss:.4f}, pfr {last.pfr_loss:.4f}); log {log_path}")
    return 0


def metrics_row(model_id: str, ckpt: Checkpoint, report: LatencyReport) -> dict:
    tc = ckpt.train_config
    return report_row(model_id, tc.lam, tc.tau, ckpt.encoder_config.right_context, report)


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    ds = _load_data(args.data)
    report = evaluate(ckpt, ds, peak_rule=args.peak_rule)
    model_id = args.model_id or Path(args.ckpt).stem
    text = format_csv([metrics_row(model_id, ckpt, report)])
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text.splitlines()[1] + "\n")
    return 0


# ---------------------------------------------------------------------------
# peaks


def peak_rows(ckpt: Checkpoint, utt, min_prob: float) -> list[dict]:
    """Posterior rows for non-blank tokens at or above ``min_prob``, then reference rows."""
    probs = posteriors(ckpt, utt)
    rows = []
    for t in range(probs.shape[0]):
        for k in range(probs.shape[1]):
            if k == BLANK or probs[t, k] < min_prob:
                continue
            rows.append({"kind": "posterior", "frame": t, "time_ms": (t + 1) * utt.frame_ms,
                         "token_id": k, "posterior": float(probs[t, k])})
    for k, end in zip(utt.labels, utt.label_end_frames):
        rows.append({"kind": "reference", "frame": end, "time_ms": (end + 1) * utt.frame_ms,
                     "token_id": k, "posterior": ""})
    return rows


def peaks_svg(probs: np.ndarray, utt, width: int = 900, height: int = 320) -> str:
    """Posterior curves per non-blank token with reference token-end markers."""
    T, V = probs.shape
    pad = 40
    span = (T) * utt.frame_ms

    def x(ms):
        return pad + (width - 2 * pad) * ms / span

    def y(p):
        return height - pad - (height - 2 * pad) * p

    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<line x1="{pad}" y1="{y(0):.1f}" x2="{width - pad}" y2="{y(0):.1f}" stroke="black"/>',
           f'<line x1="{pad}" y1="{y(0):.1f}" x2="{pad}" y2="{y(1):.1f}" stroke="black"/>',
           f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">'
           f'time (ms)</text>',
           f'<text x="10" y="{pad - 10}" font-size="12">{utt.id}</text>']
    prev_end = -1
    for k, end in zip(utt.labels, utt.label_end_frames):
        x0, x1 = x((prev_end + 1) * utt.frame_ms), x((end + 1) * utt.frame_ms)
        color = palette[(k - 1) % len(palette)]
        out.append(f'<line x1="{x0:.1f}" y1="{pad - 20}" x2="{x1:.1f}" y2="{pad - 20}" '
                   f'stroke="{color}" stroke-width="6"/>')
        out.append(f'<line x1="{x1:.1f}" y1="{y(0):.1f}" x2="{x1:.1f}" y2="{y(1):.1f}" '
                   f'stroke="{color}" stroke-dasharray="4,3"/>')
        prev_end = end
    for k in range(1, V):
        pts = " ".join(f"{x((t + 1) * utt.frame_ms):.1f},{y(probs[t, k]):.1f}" for t in range(T))
        out.append(f'<polyline fill="none" stroke="{palette[(k - 1) % len(palette)]}" '
                   f'stroke-width="1.5" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_peaks(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    ds = _load_data(args.data)
    check_compatible(ckpt, ds)
    try:
        utt = ds[args.utt_id]
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    rows = peak_rows(ckpt, utt, args.min_prob)
    text = format_csv(rows, PEAK_FIELDS)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if args.svg:
        _write(Path(args.svg), peaks_svg(posteriors(ckpt, utt), utt))
    return 0


# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class SweepSpec:
    lambdas: tuple[float, ...]
    encoder_config: EncoderConfig
    train_config: TrainConfig
    out_dir: Path

    def __post_init__(self):
        if not self.lambdas:
            raise UsageError("sweep needs at least one lambda")
        if 0.0 not in self.lambdas:
            raise UsageError("sweep needs the lambda=0 baseline")


def _lambda_tag(lam: float) -> str:
    return f"lambda_{lam:g}"


def _run_one(lam: float, spec: SweepSpec, train_ds: Dataset,
             eval_sets: dict[str, Dataset]) -> dict:
    tc = TrainConfig(**{**spec.train_config.to_dict(), "lam": lam})
    ckpt, log = train(train_ds, spec.encoder_config, tc)
    run_dir = spec.out_dir / _lambda_tag(lam)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt.save(run_dir / "model.npz")
    _write(run_dir / "train_log.csv", log.to_csv())
    row: dict = {"lambda": lam}
    metrics = []
    for name, ds in eval_sets.items():
        rep = evaluate(ckpt, ds)
        metrics.append(metrics_row(f"{_lambda_tag(lam)}-{name}", ckpt, rep))
        for col in REPORT_COLS:
            row[f"{name}_{col}"] = getattr(rep, col)
    _write(run_dir / "metrics.csv", format_csv(metrics))
    return row


def sweep_fields(split_names: Sequence[str]) -> list[str]:
    cols = ["lambda"]
    cols += [f"{s}_{c}" for s in split_names for c in REPORT_COLS]
    cols += [f"delta_{s}_{c}" for s in split_names for c in REPORT_COLS]
    return cols


def _with_deltas(rows: list[dict], split_names: Sequence[str]) -> list[dict]:
    base = next((r for r in rows if r["lambda"] == 0.0), None)
    out = []
    for r in rows:
        r = dict(r)
        for s in split_names:
            for c in REPORT_COLS:
                key = f"{s}_{c}"
                r[f"delta_{key}"] = r[key] - base[key] if base is not None else ""
        out.append(r)
    return out


def run_sweep(spec: SweepSpec, train_ds: Dataset, eval_sets: dict[str, Dataset],
              jobs: int = 1) -> list[dict]:
    """Train and evaluate every lambda; write ``sweep.csv`` in lambda order.

    On a failed sub-run the completed rows are still written (with a
    ``sweep.partial`` note) before :class:`SweepError` is raised.
    """
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    for ds in eval_sets.values():
        check_compatible(Checkpoint({}, spec.encoder_config, spec.train_config, 0), ds)
    lambdas = sorted(set(spec.lambdas))
    names = list(eval_sets)
    results: dict[float, dict] = {}
    failure = None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {lam: pool.submit(_run_one, lam, spec, train_ds, eval_sets)
                       for lam in lambdas}
            for lam, fut in futures.items():
                try:
                    results[lam] = fut.result()
                except Exception as exc:  # noqa: BLE001 - reported below
                    failure = failure or (lam, exc)
    else:
        for lam in lambdas:
            try:
                results[lam] = _run_one(lam, spec, train_ds, eval_sets)
            except PfctcError as exc:
                failure = (lam, exc)
                break
    rows = _with_deltas([results[lam] for lam in lambdas if lam in results], names)
    _write(spec.out_dir / "sweep.csv", format_csv(rows, sweep_fields(names)))
    if failure is not None:
        lam, exc = failure
        note = (f"sweep aborted at lambda={lam:g}: {exc}; "
                f"{len(rows)} of {len(lambdas)} rows written to sweep.csv\n")
        _write(spec.out_dir / "sweep.partial", note)
        raise SweepError(note.strip())
    return rows


def parse_sweep_csv(text: str) -> list[dict]:
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        rows.append({k: (float(v) if v != "" else "") for k, v in raw.items()})
    return rows


def cmd_sweep(args) -> int:
    lambdas = args.lambdas if args.lambdas is not None else list(PRESETS[args.preset])
    train_path = Path(args.train)
    train_ds = _load_data(args.train)
    eval_sets = {}
    if args.dev:
        eval_sets["dev"] = _load_data(args.dev)
    eval_sets["test"] = _load_data(args.test)
    enc, tc = _configs(args, train_ds, train_path, 0.0)
    spec = SweepSpec(tuple(lambdas), enc, tc, Path(args.out))
    rows = run_sweep(spec, train_ds, eval_sets, jobs=args.jobs)
    sys.stdout.write(format_csv(rows, sweep_fields(list(eval_sets))))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfctc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/dev/test splits")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=8)
    p.add_argument("--utts", type=int, default=200, help="train utterances")
    p.add_argument("--dev-utts", type=int, default=50)
    p.add_argument("--test-utts", type=int, default=50)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--prototype-seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--frame-ms", type=float, default=40.0)
    p.add_argument("--min-tokens", type=int, default=5)
    p.add_argument("--max-tokens", type=int, default=9)
    p.add_argument("--min-token-frames", type=int, default=5)
    p.add_argument("--max-token-frames", type=int, default=9)
    p.add_argument("--min-silence", type=int, default=4)
    p.add_argument("--max-silence", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--log", default=None, help="training log CSV")
    p.add_argument("--ckpt-dir", default=None, help="also save every epoch here")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model-id", default=None)
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.add_argument("--peak-rule", choices=("max", "first"), default="max")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("peaks", help="dump per-frame posteriors for one utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--utt-id", required=True)
    p.add_argument("--min-prob", type=float, default=0.05)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_peaks)

    p = sub.add_parser("sweep", help="train/evaluate a grid of regularizer weights")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", default=None)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    grid = p.add_mutually_exclusive_group()
    grid.add_argument("--lambdas", type=_parse_lambdas, default=None,
                      help="comma-separated weights, must include 0")
    grid.add_argument("--preset", choices=sorted(PRESETS), default="streaming")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    _add_model_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PfctcError, OSError) as exc:
        print(f"pfctc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
