"""Greedy CTC decoding, peak latency and character error rate.

Times use the frame-end convention: frame ``i`` is stamped at
``(i + 1) * frame_ms``. A latency of zero therefore means the peak fired on
the last frame of the token's audio; negative values mean early emission.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from pfctc.ctc import BLANK
from pfctc.errors import UndefinedMetricError, UsageError
from pfctc.numerics import nearest_rank_percentile

PEAK_RULES = ("max", "first")

CSV_FIELDS = ("model_id", "lambda", "tau", "lookahead_frames", "cer",
              "apl_ms", "pr50_ms", "pr90_ms", "matched_tokens", "utterances")


@dataclass(frozen=True)
class PeakEvent:
    token: int
    emit_frame: int
    posterior: float


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]
    peaks: tuple[PeakEvent, ...]


@dataclass(frozen=True)
class LatencyReport:
    apl_ms: float
    pr50_ms: float
    pr90_ms: float
    cer: float  # percent
    matched_token_count: int
    utterance_count: int
    empty_decode_count: int = 0


def greedy_decode(probs: np.ndarray, peak_rule: str = "max") -> DecodeResult:
    """Best-path decode with one peak per surviving argmax run.

    ``peak_rule="max"`` stamps each token at its highest-posterior frame in
    the run; ``"first"`` uses the run's first frame.
    """
    if peak_rule not in PEAK_RULES:
        raise UsageError(f"peak_rule must be one of {PEAK_RULES}")
    probs = np.asarray(probs, dtype=np.float64)
    best = probs.argmax(axis=1)
    tokens, peaks = [], []
    T = best.size
    start = 0
    while start < T:
        k = int(best[start])
        stop = start + 1
        while stop < T and best[stop] == k:
            stop += 1
        if k != BLANK:
            if peak_rule == "max":
                frame = start + int(probs[start:stop, k].argmax())
            else:
                frame = start
            tokens.append(k)
            peaks.append(PeakEvent(k, frame, float(probs[frame, k])))
        start = stop
    return DecodeResult(tuple(tokens), tuple(peaks))


def _edit_table(hyp: Sequence[int], ref: Sequence[int]) -> np.ndarray:
    n, m = len(hyp), len(ref)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = D[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1])
            D[i, j] = min(sub, D[i - 1, j] + 1, D[i, j - 1] + 1)
    return D


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    """Levenshtein distance with unit costs."""
    return int(_edit_table(list(hyp), list(ref))[-1, -1])


def align_matches(hyp: Sequence[int], ref: Sequence[int]) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)`` with ``hyp[i] == ref[j]`` on a minimum-edit alignment."""
    hyp, ref = list(hyp), list(ref)
    D = _edit_table(hyp, ref)
    i, j = len(hyp), len(ref)
    pairs = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and hyp[i - 1] == ref[j - 1] and D[i, j] == D[i - 1, j - 1]:
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + 1:
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + 1:
            i -= 1
        else:
            j -= 1
    pairs.reverse()
    return pairs


def cer(hypothesis: Sequence[int], reference: Sequence[int]) -> float:
    """Edit distance over reference length, as a fraction."""
    if len(reference) == 0:
        raise UsageError("CER undefined for an empty reference")
    return edit_distance(hypothesis, reference) / len(reference)


def corpus_cer(hypotheses: Iterable[Sequence[int]], references: Iterable[Sequence[int]]) -> float:
    """Pooled CER: total edits over total reference tokens."""
    edits = total = 0
    for hyp, ref in zip(hypotheses, references, strict=True):
        edits += edit_distance(hyp, ref)
        total += len(ref)
    if total == 0:
        raise UndefinedMetricError("corpus CER undefined: no reference tokens")
    return edits / total


def token_latencies(decode: DecodeResult, labels: Sequence[int],
                    label_end_frames: Sequence[int], frame_ms: float) -> list[float]:
    """Per matched token, peak time minus the token's audio end time (ms)."""
    out = []
    for i, j in align_matches(decode.tokens, labels):
        out.append((decode.peaks[i].emit_frame - label_end_frames[j]) * frame_ms)
    return out


def average_peak_latency(pairs: Iterable[tuple[DecodeResult, object]]) -> tuple[float, int]:
    """Mean latency over every matched token in the dataset.

    ``pairs`` yields ``(decode, reference)`` where the reference exposes
    ``labels``, ``label_end_frames`` and ``frame_ms``.
    """
    total = 0.0
    count = 0
    for decode, ref in pairs:
        lat = token_latencies(decode, ref.labels, ref.label_end_frames, ref.frame_ms)
        total += sum(lat)
        count += len(lat)
    if count == 0:
        raise UndefinedMetricError("average peak latency undefined: no matched tokens")
    return total / count, count


def partial_recognition_latencies(pairs: Iterable[tuple[DecodeResult, object]]
                                  ) -> tuple[list[float], int]:
    """Last-peak time minus end-of-speech time, per utterance with a non-empty decode.

    Returns ``(latencies, skipped)`` where ``skipped`` counts empty decodes.
    """
    out = []
    skipped = 0
    for decode, ref in pairs:
        if not decode.peaks:
            skipped += 1
            continue
        out.append((decode.peaks[-1].emit_frame - ref.speech_end_frame) * ref.frame_ms)
    if not out:
        raise UndefinedMetricError("partial recognition latency undefined: every decode is empty")
    return out, skipped


def latency_report(decodes: Sequence[DecodeResult], references: Sequence) -> LatencyReport:
    """Aggregate CER, APL, PR50 and PR90 over paired decodes and references."""
    if len(decodes) != len(references):
        raise UsageError("decodes and references differ in length")
    pairs = list(zip(decodes, references))
    apl, matched = average_peak_latency(pairs)
    prl, skipped = partial_recognition_latencies(pairs)
    c = corpus_cer([d.tokens for d in decodes], [r.labels for r in references])
    return LatencyReport(
        apl_ms=apl,
        pr50_ms=nearest_rank_percentile(prl, 50),
        pr90_ms=nearest_rank_percentile(prl, 90),
        cer=100.0 * c,
        matched_token_count=matched,
        utterance_count=len(references),
        empty_decode_count=skipped,
    )


def report_row(model_id: str, lam: float, tau: float, lookahead: int,
               report: LatencyReport) -> dict:
    return {
        "model_id": model_id,
        "lambda": lam,
        "tau": tau,
        "lookahead_frames": lookahead,
        "cer": report.cer,
        "apl_ms": report.apl_ms,
        "pr50_ms": report.pr50_ms,
        "pr90_ms": report.pr90_ms,
        "matched_tokens": report.matched_token_count,
        "utterances": report.utterance_count,
    }


def _fmt(value) -> str:
    # repr keeps floats round-trippable
    return repr(float(value)) if isinstance(value, float) else str(value)


def format_csv(rows: Sequence[dict], fields: Sequence[str] = CSV_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_fmt(row[f]) for f in fields])
    return buf.getvalue()


def parse_metrics_csv(text: str) -> list[dict]:
    """Inverse of :func:`format_csv` for the metrics schema."""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        rows.append({
            "model_id": raw["model_id"],
            "lambda": float(raw["lambda"]),
            "tau": float(raw["tau"]),
            "lookahead_frames": int(raw["lookahead_frames"]),
            "cer": float(raw["cer"]),
            "apl_ms": float(raw["apl_ms"]),
            "pr50_ms": float(raw["pr50_ms"]),
            "pr90_ms": float(raw["pr90_ms"]),
            "matched_tokens": int(raw["matched_tokens"]),
            "utterances": int(raw["utterances"]),
        })
    return rows
