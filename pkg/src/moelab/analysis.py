"""Token-level routing instrumentation over student rollouts.

Builds one record per generated token carrying the student's next-token
entropy, the teacher-student log-probability gap on the realized token,
and the per-layer fraction of top-K slots the router gave to zero
candidates. Aggregations (position chunks, equal-count bins against
entropy or the logp gap, tag/layer/rollout groups) are all plain means
over those records, so every number here can be re-derived by recounting
the raw stream.

delta_logp is stored as teacher minus student: positive means the
teacher still knows something the student does not.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .errors import InputError, StateError
from .sampling import sample_rollouts, score_tokens
from .tensor import no_grad

X_FIELDS = ("entropy", "delta_logp")
GROUP_KEYS = ("span_tag", "layer", "rollout_id")
UNTAGGED = -1


@dataclass
class TokenRecord:
    rollout_id: int
    position: int  # absolute position in the sequence
    token_id: int
    span_tag: int
    entropy: float
    delta_logp: float
    r_ze_mean: float
    r_ze_per_layer: np.ndarray

    def __post_init__(self):
        self.r_ze_per_layer = np.asarray(self.r_ze_per_layer, dtype=np.float64)
        if self.r_ze_per_layer.ndim != 1:
            raise InputError("r_ze_per_layer must be a vector")
        lo, hi = self.r_ze_per_layer.min(), self.r_ze_per_layer.max()
        if lo < 0.0 or hi > 1.0 or not 0.0 <= self.r_ze_mean <= 1.0:
            raise InputError("r_ze values must lie in [0, 1]")
        if abs(self.r_ze_mean - self.r_ze_per_layer.mean()) > 1e-12:
            raise InputError("r_ze_mean must equal the mean over layers")


@dataclass
class ChunkedSeries:
    chunk_size: int
    overall: np.ndarray  # [num_chunks] mean r_ze per chunk
    per_layer: np.ndarray  # [L, num_chunks]
    chunk_lengths: np.ndarray  # [num_chunks] tokens covered by each chunk

    @property
    def last_chunk_len(self):
        return int(self.chunk_lengths[-1])


@dataclass
class BinStat:
    x_lo: float
    x_hi: float
    x_mean: float
    y_mean: float
    count: int


@dataclass
class CorrelationResult:
    x_field: str
    bins: list
    spearman: float | None  # None when x is constant
    degenerate: bool


def record_rollouts(student, teacher, prompts, num_tokens, temperature=1.0,
                    seed=0, position_tags=None, rollout_id_offset=0):
    """Sample student rollouts and log one TokenRecord per generated token.

    The student's own log probabilities come from a teacher-forced scoring
    pass over the finished sequences, and the teacher's from an identical
    pass through the teacher, so identical models give delta_logp of
    exactly zero. The sampler's stepwise records must agree with the
    scoring pass to 1e-6; a mismatch means the two passes saw different
    prefixes.
    """
    rollouts = sample_rollouts(student, prompts, num_tokens,
                               temperature=temperature, seed=seed)
    sequences = np.stack([r.sequence for r in rollouts])
    plen = rollouts[0].prompt.shape[0]
    student_lp, _ = score_tokens(student, sequences, plen)
    teacher_lp, _ = score_tokens(teacher, sequences, plen)

    num_layers = student.config.num_layers
    k = student.config.effective_k
    with no_grad():
        from .model import lm_forward

        _, routings = lm_forward(student, sequences[:, :-1])
    batch, total = sequences.shape
    records = []
    for b, rollout in enumerate(rollouts):
        if np.max(np.abs(student_lp[b] - rollout.logp)) > 1e-6:
            raise StateError(
                f"rollout {b}: sampler logp disagrees with the scoring pass; "
                "the two passes saw different prefixes"
            )
        for t in range(num_tokens):
            pos = plen + t
            per_layer = np.array([
                routing.zero_selected.reshape(batch, total - 1)[b, pos - 1]
                for routing in routings
            ]) / float(k)
            tag = UNTAGGED
            if position_tags is not None and pos < len(position_tags):
                tag = int(position_tags[pos])
            records.append(TokenRecord(
                rollout_id=rollout_id_offset + b,
                position=pos,
                token_id=int(rollout.tokens[t]),
                span_tag=tag,
                entropy=float(rollout.entropy[t]),
                delta_logp=float(teacher_lp[b, t] - student_lp[b, t]),
                r_ze_mean=float(per_layer.mean()),
                r_ze_per_layer=per_layer,
            ))
    return records


def chunk_average(records, chunk_size):
    """Disjoint consecutive chunks of one rollout's records; the final
    chunk averages over however many tokens remain."""
    if chunk_size < 1:
        raise InputError(f"chunk_size must be >= 1, got {chunk_size}")
    if not records:
        raise InputError("no records to chunk")
    ids = {r.rollout_id for r in records}
    if len(ids) != 1:
        raise InputError(f"chunking expects one rollout, got ids {sorted(ids)}")
    ordered = sorted(records, key=lambda r: r.position)
    means = np.array([r.r_ze_mean for r in ordered])
    layers = np.stack([r.r_ze_per_layer for r in ordered])  # [T, L]
    bounds = list(range(0, len(ordered), chunk_size)) + [len(ordered)]
    overall, per_layer, lengths = [], [], []
    for lo, hi in zip(bounds, bounds[1:]):
        overall.append(means[lo:hi].mean())
        per_layer.append(layers[lo:hi].mean(axis=0))
        lengths.append(hi - lo)
    return ChunkedSeries(
        chunk_size=chunk_size,
        overall=np.array(overall),
        per_layer=np.stack(per_layer, axis=1),
        chunk_lengths=np.array(lengths, dtype=np.int64),
    )


def correlate(records, x_field, num_bins=8, y_field="r_ze_mean"):
    """Equal-count bins of y over x plus a rank correlation.

    Constant x makes the correlation undefined (degenerate result);
    constant y is reported as correlation zero.
    """
    if x_field not in X_FIELDS:
        raise InputError(f"x_field must be one of {X_FIELDS}, got {x_field!r}")
    if len(records) < 100:
        raise InputError(f"need >= 100 records, got {len(records)}")
    x = np.array([getattr(r, x_field) for r in records])
    y = np.array([getattr(r, y_field) for r in records])
    order = np.argsort(x, kind="stable")
    bins = []
    for chunk in np.array_split(order, num_bins):
        if chunk.size == 0:
            continue
        bins.append(BinStat(
            x_lo=float(x[chunk].min()),
            x_hi=float(x[chunk].max()),
            x_mean=float(x[chunk].mean()),
            y_mean=float(y[chunk].mean()),
            count=int(chunk.size),
        ))
    if np.ptp(x) == 0.0:
        return CorrelationResult(x_field, bins, None, True)
    if np.ptp(y) == 0.0:
        return CorrelationResult(x_field, bins, 0.0, False)
    rho = scipy.stats.spearmanr(x, y).statistic
    return CorrelationResult(x_field, bins, float(rho), False)


def aggregate_by(records, key):
    """Grouped means of r_ze, entropy and delta_logp with counts.

    span_tag and rollout_id group tokens; layer groups report the layer's
    own r_ze with the token-level entropy/delta means (those do not vary
    by layer).
    """
    if key not in GROUP_KEYS:
        raise InputError(f"key must be one of {GROUP_KEYS}, got {key!r}")
    if not records:
        raise InputError("no records to aggregate")
    ent = np.array([r.entropy for r in records])
    dlp = np.array([r.delta_logp for r in records])
    rze = np.array([r.r_ze_mean for r in records])
    out = {}
    if key == "layer":
        layers = np.stack([r.r_ze_per_layer for r in records])
        for l in range(layers.shape[1]):
            out[l] = {
                "r_ze": float(layers[:, l].mean()),
                "entropy": float(ent.mean()),
                "delta_logp": float(dlp.mean()),
                "count": len(records),
            }
        return out
    labels = np.array([getattr(r, key) for r in records])
    for value in np.unique(labels):
        mask = labels == value
        out[int(value)] = {
            "r_ze": float(rze[mask].mean()),
            "entropy": float(ent[mask].mean()),
            "delta_logp": float(dlp[mask].mean()),
            "count": int(mask.sum()),
        }
    return out


def record_fields(num_layers):
    return (
        ["rollout_id", "position", "token_id", "span_tag", "entropy",
         "delta_logp", "r_ze_mean"]
        + [f"r_ze_layer_{l}" for l in range(num_layers)]
    )


def write_records_csv(records, path):
    if not records:
        raise InputError("no records to write")
    num_layers = records[0].r_ze_per_layer.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(record_fields(num_layers))
        for r in records:
            writer.writerow(
                [r.rollout_id, r.position, r.token_id, r.span_tag,
                 repr(r.entropy), repr(r.delta_logp), repr(r.r_ze_mean)]
                + [repr(float(v)) for v in r.r_ze_per_layer]
            )


def read_records_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        num_layers = len(header) - 7
        if num_layers < 1 or header != record_fields(num_layers):
            raise InputError(f"unexpected record header in {path}")
        records = []
        for rec in reader:
            records.append(TokenRecord(
                rollout_id=int(rec[0]),
                position=int(rec[1]),
                token_id=int(rec[2]),
                span_tag=int(rec[3]),
                entropy=float(rec[4]),
                delta_logp=float(rec[5]),
                r_ze_mean=float(rec[6]),
                r_ze_per_layer=np.array([float(v) for v in rec[7:]]),
            ))
    return records


def write_correlation_csv(result: CorrelationResult, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("bin", "x_lo", "x_hi", "x_mean", "y_mean", "count"))
        for i, b in enumerate(result.bins):
            writer.writerow((i, repr(b.x_lo), repr(b.x_hi), repr(b.x_mean),
                             repr(b.y_mean), b.count))
