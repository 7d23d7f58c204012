"""Training loops: teacher pretraining, response distillation, on-policy KL.

Three entry points. train_teacher fits a static mixture model on a corpus
with next-token cross entropy plus a mild expert balancing term. adapt
takes a trained teacher, injects zero candidates, and runs the requested
stage schedule: a response-cloning stage (teacher samples continuations,
the student maximizes their likelihood) and an on-policy stage (the
student samples its own continuations, the teacher scores them, and the
student descends a surrogate whose expected gradient equals the gradient
of the reverse KL to the teacher). Both stages add the group balancing
loss averaged over layers, which is what drives routing mass onto the
zero candidates.

Every optimizer step appends a log row with fixed columns
(step, stage, task_loss, l_ga, r_ze, kl_estimate, wall_time); stage
boundaries are marked by rows whose stage field carries a ":start"
suffix. Columns that do not apply to a stage hold NaN.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .balancing import AuxConfig, layer_mean_aux, layer_mean_group_aux
from .checkpoint import save_model
from .errors import ConfigError, InputError, NumericalError, StateError
from .injection import InjectionSpec, inject
from .model import ModelConfig, MoEModel, lm_forward
from .sampling import sample_rollouts, score_rollouts
from .tensor import gather_lastdim, log_softmax_lastdim, narrow, no_grad

LOG_FIELDS = ("step", "stage", "task_loss", "l_ga", "r_ze", "kl_estimate",
              "wall_time")

STAGE_NAMES = ("sft", "opd")


@dataclass
class LogRow:
    step: int
    stage: str
    task_loss: float
    l_ga: float
    r_ze: float
    kl_estimate: float
    wall_time: float


def write_training_log(rows, path):
    """CSV with the fixed LOG_FIELDS header; floats via repr for round-trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow([
                row.step, row.stage, repr(row.task_loss), repr(row.l_ga),
                repr(row.r_ze), repr(row.kl_estimate), repr(row.wall_time),
            ])


def read_training_log(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_FIELDS:
            raise InputError(f"unexpected log header {header}")
        for rec in reader:
            rows.append(LogRow(
                step=int(rec[0]), stage=rec[1], task_loss=float(rec[2]),
                l_ga=float(rec[3]), r_ze=float(rec[4]),
                kl_estimate=float(rec[5]), wall_time=float(rec[6]),
            ))
    return rows


class AdamW:
    """Decoupled weight decay Adam; decay defaults to zero at this scale."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def next_token_loss(model: MoEModel, tokens, variant="dynamic"):
    """Mean next-token NLL over a [B, T] batch.

    Returns (loss, logits, routings); routings cover all B*T positions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise InputError(f"need [batch, >=2] tokens, got {tokens.shape}")
    logits, routings = lm_forward(model, tokens, variant=variant)
    logp = log_softmax_lastdim(narrow(logits, 1, 0, tokens.shape[1] - 1))
    picked = gather_lastdim(logp, tokens[:, 1:])
    return -picked.mean(), logits, routings


def _mean_r_ze(routings):
    if not routings or routings[0].n_zero == 0:
        return 0.0
    return float(np.mean([r.r_ze_per_token.mean() for r in routings]))


def _group_loss_or_none(routings, aux_cfg):
    """Group balancing term, or None when alpha switches it off."""
    if aux_cfg.alpha == 0.0:
        return None
    loss, _ = layer_mean_group_aux(routings, aux_cfg)
    return loss


def _check_finite_loss(value, stage, step):
    if not math.isfinite(value):
        raise NumericalError(
            f"{stage} loss became non-finite ({value}) at step {step}"
        )


@dataclass
class TeacherConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 3e-3
    alpha: float = 0.01
    seed: int = 0
    log_every: int = 20

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")


def train_teacher(model_config: ModelConfig, corpus, cfg: TeacherConfig):
    """Pretrain a static mixture model on the corpus train split.

    Returns (model, rows). The balancing term uses the expert-level loss;
    there are no zero candidates yet, so the group form does not apply.
    """
    if model_config.num_zero_experts:
        raise ConfigError("teacher config must not contain zero candidates")
    model = MoEModel.init(
        model_config, np.random.default_rng(np.random.PCG64([cfg.seed, 0]))
    )
    (train_tokens, _), _ = corpus.split()
    batch_rng = np.random.default_rng(np.random.PCG64([cfg.seed, 1]))
    opt = AdamW(model.parameters(), lr=cfg.lr)
    aux_cfg = AuxConfig(alpha=cfg.alpha, w=1.0)
    rows = []
    t0 = time.monotonic()
    for step in range(cfg.steps):
        idx = batch_rng.integers(0, train_tokens.shape[0], cfg.batch_size)
        loss, _, routings = next_token_loss(model, train_tokens[idx])
        if cfg.alpha > 0:
            l_aux, _ = layer_mean_aux(routings, aux_cfg)
            total = loss + l_aux
            l_aux_val = l_aux.item()
        else:
            total = loss
            l_aux_val = 0.0
        _check_finite_loss(total.item(), "teacher", step)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append(LogRow(
                step=step, stage="teacher", task_loss=loss.item(),
                l_ga=l_aux_val, r_ze=0.0, kl_estimate=float("nan"),
                wall_time=time.monotonic() - t0,
            ))
    return model, rows


@dataclass
class EvalMetrics:
    cross_entropy: float
    accuracy: float
    r_ze: float
    r_ze_per_layer: list
    per_tag: dict
    fully_skipped: int
    num_tokens: int


def evaluate(model: MoEModel, tokens, tags=None, variant="dynamic",
             batch_size=64):
    """Held-out metrics: CE and accuracy over predicted positions, routing
    ratios over every processed token.

    Per-tag CE/accuracy group by the tag of the predicted target token;
    per-tag r_ze groups by the tag of the token being routed.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise InputError(f"need [batch, >=2] tokens, got {tokens.shape}")
    if tags is not None:
        tags = np.asarray(tags)
        if tags.shape != tokens.shape:
            raise InputError("tags must match tokens shape")
    num_layers = model.config.num_layers
    nll_parts, hit_parts, target_tag_parts = [], [], []
    rze_parts, routed_tag_parts = [], []
    skipped = 0
    with no_grad():
        for start in range(0, tokens.shape[0], batch_size):
            batch = tokens[start : start + batch_size]
            logits, routings = lm_forward(model, batch, variant=variant)
            logp = log_softmax_lastdim(narrow(logits, 1, 0, batch.shape[1] - 1))
            picked = gather_lastdim(logp, batch[:, 1:])
            nll_parts.append(-picked.data.ravel())
            hits = np.argmax(logp.data, axis=-1) == batch[:, 1:]
            hit_parts.append(hits.ravel())
            if routings[0].n_zero:
                per_layer = np.stack(
                    [r.r_ze_per_token for r in routings]
                )  # [L, B*T]
                rze_parts.append(per_layer)
                skipped += int(sum(r.fully_skipped.sum() for r in routings))
            if tags is not None:
                tb = tags[start : start + batch_size]
                target_tag_parts.append(tb[:, 1:].ravel())
                routed_tag_parts.append(tb.ravel())
    nll = np.concatenate(nll_parts)
    hits = np.concatenate(hit_parts)
    if rze_parts:
        rze_layers = np.concatenate(rze_parts, axis=1)  # [L, total]
        r_ze_per_layer = [float(x) for x in rze_layers.mean(axis=1)]
        r_ze = float(rze_layers.mean())
        rze_tokens = rze_layers.mean(axis=0)
    else:
        r_ze_per_layer = [0.0] * num_layers
        r_ze = 0.0
        rze_tokens = None
    per_tag = {}
    if tags is not None:
        from .corpus import TAG_NAMES

        target_tags = np.concatenate(target_tag_parts)
        routed_tags = np.concatenate(routed_tag_parts)
        for tag_id, name in enumerate(TAG_NAMES):
            mask = target_tags == tag_id
            entry = {}
            if mask.any():
                entry["cross_entropy"] = float(nll[mask].mean())
                entry["accuracy"] = float(hits[mask].mean())
            rmask = routed_tags == tag_id
            if rze_tokens is not None and rmask.any():
                entry["r_ze"] = float(rze_tokens[rmask].mean())
            per_tag[name] = entry
    return EvalMetrics(
        cross_entropy=float(nll.mean()),
        accuracy=float(hits.mean()),
        r_ze=r_ze,
        r_ze_per_layer=r_ze_per_layer,
        per_tag=per_tag,
        fully_skipped=skipped,
        num_tokens=int(nll.size),
    )


@dataclass
class SftConfig:
    steps: int = 150
    lr: float = 1e-3
    num_prompts: int = 192
    prompt_len: int = 16
    gen_len: int = 32
    batch_size: int = 16
    temperature: float = 1.0

    def __post_init__(self):
        if min(self.steps, self.lr, self.num_prompts, self.prompt_len,
               self.gen_len, self.batch_size) <= 0:
            raise ConfigError("sft settings must be positive")
        if self.batch_size > self.num_prompts:
            raise ConfigError("batch_size cannot exceed num_prompts")


@dataclass
class OpdConfig:
    steps: int = 300
    lr: float = 1e-3
    prompts_per_step: int = 16
    prompt_len: int = 16
    gen_len: int = 32
    temperature: float = 1.0

    def __post_init__(self):
        if min(self.steps, self.lr, self.prompts_per_step, self.prompt_len,
               self.gen_len) <= 0:
            raise ConfigError("opd settings must be positive")


@dataclass
class AdaptConfig:
    injection: InjectionSpec = field(
        default_factory=lambda: InjectionSpec(n_new=8)
    )
    aux: AuxConfig = field(default_factory=AuxConfig)
    stages: str = "sft->opd"
    sft: SftConfig = field(default_factory=SftConfig)
    opd: OpdConfig = field(default_factory=OpdConfig)
    seed: int = 0

    def __post_init__(self):
        for name in self.stage_list():
            if name not in STAGE_NAMES:
                raise ConfigError(
                    f"unknown stage {name!r}; schedule pieces must be "
                    f"one of {STAGE_NAMES}"
                )

    def stage_list(self):
        return self.stages.split("->")


def _prompt_bank(corpus, prompt_len, count, rng):
    """Prefixes of training sequences; absolute positions stay aligned."""
    (train_tokens, _), _ = corpus.split()
    if prompt_len >= train_tokens.shape[1]:
        raise ConfigError("prompt_len must be shorter than corpus sequences")
    replace_draw = count > train_tokens.shape[0]
    idx = rng.choice(train_tokens.shape[0], size=count, replace=replace_draw)
    return train_tokens[idx, :prompt_len]


def _response_logp(student, sequences, prompt_len):
    """Tape logp of tokens after prompt_len; returns (logp [B, G], routings)."""
    logits, routings = lm_forward(student, sequences[:, :-1])
    gen = sequences.shape[1] - prompt_len
    rows = narrow(logits, 1, prompt_len - 1, gen)
    logp = log_softmax_lastdim(rows)
    return gather_lastdim(logp, sequences[:, prompt_len:]), routings


def run_sft_stage(student, teacher, corpus, cfg: SftConfig, aux_cfg: AuxConfig,
                  seed, rows, step_offset=0, stage="sft"):
    """Clone teacher-sampled continuations under the group balancing loss."""
    rng = np.random.default_rng(np.random.PCG64([seed, 10]))
    prompts = _prompt_bank(corpus, cfg.prompt_len, cfg.num_prompts, rng)
    rollouts = sample_rollouts(
        teacher, prompts, cfg.gen_len, temperature=cfg.temperature,
        seed=int(rng.integers(2**32)),
    )
    sequences = np.stack([r.sequence for r in rollouts])
    opt = AdamW(student.parameters(), lr=cfg.lr)
    order = rng.permutation(len(rollouts))
    cursor = 0
    t0 = time.monotonic()
    rows.append(LogRow(
        step=step_offset, stage=f"{stage}:start", task_loss=float("nan"),
        l_ga=float("nan"), r_ze=float("nan"), kl_estimate=float("nan"),
        wall_time=0.0,
    ))
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(rollouts))
            cursor = 0
        batch = sequences[order[cursor : cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        logp, routings = _response_logp(student, batch, cfg.prompt_len)
        nll = -logp.mean()
        l_ga = _group_loss_or_none(routings, aux_cfg)
        total = nll if l_ga is None else nll + l_ga
        _check_finite_loss(total.item(), stage, step)
        opt.zero_grad()
        total.backward()
        opt.step()
        rows.append(LogRow(
            step=step_offset + step, stage=stage, task_loss=nll.item(),
            l_ga=0.0 if l_ga is None else l_ga.item(),
            r_ze=_mean_r_ze(routings),
            kl_estimate=float("nan"), wall_time=time.monotonic() - t0,
        ))
    return step_offset + cfg.steps


def run_opd_stage(student, teacher, corpus, cfg: OpdConfig, aux_cfg: AuxConfig,
                  seed, rows, step_offset=0, stage="opd"):
    """On-policy distillation against the teacher.

    Per step the student samples continuations of corpus prompts, the
    teacher scores them (logp floored at -30 nats), and the student takes
    one step on -mean_t(A_t * logp_t) + L_GA with A_t the detached
    teacher-student logp gap. The expectation of that gradient over
    student samples equals the gradient of the reverse KL to the teacher.
    Returns (next_step_offset, floor_event_total).
    """
    rng = np.random.default_rng(np.random.PCG64([seed, 20]))
    opt = AdamW(student.parameters(), lr=cfg.lr)
    floor_total = 0
    t0 = time.monotonic()
    rows.append(LogRow(
        step=step_offset, stage=f"{stage}:start", task_loss=float("nan"),
        l_ga=float("nan"), r_ze=float("nan"), kl_estimate=float("nan"),
        wall_time=0.0,
    ))
    for step in range(cfg.steps):
        prompts = _prompt_bank(corpus, cfg.prompt_len, cfg.prompts_per_step, rng)
        rollouts = sample_rollouts(
            student, prompts, cfg.gen_len, temperature=cfg.temperature,
            seed=int(rng.integers(2**32)),
        )
        for r in rollouts:
            if r.provenance != id(student):
                raise StateError("opd rollout was not sampled from the student")
        _, floor_events = score_rollouts(teacher, rollouts)
        floor_total += floor_events
        sequences = np.stack([r.sequence for r in rollouts])
        teacher_lp = np.stack([r.teacher_logp for r in rollouts])
        logp, routings = _response_logp(student, sequences, cfg.prompt_len)
        advantage = teacher_lp - logp.data  # constant wrt the tape
        surrogate = -(logp * advantage).mean()
        l_ga = _group_loss_or_none(routings, aux_cfg)
        total = surrogate if l_ga is None else surrogate + l_ga
        _check_finite_loss(total.item(), stage, step)
        kl_estimate = float(np.mean(logp.data - teacher_lp))
        opt.zero_grad()
        total.backward()
        opt.step()
        rows.append(LogRow(
            step=step_offset + step, stage=stage, task_loss=surrogate.item(),
            l_ga=0.0 if l_ga is None else l_ga.item(),
            r_ze=_mean_r_ze(routings),
            kl_estimate=kl_estimate, wall_time=time.monotonic() - t0,
        ))
    return step_offset + cfg.steps, floor_total


def adapt(teacher: MoEModel, corpus, cfg: AdaptConfig, out_dir=None):
    """Inject zero candidates into a copy of the teacher and run the
    stage schedule. Returns (student, rows, summary).

    When out_dir is given, the student is checkpointed after every stage
    as stage{i}_{name}.ckpt.
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    student = inject(teacher, cfg.injection)
    rows = []
    summary = {"stages": cfg.stage_list(), "floor_events": 0,
               "checkpoints": []}
    offset = 0
    for i, name in enumerate(cfg.stage_list()):
        stage_seed = cfg.seed * 1000 + i
        if name == "sft":
            offset = run_sft_stage(
                student, teacher, corpus, cfg.sft, cfg.aux, stage_seed,
                rows, step_offset=offset,
            )
        else:
            offset, events = run_opd_stage(
                student, teacher, corpus, cfg.opd, cfg.aux, stage_seed,
                rows, step_offset=offset,
            )
            summary["floor_events"] += events
        if out_dir is not None:
            path = out_dir / f"stage{i}_{name}.ckpt"
            save_model(student, path)
            summary["checkpoints"].append(str(path))
    return student, rows, summary
