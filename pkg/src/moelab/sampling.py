"""Autoregressive rollout generation and teacher-forced scoring.

Rollouts record, for every generated token: the sampler model's log
probability at temperature 1, the entropy of its full next-token
distribution, and the per-layer count of zero candidates the router
selected while emitting that token. Sampling may apply a temperature, but
recorded log probabilities always refer to the unmodified model
distribution, which is what the distillation losses are defined on.
Scoring a rollout under another model clamps log probabilities at a floor
of -30 nats and counts how often the floor was hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.special

from .errors import InputError
from .model import MoEModel, lm_forward
from .tensor import gather_lastdim, log_softmax_lastdim, narrow, no_grad

LOGP_FLOOR = -30.0


@dataclass
class Rollout:
    prompt: np.ndarray  # [P] int64
    tokens: np.ndarray  # [T] int64 generated continuation
    logp: np.ndarray  # [T] sampler logp of each generated token
    entropy: np.ndarray  # [T] sampler next-token entropy, nats
    zero_selected: np.ndarray  # [T, L] zero picks per layer while emitting
    temperature: float
    provenance: int  # id() of the model that produced the tokens
    teacher_logp: np.ndarray | None = None  # filled by score_rollouts
    floor_events: int = 0

    @property
    def sequence(self):
        return np.concatenate([self.prompt, self.tokens])


def _next_token_stats(logits_row, temperature, rng):
    """Sample one token; return (token, model logp, model entropy)."""
    logp = scipy.special.log_softmax(logits_row)
    if temperature == 0.0:
        tok = int(np.argmax(logits_row))
    else:
        probs = scipy.special.softmax(logits_row / temperature)
        u = rng.random()
        tok = int(np.searchsorted(np.cumsum(probs), u))
        tok = min(tok, logits_row.shape[0] - 1)
    ent = float(-np.sum(np.exp(logp) * np.where(np.isfinite(logp), logp, 0.0)))
    return tok, float(logp[tok]), ent


def sample_rollouts(model: MoEModel, prompts, num_tokens, temperature=1.0,
                    seed=0, variant="dynamic"):
    """Generate continuations for a batch of equal-length prompts.

    Each prompt gets its own generator stream derived from (seed, index),
    so rollout b is unchanged when the batch is re-cut. The full prefix is
    re-run every step; at this scale that costs little and keeps the
    recorded statistics trivially consistent with lm_forward.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim == 1:
        prompts = prompts[None, :]
    if prompts.ndim != 2 or prompts.shape[1] < 1:
        raise InputError(f"prompts must be [batch, len], got {prompts.shape}")
    if num_tokens < 1:
        raise InputError("num_tokens must be positive")
    if temperature < 0:
        raise InputError("temperature must be >= 0")
    total = prompts.shape[1] + num_tokens
    if total > model.config.max_seq_len:
        raise InputError(
            f"prompt {prompts.shape[1]} + {num_tokens} generated tokens "
            f"exceeds max_seq_len {model.config.max_seq_len}"
        )

    batch, plen = prompts.shape
    layers = model.config.num_layers
    rngs = [np.random.default_rng(np.random.PCG64([seed, b]))
            for b in range(batch)]
    seq = np.concatenate(
        [prompts, np.zeros((batch, num_tokens), dtype=np.int64)], axis=1
    )
    logp = np.zeros((batch, num_tokens))
    entropy = np.zeros((batch, num_tokens))
    zero_sel = np.zeros((batch, num_tokens, layers), dtype=np.int64)

    with no_grad():
        for t in range(num_tokens):
            cur = plen + t
            logits, routings = lm_forward(model, seq[:, :cur], variant=variant)
            last = logits.data[:, -1, :]
            for l, routing in enumerate(routings):
                counts = routing.zero_selected.reshape(batch, cur)
                zero_sel[:, t, l] = counts[:, -1]
            for b in range(batch):
                tok, lp, ent = _next_token_stats(last[b], temperature, rngs[b])
                seq[b, cur] = tok
                logp[b, t] = lp
                entropy[b, t] = ent

    return [
        Rollout(
            prompt=prompts[b].copy(),
            tokens=seq[b, plen:].copy(),
            logp=logp[b].copy(),
            entropy=entropy[b].copy(),
            zero_selected=zero_sel[b].copy(),
            temperature=temperature,
            provenance=id(model),
        )
        for b in range(batch)
    ]


def score_tokens(model: MoEModel, sequences, prompt_len, variant="dynamic"):
    """Teacher-forced logp of tokens after prompt_len, floored at -30 nats.

    Returns (logp [B, T], floored [B, T] bool). sequences is
    [B, prompt_len + T].
    """
    sequences = np.asarray(sequences, dtype=np.int64)
    if sequences.ndim != 2 or sequences.shape[1] <= prompt_len:
        raise InputError(
            f"sequences {sequences.shape} must extend past prompt_len {prompt_len}"
        )
    gen = sequences.shape[1] - prompt_len
    with no_grad():
        logits, _ = lm_forward(model, sequences[:, :-1], variant=variant)
        # position i is predicted by logits at i-1; the tape ops keep this
        # bitwise identical to a gradient pass over the same sequences
        rows = log_softmax_lastdim(narrow(logits, 1, prompt_len - 1, gen))
        raw = gather_lastdim(rows, sequences[:, prompt_len:]).data
    return np.maximum(raw, LOGP_FLOOR), raw < LOGP_FLOOR


def score_rollouts(model: MoEModel, rollouts, variant="dynamic"):
    """Fill teacher_logp on each rollout in place; return (rollouts, events)."""
    if not rollouts:
        raise InputError("no rollouts to score")
    plen = rollouts[0].prompt.shape[0]
    tlen = rollouts[0].tokens.shape[0]
    for r in rollouts:
        if r.prompt.shape[0] != plen or r.tokens.shape[0] != tlen:
            raise InputError("rollouts in a batch must share prompt/length")
    seqs = np.stack([r.sequence for r in rollouts])
    logp, floored = score_tokens(model, seqs, plen, variant=variant)
    for b, r in enumerate(rollouts):
        r.teacher_logp = logp[b].copy()
        r.floor_events = int(floored[b].sum())
    return rollouts, int(floored.sum())
