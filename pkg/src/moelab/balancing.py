"""Routing statistics and the load-balancing objectives.

Two losses over a batch of routing decisions:

* aux_loss       L_A  = alpha * (N + N_Z) / K * sum_i f_i * P_i
* group_aux_loss L_GA = alpha * (N + N_Z*w) / K
                        * (f_E * P_E / N  +  f_Z * P_Z / (N_Z * w))

where f_i is the fraction of tokens whose top-K contains candidate i
(gradient-free), P_i the mean full-softmax probability of candidate i
(differentiable), and the E/Z subscripts sum each quantity over the normal
and zero-expert groups. Under the dispatch coupling f_g = K * P_g the group
loss is minimized at P_Z = N_Z*w / (N + N_Z*w), which is therefore the
routing ratio the loss drives the model toward (target_rze).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, NumericalError
from .model import BatchRouting
from .tensor import Tensor, concat, narrow


@dataclass
class AuxConfig:
    alpha: float = 0.1
    w: float = 2.0

    def __post_init__(self):
        # alpha = 0 is allowed to switch the loss off cleanly
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.w <= 0:
            raise ConfigError(f"w must be > 0, got {self.w}")


@dataclass
class BatchRoutingStats:
    f: np.ndarray  # [N + N_Z] dispatch fractions, sum K
    P: Tensor  # [N + N_Z] mean router probabilities, sum 1, on tape
    n_normal: int
    n_zero: int
    k: int
    f_E: float
    f_Z: float
    P_E: Tensor  # scalar, on tape
    P_Z: Tensor  # scalar, on tape
    r_ze: float
    k_e_mean: float
    k_z_mean: float


def batch_stats(decisions, n_normal, n_zero) -> BatchRoutingStats:
    """Aggregate a routing stream into batch statistics.

    ``decisions`` is either a BatchRouting (the batched instrumentation of
    one layer) or a nonempty list of per-token RoutingDecision objects.
    """
    sel, probs = _as_batch(decisions)
    n_cand = n_normal + n_zero
    if probs.shape[1] != n_cand:
        raise InputError(
            f"probabilities cover {probs.shape[1]} candidates, expected "
            f"{n_normal} + {n_zero}"
        )
    m, k = sel.shape
    indicator = np.zeros((m, n_cand))
    np.put_along_axis(indicator, sel, 1.0, axis=1)
    f = indicator.sum(axis=0) / m
    P = probs.mean(axis=0)

    if abs(f.sum() - k) > 1e-10:
        raise NumericalError(f"dispatch fractions sum to {f.sum()}, expected {k}")
    if abs(P.data.sum() - 1.0) > 1e-10:
        raise NumericalError(f"mean probabilities sum to {P.data.sum()}, expected 1")

    f_E = float(f[:n_normal].sum())
    f_Z = float(f[n_normal:].sum())
    P_E = narrow(P, 0, 0, n_normal).sum()
    if n_zero > 0:
        P_Z = narrow(P, 0, n_normal, n_zero).sum()
    else:
        P_Z = Tensor(0.0)
    k_z_mean = f_Z
    k_e_mean = f_E
    return BatchRoutingStats(
        f=f,
        P=P,
        n_normal=n_normal,
        n_zero=n_zero,
        k=k,
        f_E=f_E,
        f_Z=f_Z,
        P_E=P_E,
        P_Z=P_Z,
        r_ze=k_z_mean / k,
        k_e_mean=k_e_mean,
        k_z_mean=k_z_mean,
    )


def _as_batch(decisions):
    if isinstance(decisions, BatchRouting):
        return decisions.selected, decisions.probs
    decisions = list(decisions)
    if not decisions:
        raise InputError("empty routing batch")
    sel = np.array([d.selected for d in decisions], dtype=np.int64)
    rows = [d.probs_full.reshape(1, -1) for d in decisions]
    probs = rows[0] if len(rows) == 1 else concat(rows, axis=0)
    return sel, probs


def aux_loss(stats: BatchRoutingStats, cfg: AuxConfig):
    """Expert-level balancing loss; equals alpha exactly under uniform routing."""
    n_cand = stats.n_normal + stats.n_zero
    scale = cfg.alpha * n_cand / stats.k
    return (stats.P * stats.f).sum() * scale


def group_aux_loss(stats: BatchRoutingStats, cfg: AuxConfig, n_normal, n_zero):
    """Group-level balancing loss between the normal and zero-expert masses."""
    if n_zero == 0:
        raise ConfigError("group_aux_loss needs n_zero > 0")
    scale = cfg.alpha * (n_normal + n_zero * cfg.w) / stats.k
    normal_term = stats.P_E * (stats.f_E / n_normal)
    zero_term = stats.P_Z * (stats.f_Z / (n_zero * cfg.w))
    return (normal_term + zero_term) * scale


def target_rze(n_normal, n_zero, w) -> float:
    """Closed-form routing ratio the group loss drives toward."""
    if n_normal <= 0 or n_zero <= 0 or w <= 0:
        raise ConfigError(
            f"target_rze needs positive inputs, got ({n_normal}, {n_zero}, {w})"
        )
    return n_zero * w / (n_normal + n_zero * w)


def layer_mean_aux(routings, cfg: AuxConfig):
    """Mean expert-level loss over MoE layers plus the per-layer stats.

    The pretraining counterpart of layer_mean_group_aux: keeps expert
    utilization even when there are no zero candidates to group.
    """
    losses = []
    stats_list = []
    for routing in routings:
        stats = batch_stats(routing, routing.n_normal, routing.n_zero)
        stats_list.append(stats)
        losses.append(aux_loss(stats, cfg))
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses)), stats_list


def layer_mean_group_aux(routings, cfg: AuxConfig):
    """Mean group loss over MoE layers plus the per-layer stats.

    This is the L_GA term that training objectives add: computing it per
    layer and averaging keeps alpha comparable across model depths.
    """
    losses = []
    stats_list = []
    for routing in routings:
        stats = batch_stats(routing, routing.n_normal, routing.n_zero)
        stats_list.append(stats)
        losses.append(group_aux_loss(stats, cfg, routing.n_normal, routing.n_zero))
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses)), stats_list
