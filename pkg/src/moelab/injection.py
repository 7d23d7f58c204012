"""Augment a static trained model with parameterless experts.

``inject`` grows each router by ``n_new`` rows drawn i.i.d. Gaussian with
the per-layer empirical mean and variance of that layer's original router
entries (pooled over the whole matrix), so the new candidates start at the
original logit scale. Every original parameter is copied bitwise.

``diagnose_mismatch`` quantifies the injection-time output perturbation:
each augmented MoE layer is applied to the original model's own layer-input
stream, isolating the per-layer routing change from downstream drift, and
compared against the original layer output token by token.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InputError, StateError
from .model import MoEModel, Tensor, moe_apply
from .tensor import no_grad


@dataclass
class InjectionSpec:
    n_new: int
    kind: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.n_new, (int, np.integer)) or self.n_new < 1:
            raise ConfigError(f"n_new must be a positive int, got {self.n_new!r}")
        if self.kind not in ("zero", "copy"):
            raise ConfigError(f"kind must be 'zero' or 'copy', got {self.kind!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")


@dataclass
class LayerInjectionReport:
    layer: int
    mean_orig: float
    std_orig: float
    mean_new: float
    std_new: float
    metrics: dict = field(default_factory=dict)
    excluded_tokens: int = 0


@dataclass
class InjectionReport:
    kind: str
    layers: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "metric", "value"])
            for rep in self.layers:
                moments = [
                    ("mean_orig", rep.mean_orig),
                    ("std_orig", rep.std_orig),
                    ("mean_new", rep.mean_new),
                    ("std_new", rep.std_new),
                    ("excluded_tokens", rep.excluded_tokens),
                ]
                for name, value in moments + sorted(rep.metrics.items()):
                    writer.writerow([rep.layer, name, repr(float(value))])


def inject(model: MoEModel, spec: InjectionSpec) -> MoEModel:
    """Return an augmented copy of a static model; the input is untouched."""
    if model.config.is_augmented:
        raise StateError(
            f"model already has {model.config.num_zero_experts} injected experts"
        )
    new_config = replace(
        model.config, num_zero_experts=spec.n_new, zero_kind=spec.kind
    )
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    clone = model.copy()
    params = dict(clone.named_parameters())
    for i, layer in enumerate(model.layers):
        w = layer.moe.router.weight.data
        mean, std = float(w.mean()), float(w.std())
        new_rows = rng.normal(mean, std, size=(spec.n_new, w.shape[1]))
        params[f"layers.{i}.router.weight"] = Tensor(
            np.concatenate([w.copy(), new_rows], axis=0), requires_grad=True
        )
    from .model import _rebuild_from_params

    return _rebuild_from_params(new_config, params)


def mismatch_metrics(y, y_tilde):
    """Token-level comparison of two output streams [M, H].

    Returns (metrics dict, excluded count). Tokens with ``|y| = 0`` are
    excluded. A zero-norm ``y_tilde`` (fully skipped token) counts cosine 0.

    * norm_diff:   mean |  |y~| - |y| | / |y|
    * vector_diff: mean | y~ - y | / |y|   (secondary reading of the same
      "relative L2 difference" label)
    * cosine:      mean cosine similarity
    """
    norms = np.linalg.norm(y, axis=1)
    norms_t = np.linalg.norm(y_tilde, axis=1)
    valid = norms > 0.0
    excluded = int((~valid).sum())
    if not valid.any():
        raise InputError("every token has a zero-norm reference output")
    ny, nyt = norms[valid], norms_t[valid]
    dots = (y[valid] * y_tilde[valid]).sum(axis=1)
    cosine = np.where(nyt > 0.0, dots / np.where(nyt > 0.0, ny * nyt, 1.0), 0.0)
    metrics = {
        "norm_diff": float(np.mean(np.abs(nyt - ny) / ny)),
        "vector_diff": float(
            np.mean(np.linalg.norm(y_tilde[valid] - y[valid], axis=1) / ny)
        ),
        "cosine": float(np.mean(cosine)),
    }
    return metrics, excluded


def diagnose_mismatch(original: MoEModel, augmented: MoEModel, batch) -> InjectionReport:
    """Per-layer perturbation report between a static model and its
    augmented variant on a token batch [B, T]."""
    same_shape = replace(
        augmented.config,
        num_zero_experts=original.config.num_zero_experts,
        zero_kind=original.config.zero_kind,
    )
    if same_shape != original.config:
        raise ConfigError(
            "models differ beyond the injected experts; reports would not "
            "be comparable"
        )
    batch = np.asarray(batch)
    if batch.size == 0:
        raise InputError("empty diagnosis batch")
    captures = []
    with no_grad():
        original.forward(batch, capture=captures)
    reports = []
    for i, cap in enumerate(captures):
        w_orig = original.layers[i].moe.router.weight.data
        w_aug = augmented.layers[i].moe.router.weight.data
        new_block = w_aug[w_orig.shape[0] :]
        h = Tensor(cap["h"])
        with no_grad():
            y_tilde, (normal_part, copy_part), _ = moe_apply(
                augmented.layers[i].moe, h, variant="dynamic"
            )
        metrics, excluded = mismatch_metrics(cap["y"], y_tilde.data)
        if augmented.config.zero_kind == "copy":
            normal_metrics, _ = mismatch_metrics(cap["y"], normal_part.data)
            copy_metrics, _ = mismatch_metrics(cap["y"], copy_part.data)
            metrics.update({f"normal_{k}": v for k, v in normal_metrics.items()})
            metrics.update({f"copy_{k}": v for k, v in copy_metrics.items()})
        reports.append(
            LayerInjectionReport(
                layer=i,
                mean_orig=float(w_orig.mean()),
                std_orig=float(w_orig.std()),
                mean_new=float(new_block.mean()) if new_block.size else 0.0,
                std_new=float(new_block.std()) if new_block.size else 0.0,
                metrics=metrics,
                excluded_tokens=excluded,
            )
        )
    return InjectionReport(kind=augmented.config.zero_kind, layers=reports)
