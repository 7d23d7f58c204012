"""Toy causal transformer with mixture-of-experts feed-forward blocks.

Each block is: RMSNorm -> grouped-query attention -> residual -> RMSNorm ->
MoE feed-forward -> residual. The MoE router scores N normal experts plus
N_Z parameterless candidates (zero or copy kind); a token's top-K selection
may therefore skip part of its expert compute.

Forward variants over one trained parameter set:

* dynamic       zero candidates contribute nothing, their gate mass is dropped
* masked        parameterless candidates removed from the pool; reproduces the
                pre-augmentation model bitwise
* renormalized  gates of the active normal experts rescaled to sum to one

Copy-kind candidates add ``gate * h`` instead of nothing and are reported as
a separate output component.

Weights are stored [out, in]; hidden states are token-major rows. Expert
dispatch walks candidates in ascending index order so reductions are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError
from .tensor import (
    MASK_SENTINEL,
    Tensor,
    concat,
    gather_lastdim,
    masked_fill,
    matmul,
    matmul_t,
    narrow,
    no_grad,
    repeat_axis,
    scatter_rows,
    softmax_lastdim,
    take_rows,
)

NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    vocab_size: int = 64
    num_layers: int = 4
    hidden: int = 64
    attn_inner: int = 64
    num_heads: int = 4
    kv_ratio: float = 0.5
    expert_inner: int = 32
    num_experts: int = 16
    top_k: int = 4
    num_zero_experts: int = 0
    max_seq_len: int = 128
    k_override: Optional[int] = None
    zero_kind: str = "zero"

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = {
            "vocab_size": self.vocab_size,
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "attn_inner": self.attn_inner,
            "num_heads": self.num_heads,
            "expert_inner": self.expert_inner,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "max_seq_len": self.max_seq_len,
        }
        for name, value in positive.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.num_zero_experts < 0:
            raise ConfigError(
                f"num_zero_experts must be >= 0, got {self.num_zero_experts}"
            )
        if self.attn_inner % self.num_heads != 0:
            raise ConfigError(
                f"num_heads {self.num_heads} must divide attn_inner {self.attn_inner}"
            )
        if not 0.0 < self.kv_ratio <= 1.0:
            raise ConfigError(f"kv_ratio must lie in (0, 1], got {self.kv_ratio}")
        kv = self.kv_ratio * self.num_heads
        if abs(kv - round(kv)) > 1e-9 or round(kv) < 1:
            raise ConfigError(
                f"kv_ratio {self.kv_ratio} times num_heads {self.num_heads} "
                "must be a positive integer"
            )
        if self.top_k > self.num_experts:
            raise ConfigError(
                f"top_k {self.top_k} exceeds num_experts {self.num_experts}"
            )
        if self.k_override is not None and not (1 <= self.k_override <= self.top_k):
            raise ConfigError(
                f"k_override must lie in [1, top_k={self.top_k}], "
                f"got {self.k_override}"
            )
        if self.zero_kind not in ("zero", "copy"):
            raise ConfigError(f"zero_kind must be 'zero' or 'copy', got {self.zero_kind!r}")

    @property
    def num_candidates(self):
        return self.num_experts + self.num_zero_experts

    @property
    def num_kv_heads(self):
        return int(round(self.kv_ratio * self.num_heads))

    @property
    def head_dim(self):
        return self.attn_inner // self.num_heads

    @property
    def kv_inner(self):
        return self.num_kv_heads * self.head_dim

    @property
    def is_augmented(self):
        return self.num_zero_experts > 0

    @property
    def effective_k(self):
        return self.k_override if self.k_override is not None else self.top_k


@dataclass
class Expert:
    up: Optional[Tensor]
    gate: Optional[Tensor]
    down: Optional[Tensor]
    kind: str = "normal"

    def __post_init__(self):
        if self.kind not in ("normal", "zero", "copy"):
            raise ConfigError(f"unknown expert kind {self.kind!r}")
        if self.kind != "normal" and self.up is not None:
            raise ConfigError(f"{self.kind} experts carry no parameters")
        if self.kind == "normal" and (
            self.up is None or self.gate is None or self.down is None
        ):
            raise ConfigError("normal experts need up, gate, and down weights")


def expert_forward(expert: Expert, h):
    """Gated FFN of one normal expert on token rows [M, H]."""
    if expert.kind != "normal":
        raise ConfigError(f"expert_forward needs a normal expert, got {expert.kind}")
    return matmul_t(matmul_t(h, expert.gate).silu() * matmul_t(h, expert.up), expert.down)


@dataclass
class RouterParams:
    weight: Tensor  # [N + N_Z, H]; normal-expert rows first
    n_normal: int

    def __post_init__(self):
        if self.weight.shape[0] < self.n_normal:
            raise ConfigError(
                f"router has {self.weight.shape[0]} rows but claims "
                f"{self.n_normal} normal experts"
            )

    @property
    def n_candidates(self):
        return self.weight.shape[0]


@dataclass
class RoutingDecision:
    selected: list
    gates: list
    zero_selected: int
    probs_full: Tensor


@dataclass
class MoELayer:
    router: RouterParams
    experts: list
    top_k: int

    def __post_init__(self):
        if len(self.experts) != self.router.n_candidates:
            raise ConfigError(
                f"{len(self.experts)} experts vs {self.router.n_candidates} "
                "router rows"
            )
        for e in self.experts[: self.router.n_normal]:
            if e.kind != "normal":
                raise ConfigError("normal experts must occupy the leading slots")
        for e in self.experts[self.router.n_normal :]:
            if e.kind == "normal":
                raise ConfigError("parameterless experts must follow the normal ones")


@dataclass
class AttentionParams:
    wq: Tensor  # [H_attn, H]
    wk: Tensor  # [kv_inner, H]
    wv: Tensor  # [kv_inner, H]
    wo: Tensor  # [H, H_attn]


@dataclass
class TransformerLayer:
    attn_norm: Tensor
    attn: AttentionParams
    moe_norm: Tensor
    moe: MoELayer


@dataclass
class BatchRouting:
    """Per-layer routing instrumentation for a flat batch of M tokens.

    ``gates`` and ``probs`` stay on the tape so balancing losses can
    differentiate through them; everything else is plain numpy.
    """

    selected: np.ndarray  # [M, k] int, ascending per row
    gates: Tensor  # [M, k]
    probs: Tensor  # [M, C_eff]
    n_normal: int
    n_zero: int
    expert_rows: np.ndarray  # [C_eff] rows processed per candidate
    zero_selected: np.ndarray  # [M] selections outside the normal group
    fully_skipped: np.ndarray  # [M] bool

    @property
    def k(self):
        return self.selected.shape[1]

    @property
    def r_ze_per_token(self):
        return self.zero_selected / self.k

    def decision(self, m):
        return RoutingDecision(
            selected=[int(i) for i in self.selected[m]],
            gates=[float(g) for g in self.gates.data[m]],
            zero_selected=int(self.zero_selected[m]),
            probs_full=Tensor(self.probs.data[m]),
        )

    def decisions(self):
        return [self.decision(m) for m in range(self.selected.shape[0])]


def topk_indices(probs, k):
    """Top-k column indices per row, ties to the lower index, rows sorted
    ascending. ``probs`` is a [M, C] ndarray."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return np.sort(order[:, :k], axis=-1)


def route_topk(router: RouterParams, h, k) -> RoutingDecision:
    """Route a single hidden state [H] through the full candidate pool."""
    if k > router.n_candidates:
        raise ConfigError(
            f"k={k} exceeds candidate count {router.n_candidates}"
        )
    h_t = h if isinstance(h, Tensor) else Tensor(h)
    logits = matmul_t(h_t.reshape(1, -1), router.weight)
    probs = softmax_lastdim(logits)
    sel = topk_indices(probs.data, k)[0]
    p_sel = probs.data[0, sel]
    gates = p_sel / p_sel.sum()
    return RoutingDecision(
        selected=[int(i) for i in sel],
        gates=[float(g) for g in gates],
        zero_selected=int((sel >= router.n_normal).sum()),
        probs_full=probs.reshape(router.n_candidates),
    )


def moe_apply(layer: MoELayer, h, variant="dynamic", k=None):
    """Apply one MoE layer to token rows h [M, H].

    Returns (y, parts, BatchRouting) where parts = (normal_part, copy_part);
    y = normal_part + copy_part. Zero-kind selections contribute nothing and
    trigger no expert computation. ``variant``:

    * "dynamic"       full candidate pool, dropped zero-gate mass
    * "masked"        candidate pool restricted to the normal experts; runs
                      the identical computation as a never-augmented layer
    * "renormalized"  active normal gates rescaled to sum to one per token
    """
    if variant not in ("dynamic", "masked", "renormalized"):
        raise ConfigError(f"unknown forward variant {variant!r}")
    n_normal = layer.router.n_normal
    n_total = layer.router.n_candidates
    n_eff = n_normal if variant == "masked" else n_total
    if k is None:
        k = layer.top_k
    if k > n_eff:
        raise ConfigError(f"k={k} exceeds candidate count {n_eff}")
    M = h.shape[0]

    weight = layer.router.weight
    if n_eff < n_total:
        weight = narrow(weight, 0, 0, n_eff)
    logits = matmul_t(h, weight)
    probs = softmax_lastdim(logits)
    with no_grad():
        sel = topk_indices(probs.data, k)
    cols = [gather_lastdim(probs, sel[:, j]).reshape(M, 1) for j in range(k)]
    gsel = concat(cols, axis=1)
    gates = gsel / gsel.sum(axis=-1, keepdims=True)

    zero_selected = (sel >= n_normal).sum(axis=1)
    fully_skipped = zero_selected == k

    if variant == "renormalized":
        normal_mask = (sel < n_normal).astype(np.float64)
        # rows with no active normal expert keep mass 0; they are never
        # divided through because no dispatch touches them
        normal_mass = (gates * normal_mask).sum(axis=-1, keepdims=True)

    expert_rows = np.zeros(n_eff, dtype=np.int64)
    normal_acc = None
    copy_acc = None
    for i in range(n_eff):
        pos, slot = np.nonzero(sel == i)
        if pos.size == 0:
            continue
        kind = layer.experts[i].kind
        if kind == "zero":
            continue
        gate_col = gather_lastdim(take_rows(gates, pos), slot).reshape(-1, 1)
        if kind == "normal":
            if variant == "renormalized":
                gate_col = gate_col / take_rows(normal_mass, pos)
            expert_rows[i] = pos.size
            y_i = expert_forward(layer.experts[i], take_rows(h, pos))
            piece = scatter_rows(y_i * gate_col, pos, M)
            normal_acc = piece if normal_acc is None else normal_acc + piece
        else:  # copy: output equals input, no parameters
            piece = scatter_rows(take_rows(h, pos) * gate_col, pos, M)
            copy_acc = piece if copy_acc is None else copy_acc + piece

    zero_like = Tensor(np.zeros_like(h.data))
    normal_part = normal_acc if normal_acc is not None else zero_like
    copy_part = copy_acc if copy_acc is not None else Tensor(np.zeros_like(h.data))
    y = normal_part if copy_acc is None else normal_part + copy_part

    routing = BatchRouting(
        selected=sel,
        gates=gates,
        probs=probs,
        n_normal=n_normal,
        n_zero=n_eff - n_normal,
        expert_rows=expert_rows,
        zero_selected=zero_selected,
        fully_skipped=fully_skipped,
    )
    return y, (normal_part, copy_part), routing


def _as_rows(h):
    h_t = h if isinstance(h, Tensor) else Tensor(h)
    if h_t.ndim == 1:
        return h_t.reshape(1, -1), True
    return h_t, False


def moe_forward_static(layer: MoELayer, h):
    """y = sum of gated normal-expert outputs with the candidate pool
    restricted to normal experts (the pre-augmentation computation)."""
    rows, squeeze = _as_rows(h)
    y, _, _ = moe_apply(layer, rows, variant="masked")
    return y.reshape(-1) if squeeze else y


def moe_forward_dynamic(layer: MoELayer, h):
    rows, squeeze = _as_rows(h)
    y, _, routing = moe_apply(layer, rows, variant="dynamic")
    if squeeze:
        return y.reshape(-1), routing.decision(0)
    return y, routing


def moe_forward_renormalized(layer: MoELayer, h):
    rows, squeeze = _as_rows(h)
    y, _, routing = moe_apply(layer, rows, variant="renormalized")
    if squeeze:
        return y.reshape(-1), routing.decision(0)
    return y, routing


def moe_forward_copy(layer: MoELayer, h):
    """Returns (y, normal_component, copy_component), y = sum of the two."""
    rows, squeeze = _as_rows(h)
    y, (normal_part, copy_part), _ = moe_apply(layer, rows, variant="dynamic")
    if squeeze:
        return y.reshape(-1), normal_part.reshape(-1), copy_part.reshape(-1)
    return y, normal_part, copy_part


class MoEModel:
    """Parameter container plus forward pass. Instances are immutable during
    forwards; optimizers update parameter tensors in place as single owners."""

    def __init__(self, config: ModelConfig, tok_embed, pos_embed, layers, final_norm, head):
        self.config = config
        self.tok_embed = tok_embed
        self.pos_embed = pos_embed
        self.layers = layers
        self.final_norm = final_norm
        self.head = head

    # -- construction ------------------------------------------------------

    @staticmethod
    def init(config: ModelConfig, rng) -> "MoEModel":
        """Random initialization. Residual-output projections are shrunk by
        sqrt(2 * num_layers) to keep the stream scale flat with depth."""
        cfg = config
        h, a = cfg.hidden, cfg.attn_inner
        resid = 1.0 / np.sqrt(2.0 * cfg.num_layers)

        def w(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)

        tok = w((cfg.vocab_size, h), 0.02)
        pos = w((cfg.max_seq_len, h), 0.02)
        layers = []
        for _ in range(cfg.num_layers):
            attn = AttentionParams(
                wq=w((a, h), h**-0.5),
                wk=w((cfg.kv_inner, h), h**-0.5),
                wv=w((cfg.kv_inner, h), h**-0.5),
                wo=w((h, a), a**-0.5 * resid),
            )
            experts = [
                Expert(
                    up=w((cfg.expert_inner, h), h**-0.5),
                    gate=w((cfg.expert_inner, h), h**-0.5),
                    down=w((h, cfg.expert_inner), cfg.expert_inner**-0.5 * resid),
                )
                for _ in range(cfg.num_experts)
            ]
            experts += [
                Expert(None, None, None, kind=cfg.zero_kind)
                for _ in range(cfg.num_zero_experts)
            ]
            router = RouterParams(
                weight=w((cfg.num_candidates, h), 0.02), n_normal=cfg.num_experts
            )
            layers.append(
                TransformerLayer(
                    attn_norm=ones(h),
                    attn=attn,
                    moe_norm=ones(h),
                    moe=MoELayer(router=router, experts=experts, top_k=cfg.top_k),
                )
            )
        return MoEModel(cfg, tok, pos, layers, ones(h), w((cfg.vocab_size, h), 0.02))

    # -- parameter access --------------------------------------------------

    def named_parameters(self):
        out = [("tok_embed", self.tok_embed), ("pos_embed", self.pos_embed)]
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.attn_norm", layer.attn_norm))
            for part in ("wq", "wk", "wv", "wo"):
                out.append((f"layers.{i}.attn.{part}", getattr(layer.attn, part)))
            out.append((f"layers.{i}.moe_norm", layer.moe_norm))
            out.append((f"layers.{i}.router.weight", layer.moe.router.weight))
            for j, expert in enumerate(layer.moe.experts):
                if expert.kind != "normal":
                    continue
                for part in ("up", "gate", "down"):
                    out.append((f"layers.{i}.experts.{j}.{part}", getattr(expert, part)))
        out.append(("final_norm", self.final_norm))
        out.append(("head", self.head))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def copy(self) -> "MoEModel":
        """Deep copy with fresh parameter tensors (same values)."""
        mapping = {name: Tensor(t.data.copy(), requires_grad=True)
                   for name, t in self.named_parameters()}
        return _rebuild_from_params(self.config, mapping)

    # -- forward -----------------------------------------------------------

    def forward(self, tokens, variant="dynamic", capture=None):
        """Causal LM forward. tokens: int array [B, T] (or [T]).

        Returns (logits Tensor [B, T, vocab], list of per-layer BatchRouting
        over the flattened B*T token stream). If ``capture`` is a list it
        receives one dict per layer with detached copies of the MoE input
        stream ("h"), its output ("y"), and the normal/copy components.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise InputError(f"tokens must be 1-d or 2-d, got shape {tokens.shape}")
        B, T = tokens.shape
        cfg = self.config
        if T > cfg.max_seq_len:
            raise InputError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        bad = (tokens < 0) | (tokens >= cfg.vocab_size)
        if bad.any():
            b, t = np.argwhere(bad)[0]
            raise InputError(
                f"token id {tokens[b, t]} out of vocab range [0, {cfg.vocab_size}) "
                f"at sequence {b} position {t}"
            )
        if variant == "dynamic" and not cfg.is_augmented:
            variant = "masked"

        x = take_rows(self.tok_embed, tokens) + take_rows(self.pos_embed, np.arange(T))
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        routings = []
        for layer in self.layers:
            x = x + self._attention(rmsnorm(x, layer.attn_norm), layer.attn, causal)
            h = rmsnorm(x, layer.moe_norm)
            h_flat = h.reshape(B * T, cfg.hidden)
            y, parts, routing = moe_apply(
                layer.moe, h_flat, variant=variant, k=cfg.effective_k
            )
            routings.append(routing)
            if capture is not None:
                capture.append(
                    {
                        "h": h_flat.data.copy(),
                        "y": y.data.copy(),
                        "normal": parts[0].data.copy(),
                        "copy": parts[1].data.copy(),
                    }
                )
            x = x + y.reshape(B, T, cfg.hidden)
        logits = matmul_t(rmsnorm(x, self.final_norm), self.head)
        return logits, routings

    def _attention(self, x, p: AttentionParams, causal_mask):
        cfg = self.config
        B, T, _ = x.shape
        nh, nkv, hd = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
        q = matmul_t(x, p.wq).reshape(B, T, nh, hd).transpose((0, 2, 1, 3))
        k = matmul_t(x, p.wk).reshape(B, T, nkv, hd).transpose((0, 2, 1, 3))
        v = matmul_t(x, p.wv).reshape(B, T, nkv, hd).transpose((0, 2, 1, 3))
        if nkv < nh:
            k = repeat_axis(k, nh // nkv, axis=1)
            v = repeat_axis(v, nh // nkv, axis=1)
        scores = matmul(q, k.transpose((0, 1, 3, 2))) * (hd**-0.5)
        scores = masked_fill(scores, causal_mask, MASK_SENTINEL)
        out = matmul(softmax_lastdim(scores), v)
        out = out.transpose((0, 2, 1, 3)).reshape(B, T, nh * hd)
        return matmul_t(out, p.wo)


def rmsnorm(x, weight, eps=NORM_EPS):
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * ((ms + eps) ** -0.5) * weight


def lm_forward(model: MoEModel, tokens, variant="dynamic"):
    """Causal next-token logits plus per-layer routing instrumentation."""
    return model.forward(tokens, variant=variant)


def _rebuild_from_params(config: ModelConfig, params: dict) -> MoEModel:
    """Assemble a model from a {name: Tensor} mapping (checkpoint load)."""
    cfg = config
    layers = []
    for i in range(cfg.num_layers):
        attn = AttentionParams(
            wq=params[f"layers.{i}.attn.wq"],
            wk=params[f"layers.{i}.attn.wk"],
            wv=params[f"layers.{i}.attn.wv"],
            wo=params[f"layers.{i}.attn.wo"],
        )
        experts = [
            Expert(
                up=params[f"layers.{i}.experts.{j}.up"],
                gate=params[f"layers.{i}.experts.{j}.gate"],
                down=params[f"layers.{i}.experts.{j}.down"],
            )
            for j in range(cfg.num_experts)
        ]
        experts += [
            Expert(None, None, None, kind=cfg.zero_kind)
            for _ in range(cfg.num_zero_experts)
        ]
        layers.append(
            TransformerLayer(
                attn_norm=params[f"layers.{i}.attn_norm"],
                attn=attn,
                moe_norm=params[f"layers.{i}.moe_norm"],
                moe=MoELayer(
                    router=RouterParams(
                        weight=params[f"layers.{i}.router.weight"],
                        n_normal=cfg.num_experts,
                    ),
                    experts=experts,
                    top_k=cfg.top_k,
                ),
            )
        )
    return MoEModel(
        cfg,
        params["tok_embed"],
        params["pos_embed"],
        layers,
        params["final_norm"],
        params["head"],
    )
