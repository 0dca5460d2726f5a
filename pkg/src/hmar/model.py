"""The hierarchical masked attention network and its training losses.

Shapes: ``B`` users, ``L`` positions, ``d`` embedding width, ``H`` heads,
``K`` behaviors, ``n`` negatives per positive.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError

LOG_FLOOR = 1e-12
ABLATIONS = ("no_aux_behaviors", "no_multitask", "no_hbi", "no_behavior_encoder")


@dataclass(frozen=True)
class ModelConfig:
    num_items: int
    num_behaviors: int = 2
    target_behavior: int = -1  # -1 selects the last behavior
    embed_dim: int = 64
    num_heads: int = 2
    max_len: int = 50
    hbi_cap: int = 3
    alpha: tuple = ()  # per-behavior positive weights; empty selects 1.0 target / 0.5 auxiliary
    beta: float = 1.0
    theta: float = 0.5
    negatives_per_positive: int = 1
    dropout_rate: float = 0.0
    num_blocks: int = 1
    behavior_key_exclusion: bool = False
    no_aux_behaviors: bool = False
    no_multitask: bool = False
    no_hbi: bool = False
    no_behavior_encoder: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        K = self.num_behaviors
        if self.target_behavior == -1:
            object.__setattr__(self, "target_behavior", K - 1)
        if not self.alpha:
            object.__setattr__(self, "alpha", tuple(1.0 if b == self.target_behavior else 0.5 for b in range(K)))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        problems = []
        if self.num_items < 1:
            problems.append(f"num_items must be >= 1, got {self.num_items}")
        if K < 1:
            problems.append(f"num_behaviors must be >= 1, got {K}")
        if not 0 <= self.target_behavior < K:
            problems.append(f"target_behavior {self.target_behavior} outside [0, {K})")
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            problems.append(f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}")
        if self.max_len < 1:
            problems.append(f"max_len must be >= 1, got {self.max_len}")
        if self.hbi_cap < 1:
            problems.append(f"hbi_cap must be >= 1, got {self.hbi_cap}")
        if len(self.alpha) != K:
            problems.append(f"alpha needs {K} weights, got {len(self.alpha)}")
        if not all(math.isfinite(w) for w in (*self.alpha, self.beta, self.theta)):
            problems.append("alpha, beta and theta must be finite")
        if self.theta < 0:
            problems.append(f"theta must be >= 0, got {self.theta}")
        if self.negatives_per_positive < 1:
            problems.append(f"negatives_per_positive must be >= 1, got {self.negatives_per_positive}")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.num_blocks < 1:
            problems.append(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    # The network sees a single behavior when auxiliary behaviors are dropped.
    @property
    def network_behaviors(self):
        return 1 if self.no_aux_behaviors else self.num_behaviors

    @property
    def network_target(self):
        return 0 if self.no_aux_behaviors else self.target_behavior

    @property
    def loss_alpha(self):
        return (self.alpha[self.target_behavior],) if self.no_aux_behaviors else self.alpha

    @property
    def hbi_vocab(self):
        return (self.hbi_cap + 1) ** self.network_behaviors

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def effective_theta(self):
        return 0.0 if self.no_multitask else self.theta

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def with_ablation(self, flag):
        if flag not in ABLATIONS:
            raise ConfigError(f"unknown ablation {flag!r}; choose from {', '.join(ABLATIONS)}")
        return replace(self, **{flag: True})


class ModelParams(dict):
    """Name -> :class:`Parameter`, in a fixed creation order."""

    def add(self, name, value, dtype):
        self[name] = Parameter(name, value, dtype=dtype)
        return self[name]

    def trainable(self):
        return [p for p in self.values() if p.trainable]

    def arrays(self):
        return {name: p.data for name, p in self.items()}

    def copy_arrays(self):
        return {name: p.data.copy() for name, p in self.items()}

    def load_arrays(self, arrays):
        for name, value in arrays.items():
            self[name].data[...] = value


def parameter_shapes(config):
    """Ordered name -> shape of every learnable array the config calls for."""
    d, H, dh = config.embed_dim, config.num_heads, config.head_dim
    shapes = {
        "item.weight": (config.num_items + 1, d),
        "item.bias": (d,),
    }
    if not config.no_hbi:
        shapes["hbi.weight"] = (config.hbi_vocab, d)
        shapes["hbi.bias"] = (d,)
    shapes["fuse.weight"] = (2 * d, d)
    shapes["fuse.bias"] = (d,)
    shapes["position"] = (config.max_len, d)
    if not config.no_behavior_encoder:
        shapes["behavior.input.weight"] = (d, d)
        shapes["behavior.input.bias"] = (d,)
        for b in range(config.network_behaviors):
            _block_shapes(shapes, f"behavior.{b}", d, H, dh)
            shapes[f"behavior.{b}.rezero"] = (1,)
    for i in range(config.num_blocks):
        _block_shapes(shapes, f"sequence.{i}", d, H, dh)
    shapes["classifier.hidden.weight"] = (2 * d, d)
    shapes["classifier.hidden.bias"] = (d,)
    shapes["classifier.out.weight"] = (d, config.network_behaviors)
    shapes["classifier.out.bias"] = (config.network_behaviors,)
    return shapes


def _block_shapes(shapes, prefix, d, H, dh):
    for proj in ("query", "key", "value"):
        shapes[f"{prefix}.{proj}"] = (H, d, dh)
    shapes[f"{prefix}.ffn1.weight"] = (d, d)
    shapes[f"{prefix}.ffn1.bias"] = (d,)
    shapes[f"{prefix}.ffn2.weight"] = (d, d)
    shapes[f"{prefix}.ffn2.bias"] = (d,)


def init_params(config, seed=0):
    """Matrices uniform in ``[-1/sqrt(d), 1/sqrt(d)]``; biases and ReZero gates zero."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.embed_dim)
    params = ModelParams()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias") or name.endswith(".rezero"):
            value = np.zeros(shape)
        else:
            value = rng.uniform(-bound, bound, size=shape)
        params.add(name, value, config.dtype)
    return params


# ---------------------------------------------------------------- building blocks

def encode_items(item_ids, hbi_ids, params, config):
    """Fused item + behavior-indicator encoding, without the positional term."""
    v = ad.embedding_lookup(params["item.weight"], item_ids) + params["item.bias"]
    if config.no_hbi:
        c = Tensor(np.zeros(v.shape, dtype=v.dtype))
    else:
        c = ad.embedding_lookup(params["hbi.weight"], hbi_ids) + params["hbi.bias"]
    return ad.linear(ad.concat([v, c], axis=-1), params["fuse.weight"], params["fuse.bias"])


def encode_sequence(item_ids, hbi_ids, padding_mask, params, config, rng=None):
    """``G``: fused encodings plus learned positions, zero at padded slots."""
    q = encode_items(item_ids, hbi_ids, params, config)
    g = (q + params["position"]) * _col(padding_mask)
    return ad.dropout(g, config.dropout_rate, rng)


def make_behavior_masks(behavior_ids, padding_mask, num_behaviors):
    """``[K, B, L]`` 0/1 masks; ``M[b]`` selects real positions with behavior ``b``."""
    behavior_ids = np.asarray(behavior_ids)
    padding_mask = np.asarray(padding_mask)
    return np.stack([((behavior_ids == b) & (padding_mask == 1)).astype(np.int64) for b in range(num_behaviors)])


def attention_mask(padding_mask):
    """``[B, 1, L, L]`` boolean: query ``i`` may see key ``j <= i`` when ``j`` is real."""
    padding_mask = np.asarray(padding_mask, dtype=bool)
    L = padding_mask.shape[-1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    return (causal[None] & padding_mask[:, None, :])[:, None]


def multi_head_attention(x, wq, wk, wv, mask):
    """Per-head projections ``[H, d, d/H]``; heads concatenated back to ``d`` columns."""
    B, L, d = x.shape
    xh = ad.reshape(x, (B, 1, L, d))
    heads = ad.scaled_dot_attention(ad.matmul(xh, wq), ad.matmul(xh, wk), ad.matmul(xh, wv), mask)
    return ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, L, d))


def feed_forward(x, params, prefix):
    h = ad.relu(ad.linear(x, params[f"{prefix}.ffn1.weight"], params[f"{prefix}.ffn1.bias"]))
    return ad.linear(h, params[f"{prefix}.ffn2.weight"], params[f"{prefix}.ffn2.bias"])


def behavior_encoder(G, behavior_mask, params, behavior, attn_mask, config, rng=None, return_parts=False):
    """Self-attention restricted to one behavior's positions.

    ``O_b = (FFN(SA(G*M_b @ W_e + B_e)) + gamma_b * G*M_b) * M_b``
    """
    prefix = f"behavior.{behavior}"
    m = _col(behavior_mask)
    masked = G * m
    e = ad.linear(masked, params["behavior.input.weight"], params["behavior.input.bias"])
    if config.behavior_key_exclusion:
        attn_mask = attn_mask & np.asarray(behavior_mask, dtype=bool)[:, None, None, :]
    x = multi_head_attention(e, params[f"{prefix}.query"], params[f"{prefix}.key"], params[f"{prefix}.value"], attn_mask)
    x = ad.dropout(x, config.dropout_rate, rng)
    f = feed_forward(x, params, prefix)
    residual = f + params[f"{prefix}.rezero"] * masked
    out = residual * m
    if return_parts:
        return out, {"E": e, "X": x, "F": f, "L": residual}
    return out


def aggregate_behaviors(outputs):
    total = outputs[0]
    for o in outputs[1:]:
        total = total + o
    return total


def sequence_encoder(O_agg, G, params, attn_mask, config, rng=None):
    """Self-attention across all behaviors, residual to ``G``, then FFN."""
    x = G if config.no_behavior_encoder else O_agg
    residual = G
    for i in range(config.num_blocks):
        prefix = f"sequence.{i}"
        a = multi_head_attention(x, params[f"{prefix}.query"], params[f"{prefix}.key"], params[f"{prefix}.value"], attn_mask)
        a = ad.dropout(a, config.dropout_rate, rng)
        x = feed_forward(a + residual, params, prefix)
        residual = x
    return x


def encode_history(item_ids, behavior_ids, hbi_ids, padding_mask, params, config, rng=None):
    """Run both attention stages; returns ``(G, O_agg, Z)``."""
    G = encode_sequence(item_ids, hbi_ids, padding_mask, params, config, rng)
    mask = attention_mask(padding_mask)
    if config.no_behavior_encoder:
        O_agg = None
    else:
        masks = make_behavior_masks(behavior_ids, padding_mask, config.network_behaviors)
        O_agg = aggregate_behaviors([
            behavior_encoder(G, masks[b], params, b, mask, config, rng) for b in range(config.network_behaviors)
        ])
    Z = sequence_encoder(O_agg, G, params, mask, config, rng)
    return G, O_agg, Z


def score(z, q):
    """``sigmoid(z . q)`` over the last axis."""
    return ad.sigmoid(ad.reduce_sum(z * q, axis=-1))


def classify_behavior(z, q, params):
    """Softmax over behaviors from ``concat(z, q)`` through a two-layer net with ReLU."""
    h = ad.relu(ad.linear(ad.concat([z, q], axis=-1), params["classifier.hidden.weight"], params["classifier.hidden.bias"]))
    return ad.softmax(ad.linear(h, params["classifier.out.weight"], params["classifier.out.bias"]), axis=-1)


# ---------------------------------------------------------------- losses

def rank_loss(pos_scores, neg_scores, pos_target_behavior, loss_mask, alpha, beta):
    """Weighted binary cross-entropy summed over positions with ``loss_mask == 1``."""
    mask = np.asarray(loss_mask, dtype=np.float64)
    weights = np.asarray(alpha, dtype=np.float64)[np.asarray(pos_target_behavior)] * mask
    pos_term = ad.reduce_sum(ad.log(pos_scores, LOG_FLOOR) * weights)
    neg_term = ad.reduce_sum(ad.log(1.0 - neg_scores, LOG_FLOOR) * mask[..., None])
    return -(pos_term + neg_term * beta)


def class_loss(class_probs, pos_target_behavior, loss_mask):
    """Cross-entropy of the true behavior label over masked positions."""
    labels = np.asarray(pos_target_behavior)
    K = class_probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = labels[(labels < 0) | (labels >= K)].reshape(-1)[0]
        raise IndexError(f"behavior label {int(bad)} outside [0, {K})")
    onehot = np.eye(K)[labels] * np.asarray(loss_mask, dtype=np.float64)[..., None]
    return -ad.reduce_sum(ad.log(class_probs, LOG_FLOOR) * onehot)


def model_loss(rank, cls, theta):
    if theta < 0:
        raise ConfigError(f"theta must be >= 0, got {theta}")
    if theta == 0:
        return rank
    return rank + cls * theta


@dataclass
class ForwardOutputs:
    G: Tensor
    O_agg: Tensor
    Z: Tensor
    pos_scores: Tensor
    neg_scores: Tensor
    class_probs: Tensor
    rank_loss: Tensor
    class_loss: Tensor
    loss: Tensor


def forward_train(batch, params, config, rng=None):
    """Score every position against its next-item target and its negatives.

    Call inside a :class:`~hmar.autodiff.Tape` to differentiate ``.loss``.
    A batch for the single-behavior ablation must already carry behavior 0
    only (see :func:`hmar.data.make_training_batches`).
    """
    G, O_agg, Z = encode_history(batch.item_ids, batch.behavior_ids, batch.hbi_ids, batch.padding_mask,
                                 params, config, rng)
    q_pos = encode_items(batch.pos_target_ids, batch.pos_target_hbi, params, config)
    q_neg = encode_items(batch.neg_target_ids, batch.neg_target_hbi, params, config)
    B, L, d = Z.shape
    pos_scores = score(Z, q_pos)
    neg_scores = score(ad.reshape(Z, (B, L, 1, d)), q_neg)
    class_probs = classify_behavior(Z, q_pos, params)
    lr = rank_loss(pos_scores, neg_scores, batch.pos_target_behavior, batch.loss_mask, config.loss_alpha, config.beta)
    lc = class_loss(class_probs, batch.pos_target_behavior, batch.loss_mask)
    return ForwardOutputs(G, O_agg, Z, pos_scores, neg_scores, class_probs, lr, lc,
                          model_loss(lr, lc, config.effective_theta))


def score_candidates(item_ids, behavior_ids, hbi_ids, padding_mask, candidate_ids, candidate_hbi, params, config):
    """Scores ``[B, C]`` of candidates against ``z`` at the last (newest) position."""
    padding_mask = np.asarray(padding_mask)
    if not np.all(padding_mask[:, -1]):
        raise ContractError("every history must hold at least one interaction")
    _, _, Z = encode_history(item_ids, behavior_ids, hbi_ids, padding_mask, params, config)
    z = Z.data[:, -1, :]
    q = encode_items(np.asarray(candidate_ids), np.asarray(candidate_hbi), params, config).data
    return ad.sigmoid(Tensor(np.einsum("bcd,bd->bc", q, z))).data


def forward_eval(item_ids, behavior_ids, hbi_ids, padding_mask, candidate_ids, candidate_hbi, params, config):
    """Single-user form of :func:`score_candidates`; inputs are length-``L`` vectors."""
    if not np.any(padding_mask):
        raise ContractError("cannot score candidates for an empty history")
    return score_candidates(
        np.asarray(item_ids)[None], np.asarray(behavior_ids)[None], np.asarray(hbi_ids)[None],
        np.asarray(padding_mask)[None], np.asarray(candidate_ids)[None], np.asarray(candidate_hbi)[None],
        params, config,
    )[0]


def _col(mask):
    return np.asarray(mask)[..., None]
