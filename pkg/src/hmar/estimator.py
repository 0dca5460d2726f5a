"""scikit-learn style front end: ``HMARRecommender().fit(log).evaluate(cases)``."""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import (
    EvalCase, HbiEncoder, InteractionRecord, UserSequence, build_user_sequences, history_arrays,
    make_training_batches,
)
from .errors import DataError, NumericError
from .metrics import evaluate
from .model import ModelConfig, ModelParams, encode_history, forward_train, init_params, score_candidates


def check_interactions(X, num_behaviors=None):
    """Coerce ``X`` to a list of :class:`InteractionRecord`.

    Accepts an ``(n, 4)`` integer array-like of ``user, item, behavior,
    timestamp`` rows, or records already.
    """
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], InteractionRecord):
        rows = np.asarray([tuple(r) for r in X], dtype=np.int64)
    else:
        arr = np.asarray(X)
        if arr.size == 0:
            return []
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise DataError(f"interactions must have shape (n, 4), got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.isfinite(arr.astype(float))) or np.any(arr.astype(float) % 1):
                raise DataError("interaction fields must be integers")
        rows = arr.astype(np.int64)
    if np.any(rows[:, 1] < 1):
        raise DataError("item ids must be >= 1 (0 is reserved for padding)")
    if np.any(rows[:, 2] < 0) or (num_behaviors is not None and np.any(rows[:, 2] >= num_behaviors)):
        raise DataError(f"behavior ids must lie in [0, {num_behaviors})")
    return [InteractionRecord(*map(int, r)) for r in rows]


def check_sequences(X, num_behaviors=None):
    """User sequences from a dict/list of :class:`UserSequence` or an interaction log."""
    if isinstance(X, dict):
        return list(X.values())
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], UserSequence):
        return list(X)
    return list(build_user_sequences(check_interactions(X, num_behaviors)).values())


def candidate_codes(history, candidates, encoder):
    """Indicator codes of ``candidates`` given the whole ``history``."""
    counts = {}
    for item, b in zip(history.items.tolist(), history.behaviors.tolist()):
        counts.setdefault(item, [0] * encoder.num_behaviors)[b] += 1
    zero = [0] * encoder.num_behaviors
    return np.array([encoder.code(counts.get(int(c), zero)) for c in np.asarray(candidates).ravel()],
                    dtype=np.int64).reshape(np.shape(candidates))


class HMARRecommender(BaseEstimator):
    """Multi-behavior next-item recommender with hierarchical masked attention.

    Parameters mirror :class:`hmar.model.ModelConfig` plus optimizer and
    evaluation settings. ``fit`` takes a training interaction log (or user
    sequences); ``evaluate`` ranks held-out :class:`~hmar.data.EvalCase`
    targets among sampled negatives.

    Fitted attributes: ``config_``, ``params_``, ``history_`` (one dict per
    epoch), ``best_params_`` / ``best_epoch_`` (by validation HR when
    validation cases are given, else the final epoch).
    """

    def __init__(self, num_behaviors=2, target_behavior=-1, embed_dim=64, num_heads=2, max_len=50,
                 hbi_cap=3, alpha=None, beta=1.0, theta=0.5, negatives_per_positive=1, dropout_rate=0.0,
                 num_blocks=1, behavior_key_exclusion=False, no_aux_behaviors=False, no_multitask=False,
                 no_hbi=False, no_behavior_encoder=False, epochs=100, batch_size=32, learning_rate=1e-3,
                 adam_beta1=0.9, adam_beta2=0.999, adam_epsilon=1e-8, num_items=None, dtype="float32",
                 eval_every=0, eval_negatives=99, eval_k=10, exclude_history=True, random_state=0):
        self.num_behaviors = num_behaviors
        self.target_behavior = target_behavior
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.max_len = max_len
        self.hbi_cap = hbi_cap
        self.alpha = alpha
        self.beta = beta
        self.theta = theta
        self.negatives_per_positive = negatives_per_positive
        self.dropout_rate = dropout_rate
        self.num_blocks = num_blocks
        self.behavior_key_exclusion = behavior_key_exclusion
        self.no_aux_behaviors = no_aux_behaviors
        self.no_multitask = no_multitask
        self.no_hbi = no_hbi
        self.no_behavior_encoder = no_behavior_encoder
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_epsilon = adam_epsilon
        self.num_items = num_items
        self.dtype = dtype
        self.eval_every = eval_every
        self.eval_negatives = eval_negatives
        self.eval_k = eval_k
        self.exclude_history = exclude_history
        self.random_state = random_state

    # ------------------------------------------------------------ configuration

    def _model_config(self, num_items):
        return ModelConfig(
            num_items=num_items, num_behaviors=self.num_behaviors, target_behavior=self.target_behavior,
            embed_dim=self.embed_dim, num_heads=self.num_heads, max_len=self.max_len, hbi_cap=self.hbi_cap,
            alpha=tuple(self.alpha) if self.alpha is not None else (), beta=self.beta, theta=self.theta,
            negatives_per_positive=self.negatives_per_positive, dropout_rate=self.dropout_rate,
            num_blocks=self.num_blocks, behavior_key_exclusion=self.behavior_key_exclusion,
            no_aux_behaviors=self.no_aux_behaviors, no_multitask=self.no_multitask, no_hbi=self.no_hbi,
            no_behavior_encoder=self.no_behavior_encoder, dtype=self.dtype,
        )

    @classmethod
    def from_model(cls, config, params, **kwargs):
        """Wrap already-trained parameters (e.g. from a checkpoint)."""
        est = cls(num_behaviors=config.num_behaviors, target_behavior=config.target_behavior,
                  embed_dim=config.embed_dim, num_heads=config.num_heads, max_len=config.max_len,
                  hbi_cap=config.hbi_cap, alpha=config.alpha, beta=config.beta, theta=config.theta,
                  negatives_per_positive=config.negatives_per_positive, dropout_rate=config.dropout_rate,
                  num_blocks=config.num_blocks, behavior_key_exclusion=config.behavior_key_exclusion,
                  no_aux_behaviors=config.no_aux_behaviors, no_multitask=config.no_multitask,
                  no_hbi=config.no_hbi, no_behavior_encoder=config.no_behavior_encoder,
                  num_items=config.num_items, dtype=config.dtype, **kwargs)
        est.config_ = config
        est.params_ = params
        est.history_ = []
        return est

    @property
    def encoder_(self):
        check_is_fitted(self, "config_")
        return HbiEncoder(self.config_.network_behaviors, self.config_.hbi_cap)

    # ------------------------------------------------------------ training

    def fit(self, X, y=None, *, validation=None, known_items=None, on_epoch=None):
        """Train on interaction log ``X``.

        ``validation``: :class:`EvalCase` list scored every ``eval_every``
        epochs for best-model selection. ``known_items``: user id -> items
        never drawn as that user's negatives (defaults to the user's items in
        ``X``). ``on_epoch(event)`` is called after each epoch; returning
        True stops training.
        """
        sequences = check_sequences(X, self.num_behaviors)
        num_items = self.num_items
        if num_items is None:
            seen = [int(s.items.max()) for s in sequences if len(s)]
            seen += [c.item for c in validation or ()]
            num_items = max(seen, default=1)
        config = self._model_config(num_items)
        if known_items is None:
            known_items = {s.user_id: set(s.items.tolist()) for s in sequences}

        rng = np.random.default_rng(self.random_state)
        params = init_params(config, seed=self.random_state)
        opt = ad.Adam(params.trainable(), lr=self.learning_rate, betas=(self.adam_beta1, self.adam_beta2),
                      eps=self.adam_epsilon)
        encoder = HbiEncoder(config.network_behaviors, config.hbi_cap)
        only = config.target_behavior if config.no_aux_behaviors else None
        drop_rng = rng if config.dropout_rate > 0 else None

        self.config_ = config
        self.params_ = params
        self.history_ = []
        self.best_params_ = None
        self.best_epoch_ = None
        best_hr = -1.0

        for epoch in range(1, self.epochs + 1):
            start = time.perf_counter()
            totals = np.zeros(3)
            batches = make_training_batches(
                sequences, max_len=config.max_len, num_items=num_items, encoder=encoder,
                negatives=config.negatives_per_positive, batch_size=self.batch_size, rng=rng,
                known_items=known_items, only_behavior=only,
            )
            for i, batch in enumerate(batches):
                with ad.Tape() as tape:
                    out = forward_train(batch, params, config, rng=drop_rng)
                values = (out.rank_loss.item(), out.class_loss.item(), out.loss.item())
                if not all(np.isfinite(values)):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch {i} (users {batch.user_ids.tolist()}): "
                        f"rank={values[0]} class={values[1]} model={values[2]}"
                    )
                ad.backward(out.loss, tape)
                opt.step()
                totals += values
            event = {"epoch": epoch, "rank_loss": float(totals[0]), "class_loss": float(totals[1]),
                     "loss": float(totals[2])}
            if validation and self.eval_every and epoch % self.eval_every == 0:
                report = self.evaluate(validation, seed=self.random_state)
                event["valid_hr"], event["valid_ndcg"] = report.hr, report.ndcg
                if report.hr > best_hr:
                    best_hr = report.hr
                    self.best_params_, self.best_epoch_ = params.copy_arrays(), epoch
            event["seconds"] = time.perf_counter() - start
            self.history_.append(event)
            if on_epoch is not None and on_epoch(event):
                break
        if self.best_params_ is None:
            self.best_params_, self.best_epoch_ = params.copy_arrays(), len(self.history_)
        return self

    # ------------------------------------------------------------ inference

    def _histories(self, items):
        hist = [c.history if isinstance(c, EvalCase) else c for c in items]
        if self.config_.no_aux_behaviors:
            hist = [h.only_behavior(self.config_.target_behavior) for h in hist]
        return hist

    def score_candidates(self, cases, candidates):
        """Score matrix ``[len(cases), n_candidates]``.

        Histories that are empty (after the single-behavior filter, if set)
        score every candidate 0.
        """
        check_is_fitted(self, "params_")
        config, encoder = self.config_, self.encoder_
        candidates = np.asarray(candidates)
        hists = self._histories(cases)
        out = np.zeros(candidates.shape, dtype=np.float64)
        live = [i for i, h in enumerate(hists) if len(h)]
        if not live:
            return out
        arrays = [history_arrays(hists[i], config.max_len, encoder) for i in live]
        stacked = [np.stack(col) for col in zip(*arrays)]
        codes = np.stack([candidate_codes(hists[i], candidates[i], encoder) for i in live])
        out[live] = score_candidates(*stacked, candidates[live], codes, self.params_, config)
        return out

    def transform(self, X):
        """Last-position sequence representation ``z`` for each history, ``[n, d]``."""
        check_is_fitted(self, "params_")
        hists = self._histories(X)
        arrays = [history_arrays(h, self.config_.max_len, self.encoder_) for h in hists]
        stacked = [np.stack(col) for col in zip(*arrays)]
        _, _, Z = encode_history(*stacked, self.params_, self.config_)
        return Z.data[:, -1, :]

    def predict(self, X, top_k=10):
        """Top-``top_k`` item ids over the whole catalog for each history."""
        check_is_fitted(self, "params_")
        catalog = np.arange(1, self.config_.num_items + 1)
        scores = self.score_candidates(X, np.tile(catalog, (len(X), 1)))
        order = np.argsort(-scores, axis=1, kind="stable")[:, :top_k]
        return catalog[order]

    def evaluate(self, cases, n_negatives=None, k=None, seed=0, run=0):
        check_is_fitted(self, "params_")
        return evaluate(self, cases, self.eval_negatives if n_negatives is None else n_negatives,
                        self.eval_k if k is None else k, seed, num_items=self.config_.num_items,
                        exclude_history=self.exclude_history, run=run)

    def score(self, X, y=None):
        """HR@k on held-out cases."""
        return self.evaluate(X).hr

    def best_model_params(self):
        """A standalone :class:`ModelParams` holding the best-validation weights."""
        check_is_fitted(self, "best_params_")
        out = ModelParams()
        for name, value in self.best_params_.items():
            out.add(name, value.copy(), self.config_.dtype)
        return out

    def use_best(self):
        """Swap in the best-validation parameters."""
        check_is_fitted(self, "best_params_")
        self.params_.load_arrays(self.best_params_)
        return self
