"""Small random model instances shared by the model and acceptance tests."""

import numpy as np

from hmar.data import HbiEncoder, UserSequence, make_training_batches
from hmar.model import ModelConfig, init_params

NUM_ITEMS = 12


def random_sequences(rng, lengths, num_behaviors=2, num_items=NUM_ITEMS):
    out = []
    for u, n in enumerate(lengths, start=1):
        items = rng.integers(1, num_items // 2 + 1, size=n)  # repeats so indicator codes vary
        out.append(UserSequence(u, items, rng.integers(0, num_behaviors, size=n), np.arange(n)))
    return out


def tiny_instance(seed=0, lengths=(4, 10), negatives=2, randomize=True, **overrides):
    """d=8, H=2, K=2, L=6, B=2 in 64-bit, with every parameter randomized."""
    kw = dict(num_items=NUM_ITEMS, num_behaviors=2, embed_dim=8, num_heads=2, max_len=6,
              negatives_per_positive=negatives, dtype="float64")
    kw.update(overrides)
    config = ModelConfig(**kw)
    params = init_params(config, seed)
    rng = np.random.default_rng(seed + 100)
    if randomize:
        for p in params.values():
            p.data[...] = rng.normal(scale=0.25, size=p.shape)
    seqs = random_sequences(rng, lengths, config.num_behaviors)
    known = {s.user_id: set(s.items.tolist()) for s in seqs}
    only = config.target_behavior if config.no_aux_behaviors else None
    (batch,) = make_training_batches(
        seqs, max_len=config.max_len, num_items=NUM_ITEMS,
        encoder=HbiEncoder(config.network_behaviors, config.hbi_cap), negatives=negatives,
        batch_size=len(seqs), rng=rng, known_items=known, shuffle=False, only_behavior=only,
    )
    return config, params, batch
