import random

import pytest

from poollab.core import Dataset, Sample


def make_dataset(stats_by_id, text_by_id=None):
    """Dataset from {id: {stat: value}} with optional per-id texts."""
    samples = []
    for sid, stats in stats_by_id.items():
        text = (text_by_id or {}).get(sid, f"text of {sid}")
        samples.append(Sample(id=sid, text=text, stats=stats))
    return Dataset(samples)


def random_stat_dataset(n, stat_names, seed, text_pool=None):
    """n samples with uniform [0,1) stats per name, deterministic per seed."""
    rng = random.Random(seed)
    samples = []
    for i in range(n):
        stats = {name: rng.random() for name in stat_names}
        text = rng.choice(text_pool) if text_pool else f"sample {i} body"
        samples.append(Sample(id=f"s{i:05d}", text=text, stats=stats))
    return Dataset(samples)


@pytest.fixture
def tiny_dataset():
    return make_dataset(
        {f"x{i}": {"value": float(i)} for i in range(1, 10)},
    )
