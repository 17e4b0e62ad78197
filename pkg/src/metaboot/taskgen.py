"""Online task construction: unlabeled image pools into pseudo-labeled episodes.

A batch takes N source images, partitions them into K blocks of n = N/K,
and turns each block into an n-way episode: every source image becomes a
class whose members are M seeded augmented views of it (M1 support, M - M1
query). Pseudo-labels are episode-local indices 0..n-1, so grouping views
by label recovers exactly the partition by source image.

Per-view seeds derive from (batch seed, episode, class, view), making
construction order-independent and bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

from .augment import AugmentationLevel, Image, apply, sample_pipeline
from .errors import ValidationError
from .rng import derive_seed, generator
from .synthdata import SyntheticDataset


@dataclass(frozen=True)
class Episode:
    way: int
    support: tuple[tuple[Image, int], ...]
    query: tuple[tuple[Image, int], ...]
    source_ids: tuple[int, ...]


@dataclass(frozen=True)
class EpisodeBatch:
    episodes: tuple[Episode, ...]
    n_sources: int
    k_tasks: int
    m_views: int
    m1_support: int
    level: AugmentationLevel
    seed: int


def _make_view(source: Image, level: AugmentationLevel, seed: int,
               ep: int, cls: int, view: int) -> Image:
    pipeline = sample_pipeline(level, derive_seed(seed, 1, ep, cls, view))
    img = source
    for step, spec in enumerate(pipeline):
        img = apply(img, spec, derive_seed(seed, 2, ep, cls, view, step))
    return img


def construct_tasks(pool: list[Image], N: int, K: int, M: int, M1: int,
                    level: AugmentationLevel, seed: int) -> EpisodeBatch:
    """K pseudo-labeled (N/K)-way episodes with M1 support / M-M1 query shots."""
    if K < 1 or N % K != 0:
        raise ValidationError(f"N={N} must be divisible by K={K}")
    if not (1 <= M1 <= M - 1):
        raise ValidationError(f"M1={M1} must lie in [1, M-1], M={M}")
    if len(pool) < N:
        raise ValidationError(f"pool has {len(pool)} images, need >= {N}")
    n_way = N // K
    picks = generator(derive_seed(seed, 0)).permutation(len(pool))[:N]
    episodes = []
    for ep in range(K):
        sources = [int(picks[ep * n_way + j]) for j in range(n_way)]
        support, query = [], []
        for label, src in enumerate(sources):
            for v in range(M):
                img = _make_view(pool[src], level, seed, ep, label, v)
                (support if v < M1 else query).append((img, label))
        episodes.append(Episode(n_way, tuple(support), tuple(query), tuple(sources)))
    return EpisodeBatch(tuple(episodes), N, K, M, M1, level, seed)


def resample_pool(dataset: SyntheticDataset, N: int, seed: int) -> list[Image]:
    """N images drawn without replacement from a dataset, seeded."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if N > len(dataset):
        raise ValidationError(f"N={N} exceeds dataset size {len(dataset)}")
    picks = generator(derive_seed(seed, 0x900F)).permutation(len(dataset))[:N]
    return [dataset.images[int(i)] for i in picks]
