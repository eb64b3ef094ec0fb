"""Frustum corpora assembled from synthetic scenes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .frustum import FrustumBatch, build_batch, concat_batches, stack_batch, unstack_batch
from .hidden import RecodeOpts, recode_frame
from .synth import SceneSpec, gen_scene, separable_spec


def frustum_corpus(n_frusta: int, m: int, seed: int = 0,
                   spec_fn: Callable[[int], SceneSpec] = separable_spec,
                   n_cls: int = 3, opts: RecodeOpts | None = None) -> FrustumBatch:
    """Recode consecutive seeded scenes until ``n_frusta`` frustums are collected."""
    opts = opts or RecodeOpts(jitter="infer")
    rng = np.random.default_rng([seed, 1])
    batches, count, scene_seed = [], 0, seed * 100_003
    while count < n_frusta:
        cloud = recode_frame(gen_scene(spec_fn(scene_seed)).frame, opts)
        scene_seed += 1
        b = build_batch(cloud, m, n_cls, rng)
        batches.append(b)
        count += len(b)
    batch = concat_batches(batches)
    return stack_batch(unstack_batch(batch)[:n_frusta])
