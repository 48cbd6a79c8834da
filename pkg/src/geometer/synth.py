"""Synthetic clustered graphs in the canonical dataset format.

Planted-partition structure (denser within classes than across) with
class-centered Gaussian features; handy for smoke tests, demos, and
exercising the loaders at arbitrary shapes without shipping datasets.
"""

from __future__ import annotations

import numpy as np

from .graph_store import Graph, make_graph, save_dataset

__all__ = ["make_clustered_graph", "write_synthetic_dataset"]


def make_clustered_graph(classes: int = 7, per_class: int = 40, feature_dim: int = 32,
                         p_in: float = 0.15, p_out: float = 0.01,
                         center_scale: float = 2.0, noise: float = 0.8,
                         seed: int = 0) -> Graph:
    rng = np.random.default_rng([seed, 2718])
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    centers = rng.normal(size=(classes, feature_dim)) * center_scale
    features = (centers[labels] + noise * rng.normal(size=(n, feature_dim))).astype(np.float32)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    mask = rng.random(len(iu)) < prob
    edges = np.stack([iu[mask], ju[mask]], axis=1)
    return make_graph(features, edges, labels)


def write_synthetic_dataset(directory, **kwargs) -> Graph:
    g = make_clustered_graph(**kwargs)
    save_dataset(g, directory)
    return g
