"""Reduce 256-d embeddings to 64-d by PCA or by average pooling."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .datastore import load_tensors, save_tensors
from .numkit import as_matrix, check_finite, l2_normalize_rows, symmetric_eig


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # out_dim x in_dim, orthonormal rows
    explained_variance: np.ndarray
    whiten: bool = False

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]


@dataclass
class ReduceConfig:
    method: str = "pca"
    out_dim: int = 64
    renormalize_after: bool = True

    def __post_init__(self):
        if self.method not in ("pca", "avgpool"):
            raise ValueError(f"method must be 'pca' or 'avgpool', got {self.method!r}")
        if self.out_dim < 1:
            raise ValueError(f"out_dim must be >= 1, got {self.out_dim}")


def pca_fit(x, out_dim: int = 64, whiten: bool = False) -> PcaModel:
    """Top ``out_dim`` eigenvectors of the sample covariance (divisor N-1)."""
    x = check_finite(as_matrix(x, "x"), "x")
    n, d = x.shape
    if n <= out_dim:
        raise ValueError(f"need more samples than components: N={n}, out_dim={out_dim}")
    if not 1 <= out_dim <= d:
        raise ValueError(f"out_dim must be in [1, {d}], got {out_dim}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    if np.trace(cov) <= 0.0:
        raise ValueError("input has zero variance")
    values, vectors = symmetric_eig(cov)
    values = np.maximum(values[:out_dim], 0.0)
    return PcaModel(mean, vectors[:, :out_dim].T.copy(), values, whiten)


def pca_transform(model: PcaModel, x, renormalize: bool = True) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != model.in_dim:
        raise ValueError(f"PCA model expects {model.in_dim}-d input, got {x.shape[1]}")
    y = (x - model.mean) @ model.components.T
    if model.whiten:
        y = y / np.sqrt(model.explained_variance + 1e-12)
    return l2_normalize_rows(y) if renormalize else y


def avgpool_reduce(x, out_dim: int = 64, renormalize: bool = True) -> np.ndarray:
    """Mean of consecutive groups of ``in_dim // out_dim`` coordinates."""
    x = as_matrix(x, "x")
    n, d = x.shape
    if out_dim < 1 or d % out_dim:
        raise ValueError(f"out_dim {out_dim} does not divide input dim {d}")
    y = x.reshape(n, out_dim, d // out_dim).mean(axis=2)
    return l2_normalize_rows(y) if renormalize else y


def reduce(x, config: ReduceConfig, pca: PcaModel | None = None) -> np.ndarray:
    if config.method == "avgpool":
        return avgpool_reduce(x, config.out_dim, config.renormalize_after)
    if pca is None:
        raise ValueError("PCA reduction needs a fitted PCA model")
    if pca.out_dim != config.out_dim:
        raise ValueError(f"PCA model has {pca.out_dim} components, asked for {config.out_dim}")
    return pca_transform(pca, x, config.renormalize_after)


def save_pca(model: PcaModel, path) -> None:
    save_tensors({
        "mean": model.mean,
        "components": model.components,
        "explained_variance": model.explained_variance,
        "meta": json.dumps({"format": "guie-pca", "version": 1, "whiten": model.whiten}),
    }, path)


def load_pca(path) -> PcaModel:
    t = load_tensors(path)
    meta = json.loads(t.get("meta", "{}"))
    if meta.get("format") != "guie-pca":
        raise ValueError(f"{path}: not a PCA model")
    return PcaModel(t["mean"], t["components"], t["explained_variance"], bool(meta["whiten"]))
