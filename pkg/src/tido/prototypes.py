"""Class-wise Gaussian prototypes over a latent space.

Prototypes are the replay memory: once raw data is gone, per-class
diagonal Gaussians (mean, variance, sample count) are all that remains
of a domain. This module fits them, samples proxy batches from them,
scores densities, gates out-of-distribution latents against a k-sigma
envelope, and computes the class-separability loss that pulls latents
toward their own prototype.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .rng import generator

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
FORMAT_TAG = "prototype-set/v1"


@dataclass
class GaussianPrototype:
    """Diagonal Gaussian summary of one class in latent space."""

    class_id: int
    mean: np.ndarray
    var: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.ndim != 1 or self.var.shape != self.mean.shape:
            raise ValueError("mean and var must be 1-D vectors of equal length")
        if (self.var < VAR_FLOOR - 1e-15).any():
            raise ValueError(f"variance below floor {VAR_FLOOR}")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var)


@dataclass
class PrototypeSet:
    """One prototype per class, all sharing a latent dimension."""

    latent_dim: int
    prototypes: dict = field(default_factory=dict)

    def __post_init__(self):
        for cid, p in self.prototypes.items():
            if p.dim != self.latent_dim:
                raise ValueError(f"prototype {cid} has dim {p.dim}, expected {self.latent_dim}")
        # keep a canonical ascending class order
        self.prototypes = {cid: self.prototypes[cid] for cid in sorted(self.prototypes)}

    @property
    def class_ids(self) -> list[int]:
        return list(self.prototypes.keys())

    def __len__(self) -> int:
        return len(self.prototypes)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self.prototypes

    def get(self, class_id: int) -> GaussianPrototype:
        cid = int(class_id)
        if cid not in self.prototypes:
            raise ValueError(f"unknown class {cid}")
        return self.prototypes[cid]

    def means_matrix(self) -> np.ndarray:
        return np.stack([p.mean for p in self.prototypes.values()])

    def to_json_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "latent_dim": self.latent_dim,
            "classes": [
                {
                    "class_id": int(cid),
                    "mean": [float(x) for x in p.mean],
                    "var": [float(x) for x in p.var],
                    "count": int(p.count),
                }
                for cid, p in self.prototypes.items()
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PrototypeSet":
        if doc.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported prototype document format {doc.get('format')!r}")
        protos = {
            int(c["class_id"]): GaussianPrototype(
                class_id=int(c["class_id"]),
                mean=np.array(c["mean"], dtype=np.float64),
                var=np.array(c["var"], dtype=np.float64),
                count=int(c["count"]),
            )
            for c in doc["classes"]
        }
        return cls(latent_dim=int(doc["latent_dim"]), prototypes=protos)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PrototypeSet":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def fit_prototypes(features, labels, class_ids=None) -> PrototypeSet:
    """Per-class sample mean and population variance (floored at 1e-6).

    ``class_ids`` optionally names the classes that should be present;
    classes with no samples are omitted with a warning rather than
    invented.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) feature matrix")
    if y.shape != (x.shape[0],):
        raise ValueError("labels must align with feature rows")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite entries")
    present = sorted(int(c) for c in np.unique(y))
    wanted = present if class_ids is None else sorted(int(c) for c in class_ids)
    protos = {}
    for cid in wanted:
        rows = x[y == cid]
        if rows.shape[0] == 0:
            log.warning("fit_prototypes: class %d has no samples, omitted", cid)
            continue
        mean = rows.mean(axis=0)
        var = np.maximum(rows.var(axis=0), VAR_FLOOR)
        protos[cid] = GaussianPrototype(class_id=cid, mean=mean, var=var, count=rows.shape[0])
    return PrototypeSet(latent_dim=x.shape[1], prototypes=protos)


def merge_prototype_sets(a: PrototypeSet, b: PrototypeSet) -> PrototypeSet:
    """Count-weighted moment merge; classes present in only one side pass through."""
    if a.latent_dim != b.latent_dim:
        raise ValueError("latent dims differ")
    merged = {}
    for cid in sorted(set(a.class_ids) | set(b.class_ids)):
        if cid in a.prototypes and cid in b.prototypes:
            pa, pb = a.prototypes[cid], b.prototypes[cid]
            n = pa.count + pb.count
            mean = (pa.count * pa.mean + pb.count * pb.mean) / n
            second = (
                pa.count * (pa.var + pa.mean**2) + pb.count * (pb.var + pb.mean**2)
            ) / n
            var = np.maximum(second - mean**2, VAR_FLOOR)
            merged[cid] = GaussianPrototype(class_id=cid, mean=mean, var=var, count=n)
        else:
            p = a.prototypes.get(cid, b.prototypes.get(cid))
            merged[cid] = GaussianPrototype(
                class_id=cid, mean=p.mean.copy(), var=p.var.copy(), count=p.count
            )
    return PrototypeSet(latent_dim=a.latent_dim, prototypes=merged)


def log_density(p: GaussianPrototype, u) -> float:
    """Exact diagonal-Gaussian log density of a single latent vector."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != p.mean.shape:
        raise ValueError(f"latent dim {u.shape} does not match prototype dim {p.mean.shape}")
    return float(log_density_batch(p, u[None, :])[0])


def log_density_batch(p: GaussianPrototype, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != p.dim:
        raise ValueError(f"latent batch shape {u.shape} does not match dim {p.dim}")
    quad = ((u - p.mean) ** 2 / p.var).sum(axis=1)
    norm = (np.log(2.0 * np.pi * p.var)).sum()
    return -0.5 * (norm + quad)


def sample_proxy(ps: PrototypeSet, class_id: int, n: int, seed: int) -> np.ndarray:
    """n independent draws from the class Gaussian, deterministic per seed."""
    if n < 0:
        raise ValueError("n must be >= 0")
    p = ps.get(class_id)
    if n == 0:
        return np.zeros((0, ps.latent_dim), dtype=np.float64)
    rng = generator(seed, "proxy", int(class_id))
    return p.mean + p.sigma * rng.standard_normal((n, ps.latent_dim))


def sample_proxy_all(ps: PrototypeSet, per_class: int, seed: int):
    """Proxy draws for every class, stacked; returns (latents, class labels)."""
    if len(ps) == 0:
        raise RuntimeError("empty prototype set")
    parts, labels = [], []
    for cid in ps.class_ids:
        u = sample_proxy(ps, cid, per_class, seed)
        parts.append(u)
        labels.append(np.full(per_class, cid, dtype=np.int64))
    return np.concatenate(parts, axis=0), np.concatenate(labels)


def normalized_distances(ps: PrototypeSet, u) -> dict:
    """Per class: max over dimensions of |u_j - mu_j| / sigma_j."""
    if len(ps) == 0:
        raise RuntimeError("empty prototype set")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (ps.latent_dim,):
        raise ValueError(f"latent shape {u.shape} does not match dim {ps.latent_dim}")
    return {
        cid: float((np.abs(u - p.mean) / p.sigma).max())
        for cid, p in ps.prototypes.items()
    }


def is_ood(ps: PrototypeSet, u, k_sigma: float = 3.0) -> tuple[bool, dict]:
    """True iff u lies strictly outside every class's k-sigma envelope.

    The envelope test is per-dimension: u is inside class c when its
    worst normalized residual max_j |u_j - mu_j| / sigma_j is <= k_sigma,
    so a point exactly at the threshold counts as in-distribution.
    """
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    dists = normalized_distances(ps, u)
    return all(d > k_sigma for d in dists.values()), dists


def is_ood_batch(ps: PrototypeSet, u: np.ndarray, k_sigma: float = 3.0) -> np.ndarray:
    """Vectorized is_ood over a (n, d) batch; returns a boolean mask."""
    if len(ps) == 0:
        raise RuntimeError("empty prototype set")
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != ps.latent_dim:
        raise ValueError(f"latent batch shape {u.shape} does not match dim {ps.latent_dim}")
    ood = np.ones(u.shape[0], dtype=bool)
    for p in ps.prototypes.values():
        resid = (np.abs(u - p.mean) / p.sigma).max(axis=1)
        ood &= resid > k_sigma
    return ood


def _log_density_matrix(ps: PrototypeSet, u: np.ndarray) -> np.ndarray:
    return np.stack([log_density_batch(p, u) for p in ps.prototypes.values()], axis=1)


def class_separability_loss(ps: PrototypeSet, u, y: int) -> tuple[float, np.ndarray]:
    """Negative log softmax over class log densities at class ``y``.

    Returns the loss and its exact gradient with respect to ``u``.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (ps.latent_dim,):
        raise ValueError(f"latent shape {u.shape} does not match dim {ps.latent_dim}")
    loss, du = separability_loss_batch(ps, u[None, :], [int(y)])
    return loss, du[0]


def separability_loss_batch(ps: PrototypeSet, u: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean class-separability loss over a batch, with dLoss/dU."""
    if len(ps) == 0:
        raise RuntimeError("empty prototype set")
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    class_order = ps.class_ids
    position = {cid: i for i, cid in enumerate(class_order)}
    try:
        targets = np.array([position[int(c)] for c in y], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"class {exc.args[0]} has no prototype") from None
    lds = _log_density_matrix(ps, u)
    loss, dlds = nn.softmax_ce_grad(lds, targets, tau=1.0)
    du = np.zeros_like(u)
    for j, cid in enumerate(class_order):
        p = ps.prototypes[cid]
        du += dlds[:, j : j + 1] * (-(u - p.mean) / p.var)
    return loss, du
