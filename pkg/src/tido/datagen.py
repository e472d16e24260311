"""Synthetic non-stationary domain streams and the CSV dataset contract.

Domains are mixtures of Gaussian class clusters; covariate shift is a
rotation in the first two feature dimensions plus translation, scaling
and optional additive noise. A stream schedule turns one class universe
into per-step bundles: labeled source data, an unlabeled target pool,
one labeled sample per new private class, and a separate evaluation
artifact holding the target labels so training code never sees them.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import CsvFormatError
from .rng import child_seed, generator


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    domains: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be (n, d)")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with feature rows")
        if len(self.domains) != self.features.shape[0]:
            raise ValueError("domain tags must align with feature rows")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DomainSpec:
    """Gaussian class clusters: one isotropic-or-diagonal cloud per class."""

    dim: int
    class_means: dict
    class_scales: dict
    samples_per_class: dict
    seed: int

    def __post_init__(self):
        means = {int(c): np.asarray(m, dtype=np.float64) for c, m in self.class_means.items()}
        for c, m in means.items():
            if m.shape != (self.dim,):
                raise ValueError(f"class {c} mean has shape {m.shape}, expected ({self.dim},)")
        seen = {}
        for c, m in means.items():
            key = tuple(np.round(m, 12))
            if key in seen:
                raise ValueError(f"classes {seen[key]} and {c} share a mean")
            seen[key] = c
        self.class_means = means
        scales = {}
        for c in means:
            s = np.asarray(self.class_scales[int(c)], dtype=np.float64)
            s = np.full(self.dim, float(s)) if s.ndim == 0 else s
            if (s <= 0).any():
                raise ValueError(f"class {c} scale must be positive")
            scales[int(c)] = s
        self.class_scales = scales
        counts = {}
        for c in means:
            n = int(self.samples_per_class[int(c)]) if isinstance(self.samples_per_class, dict) else int(self.samples_per_class)
            if n < 0:
                raise ValueError("samples_per_class must be >= 0")
            counts[int(c)] = n
        self.samples_per_class = counts


@dataclass
class ShiftSpec:
    """Affine covariate shift: x' = scale * R(theta) x + translation + noise."""

    rotation_deg: float = 0.0
    translation: np.ndarray = None
    scale: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.translation is not None:
            self.translation = np.asarray(self.translation, dtype=np.float64)

    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.scale == 1.0
            and self.noise_sigma == 0.0
            and (self.translation is None or not self.translation.any())
        )

    def apply_to_points(self, x: np.ndarray) -> np.ndarray:
        """Noise-free affine part, usable on means as well as samples."""
        x = np.asarray(x, dtype=np.float64)
        out = x.copy()
        if self.rotation_deg != 0.0:
            if x.shape[-1] < 2:
                raise ValueError("rotation needs at least two feature dims")
            th = math.radians(self.rotation_deg)
            c, s = math.cos(th), math.sin(th)
            x0, x1 = out[..., 0].copy(), out[..., 1].copy()
            out[..., 0] = c * x0 - s * x1
            out[..., 1] = s * x0 + c * x1
        out *= self.scale
        if self.translation is not None:
            out += self.translation
        return out

    def inverse(self) -> "ShiftSpec":
        """Inverse of the noise-free affine part."""
        t = self.translation
        if t is None:
            inv_t = None
        else:
            th = math.radians(-self.rotation_deg)
            c, s = math.cos(th), math.sin(th)
            scaled = -t / self.scale
            inv_t = scaled.copy()
            if t.shape[-1] >= 2:
                inv_t[0] = c * scaled[0] - s * scaled[1]
                inv_t[1] = s * scaled[0] + c * scaled[1]
        return ShiftSpec(
            rotation_deg=-self.rotation_deg,
            translation=inv_t,
            scale=1.0 / self.scale,
            noise_sigma=0.0,
        )


@dataclass
class StepSpec:
    """One stream step: which classes the source and target carry."""

    source_classes: list
    target_shared_classes: list
    target_private_classes: list
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    shared_only: bool = False

    def __post_init__(self):
        self.source_classes = [int(c) for c in self.source_classes]
        self.target_shared_classes = [int(c) for c in self.target_shared_classes]
        self.target_private_classes = [int(c) for c in self.target_private_classes]
        if not self.target_private_classes and not self.shared_only:
            raise ValueError(
                "step has no private classes; mark shared_only=True if intended"
            )
        overlap = set(self.target_shared_classes) & set(self.target_private_classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} are both shared and private")


@dataclass
class StreamSchedule:
    steps: list

    def __post_init__(self):
        if not self.steps:
            raise ValueError("schedule needs at least one step")
        introduced = set()
        for i, st in enumerate(self.steps):
            dup = introduced & set(st.target_private_classes)
            if dup:
                raise ValueError(f"step {i} reintroduces private classes {sorted(dup)}")
            introduced |= set(st.target_private_classes)
            introduced |= set(st.source_classes)

    def all_classes(self) -> list:
        out = set()
        for st in self.steps:
            out |= set(st.source_classes) | set(st.target_shared_classes)
            out |= set(st.target_private_classes)
        return sorted(out)


@dataclass
class StepBundle:
    """Training-facing view of one step; carries no target labels."""

    step: int
    source: LabeledSet | None
    target_features: np.ndarray
    one_shot: dict
    target_domain: str

    def __post_init__(self):
        self.target_features = np.asarray(self.target_features, dtype=np.float64)


@dataclass
class StepEval:
    """Evaluation-only artifact: the target pool's hidden labels."""

    step: int
    features: np.ndarray
    labels: np.ndarray


def make_domain(spec: DomainSpec, classes=None, domain: str = "source") -> LabeledSet:
    """Draw the per-class Gaussian clusters; deterministic per spec seed.

    Each class uses its own child stream, so restricting ``classes``
    never changes the draws of the classes that remain.
    """
    wanted = sorted(spec.class_means) if classes is None else sorted(int(c) for c in classes)
    feats, labels = [], []
    for cid in wanted:
        if cid not in spec.class_means:
            raise ValueError(f"class {cid} not in domain spec")
        n = spec.samples_per_class[cid]
        rng = generator(spec.seed, "domain", domain, cid)
        x = spec.class_means[cid] + spec.class_scales[cid] * rng.standard_normal((n, spec.dim))
        feats.append(x)
        labels.append(np.full(n, cid, dtype=np.int64))
    if feats:
        features = np.concatenate(feats, axis=0)
        labels = np.concatenate(labels)
    else:
        features = np.zeros((0, spec.dim), dtype=np.float64)
        labels = np.zeros(0, dtype=np.int64)
    return LabeledSet(features=features, labels=labels, domains=[domain] * len(labels))


def shift_domain(ds: LabeledSet, shift: ShiftSpec, seed: int) -> LabeledSet:
    """Apply the affine shift plus seeded additive noise; labels are kept."""
    if shift.rotation_deg != 0.0 and ds.dim < 2:
        raise ValueError("rotation needs at least two feature dims")
    x = shift.apply_to_points(ds.features)
    if shift.noise_sigma > 0:
        rng = generator(seed, "shift-noise")
        x = x + shift.noise_sigma * rng.standard_normal(x.shape)
    return LabeledSet(features=x, labels=ds.labels.copy(), domains=list(ds.domains))


def build_stream(schedule: StreamSchedule, base_spec: DomainSpec):
    """Materialize a schedule into per-step bundles plus eval artifacts.

    The one-shot sample for each private class is the generated target
    point nearest the class's shifted mean; it is removed from the
    unlabeled pool. Hidden labels travel only in the StepEval list.
    """
    bundles, evals = [], []
    for t, st in enumerate(schedule.steps):
        source = None
        if st.source_classes:
            source = make_domain(base_spec, classes=st.source_classes, domain="source")
        tgt_classes = st.target_shared_classes + st.target_private_classes
        raw = make_domain(base_spec, classes=tgt_classes, domain=f"target_{t}")
        shifted = shift_domain(raw, st.shift, seed=child_seed(base_spec.seed, "shift", t))
        keep = np.ones(len(shifted), dtype=bool)
        one_shot = {}
        for cid in st.target_private_classes:
            rows = np.flatnonzero(shifted.labels == cid)
            if rows.size < 2:
                raise ValueError(
                    f"private class {cid} needs >= 2 samples (one-shot plus unlabeled pool)"
                )
            target_mean = st.shift.apply_to_points(base_spec.class_means[cid])
            d = np.linalg.norm(shifted.features[rows] - target_mean, axis=1)
            pick = rows[int(np.argmin(d))]
            one_shot[cid] = shifted.features[pick].copy()
            keep[pick] = False
        pool = shifted.features[keep]
        pool_labels = shifted.labels[keep]
        bundles.append(
            StepBundle(
                step=t,
                source=source,
                target_features=pool,
                one_shot=one_shot,
                target_domain=f"target_{t}",
            )
        )
        evals.append(StepEval(step=t, features=pool.copy(), labels=pool_labels.copy()))
    return bundles, evals


# ---------------------------------------------------------------------------
# standard desk-scale stream used by the experiment defaults


def place_class_means(
    n_classes: int,
    seed: int,
    shift: ShiftSpec,
    sigma: float,
    radius: float = 5.0,
    min_dist_factor: float = 8.0,
    margin_factor: float = 3.0,
) -> np.ndarray:
    """Scatter class means in a 2-D disk so the shift stays resolvable.

    Greedy placement with two constraints: pairwise distance at least
    min_dist_factor * sigma, and every shifted mean closer to its own
    original position than to any other mean by margin_factor * sigma.
    Both are checked incrementally per candidate; the disk radius grows
    when a layout does not fit, so the constructor always terminates.
    """
    min_dist = min_dist_factor * sigma
    margin = margin_factor * sigma
    rng = generator(seed, "layout")
    r = radius
    for _grow in range(20):
        for _restart in range(8):
            means = np.zeros((n_classes, 2))
            shifted = np.zeros((n_classes, 2))
            own_disp = np.zeros(n_classes)
            k = 0
            stuck = False
            while k < n_classes and not stuck:
                placed = False
                for _batch in range(6):
                    cands = rng.uniform(-r, r, size=(512, 2))
                    cands = cands[np.linalg.norm(cands, axis=1) <= r]
                    for cand in cands:
                        if k:
                            if np.linalg.norm(means[:k] - cand, axis=1).min() < min_dist:
                                continue
                            sc = shift.apply_to_points(cand)
                            own_c = float(np.linalg.norm(sc - cand))
                            # shifted candidate stays closest to its own mean
                            if np.linalg.norm(means[:k] - sc, axis=1).min() - own_c < margin:
                                continue
                            # no placed mean's shifted image drifts onto the candidate
                            drift = np.linalg.norm(shifted[:k] - cand, axis=1) - own_disp[:k]
                            if drift.min() < margin:
                                continue
                        else:
                            sc = shift.apply_to_points(cand)
                        means[k] = cand
                        shifted[k] = sc
                        own_disp[k] = np.linalg.norm(sc - cand)
                        k += 1
                        placed = True
                        break
                    if placed:
                        break
                stuck = not placed
            if k == n_classes:
                return means
        r *= 1.2
    raise RuntimeError("could not place class means; relax the layout constraints")


def standard_shift(dim: int = 2) -> ShiftSpec:
    """The default covariate shift: 15 degree rotation, 0.5 translation."""
    t = np.zeros(dim)
    t[:2] = 0.5 / math.sqrt(2.0)
    return ShiftSpec(rotation_deg=15.0, translation=t, scale=1.0, noise_sigma=0.0)


def standard_stream(
    seed: int,
    n_steps: int = 3,
    shared_per_step: int = 4,
    private_per_step: int = 2,
    samples_per_class: int = 200,
    dim: int = 2,
    sigma: float = 0.18,
    shift: ShiftSpec | None = None,
    private_sample_ratio: float = 1.0,
    source_on_all_steps: bool = True,
):
    """Schedule plus domain spec for the default synthetic benchmark.

    Every step introduces ``shared_per_step`` fresh source classes that
    the target shares, plus ``private_per_step`` target-only classes.
    With ``source_on_all_steps`` False only step 0 carries source data.
    ``private_sample_ratio`` scales the private classes' sample counts.
    """
    if private_sample_ratio <= 0:
        raise ValueError("private_sample_ratio must be positive")
    per_step = shared_per_step + private_per_step
    n_classes = n_steps * per_step
    shift = standard_shift(dim) if shift is None else shift
    means2d = place_class_means(n_classes, seed, shift, sigma)
    means = {}
    for cid in range(n_classes):
        m = np.zeros(dim)
        m[:2] = means2d[cid]
        means[cid] = m
    counts = {}
    steps = []
    for s in range(n_steps):
        base = s * per_step
        shared = list(range(base, base + shared_per_step))
        private = list(range(base + shared_per_step, base + per_step))
        for cid in shared:
            counts[cid] = samples_per_class
        for cid in private:
            counts[cid] = max(2, int(round(samples_per_class * private_sample_ratio)))
        steps.append(
            StepSpec(
                source_classes=shared if (source_on_all_steps or s == 0) else [],
                target_shared_classes=shared,
                target_private_classes=private,
                shift=replace(shift),
            )
        )
    spec = DomainSpec(
        dim=dim,
        class_means=means,
        class_scales={c: sigma for c in means},
        samples_per_class=counts,
        seed=child_seed(seed, "data"),
    )
    return StreamSchedule(steps=steps), spec


# ---------------------------------------------------------------------------
# CSV contract


def _format_float(x: float) -> str:
    return repr(float(x))


def save_csv(path, ds: LabeledSet) -> None:
    with open(path, "w") as fh:
        cols = [f"feature_{i}" for i in range(ds.dim)] + ["label", "domain"]
        fh.write(",".join(cols) + "\n")
        for row, lab, dom in zip(ds.features, ds.labels, ds.domains):
            if "," in dom or "\n" in dom:
                raise ValueError(f"domain tag {dom!r} may not contain commas or newlines")
            fh.write(",".join(_format_float(v) for v in row) + f",{int(lab)},{dom}\n")


def load_csv(path) -> LabeledSet:
    """Parse a labeled CSV; malformed rows raise with their line number."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if not header:
            raise CsvFormatError(f"{path}: empty file, expected a header")
        cols = header.split(",")
        if len(cols) < 2 or cols[-2] != "label" or cols[-1] != "domain":
            raise CsvFormatError(f"{path}: header must end with 'label,domain'")
        n_feat = len(cols) - 2
        for i, name in enumerate(cols[:n_feat]):
            if name != f"feature_{i}":
                raise CsvFormatError(f"{path}: expected column feature_{i}, found {name!r}")
        feats, labels, domains = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise CsvFormatError(
                    f"{path}: line {lineno}: expected {len(cols)} fields, found {len(parts)}"
                )
            try:
                feats.append([float(v) for v in parts[:n_feat]])
            except ValueError:
                raise CsvFormatError(f"{path}: line {lineno}: non-numeric feature") from None
            try:
                lab = int(parts[n_feat])
            except ValueError:
                raise CsvFormatError(f"{path}: line {lineno}: non-integer label") from None
            if lab < 0:
                raise CsvFormatError(f"{path}: line {lineno}: negative label")
            labels.append(lab)
            domains.append(parts[n_feat + 1])
    features = np.array(feats, dtype=np.float64) if feats else np.zeros((0, n_feat))
    return LabeledSet(features=features, labels=np.array(labels, dtype=np.int64), domains=domains)


def save_unlabeled_csv(path, features: np.ndarray, domain: str) -> None:
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w") as fh:
        cols = [f"feature_{i}" for i in range(features.shape[1])] + ["domain"]
        fh.write(",".join(cols) + "\n")
        for row in features:
            fh.write(",".join(_format_float(v) for v in row) + f",{domain}\n")


def load_unlabeled_csv(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        if len(cols) < 1 or cols[-1] != "domain":
            raise CsvFormatError(f"{path}: header must end with 'domain'")
        n_feat = len(cols) - 1
        feats, domains = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise CsvFormatError(
                    f"{path}: line {lineno}: expected {len(cols)} fields, found {len(parts)}"
                )
            try:
                feats.append([float(v) for v in parts[:n_feat]])
            except ValueError:
                raise CsvFormatError(f"{path}: line {lineno}: non-numeric feature") from None
            domains.append(parts[n_feat])
    features = np.array(feats, dtype=np.float64) if feats else np.zeros((0, n_feat))
    return features, domains


def save_stream(out_dir, bundles, evals) -> None:
    """Write step_<t>/{source,target_unlabeled,target_eval,one_shot}.csv."""
    by_step = {e.step: e for e in evals}
    for b in bundles:
        d = os.path.join(out_dir, f"step_{b.step}")
        os.makedirs(d, exist_ok=True)
        if b.source is not None and len(b.source):
            save_csv(os.path.join(d, "source.csv"), b.source)
        save_unlabeled_csv(
            os.path.join(d, "target_unlabeled.csv"), b.target_features, b.target_domain
        )
        ev = by_step[b.step]
        save_csv(
            os.path.join(d, "target_eval.csv"),
            LabeledSet(ev.features, ev.labels, [b.target_domain] * len(ev.labels)),
        )
        if b.one_shot:
            cids = sorted(b.one_shot)
            save_csv(
                os.path.join(d, "one_shot.csv"),
                LabeledSet(
                    np.stack([b.one_shot[c] for c in cids]),
                    np.array(cids, dtype=np.int64),
                    [b.target_domain] * len(cids),
                ),
            )


def load_step(stream_dir, step: int):
    """Read one step's bundle and eval artifact back from disk."""
    d = os.path.join(stream_dir, f"step_{step}")
    if not os.path.isdir(d):
        raise FileNotFoundError(f"no step directory {d}")
    src_path = os.path.join(d, "source.csv")
    source = load_csv(src_path) if os.path.exists(src_path) else None
    target_features, domains = load_unlabeled_csv(os.path.join(d, "target_unlabeled.csv"))
    one_shot = {}
    os_path = os.path.join(d, "one_shot.csv")
    if os.path.exists(os_path):
        ds = load_csv(os_path)
        one_shot = {int(l): f.copy() for f, l in zip(ds.features, ds.labels)}
    ev_path = os.path.join(d, "target_eval.csv")
    ev = None
    if os.path.exists(ev_path):
        ds = load_csv(ev_path)
        ev = StepEval(step=step, features=ds.features, labels=ds.labels)
    domain = domains[0] if domains else f"target_{step}"
    bundle = StepBundle(
        step=step,
        source=source,
        target_features=target_features,
        one_shot=one_shot,
        target_domain=domain,
    )
    return bundle, ev


def count_steps(stream_dir) -> int:
    n = 0
    while os.path.isdir(os.path.join(stream_dir, f"step_{n}")):
        n += 1
    return n
