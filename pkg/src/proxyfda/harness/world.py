"""Synthetic concept worlds: class prototypes plus shared attributes plus noise."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from ..dataset import LabeledFeatureSet
from ..graph import ConfigError

__all__ = ["WorldSpec", "World", "generate_world", "overlap_pool", "SPLITS"]

SPLITS = ("train", "test", "probe")


@dataclass(frozen=True)
class WorldSpec:
    """Layout and scales of a synthetic world.

    Classes ``0 .. n_downstream-1`` form the fine-tuning set; the remaining
    classes are dealt into ``n_targets`` equal target datasets. Every attribute
    spans one downstream class and ``attribute_span - 1`` target classes, so the
    fine-tuning signal touches structure the targets depend on. ``common_scale``
    adds one direction shared by all samples, which keeps cosines positive the
    way foundation-model embeddings are.
    """

    d: int = 32
    n_classes: int = 24
    n_downstream: int = 12
    n_targets: int = 2
    samples_per_class: int = 40
    n_train: int = 16
    n_test: int = 12
    n_probe: int = 12
    prototype_scale: float = 0.3
    n_attributes: int = 6
    attribute_span: tuple[int, int] = (2, 3)
    attribute_scale: float = 1.25
    common_scale: float = 2.5
    attribute_jitter: float = 0.0
    attribute_mode: str = "cross"
    noise: float = 0.15

    def __post_init__(self):
        if self.d < 2:
            raise ConfigError("d must be >= 2")
        if not 1 <= self.n_downstream < self.n_classes:
            raise ConfigError("need 1 <= n_downstream < n_classes")
        rest = self.n_classes - self.n_downstream
        if self.n_targets < 1 or rest % self.n_targets:
            raise ConfigError(f"{rest} target classes cannot be split into {self.n_targets} equal datasets")
        if min(self.n_train, self.n_test, self.n_probe) < 1:
            raise ConfigError("every split needs at least one sample per class")
        if self.n_train + self.n_test + self.n_probe > self.samples_per_class:
            raise ConfigError("split sizes exceed samples_per_class")
        lo, hi = self.attribute_span
        if not 2 <= lo <= hi:
            raise ConfigError("attribute_span must satisfy 2 <= lo <= hi")
        if self.n_attributes < 0:
            raise ConfigError("n_attributes must be >= 0")
        if self.attribute_mode not in ("cross", "random"):
            raise ConfigError("attribute_mode must be 'cross' or 'random'")
        for name in ("prototype_scale", "attribute_scale", "common_scale", "attribute_jitter", "noise"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def target_size(self) -> int:
        return (self.n_classes - self.n_downstream) // self.n_targets


@dataclass
class World:
    """All splits of every dataset, as raw (pre-encoder) unit-norm inputs."""

    spec: WorldSpec
    seed: int
    datasets: dict[str, dict[str, LabeledFeatureSet]]
    sample_ids: dict[str, dict[str, np.ndarray]]
    attributes: list[list[int]] = field(default_factory=list)

    @property
    def downstream(self) -> dict[str, LabeledFeatureSet]:
        return self.datasets["downstream"]

    @property
    def target_names(self) -> list[str]:
        return [k for k in self.datasets if k != "downstream"]


def _unit(rng, d, scale):
    v = rng.standard_normal(d)
    return scale * v / np.linalg.norm(v)


def generate_world(spec: WorldSpec, seed: int = 0) -> World:
    rng = np.random.default_rng(seed)
    d, c = spec.d, spec.n_classes
    common = _unit(rng, d, spec.common_scale)
    protos = np.stack([_unit(rng, d, spec.prototype_scale) for _ in range(c)])
    attr_vecs = np.stack([_unit(rng, d, spec.attribute_scale) for _ in range(spec.n_attributes)]) \
        if spec.n_attributes else np.zeros((0, d))

    # "cross": one downstream class + (span-1) target classes, drawn without reuse while possible
    down_free = list(rng.permutation(spec.n_downstream))
    targ_free = list(spec.n_downstream + rng.permutation(c - spec.n_downstream))
    assignment: list[list[int]] = []
    for _ in range(spec.n_attributes):
        span = int(rng.integers(spec.attribute_span[0], spec.attribute_span[1] + 1))
        if spec.attribute_mode == "random":
            assignment.append(sorted(int(k) for k in rng.choice(c, size=span, replace=False)))
            continue
        if not down_free:
            down_free = list(rng.permutation(spec.n_downstream))
        members = [int(down_free.pop())]
        for _ in range(span - 1):
            if not targ_free:
                targ_free = list(spec.n_downstream + rng.permutation(c - spec.n_downstream))
            members.append(int(targ_free.pop()))
        assignment.append(sorted(set(members)))
    carriers = [[a for a, members in enumerate(assignment) if k in members] for k in range(c)]

    n = spec.samples_per_class
    x = np.empty((c, n, d))
    for k in range(c):
        x[k] = common + protos[k] + spec.noise * rng.standard_normal((n, d))
        for a in carriers[k]:
            strength = 1.0 + spec.attribute_jitter * rng.standard_normal((n, 1))
            x[k] += strength * attr_vecs[a]
    x /= np.linalg.norm(x, axis=2, keepdims=True)

    groups = {"downstream": list(range(spec.n_downstream))}
    t = spec.target_size
    for j in range(spec.n_targets):
        lo = spec.n_downstream + j * t
        groups[f"target{j}"] = list(range(lo, lo + t))
    bounds = {"train": (0, spec.n_train),
              "test": (spec.n_train, spec.n_train + spec.n_test),
              "probe": (spec.n_train + spec.n_test, spec.n_train + spec.n_test + spec.n_probe)}
    datasets: dict[str, dict[str, LabeledFeatureSet]] = {}
    ids: dict[str, dict[str, np.ndarray]] = {}
    for name, classes in groups.items():
        datasets[name], ids[name] = {}, {}
        for split, (lo, hi) in bounds.items():
            feats = np.concatenate([x[k, lo:hi] for k in classes]).T
            labels = np.repeat(classes, hi - lo)
            datasets[name][split] = LabeledFeatureSet(feats, labels, f"{name}/{split}")
            ids[name][split] = np.concatenate([k * n + np.arange(lo, hi) for k in classes])
    return World(spec, seed, datasets, ids, assignment)


def overlap_pool(seed: int = 0, d: int = 32, groups: int = 16, per_group: int = 4, n: int = 4,
                 common: float = 3.0, group_scale: float = 1.0, class_scale: float = 0.35,
                 noise: float = 0.1) -> LabeledFeatureSet:
    """Unit-norm classes clustered into groups that overlap strongly inside a group.

    Every sample is ``common*c + group_scale*g + class_scale*p + noise``, with
    ``c`` shared by all classes, ``g`` by a group and ``p`` by one class. A large
    ``common`` keeps all cosines high, the regime where the mining objective
    rewards picking similar classes. Class ``g*per_group + j`` is in group ``g``.
    """
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(d)
    c /= np.linalg.norm(c)
    feats, labels = [], []
    for g in range(groups):
        gp = rng.standard_normal(d) / np.sqrt(d)
        for j in range(per_group):
            cp = rng.standard_normal(d) / np.sqrt(d)
            x = (common * c + group_scale * gp + class_scale * cp)[:, None]
            x = x + noise * rng.standard_normal((d, n)) / np.sqrt(d)
            feats.append(x / np.linalg.norm(x, axis=0))
            labels.extend([g * per_group + j] * n)
    return LabeledFeatureSet(np.concatenate(feats, axis=1), np.asarray(labels))
