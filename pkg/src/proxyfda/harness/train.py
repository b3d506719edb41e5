"""Fine-tuning loop with a selectable feature-space regularizer."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import numerics as nx
from ..dataset import LabeledFeatureSet
from ..fda import REGULARIZERS, LossScalars, Objective, combined_objective, fda_loss_batch, pointwise_l2_per_sample
from ..graph import ConfigError, FeatureBatch, build_neighbor_graph
from ..mining import BatchSpec, hard_mine_batch, random_class_batch, sample_candidates
from ..numerics import NonFiniteError, Parameter
from ..otdd import otdd
from ..proxy import DiversityTracker, ProxyGenerator, proxy_counts, proxy_regularizer
from .encoder import Encoder
from .probe import ProbeConfig, linear_probe
from .world import World

__all__ = ["RunConfig", "RunReport", "finetune", "save_checkpoint", "load_checkpoint", "FrozenEncoderError"]


class FrozenEncoderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    regularizer: str = "fda"
    lam: float = 1.0
    m: int = 8
    n: int = 4
    C: int | None = 12
    K: int | None = None
    mining: str = "hard"
    s: float = 0.4
    alpha: float = 5.0
    eps_var: float = 1e-4
    inv_tau: float = 10.0
    bias: float = 10.0
    attn_dim: int = 16
    gen_hidden: int = 32
    encoder: str = "mlp"
    hidden: int = 64
    normalize: bool = True
    optimizer: str = "momentum"
    momentum: float = 0.9
    lr_encoder: float = 1e-2
    lr_head: float = 1e-2
    lr_scalars: float = 1e-3
    lr_generator: float = 1e-3
    steps: int = 300
    eval_every: int = 100
    sigma_aug: float | None = None
    otdd_p: float = 2.0
    otdd_k: int = 3
    probe_l2: float = 1e-2
    probe_tol: float = 1e-6
    probe_epochs: int = 2000

    def __post_init__(self):
        if self.K is None:
            object.__setattr__(self, "K", 2 * self.n)
        Objective(self.lam, self.regularizer)  # validates both
        spec = self.batch_spec
        if self.K % self.n or not 1 < self.K // self.n <= 4:
            raise ConfigError(f"K={self.K} must be one of 2n, 3n, 4n (n={self.n}); K > n is required")
        if self.K > spec.B - 2:
            raise ConfigError(f"K={self.K} leaves no room for non-neighbors in a batch of {spec.B}")
        if self.mining not in ("hard", "random"):
            raise ConfigError(f"mining must be 'hard' or 'random', got {self.mining!r}")
        if self.optimizer not in ("sgd", "momentum"):
            raise ConfigError(f"optimizer must be 'sgd' or 'momentum', got {self.optimizer!r}")
        if self.steps < 1 or self.eval_every < 1:
            raise ConfigError("steps and eval_every must be >= 1")
        if not 0 < self.s <= 1:
            raise ConfigError("s must be in (0, 1]")
        for name in ("lr_encoder", "lr_head", "lr_scalars", "lr_generator", "alpha", "eps_var"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0")

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.m, self.n, self.C)

    @property
    def objective(self) -> Objective:
        return Objective(self.lam, self.regularizer)

    @property
    def probe(self) -> ProbeConfig:
        return ProbeConfig(self.probe_l2, self.probe_tol, self.probe_epochs)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class RunReport:
    config: dict
    seed: int
    world_seed: int
    initial: dict
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write_jsonl(self, path) -> None:
        """Header line, one line per eval record, then the summary line."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "config": self.config, "seed": self.seed,
                                 "world_seed": self.world_seed, "initial": self.initial}, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps({"kind": "record", **r}, sort_keys=True) + "\n")
            fh.write(json.dumps({"kind": "summary", "status": self.status, **self.summary}, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "RunReport":
        header, records, summary = None, [], {}
        with open(path) as fh:
            for line in fh:
                obj = json.loads(line)
                kind = obj.pop("kind")
                if kind == "header":
                    header = obj
                elif kind == "record":
                    records.append(obj)
                else:
                    summary = obj
        if header is None:
            raise ValueError(f"{path}: missing header line")
        status = summary.pop("status", "ok")
        return cls(header["config"], header["seed"], header["world_seed"], header["initial"], records, summary, status)


def save_checkpoint(path, params: list[Parameter]) -> None:
    """One array per parameter keyed ``<id>:<name>``; ids are positions in the run's parameter list."""
    np.savez(path, **{f"{i}:{p.name}": p.value for i, p in enumerate(params)})


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k.split(":", 1)[1]: z[k] for k in sorted(z.files, key=lambda k: int(k.split(":", 1)[0]))}


class _Optimizer:
    def __init__(self, groups: list[tuple[list[Parameter], float]], momentum: float):
        self.groups = groups
        self.momentum = momentum
        self.buf = {p: np.zeros_like(p.value) for ps, _ in groups for p in ps}

    def step(self, grads: dict) -> None:
        for ps, lr in self.groups:
            for p in ps:
                g = grads.get(p)
                if g is None:
                    continue
                v = self.buf[p]
                v *= self.momentum
                v += g
                p.value = p.value - lr * v


def _encode_world(world: World, enc: Encoder) -> dict[str, dict[str, LabeledFeatureSet]]:
    return {name: {split: fs.with_features(enc.encode(fs.features)) for split, fs in splits.items()}
            for name, splits in world.datasets.items()}


def _probe_accs(feats, config: RunConfig) -> dict[str, float]:
    return {name: linear_probe(s["train"], s["test"], config.probe)[1] for name, s in feats.items()}


def _evaluate(world: World, feats, pre_feats, pre_acc, config: RunConfig, seed: int) -> dict:
    acc = _probe_accs(feats, config)
    l2, dist = {}, {}
    for name in world.target_names:
        x, xh = feats[name]["probe"], pre_feats[name]["probe"]
        l2[name] = float(np.linalg.norm(x.features - xh.features, axis=0).mean())
        dist[name] = otdd(xh, x, p=config.otdd_p, k=config.otdd_k, seed=seed).distance
    delta = {name: acc[name] - pre_acc[name] for name in world.target_names}
    return {
        "a_lp": acc["downstream"],
        "delta_lp_downstream": acc["downstream"] - pre_acc["downstream"],
        "delta_lp": delta,
        "delta_lp_mean": float(np.mean(list(delta.values()))),
        "l2_distance": l2,
        "l2_distance_mean": float(np.mean(list(l2.values()))),
        "otdd": dist,
        "otdd_mean": float(np.mean(list(dist.values()))),
    }


def finetune(world: World, config: RunConfig, seed: int = 0, checkpoint=None) -> RunReport:
    """Fine-tune an encoder on the world's downstream set and track forgetting on its targets."""
    d = world.spec.d
    spec = config.batch_spec
    down = world.downstream
    if len(down["train"].classes) < spec.C:
        raise ConfigError(f"downstream set has {len(down['train'].classes)} classes but C={spec.C}")
    rng = np.random.default_rng([seed, 1])
    enc = Encoder(config.encoder, d, config.hidden, config.normalize, seed=[seed, 2])
    pre = enc.frozen_copy()
    frozen_digest = pre.digest()

    pre_feats = _encode_world(world, pre)
    pre_acc = _probe_accs(pre_feats, config)
    head0, _ = linear_probe(pre_feats["downstream"]["train"], pre_feats["downstream"]["test"], config.probe)
    classes = head0.classes
    w_head = Parameter(head0.weight, name="head.w")
    b_head = Parameter(head0.bias[:, None], name="head.b")
    scalars = LossScalars(config.inv_tau, config.bias)
    obj = config.objective

    gen = None
    if config.regularizer == "proxy-fda":
        n_pos, n_neg = proxy_counts(config.K, spec.B, config.s)
        gen = ProxyGenerator(d, n_pos, n_neg, config.attn_dim, config.gen_hidden, seed=[seed, 3])
    tracker = DiversityTracker()

    mom = config.momentum if config.optimizer == "momentum" else 0.0
    model_groups = [(enc.params, config.lr_encoder), ([w_head, b_head], config.lr_head),
                    (scalars.params, config.lr_scalars)]
    opt = _Optimizer(model_groups, mom)
    gen_opt = _Optimizer([(gen.params, config.lr_generator)], mom) if gen else None
    model_params = [p for ps, _ in model_groups for p in ps]

    report = RunReport(asdict(config), seed, world.seed, {
        "a_lp": pre_acc["downstream"],
        "a_lp_targets": {k: pre_acc[k] for k in world.target_names},
        "frozen_digest": frozen_digest,
    })
    task_acc, reg_acc, proxy_acc, count = 0.0, 0.0, 0.0, 0
    for step in range(1, config.steps + 1):
        try:
            pool = sample_candidates(down["train"], spec, rng, (pre.encode, enc.encode), config.sigma_aug)
            if config.mining == "hard":
                batch = hard_mine_batch(pool, spec, scalars, rng)
            else:
                batch = random_class_batch(pool, spec, rng)
            x = enc.forward(batch.inputs)
            y = np.searchsorted(classes, batch.pretrained.labels)
            logits = nx.add(nx.matmul(w_head, x), b_head)
            task = nx.neg(nx.take(nx.log_softmax(logits, axis=0), (y, np.arange(spec.B))))
            reg = None
            proxy_loss = None
            if obj.regularizer == "pointwise-l2":
                reg = pointwise_l2_per_sample(x, batch.pretrained.values)
            elif obj.regularizer in ("fda", "proxy-fda"):
                graph = build_neighbor_graph(batch.pretrained, config.K)
                fb = FeatureBatch(x, batch.pretrained.labels, "finetuned", batch.pretrained.sample_ids)
                if obj.regularizer == "fda":
                    reg = fda_loss_batch(fb, graph, scalars)
                else:
                    proxy_loss, reg, proxies = proxy_regularizer(fb, graph, gen, scalars, config.alpha,
                                                                 config.eps_var)
                    tracker.update(proxies.pos, proxies.neg)
            total = combined_objective(task, reg, obj)
            grads = nx.gradient(total, model_params)
            gen_grads = nx.gradient(proxy_loss, gen.params) if proxy_loss is not None else None
        except (NonFiniteError, FloatingPointError) as err:
            report.status = "diverged"
            report.records.append({"step": step, "error": str(err)})
            break
        opt.step(grads)
        if gen_grads is not None:
            gen_opt.step(gen_grads)
        task_acc += float(nx.mean(task).value)
        reg_acc += float(nx.mean(reg).value) if reg is not None else 0.0
        proxy_acc += float(proxy_loss.value) if proxy_loss is not None else 0.0
        count += 1
        if step % config.eval_every == 0 or step == config.steps:
            rec = {"step": step, "task_loss": task_acc / count, "reg_loss": reg_acc / count}
            if gen is not None:
                rec["proxy_loss"] = proxy_acc / count
                rec["diversity"] = tracker.value
            inv_tau, bias = scalars.values()
            rec["tau"], rec["bias"] = 1.0 / inv_tau, bias
            rec.update(_evaluate(world, _encode_world(world, enc), pre_feats, pre_acc, config, seed))
            report.records.append(rec)
            task_acc, reg_acc, proxy_acc, count = 0.0, 0.0, 0.0, 0

    if pre.digest() != frozen_digest:
        raise FrozenEncoderError("pre-trained encoder changed during fine-tuning")
    if report.status == "ok":
        last = report.records[-1]
        report.summary = {k: last[k] for k in ("a_lp", "delta_lp", "delta_lp_mean", "delta_lp_downstream",
                                               "l2_distance_mean", "otdd_mean")}
        report.summary["steps"] = config.steps
    if checkpoint is not None:
        params = model_params + (gen.params if gen else [])
        save_checkpoint(checkpoint, params)
    return report
