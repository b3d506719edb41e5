import json

import numpy as np
import pytest

from proxyfda.dataset import LabeledFeatureSet
from proxyfda.graph import ConfigError
from proxyfda.harness import (Encoder, ExperimentConfig, ProbeConfig, ProbeError, RunConfig, RunReport,
                              WorldSpec, apply_overrides, delta_lp, finetune, generate_world, linear_probe,
                              load_checkpoint, load_reports, parse_config, run_experiment, summarize)
from proxyfda.harness.train import save_checkpoint
from proxyfda.numerics import Parameter

TINY = WorldSpec(d=12, n_classes=12, n_downstream=6, n_targets=2, samples_per_class=16, n_train=6,
                 n_test=5, n_probe=5, n_attributes=3)
FAST = dict(m=4, n=3, C=6, K=6, steps=12, eval_every=6, hidden=16, attn_dim=8, gen_hidden=8, probe_epochs=300)


@pytest.fixture(scope="module")
def tiny_world():
    return generate_world(TINY, 0)


# worlds

def test_world_layout(tiny_world):
    w = tiny_world
    assert w.target_names == ["target0", "target1"]
    down = set(w.downstream["train"].classes.tolist())
    seen = set(down)
    for name in w.target_names:
        cls = set(w.datasets[name]["train"].classes.tolist())
        assert not cls & seen
        seen |= cls
    assert seen == set(range(12))
    for name, ids in w.sample_ids.items():
        parts = [set(ids[s].tolist()) for s in ("train", "test", "probe")]
        assert all(not a & b for i, a in enumerate(parts) for b in parts[i + 1:])
        for split, fs in w.datasets[name].items():
            assert np.allclose(np.linalg.norm(fs.features, axis=0), 1.0)
            assert fs.size == len(ids[split])


def test_world_deterministic():
    a, b = generate_world(TINY, 3), generate_world(TINY, 3)
    assert all(a.datasets[n][s] == b.datasets[n][s] for n in a.datasets for s in a.datasets[n])
    assert a.attributes == b.attributes


def test_zero_noise_collapses_classes():
    w = generate_world(WorldSpec(**{**TINY.__dict__, "noise": 0.0}), 1)
    fs = w.downstream["train"]
    for c in fs.classes:
        cols = fs.features[:, fs.labels == c]
        assert np.allclose(cols, cols[:, :1], atol=1e-12)


@pytest.mark.parametrize("mode", ["cross", "random"])
def test_shared_attribute_raises_similarity(mode):
    wins, trials = 0, 0
    spec = WorldSpec(attribute_mode=mode)
    for seed in range(12):
        w = generate_world(spec, seed)
        feats = {}
        for splits in w.datasets.values():
            fs = splits["train"]
            for c in fs.classes:
                feats[int(c)] = fs.features[:, fs.labels == c]
        shared = [tuple(a[:2]) for a in w.attributes]
        members = {c for a in w.attributes for c in a}
        loners = [c for c in range(spec.n_classes) if c not in members]
        for i, j in shared:
            if len(loners) < 2:
                break
            others = [c for c in range(spec.n_classes)
                      if c not in (i, j) and not any(i in a and c in a for a in w.attributes)]
            mean_cos = lambda a, b: float((feats[a].T @ feats[b]).mean())
            wins += mean_cos(i, j) > np.mean([mean_cos(i, c) for c in others])
            trials += 1
    assert trials >= 10 and wins >= 0.9 * trials


@pytest.mark.parametrize("kw", [dict(n_downstream=24), dict(n_targets=5), dict(n_train=40),
                                dict(attribute_span=(1, 2)), dict(attribute_mode="x"), dict(noise=-1.0)])
def test_world_spec_validation(kw):
    with pytest.raises(ConfigError):
        WorldSpec(**kw)


# encoders and probes

@pytest.mark.parametrize("kind", ["identity", "linear", "mlp"])
def test_encoders_start_at_identity(rng, kind):
    x = rng.standard_normal((6, 5))
    enc = Encoder(kind, 6, hidden=8, seed=0)
    assert np.allclose(enc(x), x / np.linalg.norm(x, axis=0))
    frozen = enc.frozen_copy()
    digest = frozen.digest()
    for p in enc.params:
        p.value = p.value + 1.0
    assert frozen.digest() == digest
    assert enc.digest() != digest or kind == "identity"


def test_probe_separable_and_deterministic(rng):
    x = np.concatenate([rng.normal(-2, 0.3, (3, 20)), rng.normal(2, 0.3, (3, 20))], axis=1)
    fs = LabeledFeatureSet(x, np.repeat([4, 9], 20))
    head, acc = linear_probe(fs, fs, ProbeConfig(l2=1e-4))
    assert acc == 1.0
    head2, _ = linear_probe(fs, fs, ProbeConfig(l2=1e-4))
    assert np.array_equal(head.weight, head2.weight) and np.array_equal(head.bias, head2.bias)
    assert head.classes.tolist() == [4, 9]


def test_probe_chance_on_shuffled_labels():
    accs = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.standard_normal((5, 200))
        y = r.permutation(np.repeat([0, 1], 100))
        train = LabeledFeatureSet(x[:, :100], y[:100])
        test = LabeledFeatureSet(x[:, 100:], y[100:])
        accs.append(linear_probe(train, test)[1])
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_probe_missing_class(rng):
    a = LabeledFeatureSet(rng.standard_normal((2, 4)), [0, 0, 1, 1])
    b = LabeledFeatureSet(rng.standard_normal((2, 3)), [0, 1, 2])
    with pytest.raises(ProbeError):
        linear_probe(a, b)


def test_delta_lp_examples():
    assert delta_lp(0.8, 0.8) == 0.0
    assert delta_lp(0.70, 0.75) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        delta_lp(1.2, 0.5)


# fine-tuning

def test_run_config_validation():
    assert RunConfig().K == 8
    for kw in (dict(K=4), dict(K=20), dict(n=4, K=10), dict(mining="x"), dict(optimizer="adam"),
               dict(lam=-1.0), dict(regularizer="weird"), dict(s=0.0), dict(lr_encoder=float("nan"))):
        with pytest.raises((ConfigError, ValueError)):
            RunConfig(**kw)


@pytest.mark.parametrize("method", ["none", "pointwise-l2", "fda", "proxy-fda"])
def test_finetune_smoke(tiny_world, method):
    rep = finetune(tiny_world, RunConfig(regularizer=method, **FAST), seed=0)
    assert rep.status == "ok"
    assert [r["step"] for r in rep.records] == [6, 12]
    for r in rep.records:
        for key in ("task_loss", "reg_loss", "tau", "bias", "a_lp", "delta_lp_mean", "otdd_mean",
                    "l2_distance_mean"):
            assert np.isfinite(r[key])
        assert set(r["delta_lp"]) == {"target0", "target1"}
    if method == "proxy-fda":
        assert "proxy_loss" in rep.records[-1] and rep.records[-1]["diversity"] > 0
    if method == "none":
        assert rep.records[-1]["reg_loss"] == 0.0
    assert rep.summary["steps"] == 12


def test_finetune_is_deterministic(tiny_world):
    cfg = RunConfig(regularizer="proxy-fda", **FAST)
    a = finetune(tiny_world, cfg, seed=4)
    b = finetune(tiny_world, cfg, seed=4)
    assert a.to_json() == b.to_json()
    assert finetune(tiny_world, cfg, seed=5).to_json() != a.to_json()


def test_huge_l2_weight_limits_drift(tiny_world):
    kw = {**FAST, "steps": 30, "eval_every": 30, "lr_encoder": 0.05}
    naive = finetune(tiny_world, RunConfig(regularizer="none", **kw), seed=0)
    tight = finetune(tiny_world, RunConfig(regularizer="pointwise-l2", lam=1e4,
                                           **{**kw, "lr_encoder": 1e-5}), seed=0)
    assert tight.summary["l2_distance_mean"] < naive.summary["l2_distance_mean"]


def test_divergence_is_recorded(tiny_world):
    rep = finetune(tiny_world, RunConfig(regularizer="fda", lr_scalars=1e6,
                                         **{k: v for k, v in FAST.items()}), seed=0)
    assert rep.status == "diverged"
    assert "error" in rep.records[-1] and rep.summary == {}


def test_report_and_checkpoint_round_trip(tiny_world, tmp_path):
    ck = tmp_path / "run.npz"
    rep = finetune(tiny_world, RunConfig(regularizer="proxy-fda", **FAST), seed=1, checkpoint=ck)
    rep.write_jsonl(tmp_path / "run.jsonl")
    back = RunReport.read_jsonl(tmp_path / "run.jsonl")
    assert back.to_json() == rep.to_json()
    state = load_checkpoint(ck)
    assert any(k.startswith("gen.") for k in state) and "head.w" in state and "bias" in state
    params = [Parameter(np.arange(3.0), name="a"), Parameter(np.eye(2), name="b")]
    save_checkpoint(tmp_path / "p.npz", params)
    got = load_checkpoint(tmp_path / "p.npz")
    assert list(got) == ["a", "b"] and np.array_equal(got["b"], np.eye(2))


# experiments and config files

CONFIG = """\
[world]
seed = 0
d = 12
n_classes = 12
n_downstream = 6
samples_per_class = 16
n_train = 6
n_test = 5
n_probe = 5
n_attributes = 3

[batch]
m = 4
n = 3
C = 6
K = 6

[proxy]
attn_dim = 8
gen_hidden = 8

[run]
methods = none pointwise-l2 fda proxy-fda
seeds = 0..1
steps = 8
eval_every = 8
hidden = 16
probe_epochs = 300
"""


def test_parse_config():
    exp = parse_config(CONFIG)
    assert exp.world.d == 12 and exp.seeds == [0, 1] and len(exp.methods) == 4
    assert exp.run_config("fda").K == 6 and exp.run_config("none").regularizer == "none"


@pytest.mark.parametrize("bad,where", [
    ("[world]\nd = twelve\n", ":2: [world] d"),
    ("[run]\nsteps = 5\nbogus = 1\n", ":3: [run] bogus"),
    ("[colors]\nred = 1\n", "unknown section"),
    ("[run]\nmethods =\n", "method list is empty"),
    ("[batch]\nK = 5\n", "K=5"),
    ("[run]\nseeds = a..b\n", "seeds"),
])
def test_config_errors_are_positioned(bad, where):
    with pytest.raises(ConfigError) as info:
        parse_config(bad, "exp.ini")
    assert where in str(info.value) and "exp.ini" in str(info.value)


def test_overrides():
    exp = apply_overrides(parse_config(CONFIG), ["loss.lam=2.5", "world.noise=0.2", "run.seeds=3"])
    assert exp.run["lam"] == 2.5 and exp.world.noise == 0.2 and exp.seeds == [3]
    assert exp.world.d == 12
    with pytest.raises(ConfigError):
        apply_overrides(exp, ["lam=2"])
    with pytest.raises(ConfigError):
        apply_overrides(exp, ["nowhere.lam=2"])


def test_experiment_sweep(tmp_path):
    exp = parse_config(CONFIG)
    summary = run_experiment(exp, tmp_path)
    runs = sorted(p.name for p in (tmp_path / "runs").glob("*.jsonl"))
    assert len(runs) == 8 and (tmp_path / "summary.csv").exists()
    assert [r["method"] for r in summary["methods"]] == ["none", "pointwise-l2", "fda", "proxy-fda"]
    assert all(r["runs"] == 2 for r in summary["methods"])
    again = summarize(load_reports(tmp_path / "runs"))
    assert json.dumps(again, sort_keys=True) == json.dumps(summary, sort_keys=True)
    parallel = run_experiment(exp, tmp_path / "par", workers=2)
    assert json.dumps(parallel, sort_keys=True) == json.dumps(summary, sort_keys=True)
    for name in runs:
        assert (tmp_path / "runs" / name).read_text() == (tmp_path / "par" / "runs" / name).read_text()


def test_empty_method_list_is_usage_error(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig(methods=[]), tmp_path)


# seed-rate properties on the default world (about a minute)

@pytest.fixture(scope="module")
def default_world():
    return generate_world(WorldSpec(), 0)


@pytest.mark.slow
def test_naive_improves_downstream(default_world):
    gains = [finetune(default_world, RunConfig(regularizer="none", lam=0.0), seed=s).summary["delta_lp_downstream"]
             for s in range(20)]
    assert sum(g > 0 for g in gains) >= 19


@pytest.mark.slow
@pytest.mark.parametrize("method", ["pointwise-l2", "fda", "proxy-fda"])
def test_downstream_accuracy_rises(default_world, method):
    gains = [finetune(default_world, RunConfig(regularizer=method), seed=s).summary["delta_lp_downstream"]
             for s in range(10)]
    assert sum(g > 0 for g in gains) >= 9
