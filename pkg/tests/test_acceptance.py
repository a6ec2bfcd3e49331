"""Acceptance gate: one test per shipping criterion.

Run with `pytest tests/test_acceptance.py -v` for a pass/fail line per
criterion.  The learning, transfer, and variant criteria train real agents;
their runs land in runs/acceptance/ and are reused on later invocations, so
only the first run is slow.  Delete that directory to retrain from scratch.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest

from eqrl import autodiff as ad
from eqrl.agents import AgentConfig, DDQNAgent
from eqrl.autodiff import Tensor
from eqrl.config import ConfigError, config_to_text, make_config
from eqrl.envs import make_env, random_baseline
from eqrl.groups import Group
from eqrl.nets import (EquivariantConv, FieldType, build_pacman_equivariant,
                       build_pacman_vanilla, build_snake_equivariant, build_snake_vanilla)
from eqrl.trainer import (checkpoint_path, load_checkpoint, read_episodes,
                          run_training, transfer_checkpoint)
from eqrl.verify import (brute_force_conv, check_layer_equivariance,
                         check_network_equivariance, gradient_check,
                         kernel_constraint_violation, network_constraint_violation)

D4 = Group.dihedral(4)
D1 = Group.dihedral(1)

RUNS = os.path.join(os.path.dirname(__file__), "..", "runs", "acceptance")


# -- shared long-run infrastructure ------------------------------------------

# One schedule for every trained agent: both models always share it, so the
# sample-efficiency comparisons stay like for like.  Sized to this game's
# tiny early episodes (a random snake dies in ~4 steps): updates every step,
# a 3000-step epsilon ramp, and a short credit horizon.
TRAIN_AGENT = {
    "train_freq": "1",
    "agent.lr": "5e-4",
    "agent.gamma": "0.95",
    "agent.eps_decay_steps": "3000",
    "agent.eps_end": "0.02",
    "agent.target_sync": "150",
    "agent.warmup": "400",
}

LEARN_EPISODES = 1500
LEARN_SEEDS = "0,1,2,3,4"

# the 15x15 board is harder than the 12x12 learning one, and retention
# ratios need a solidly positive denominator, hence the bigger budget
TRANSFER_EPISODES = 2000
TRANSFER_SEEDS = "0,1,2,3,4"
# head-only retraining relearns the readout from scratch, and given enough
# episodes even a vanilla extractor recovers fully; 100 episodes sits on the
# steep part of that ramp, where recovery speed separates the extractors.
# Each (model, transform, seed) cell averages over independent retrain
# streams: takeoff within so small a budget is luck-prone, and the mean over
# streams estimates the same quantity with less variance.
RETRAIN_EPISODES = 100
TRANSFER_EVAL_EPISODES = 50
TRANSFER_STREAMS = 3

VARIANT_EPISODES = 800
VARIANT_SEEDS = "0,1,2"


def ensure_run(name: str, values: dict) -> str:
    """Train into runs/acceptance/<name> unless a finished copy is cached."""
    out = os.path.join(RUNS, name)
    cfg = make_config({**values, "out": out})
    if _run_complete(cfg):
        return out
    os.makedirs(RUNS, exist_ok=True)
    return run_training(cfg, log_every=200)


def _run_complete(cfg) -> bool:
    echo = os.path.join(cfg.out, "config.txt")
    if not os.path.exists(echo) or open(echo).read() != config_to_text(cfg):
        return False
    try:
        per_seed = read_episodes(cfg.out)
    except ConfigError:
        return False
    if sorted(per_seed) != sorted(cfg.seeds):
        return False
    if any(len(v) != cfg.episodes for v in per_seed.values()):
        return False
    return all(os.path.exists(checkpoint_path(cfg.out, s)) for s in cfg.seeds)


def learning_run(model: str) -> str:
    return ensure_run(f"learn_{model}", {
        "env": "snake", "model": model, "episodes": str(LEARN_EPISODES),
        "seeds": LEARN_SEEDS, **TRAIN_AGENT})


def transfer_base_run(model: str) -> str:
    # grid 15 keeps every stride exact, so the symmetry structure carries
    # over to the transformed boards undistorted
    return ensure_run(f"transfer_{model}", {
        "env": "snake", "model": model, "grid_size": "15",
        "episodes": str(TRANSFER_EPISODES), "seeds": TRANSFER_SEEDS, **TRAIN_AGENT})


def variant_run(variant: str, model: str) -> str:
    return ensure_run(f"{variant}_{model}", {
        "env": "snake", "model": model, "variant": variant,
        "episodes": str(VARIANT_EPISODES), "seeds": VARIANT_SEEDS, **TRAIN_AGENT})


def final_window_mean(run_dir: str, window: int = 100) -> float:
    per_seed = read_episodes(run_dir)
    return float(np.mean([v[-window:].mean() for v in per_seed.values()]))


def cached_transfer(run_dir: str, model: str, label: str, seed: int,
                    stream: int = 0) -> dict:
    """transfer_checkpoint with a results cache keyed on the checkpoint bytes.

    `stream` selects an independent retraining random stream for the same
    base checkpoint; stream 0 is the checkpoint's own seed.
    """
    ckpt = checkpoint_path(run_dir, seed)
    digest = hashlib.md5(open(ckpt, "rb").read()).hexdigest()[:12]
    key = (f"{model}/{label}/seed{seed}/retrain{RETRAIN_EPISODES}/"
           f"eval{TRANSFER_EVAL_EPISODES}/{digest}")
    if stream:
        key += f"/s{stream}"
    cache_file = os.path.join(RUNS, "transfer_results.json")
    cache = json.load(open(cache_file)) if os.path.exists(cache_file) else {}
    if key not in cache:
        res = transfer_checkpoint(ckpt, label, retrain_episodes=RETRAIN_EPISODES,
                                  eval_episodes=TRANSFER_EVAL_EPISODES,
                                  seed=seed + 1000 * stream)
        cache[key] = json.loads(json.dumps(res, default=float))
        with open(cache_file, "w") as fh:
            json.dump(cache, fh, indent=1, sort_keys=True)
    return cache[key]


# -- criterion 1: single-layer equivariance -----------------------------------

def test_criterion_1_layer_equivariance():
    rng = np.random.default_rng(11)
    layers = {
        "lifting D4": EquivariantConv(FieldType(D4, "trivial", 3),
                                      FieldType(D4, "regular", 6), 5, 1, 2, rng),
        "group conv D4": EquivariantConv(FieldType(D4, "regular", 4),
                                         FieldType(D4, "regular", 5), 3, 1, 1, rng),
        "group conv D1": EquivariantConv(FieldType(D1, "regular", 8),
                                         FieldType(D1, "regular", 8), 5, 1, 2, rng),
    }
    t0 = time.monotonic()
    worst = {}
    for name, layer in layers.items():
        rep = check_layer_equivariance(layer, input_hw=9, n_trials=100,
                                       rng=np.random.default_rng(1), name=name)
        worst[name] = rep.max_dev
        assert rep.ok(1e-5), f"{name}: {rep}"
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"layer checks took {elapsed:.1f}s"
    print(f"PASS layer equivariance: {worst}, {elapsed:.1f}s")


# -- criterion 2: end-to-end extractor equivariance ---------------------------

def test_criterion_2_extractor_equivariance():
    t0 = time.monotonic()
    snake = build_snake_equivariant(d=15, rng=np.random.default_rng(2))
    assert snake.stride_exact
    rep = check_network_equivariance(snake, n_inputs=20, rng=np.random.default_rng(3))
    assert len(rep.by_element) == 8
    assert rep.ok(1e-5), f"snake extractor: {rep}"

    pacman = build_pacman_equivariant(d=15, restrict=True, rng=np.random.default_rng(4))
    assert pacman.stride_exact
    rep2 = check_network_equivariance(pacman, n_inputs=20, rng=np.random.default_rng(5))
    assert len(rep2.by_element) == 2  # both elements of the reflection subgroup
    assert rep2.ok(1e-5), f"restricted pacman extractor: {rep2}"
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"extractor checks took {elapsed:.1f}s"
    print(f"PASS extractor equivariance: snake {rep.max_dev:.2e}, "
          f"pacman {rep2.max_dev:.2e}, {elapsed:.1f}s")


# -- criterion 3: kernel constraint, fresh and trained -------------------------

def test_criterion_3_kernel_constraint():
    fresh = build_snake_equivariant(d=16, rng=np.random.default_rng(6))
    v_fresh = network_constraint_violation(fresh)
    assert v_fresh < 1e-5, f"fresh network violates the kernel constraint: {v_fresh}"

    # a short but real training run; enough optimizer updates to move every layer
    trained_dir = ensure_run("constraint_posttrain", {
        "env": "snake", "model": "equivariant", "episodes": "80", "seeds": "0",
        "train_freq": "1", "agent.warmup": "64", "agent.lr": "1e-3",
        "agent.eps_decay_steps": "200"})
    trained, _ = load_checkpoint(checkpoint_path(trained_dir, 0))
    v_trained = network_constraint_violation(trained)
    assert v_trained < 1e-5, f"trained network violates the kernel constraint: {v_trained}"

    # a single mutated weight must be caught
    layer = fresh.layers[0]
    bad = layer.expanded()[0].copy()
    bad[3, 1, 2, 4] += 1e-3
    v_bad = kernel_constraint_violation(layer, kernel=bad)
    assert v_bad >= 1e-5, f"mutation slipped through: {v_bad}"
    print(f"PASS kernel constraint: fresh {v_fresh:.1e}, trained {v_trained:.1e}, "
          f"mutated {v_bad:.1e}")


# -- criterion 4: forward pass against the loop oracle -------------------------

def test_criterion_4_brute_force_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        k, stride, padding = [(3, 1, 1), (5, 1, 2), (3, 2, 1), (5, 2, 2)][trial % 4]
        if trial % 2:
            layer = EquivariantConv(FieldType(D4, "trivial", 2),
                                    FieldType(D4, "regular", 2), k, stride, padding, rng)
        else:
            layer = EquivariantConv(FieldType(D4, "regular", 2),
                                    FieldType(D4, "regular", 2), k, stride, padding, rng)
        x = rng.standard_normal((layer.in_type.total_dim, 8, 8)).astype(np.float32)
        kernel, bias = layer.expanded()
        ref = brute_force_conv(x, kernel, stride, padding, bias)
        got = layer.forward(Tensor(x)).data
        dev = float(np.max(np.abs(got - ref)))
        worst = max(worst, dev)
        assert dev < 1e-6, f"trial {trial}: deviation {dev}"
    print(f"PASS brute-force oracle: 20 instances, worst abs deviation {worst:.2e}")


# -- criterion 5: finite-difference gradients ----------------------------------

def test_criterion_5_gradients():
    rng = np.random.default_rng(8)
    worst = {}

    # individually: lifting, group conv, vanilla conv, dense
    from eqrl.nets import Dense, VanillaConv
    lift = EquivariantConv(FieldType(D4, "trivial", 2), FieldType(D4, "regular", 3),
                           3, 1, 1, rng, dtype=np.float64)
    gconv = EquivariantConv(FieldType(D4, "regular", 2), FieldType(D4, "regular", 2),
                            3, 1, 1, rng, dtype=np.float64)
    vconv = VanillaConv(3, 4, 3, 1, 1, rng, np.float64)
    dense = Dense(12, 5, rng, np.float64)

    for name, layer, x in (
        ("lifting", lift, rng.standard_normal((2, 6, 6))),
        ("group conv", gconv, rng.standard_normal((16, 6, 6))),
        ("vanilla conv", vconv, rng.standard_normal((3, 6, 6))),
        ("dense", dense, rng.standard_normal(12)),
    ):
        def loss_fn(layer=layer, x=x):
            flat = ad.reshape(layer.forward(Tensor(x)), (-1,))
            return ad.mean_squared_error(flat, Tensor(np.zeros(flat.data.size)))
        rep = gradient_check(loss_fn, layer.params(), n_coords=40,
                             rng=np.random.default_rng(9))
        worst[name] = rep.max_rel_err
        assert rep.max_rel_err < 1e-3, f"{name}: {rep.max_rel_err}"

    # the full training loss: online Q, action gather, weighted squared error
    net = build_snake_equivariant(m=3, d=15, rng=np.random.default_rng(10),
                                  dtype=np.float64)
    batch = 4
    obs = rng.standard_normal((batch, 3, 15, 15))
    actions = np.array([0, 3, 1, 2])
    targets = rng.standard_normal(batch)
    weights = rng.uniform(0.5, 1.0, batch)

    def full_loss():
        q = net.q_values(Tensor(obs))
        qa = ad.select_actions(q, actions)
        return ad.mean_squared_error(qa, Tensor(targets), weights=weights)

    # the net has ~20k relu inputs, so a few pre-activations always sit within
    # h of a kink; there the difference quotient measures the kink, not the
    # derivative, and the checker excludes those coordinates (bounded below)
    rep = gradient_check(full_loss, net.parameters(), n_coords=60,
                         rng=np.random.default_rng(12), skip_nondiff=True)
    worst["full loss"] = rep.max_rel_err
    assert rep.max_rel_err < 1e-3, f"full loss gradients: {rep.max_rel_err}"
    assert rep.n_skipped <= 0.05 * rep.n_checked, (
        f"too many kink crossings to trust the check: {rep.n_skipped}/{rep.n_checked}")
    print(f"PASS gradient checks: {({k: float(f'{v:.2e}') for k, v in worst.items()})}, "
          f"{rep.n_skipped} kink coordinates excluded of {rep.n_checked + rep.n_skipped}")


# -- criterion 6: double-DQN target semantics ----------------------------------

def zeroed_agent(head_bias_online, head_bias_target):
    net = build_snake_vanilla(m=1, d=16, rng=np.random.default_rng(13))
    for p in net.parameters():
        p.assign(np.zeros_like(p.data))
    cfg = AgentConfig(gamma=0.9, warmup=1, batch_size=1)
    agent = DDQNAgent(net, cfg, (1, 16, 16), seed=0)
    agent.online.head.fc.b.assign(np.array(head_bias_online, dtype=np.float32))
    agent.target.head.fc.b.assign(np.array(head_bias_target, dtype=np.float32))
    return agent

def test_criterion_6_ddqn_targets():
    obs = np.zeros((1, 16, 16), dtype=np.uint8)
    # online argmax picks action 2; the target net evaluates it at 1.5
    agent = zeroed_agent([0.0, 1.0, 2.0, 0.5], [0.3, 0.1, 1.5, 4.0])
    y = agent.ddqn_target(reward=1.0, next_obs=obs, done=False)
    assert y == pytest.approx(1.0 + 0.9 * 1.5, abs=1e-7)

    assert agent.ddqn_target(reward=-0.25, next_obs=obs, done=True) == -0.25

    # single-net max would bootstrap 5.5 off the target's inflated action 0;
    # the double estimator asks the online net first and gets 2.8
    agent = zeroed_agent([0.0, 1.0, 0.5, 0.2], [5.0, 2.0, 0.0, 0.0])
    y = agent.ddqn_target(reward=1.0, next_obs=obs, done=False)
    assert y == pytest.approx(1.0 + 0.9 * 2.0, abs=1e-7)
    single_net_max = 1.0 + 0.9 * 5.0
    assert y < single_net_max
    print(f"PASS ddqn targets: hand example 2.35, terminal exact, "
          f"double {y:.2f} vs single-max {single_net_max:.2f}")


# -- criterion 7: parameter efficiency -----------------------------------------

def test_criterion_7_parameter_counts():
    snake_v = build_snake_vanilla(d=16).param_count()
    snake_e = build_snake_equivariant(d=16).param_count()
    ratio_snake = snake_e / snake_v
    assert ratio_snake <= 0.35, f"snake ratio {ratio_snake:.4f} ({snake_e} / {snake_v})"

    pac_v = build_pacman_vanilla(d=19).param_count()
    pac_r = build_pacman_equivariant(d=19, restrict=True).param_count()
    pac_f = build_pacman_equivariant(d=19, restrict=False).param_count()
    ratio_restricted = pac_r / pac_v
    ratio_full = pac_f / pac_v
    print(f"snake: {snake_e}/{snake_v} = {ratio_snake:.4f}; "
          f"pacman restricted: {pac_r}/{pac_v} = {ratio_restricted:.4f}; "
          f"pacman full-group: {pac_f}/{pac_v} = {ratio_full:.4f}")
    # The restricted default cannot make this bound: its 5x5 conv over the 64
    # restricted fields alone (204,864 free weights) outweighs the whole
    # vanilla stack.  The full-group build does pass (0.67).  Kept as stated;
    # see the decisions ledger for the arithmetic.
    assert ratio_restricted < 1.0, (
        f"pacman restricted/vanilla = {pac_r}/{pac_v} = {ratio_restricted:.4f} >= 1.0 "
        f"(full-group variant: {pac_f}/{pac_v} = {ratio_full:.4f} < 1.0)")


# -- criterion 8: learning beats the random baseline ---------------------------

@pytest.mark.slow
def test_criterion_8_learning():
    van_dir = learning_run("vanilla")
    eqv_dir = learning_run("equivariant")
    baseline = random_baseline(make_env("snake", 12, seed=123), episodes=200, seed=7)
    # the random policy nets a negative score, so "3x better" is read as
    # clearing +3x its magnitude (see ledger)
    floor = 3.0 * abs(baseline)
    van = final_window_mean(van_dir)
    eqv = final_window_mean(eqv_dir)
    print(f"random baseline {baseline:.2f}, floor {floor:.2f}, "
          f"vanilla {van:.2f}, equivariant {eqv:.2f}")
    assert van >= floor and van > baseline, f"vanilla final-100 {van:.2f} < {floor:.2f}"
    assert eqv >= floor and eqv > baseline, f"equivariant final-100 {eqv:.2f} < {floor:.2f}"
    assert eqv >= van, f"equivariant {eqv:.2f} below vanilla {van:.2f}"


# -- criterion 9: transfer with a frozen extractor ------------------------------

@pytest.mark.slow
def test_criterion_9_transfer():
    results = {}
    for model in ("vanilla", "equivariant"):
        run = transfer_base_run(model)
        for label in ("r", "r2", "r3"):
            rows = []
            for seed in (0, 1, 2, 3, 4):
                streams = []
                for j in range(TRANSFER_STREAMS):
                    res = cached_transfer(run, model, label, seed, stream=j)
                    assert res["extractor_frozen"], \
                        f"{model}/{label}/seed{seed}/stream{j} extractor moved"
                    streams.append(res["retention"])
                rows.append(float(np.mean(streams)))
            results[(model, label)] = np.array(rows)
    from eqrl.trainer import ci95
    for label in ("r", "r2", "r3"):
        van = results[("vanilla", label)]
        eqv = results[("equivariant", label)]
        print(f"{label}: equivariant retention {eqv.mean():.3f} +- {ci95(eqv):.3f}, "
              f"vanilla {van.mean():.3f} +- {ci95(van):.3f}")
        assert eqv.mean() > van.mean(), (
            f"under {label}: equivariant retention {eqv.mean():.3f} "
            f"not above vanilla {van.mean():.3f}")


# -- criterion 10: prioritized and dueling variants -----------------------------

def test_criterion_10_prioritized_frequencies():
    from eqrl.replay import PrioritizedReplayBuffer
    buf = PrioritizedReplayBuffer(8, (1, 2, 2), seed=17, alpha=1.0)
    obs = np.zeros((1, 2, 2), dtype=np.uint8)
    for i in range(8):
        buf.push(obs, 0, 0.0, obs, False)
    buf.update_priorities(np.arange(8), np.arange(1.0, 9.0))
    probs = buf.probabilities()
    counts = np.zeros(8)
    draws = 100_000
    per_batch = 4
    for _ in range(draws // per_batch):
        batch = buf.sample(per_batch, beta=1.0)
        for idx in batch.indices:
            counts[idx] += 1
    freq = counts / draws
    worst = float(np.max(np.abs(freq - probs)))
    assert worst < 0.01, f"sampler frequency off by {worst:.4f}"
    print(f"PASS sampler frequencies within {worst:.4f} of priorities over {draws} draws")


def test_criterion_10_dueling_aggregation():
    from eqrl.nets import DuelingHead
    head = DuelingHead(4, 4, rng=np.random.default_rng(19))
    head.value.w.assign(np.zeros_like(head.value.w.data))
    head.value.b.assign(np.array([2.0], dtype=np.float32))
    head.adv.w.assign(np.zeros_like(head.adv.w.data))
    head.adv.b.assign(np.array([1.0, 0.0, -1.0, 0.0], dtype=np.float32))
    q = head.forward(Tensor(np.zeros(4, dtype=np.float32))).data
    assert np.allclose(q, [3.0, 2.0, 1.0, 2.0], atol=1e-7)
    print("PASS dueling aggregation: V=2, A=[1,0,-1,0] -> Q=[3,2,1,2]")


@pytest.mark.slow
def test_criterion_10_variant_runs():
    summary = {}
    for variant in ("prioritized", "dueling"):
        van = final_window_mean(variant_run(variant, "vanilla"))
        eqv = final_window_mean(variant_run(variant, "equivariant"))
        summary[variant] = (van, eqv)
        assert eqv >= van, f"{variant}: equivariant {eqv:.2f} below vanilla {van:.2f}"
    print("PASS variants:", {k: (f"vanilla {v[0]:.2f}", f"equivariant {v[1]:.2f}")
                             for k, v in summary.items()})


# -- criterion 11: byte-for-byte determinism ------------------------------------

def test_criterion_11_determinism(tmp_path):
    values = {"env": "snake", "model": "equivariant", "episodes": "30", "seeds": "0",
              **TRAIN_AGENT, "agent.warmup": "64"}
    a = run_training(make_config({**values, "out": str(tmp_path / "a")}))
    b = run_training(make_config({**values, "out": str(tmp_path / "b")}))
    log_a = open(f"{a}/episodes.csv", "rb").read()
    log_b = open(f"{b}/episodes.csv", "rb").read()
    assert log_a == log_b
    ck_a = open(f"{a}/agent_seed0.ckpt", "rb").read()
    ck_b = open(f"{b}/agent_seed0.ckpt", "rb").read()
    assert ck_a == ck_b
    print(f"PASS determinism: {len(log_a)} log bytes and "
          f"{len(ck_a)} checkpoint bytes identical across repeat runs")
