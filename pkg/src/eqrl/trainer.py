"""Training orchestration: episode loops, evaluation, transfer, reports.

Every run is reproducible: all randomness flows from per-seed SeedSequence
spawns, episodes are executed sequentially, and CSV rows use fixed float
formatting, so identical configs produce byte-identical logs.
"""

from __future__ import annotations

import hashlib
import os
import sys
import time
from dataclasses import asdict

import numpy as np
from scipy import stats

from .agents import AgentConfig, DDQNAgent
from .checkpoint import load_arrays
from .config import ConfigError, RunConfig, builder_manifest, config_to_text
from .envs import TransformWrapper, make_env, prepare_observation
from .groups import Group
from .nets import QNetwork, build_network, save_network

D4 = Group.dihedral(4)

EPISODE_HEADER = "seed,episode,reward,steps,epsilon,mean_loss"
EVAL_HEADER = "transform,seed,mean_reward,ci95"
TRANSFER_HEADER = "transform,seed,original,before,after,retention,extractor_frozen"


def _spawn_seeds(seed: int, n: int) -> list:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def _episode_row(seed, episode, reward, steps, eps, mean_loss) -> str:
    return f"{seed},{episode},{reward:.6f},{steps},{eps:.6f},{mean_loss:.8f}"


def run_episode(agent: DDQNAgent, env, train_freq: int):
    """Play one episode to termination; returns (reward, steps, mean loss)."""
    obs = env.reset()
    total, steps, losses = 0.0, 0, []
    done = False
    while not done:
        action = agent.select_action(obs)
        nxt, reward, done = env.step(action)
        agent.observe(obs, action, reward, nxt, done)
        obs = nxt
        total += reward
        steps += 1
        if agent.env_steps % train_freq == 0:
            loss = agent.train_step()
            if loss is not None:
                losses.append(loss)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return total, steps, mean_loss


def _train_one_seed(cfg: RunConfig, seed: int, writer, log_every: int = 0):
    env_seed, net_seed, agent_seed = _spawn_seeds(seed, 3)
    env = make_env(cfg.env, cfg.grid_size, env_seed)
    net = build_network(builder_manifest(cfg), rng=np.random.default_rng(net_seed))
    agent = DDQNAgent(net, cfg.agent, (env.n_planes, cfg.grid_size, cfg.grid_size), agent_seed)
    recent = []
    t0 = time.monotonic()
    for ep in range(cfg.episodes):
        reward, steps, mean_loss = run_episode(agent, env, cfg.train_freq)
        writer(_episode_row(seed, ep, reward, steps, agent.epsilon(), mean_loss))
        recent.append(reward)
        if log_every and (ep + 1) % log_every == 0:
            avg = np.mean(recent[-log_every:])
            print(f"seed {seed} episode {ep + 1}/{cfg.episodes} "
                  f"avg_reward {avg:.2f} eps {agent.epsilon():.3f} "
                  f"elapsed {time.monotonic() - t0:.0f}s", file=sys.stderr, flush=True)
    return net


def checkpoint_path(out_dir: str, seed: int) -> str:
    return os.path.join(out_dir, f"agent_seed{seed}.ckpt")


def run_training(cfg: RunConfig, log_every: int = 0) -> str:
    """Train every seed in the config; writes episodes.csv, checkpoints, config echo."""
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.txt"), "w") as fh:
        fh.write(config_to_text(cfg))
    with open(os.path.join(cfg.out, "episodes.csv"), "w") as fh:
        fh.write(EPISODE_HEADER + "\n")

        def writer(row):
            fh.write(row + "\n")
            fh.flush()

        for seed in cfg.seeds:
            net = _train_one_seed(cfg, seed, writer, log_every)
            extra = {"seed": seed, "env": cfg.env, "grid_size": cfg.grid_size,
                     "variant": cfg.variant, "episodes": cfg.episodes,
                     "train_freq": cfg.train_freq, "agent": asdict(cfg.agent)}
            save_network(checkpoint_path(cfg.out, seed), net, extra=extra)
    return cfg.out


# -- evaluation --------------------------------------------------------------


def load_checkpoint(path):
    """Rebuild a network from a checkpoint; returns (net, run metadata)."""
    manifest, arrays = load_arrays(path)
    spec = {k: v for k, v in manifest.items() if k not in ("param_count", "extra")}
    net = build_network(spec)
    net.load_state(arrays)
    return net, manifest.get("extra", {})


def greedy_rollouts(net: QNetwork, env, episodes: int) -> np.ndarray:
    """Episode rewards of the greedy (epsilon = 0) policy."""
    obs_size = net.in_shape[-1]
    rewards = np.empty(episodes)
    for i in range(episodes):
        obs = env.reset()
        done, total = False, 0.0
        while not done:
            q = net.q_values_np(prepare_observation(obs, obs_size))
            obs, r, done = env.step(int(np.argmax(q)))
            total += r
        rewards[i] = total
    return rewards


def ci95(values) -> float:
    """Half width of the 95% confidence interval (t distribution)."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        return float("nan")
    return float(stats.t.ppf(0.975, x.size - 1) * x.std(ddof=1) / np.sqrt(x.size))


def _env_for(net: QNetwork, extra: dict, env_name=None, grid_size=None, seed=0):
    name = env_name or extra.get("env")
    if name is None:
        raise ConfigError("checkpoint does not record its environment; pass env explicitly")
    grid = grid_size or extra.get("grid_size")
    env = make_env(name, grid, seed)
    obs = net.in_shape[-1]
    if net.in_shape[0] != env.n_planes or obs < env.grid_size or (obs - env.grid_size) % 2:
        raise ConfigError(f"checkpoint input {net.in_shape} does not match "
                          f"{name} observations ({env.n_planes},{env.grid_size},{env.grid_size})")
    return env


def evaluate_checkpoint(path, transform: str = "e", episodes: int = 50, seed: int = 0,
                        env_name=None, grid_size=None):
    """Mean greedy reward under a transformed view; returns (mean, ci95, rewards)."""
    net, extra = load_checkpoint(path)
    env = _env_for(net, extra, env_name, grid_size, seed)
    rewards = greedy_rollouts(net, TransformWrapper(env, D4.element(transform)), episodes)
    return float(rewards.mean()), ci95(rewards), rewards


def run_checkpoints(run_dir: str) -> list:
    paths = sorted(p for p in os.listdir(run_dir)
                   if p.startswith("agent_seed") and p.endswith(".ckpt"))
    if not paths:
        raise ConfigError(f"no checkpoints found in {run_dir}")
    return [os.path.join(run_dir, p) for p in paths]


def evaluate_run(run_dir: str, transforms, episodes: int, eval_seed: int = 0,
                 out_path=None) -> list:
    """Evaluate every checkpoint of a run under each transform.

    Returns (transform, training seed, mean reward, ci95-over-episodes) rows;
    optionally writes them as eval.csv.
    """
    rows = []
    for label in transforms:
        for path in run_checkpoints(run_dir):
            _, extra = load_checkpoint(path)
            mean, half, _ = evaluate_checkpoint(path, label, episodes, eval_seed)
            rows.append((label, int(extra.get("seed", -1)), mean, half))
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(EVAL_HEADER + "\n")
            for label, seed, mean, half in rows:
                fh.write(f"{label},{seed},{mean:.6f},{half:.6f}\n")
    return rows


# -- transfer ----------------------------------------------------------------


def extractor_checksum(net: QNetwork) -> str:
    """SHA-256 over every non-head parameter, in name order."""
    h = hashlib.sha256()
    for p in sorted(net.extractor_parameters(), key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def compressed_schedule(agent_cfg: AgentConfig, trained_episodes: int,
                        retrain_episodes: int) -> AgentConfig:
    """Shrink the exploration anneal and warmup to fit a shorter budget.

    Without scaling the warmup, a short retraining run can spend most of its
    episodes just filling the replay buffer before the first update.
    """
    factor = retrain_episodes / max(trained_episodes, 1)
    eps_steps = max(1, round(agent_cfg.eps_decay_steps * factor))
    beta_steps = max(1, round(agent_cfg.beta_anneal_steps * factor))
    warmup = max(1, round(agent_cfg.warmup * factor))
    return agent_cfg.scaled(eps_decay_steps=eps_steps, beta_anneal_steps=beta_steps,
                            warmup=warmup)


def transfer_checkpoint(path, transform: str, retrain_episodes: int,
                        eval_episodes: int = 50, seed=None, log_every: int = 0) -> dict:
    """Freeze the extractor, retrain only the head on a transformed view.

    Reports greedy rewards on the original view, on the transformed view
    before retraining, and after; retention is after / original.  Extractor
    checksums before and after prove the feature weights never moved.
    """
    net, extra = load_checkpoint(path)
    if seed is None:
        seed = int(extra.get("seed", 0))
    eval_seed, env_seed, head_seed, agent_seed = _spawn_seeds(seed + 101, 4)
    g = D4.element(transform)

    eval_env = _env_for(net, extra, seed=eval_seed)
    original = float(greedy_rollouts(net, eval_env, eval_episodes).mean())
    eval_env = _env_for(net, extra, seed=eval_seed)
    before = float(greedy_rollouts(net, TransformWrapper(eval_env, g), eval_episodes).mean())

    frozen_sum = extractor_checksum(net)
    net.reinit_head(np.random.default_rng(head_seed))

    agent_cfg = AgentConfig(**extra["agent"]) if "agent" in extra else AgentConfig()
    agent_cfg = compressed_schedule(agent_cfg, int(extra.get("episodes", retrain_episodes)),
                                    retrain_episodes)
    train_freq = int(extra.get("train_freq", 4))
    env = TransformWrapper(_env_for(net, extra, seed=env_seed), g)
    agent = DDQNAgent(net, agent_cfg, (env.n_planes, env.grid_size, env.grid_size),
                      agent_seed, frozen_extractor=True)
    t0 = time.monotonic()
    for ep in range(retrain_episodes):
        reward, _, _ = run_episode(agent, env, train_freq)
        if log_every and (ep + 1) % log_every == 0:
            print(f"transfer {transform} seed {seed} episode {ep + 1}/{retrain_episodes} "
                  f"reward {reward:.1f} elapsed {time.monotonic() - t0:.0f}s",
                  file=sys.stderr, flush=True)

    frozen = extractor_checksum(net) == frozen_sum
    eval_env = _env_for(net, extra, seed=eval_seed)
    after = float(greedy_rollouts(net, TransformWrapper(eval_env, g), eval_episodes).mean())
    retention = after / original if original > 0 else float("nan")
    return {"transform": transform, "seed": seed, "original": original, "before": before,
            "after": after, "retention": retention, "extractor_frozen": frozen}


def transfer_run(run_dir: str, transforms, retrain_episodes: int, eval_episodes: int = 50,
                 out_path=None, log_every: int = 0) -> list:
    """Transfer every checkpoint in a run directory to each transform."""
    results = []
    for label in transforms:
        for path in run_checkpoints(run_dir):
            results.append(transfer_checkpoint(path, label, retrain_episodes,
                                               eval_episodes, log_every=log_every))
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(TRANSFER_HEADER + "\n")
            for r in results:
                fh.write(f"{r['transform']},{r['seed']},{r['original']:.6f},"
                         f"{r['before']:.6f},{r['after']:.6f},{r['retention']:.6f},"
                         f"{int(r['extractor_frozen'])}\n")
    return results


# -- reporting ---------------------------------------------------------------


def gaussian_smooth(x, sigma: float = 3.0) -> np.ndarray:
    """Gaussian filter truncated at 4 sigma; edges renormalize the kernel."""
    x = np.asarray(x, dtype=float)
    radius = int(4 * sigma)
    i = np.arange(-radius, radius + 1)
    kernel = np.exp(-(i * i) / (2.0 * sigma * sigma))
    # center slice of the full convolution; mode="same" would widen series
    # shorter than the kernel
    num = np.convolve(x, kernel, mode="full")[radius:radius + x.size]
    den = np.convolve(np.ones_like(x), kernel, mode="full")[radius:radius + x.size]
    return num / den


def read_episodes(run_dir: str) -> dict:
    """Per-seed reward arrays from a run's episodes.csv."""
    path = os.path.join(run_dir, "episodes.csv")
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not lines or lines[0] != EPISODE_HEADER:
        raise ConfigError(f"{path} does not look like an episode log")
    per_seed = {}
    for line in lines[1:]:
        parts = line.split(",")
        per_seed.setdefault(int(parts[0]), []).append(float(parts[2]))
    lengths = {len(v) for v in per_seed.values()}
    if len(lengths) != 1:
        raise ConfigError(f"{path} has inconsistent episode counts per seed: {sorted(lengths)}")
    return {s: np.asarray(v) for s, v in per_seed.items()}


def run_param_count(run_dir: str):
    """(builder name, free parameter count) recorded in a run's checkpoints."""
    found = set()
    for name in sorted(os.listdir(run_dir)):
        if name.startswith("agent_seed") and name.endswith(".ckpt"):
            manifest, _ = load_arrays(os.path.join(run_dir, name))
            found.add((manifest["builder"], manifest["param_count"]))
    if len(found) != 1:
        raise ConfigError(f"{run_dir} holds {len(found)} distinct architectures, expected 1")
    return found.pop()


def report(run_dirs, sigma: float = 3.0, final_window: int = 100):
    """Aggregate runs into a per-episode table and a summary.

    Returns (summary text, csv text).  The CSV has one block of columns per
    run: mean reward across seeds, 95% CI half width, and the smoothed mean.
    Smoothing touches reporting output only, never the training signal.
    """
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    labels, tables, counts = [], [], []
    n_episodes = None
    for run_dir in run_dirs:
        per_seed = read_episodes(run_dir)
        mat = np.stack([per_seed[s] for s in sorted(per_seed)])
        if n_episodes is None:
            n_episodes = mat.shape[1]
        elif mat.shape[1] != n_episodes:
            raise ConfigError(f"episode counts differ across runs: {mat.shape[1]} vs {n_episodes}")
        labels.append(os.path.basename(os.path.normpath(run_dir)))
        tables.append(mat)
        try:
            counts.append(run_param_count(run_dir))
        except (ConfigError, OSError):
            counts.append(("unknown", 0))

    header = ["episode"]
    columns = [np.arange(n_episodes)]
    summary = []
    for label, mat, (builder, n_params) in zip(labels, tables, counts):
        mean = mat.mean(axis=0)
        half = np.array([ci95(mat[:, i]) for i in range(mat.shape[1])])
        header += [f"{label}_mean", f"{label}_ci95", f"{label}_smooth"]
        columns += [mean, half, gaussian_smooth(mean, sigma)]
        window = mat[:, -min(final_window, n_episodes):]
        per_seed_final = window.mean(axis=1)
        summary.append(f"{label}: builder={builder} params={n_params} seeds={mat.shape[0]} "
                       f"final{window.shape[1]}_mean={per_seed_final.mean():.3f} "
                       f"ci95={ci95(per_seed_final):.3f}")
    rows = [",".join(header)]
    for i in range(n_episodes):
        cells = [f"{col[i]:.6f}" if col.dtype.kind == "f" else str(col[i]) for col in columns]
        rows.append(",".join(cells))
    return "\n".join(summary) + "\n", "\n".join(rows) + "\n"
