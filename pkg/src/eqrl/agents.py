"""Double-DQN agent: online/target networks, epsilon-greedy policy, replay.

The action chosen for the bootstrap value always comes from the online
network while the frozen target network evaluates it; the target network
only changes on explicit syncs, counted in optimizer updates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, clip_grad_norm, make_optimizer
from .envs import prepare_observation
from .nets import QNetwork
from .replay import PrioritizedReplayBuffer, ReplayBuffer


@dataclass
class AgentConfig:
    gamma: float = 0.99
    lr: float = 1e-4
    batch_size: int = 32
    target_sync: int = 1000  # optimizer updates between target refreshes
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    buffer_capacity: int = 50_000
    warmup: int = 500  # stored transitions required before updates start
    prioritized: bool = False
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    beta_anneal_steps: int = 50_000
    priority_eps: float = 1e-6
    clip_norm: float = 10.0
    optimizer: str = "adam"

    def scaled(self, **kw) -> "AgentConfig":
        return replace(self, **kw)


def epsilon_at(cfg: AgentConfig, step: int) -> float:
    if cfg.eps_decay_steps <= 0 or step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = max(step, 0) / cfg.eps_decay_steps
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def beta_at(cfg: AgentConfig, step: int) -> float:
    if cfg.beta_anneal_steps <= 0 or step >= cfg.beta_anneal_steps:
        return cfg.beta_end
    frac = max(step, 0) / cfg.beta_anneal_steps
    return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac


class DDQNAgent:
    """Owns the online and target networks plus the replay buffer."""

    def __init__(self, net: QNetwork, cfg: AgentConfig, obs_shape, seed: int = 0,
                 frozen_extractor: bool = False):
        self.online = net
        self.target = net.copy()
        self.cfg = cfg
        self.obs_size = net.in_shape[-1]
        self.frozen_extractor = frozen_extractor
        ss = np.random.SeedSequence(seed)
        act_seed, buf_seed = ss.spawn(2)
        self._rng = np.random.default_rng(act_seed)
        if cfg.prioritized:
            self.buffer = PrioritizedReplayBuffer(
                cfg.buffer_capacity, obs_shape, int(buf_seed.generate_state(1)[0]),
                cfg.alpha, cfg.priority_eps,
            )
        else:
            self.buffer = ReplayBuffer(cfg.buffer_capacity, obs_shape, int(buf_seed.generate_state(1)[0]))
        self.train_params = net.head_parameters() if frozen_extractor else net.parameters()
        self.opt = make_optimizer(cfg.optimizer, self.train_params, cfg.lr)
        self.env_steps = 0
        self.updates = 0

    # -- acting ------------------------------------------------------------

    def _prep(self, obs) -> np.ndarray:
        return prepare_observation(obs, self.obs_size)

    def epsilon(self) -> float:
        return epsilon_at(self.cfg, self.env_steps)

    def select_action(self, obs) -> int:
        """Epsilon-greedy on the schedule; advances the step counter."""
        eps = self.epsilon()
        self.env_steps += 1
        if self._rng.random() < eps:
            return int(self._rng.integers(self.online.n_actions))
        return self.greedy_action(obs)

    def greedy_action(self, obs) -> int:
        q = self.online.q_values_np(self._prep(obs))
        return int(np.argmax(q))

    def observe(self, obs, action, reward, next_obs, done):
        self.buffer.push(obs, action, reward, next_obs, done)

    # -- learning ----------------------------------------------------------

    def ddqn_target(self, reward: float, next_obs, done: bool) -> float:
        """Bootstrap target for one transition: online argmax, target value."""
        if done:
            return float(reward)
        x = self._prep(next_obs)
        a_star = int(np.argmax(self.online.q_values_np(x)))
        return float(reward + self.cfg.gamma * self.target.q_values_np(x)[a_star])

    def _batch_targets(self, batch) -> np.ndarray:
        nxt = prepare_observation(batch.next_obs, self.obs_size)
        q_online = self.online.q_values(Tensor(nxt)).data
        a_star = np.argmax(q_online, axis=1)
        q_target = self.target.q_values(Tensor(nxt)).data
        boot = q_target[np.arange(len(a_star)), a_star]
        return batch.rewards + self.cfg.gamma * (1.0 - batch.dones) * boot

    def train_step(self):
        """One optimizer update from a sampled batch; None if not ready."""
        cfg = self.cfg
        if len(self.buffer) < max(cfg.batch_size, cfg.warmup):
            return None
        batch = self.buffer.sample(cfg.batch_size, beta=beta_at(cfg, self.env_steps))
        y = self._batch_targets(batch)
        obs = prepare_observation(batch.obs, self.obs_size)
        if self.frozen_extractor:
            feats = self.online.features(Tensor(obs)).data
            with Tape() as tape:
                q = self.online.head.forward(Tensor(feats))
                qa = ad.select_actions(q, batch.actions)
                loss = ad.mean_squared_error(qa, Tensor(y), weights=batch.weights)
                tape.gradients(loss, self.train_params)
        else:
            with Tape() as tape:
                q = self.online.q_values(Tensor(obs))
                qa = ad.select_actions(q, batch.actions)
                loss = ad.mean_squared_error(qa, Tensor(y), weights=batch.weights)
                tape.gradients(loss, self.train_params)
        clip_grad_norm(self.train_params, cfg.clip_norm)
        self.opt.step()
        self.buffer.update_priorities(batch.indices, qa.data - y)
        self.updates += 1
        if self.updates % cfg.target_sync == 0:
            self.sync_target()
        return float(loss.data)

    def sync_target(self):
        self.target.load_state(self.online.state_arrays())
