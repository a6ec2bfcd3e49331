"""Grid-world episodes: snake and a ghost-maze, plus symmetry wrappers.

Rewards are sparse in both games: +1 for food, -1 for dying, 0 otherwise.
Observations are stacks of one-hot uint8 planes.

Dynamics commute with the grid symmetries.  Because food placement and ghost
moves consume RNG draws, the commuting twin of an environment needs those
draws mapped through the group action; passing ``twin_transform=g`` builds an
environment whose whole layout and random stream are the g-image of the
untransformed one with the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .groups import (
    ACTION_DELTAS,
    GroupElement,
    act_on_grid,
    act_on_image,
    action_permutation,
    inverse,
)


def _map_delta(g: GroupElement, delta):
    dr, dc = delta
    for _ in range(g.rotation):
        dr, dc = dc, -dr
    if g.reflect:
        dc = -dc
    return dr, dc


@dataclass
class SnakeState:
    body: tuple
    direction: tuple
    food: tuple | None
    steps: int
    done: bool


class SnakeEnv:
    """Snake on a d x d grid. Head-first body, walls and self-collisions kill.

    The snake starts length 3 in the middle, moving right.  Food placement
    draws one index into the free cells sorted in row-major order; episodes
    cap at 200 * current length steps.  Reversing into the neck is a death
    like any other self-collision.
    """

    n_actions = 4
    n_planes = 3

    def __init__(self, grid_size: int = 12, seed: int = 0, twin_transform: GroupElement | None = None):
        if grid_size < 5:
            raise ValueError(f"snake grid must be at least 5x5, got {grid_size}")
        self.grid_size = grid_size
        self._rng = np.random.default_rng(seed)
        self._g = twin_transform
        self.state: SnakeState | None = None

    def _cell(self, row, col):
        if self._g is None:
            return (row, col)
        return act_on_grid(self._g, (row, col), self.grid_size)

    def _sort_key(self, cell):
        if self._g is None:
            return cell
        return act_on_grid(inverse(self._g), cell, self.grid_size)

    def reset(self) -> np.ndarray:
        c = self.grid_size // 2
        body = tuple(self._cell(c, c - i) for i in range(3))
        direction = (0, 1) if self._g is None else _map_delta(self._g, (0, 1))
        self.state = SnakeState(body, direction, None, 0, False)
        self._place_food()
        return self.observe()

    def _place_food(self):
        occupied = set(self.state.body)
        free = [
            (r, c)
            for r in range(self.grid_size)
            for c in range(self.grid_size)
            if (r, c) not in occupied
        ]
        if not free:
            self.state.food = None
            self.state.done = True
            return
        free.sort(key=self._sort_key)
        self.state.food = free[int(self._rng.integers(len(free)))]

    def step(self, action: int):
        s = self.state
        if s is None or s.done:
            raise RuntimeError("episode is finished; call reset()")
        if not 0 <= action < 4:
            raise ValueError(f"bad action {action}")
        dr, dc = ACTION_DELTAS[action]
        head = (s.body[0][0] + dr, s.body[0][1] + dc)
        s.steps += 1
        reward = 0.0
        d = self.grid_size
        if not (0 <= head[0] < d and 0 <= head[1] < d):
            s.done = True
            reward = -1.0
        else:
            growing = head == s.food
            # the tail cell vacates this step unless the snake grows
            blocked = s.body if growing else s.body[:-1]
            if head in blocked:
                s.done = True
                reward = -1.0
            else:
                s.body = (head,) + (s.body if growing else s.body[:-1])
                s.direction = (dr, dc)
                if growing:
                    reward = 1.0
                    self._place_food()
        if not s.done and s.steps >= 200 * len(s.body):
            s.done = True
        return self.observe(), reward, s.done

    def observe(self) -> np.ndarray:
        s = self.state
        obs = np.zeros((3, self.grid_size, self.grid_size), dtype=np.uint8)
        obs[0][s.body[0]] = 1
        for cell in s.body[1:]:
            obs[1][cell] = 1
        if s.food is not None:
            obs[2][s.food] = 1
        return obs


@dataclass
class PacmanState:
    player: tuple
    ghosts: tuple
    food: frozenset
    steps: int
    done: bool


class GridPacmanEnv:
    """Pellet-eating maze with randomly walking ghosts.

    The maze is a pillar arena (border walls plus posts on even coordinates),
    symmetric under the full set of grid symmetries.  Each step the player
    moves first (bumping walls wastes the step), then every ghost draws a
    uniform direction and stays put if blocked.  Ghost contact ends the
    episode at -1; eating the last pellet wins.  If food and death coincide
    the death reward stands.  Episodes cap at 1000 steps.
    """

    n_actions = 4
    n_planes = 4
    step_cap = 1000

    def __init__(self, grid_size: int = 15, seed: int = 0, twin_transform: GroupElement | None = None):
        if grid_size < 9 or grid_size % 2 == 0:
            raise ValueError(f"maze grid must be odd and at least 9, got {grid_size}")
        self.grid_size = grid_size
        self._rng = np.random.default_rng(seed)
        self._g = twin_transform
        self._action_map = None if twin_transform is None else action_permutation(twin_transform)
        d = grid_size
        self.walls = np.zeros((d, d), dtype=np.uint8)
        self.walls[0, :] = self.walls[-1, :] = 1
        self.walls[:, 0] = self.walls[:, -1] = 1
        self.walls[::2, ::2] = 1
        self.state: PacmanState | None = None

    def _cell(self, row, col):
        if self._g is None:
            return (row, col)
        return act_on_grid(self._g, (row, col), self.grid_size)

    def reset(self) -> np.ndarray:
        d = self.grid_size
        player = self._cell(d - 2, d // 2)
        ghosts = (self._cell(1, 1), self._cell(1, d - 2))
        food = frozenset(
            (r, c)
            for r in range(d)
            for c in range(d)
            if not self.walls[r, c] and (r, c) != player
        )
        self.state = PacmanState(player, ghosts, food, 0, False)
        return self.observe()

    def step(self, action: int):
        s = self.state
        if s is None or s.done:
            raise RuntimeError("episode is finished; call reset()")
        if not 0 <= action < 4:
            raise ValueError(f"bad action {action}")
        s.steps += 1
        reward = 0.0
        dr, dc = ACTION_DELTAS[action]
        target = (s.player[0] + dr, s.player[1] + dc)
        if not self.walls[target]:
            s.player = target
        if s.player in s.food:
            s.food = s.food - {s.player}
            reward = 1.0
        dead = s.player in s.ghosts
        new_ghosts = []
        for ghost in s.ghosts:
            a = int(self._rng.integers(4))
            if self._action_map is not None:
                a = int(self._action_map[a])
            gr, gc = ACTION_DELTAS[a]
            gt = (ghost[0] + gr, ghost[1] + gc)
            new_ghosts.append(ghost if self.walls[gt] else gt)
        s.ghosts = tuple(new_ghosts)
        dead = dead or s.player in s.ghosts
        if dead:
            s.done = True
            reward = -1.0
        elif not s.food:
            s.done = True
        elif s.steps >= self.step_cap:
            s.done = True
        return self.observe(), reward, s.done

    def observe(self) -> np.ndarray:
        s = self.state
        d = self.grid_size
        obs = np.zeros((4, d, d), dtype=np.uint8)
        obs[0] = self.walls
        obs[1][s.player] = 1
        for ghost in s.ghosts:
            obs[2][ghost] = 1
        for cell in s.food:
            obs[3][cell] = 1
        return obs


class TransformWrapper:
    """Presents a g-transformed view of an environment.

    Only the observations are mapped; actions keep their global meaning, so
    on the transformed view the controls appear permuted.  That is the
    distribution shift the transfer protocol studies: were actions mapped
    back as well, the wrapped game would be indistinguishable from the inner
    one and nothing could separate the extractors.
    """

    def __init__(self, env, transform: GroupElement):
        self.inner = env
        self.transform = transform
        self.n_actions = env.n_actions
        self.n_planes = env.n_planes
        self.grid_size = env.grid_size

    def reset(self) -> np.ndarray:
        return act_on_image(self.transform, self.inner.reset())

    def step(self, action: int):
        obs, reward, done = self.inner.step(action)
        return act_on_image(self.transform, obs), reward, done

    def observe(self) -> np.ndarray:
        return act_on_image(self.transform, self.inner.observe())


def make_env(name: str, grid_size: int | None = None, seed: int = 0):
    if name == "snake":
        return SnakeEnv(grid_size or 12, seed)
    if name == "gridpacman":
        return GridPacmanEnv(grid_size or 15, seed)
    raise ValueError(f"unknown environment {name!r}")


def random_baseline(env, episodes: int, seed: int = 0) -> float:
    """Mean episode reward of the uniform-random policy."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        env.reset()
        done = False
        while not done:
            _, r, done = env.step(int(rng.integers(env.n_actions)))
            total += r
    return total / episodes


def prepare_observation(obs: np.ndarray, out_size: int, dtype=np.float32) -> np.ndarray:
    """Cast planes to float and zero-pad symmetrically to out_size.

    The pad margin must be even so the board stays centered and the grid
    symmetries keep acting about the same center.
    """
    planes, h, w = obs.shape[-3], obs.shape[-2], obs.shape[-1]
    if h != w:
        raise ValueError(f"expected square observation, got {obs.shape}")
    margin = out_size - h
    if margin < 0 or margin % 2:
        raise ValueError(f"cannot pad {h} to {out_size}: margin must be even and non-negative")
    x = np.asarray(obs, dtype=dtype)
    if margin == 0:
        return x
    m = margin // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(m, m), (m, m)]
    return np.pad(x, pad)
