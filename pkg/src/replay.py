"""
Experience replay storing single frames and rebuilding 3-frame stacks at sample time
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .logging_config import get_logger

logger = get_logger("replay")


@dataclass
class Transition:
    """
    One stored entry: the newest frame at time t and what happened from it.
    An entry with action=None closes an episode (its frame only serves as a successor).
    """
    frame: np.ndarray
    action: Optional[np.ndarray]
    reward: float
    done: bool
    episode_id: int


@dataclass
class SampleBatch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    not_done: np.ndarray

    def __len__(self):
        return len(self.reward)


class ReplayBuffer:
    """Fixed-capacity ring of frames; one writer and one reader in alternation"""

    def __init__(self, capacity, frame_shape=(3, 100, 100), action_dim=1, frame_stack=3):
        if capacity < 2:
            raise ValueError(f"capacity must be at least 2, got {capacity}")
        self.capacity = capacity
        self.frame_shape = tuple(frame_shape)
        self.action_dim = action_dim
        self.frame_stack = frame_stack

        self.frames = np.empty((capacity, *self.frame_shape), dtype=np.uint8)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=bool)
        self.has_action = np.zeros(capacity, dtype=bool)
        self.episode_ids = np.zeros(capacity, dtype=np.int64)
        self.episode_steps = np.zeros(capacity, dtype=np.int64)

        # insert_count counts every push ever made; slot = insert_count mod capacity
        self.insert_count = 0
        self.transition_count = 0
        self._last_episode = None
        self._episode_step = 0

    def __len__(self):
        return min(self.insert_count, self.capacity)

    @property
    def oldest(self):
        """Insertion number of the oldest live entry"""
        return max(0, self.insert_count - self.capacity)

    def push(self, transition):
        if transition.frame.shape != self.frame_shape:
            raise ValueError(f"frame shape {transition.frame.shape} != {self.frame_shape}")

        if transition.episode_id != self._last_episode:
            self._last_episode = transition.episode_id
            self._episode_step = 0

        slot = self.insert_count % self.capacity
        self.frames[slot] = transition.frame
        self.has_action[slot] = transition.action is not None
        if transition.action is not None:
            self.actions[slot] = np.asarray(transition.action, dtype=np.float32).reshape(self.action_dim)
            self.transition_count += 1
        else:
            self.actions[slot] = 0.0
        self.rewards[slot] = transition.reward
        self.dones[slot] = transition.done
        self.episode_ids[slot] = transition.episode_id
        self.episode_steps[slot] = self._episode_step

        self._episode_step += 1
        self.insert_count += 1

    def valid_positions(self):
        """Insertion numbers whose stack and successor can be rebuilt inside one episode"""
        if self.insert_count < 2:
            return np.zeros(0, dtype=np.int64)
        positions = np.arange(self.oldest, self.insert_count - 1)
        slots = positions % self.capacity
        next_slots = (positions + 1) % self.capacity

        same_episode = self.episode_ids[slots] == self.episode_ids[next_slots]
        history = np.minimum(self.episode_steps[slots], self.frame_stack - 1)
        history_live = positions - history >= self.oldest

        return positions[self.has_action[slots] & same_episode & history_live]

    def _stack(self, positions):
        """Rebuild frame stacks ending at the given insertion numbers"""
        steps = self.episode_steps[positions % self.capacity]
        parts = []
        for back in range(self.frame_stack - 1, -1, -1):
            # before the episode's first frame, duplicate that first frame
            source = positions - np.minimum(back, steps)
            parts.append(self.frames[source % self.capacity])
        return np.concatenate(parts, axis=1)

    def sample(self, batch_size, rng):
        """
        Draw a batch uniformly over valid positions

        Args:
            batch_size (int): Number of transitions
            rng (numpy.random.Generator): Sampling stream

        Returns:
            SampleBatch: uint8 stacks of shape (B, 9, 100, 100) plus action/reward/not_done
        """
        valid = self.valid_positions()
        if valid.size == 0:
            raise ValueError("Insufficient data: replay buffer holds no complete transition")

        positions = valid[rng.integers(0, valid.size, size=batch_size)]
        slots = positions % self.capacity

        return SampleBatch(
            obs=self._stack(positions),
            action=self.actions[slots].copy(),
            reward=self.rewards[slots].copy(),
            next_obs=self._stack(positions + 1),
            not_done=(~self.dones[slots]).astype(np.float32),
        )

    def state_dict(self):
        live = np.arange(self.oldest, self.insert_count) % self.capacity
        return {
            "capacity": self.capacity,
            "slots": live,
            "frames": self.frames[live].copy(),
            "actions": self.actions[live].copy(),
            "rewards": self.rewards[live].copy(),
            "dones": self.dones[live].copy(),
            "has_action": self.has_action[live].copy(),
            "episode_ids": self.episode_ids[live].copy(),
            "episode_steps": self.episode_steps[live].copy(),
            "insert_count": self.insert_count,
            "transition_count": self.transition_count,
            "last_episode": self._last_episode,
            "episode_step": self._episode_step,
        }

    def load_state_dict(self, state):
        if state["capacity"] != self.capacity:
            raise ValueError(f"replay capacity mismatch: {state['capacity']} != {self.capacity}")
        slots = state["slots"]
        self.frames[slots] = state["frames"]
        self.actions[slots] = state["actions"]
        self.rewards[slots] = state["rewards"]
        self.dones[slots] = state["dones"]
        self.has_action[slots] = state["has_action"]
        self.episode_ids[slots] = state["episode_ids"]
        self.episode_steps[slots] = state["episode_steps"]
        self.insert_count = state["insert_count"]
        self.transition_count = state["transition_count"]
        self._last_episode = state["last_episode"]
        self._episode_step = state["episode_step"]
        logger.info(f"Restored replay buffer with {len(self)} entries")
