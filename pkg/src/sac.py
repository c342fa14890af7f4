"""
Soft Actor-Critic over the shared encoder latent.
The critic trains the encoder; the actor sees a detached latent.
"""

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import random_crop_batch, to_float
from .logging_config import get_logger
from .nncore import EmaShadow, Mlp, ParamStore, adam_step, ema_update

logger = get_logger("sac")

TANH_EPS = 1e-6


@dataclass
class TensorBatch:
    obs: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    next_obs: torch.Tensor
    not_done: torch.Tensor

    def __len__(self):
        return self.reward.shape[0]

    def validate(self):
        sizes = {f.name: getattr(self, f.name).shape[0] for f in fields(self)}
        if len(set(sizes.values())) != 1:
            raise ValueError(f"batch fields disagree on size: {sizes}")
        if len(self) == 0:
            raise ValueError("insufficient batch: no samples")


def to_tensors(batch, rng=None, dtype=torch.float32):
    """
    Crop a replay SampleBatch and move it to torch.
    With rng, obs and next_obs get independent random crops; otherwise they must already be 84x84.
    """
    obs, next_obs = batch.obs, batch.next_obs
    if rng is not None:
        obs = random_crop_batch(obs, rng)
        next_obs = random_crop_batch(next_obs, rng)
    return TensorBatch(
        obs=to_float(obs, dtype=dtype),
        action=torch.as_tensor(batch.action, dtype=dtype),
        reward=torch.as_tensor(batch.reward, dtype=dtype).reshape(-1, 1),
        next_obs=to_float(next_obs, dtype=dtype),
        not_done=torch.as_tensor(batch.not_done, dtype=dtype).reshape(-1, 1),
    )


def gaussian_logprob(noise, log_std):
    """Log density of a diagonal Gaussian sample, summed over action dims"""
    residual = (-0.5 * noise.pow(2) - log_std).sum(-1, keepdim=True)
    return residual - 0.5 * math.log(2 * math.pi) * noise.shape[-1]


def squash(mu, pi, log_pi):
    """Apply tanh and the change-of-variables correction"""
    mu = torch.tanh(mu)
    if pi is not None:
        pi = torch.tanh(pi)
    if log_pi is not None:
        log_pi = log_pi - torch.log(1 - pi.pow(2) + TANH_EPS).sum(-1, keepdim=True)
    return mu, pi, log_pi


class Actor(nn.Module):
    """Tanh-squashed Gaussian policy head on the latent"""

    def __init__(self, latent_dim, action_dim, hidden_dim=1024, log_std_min=-10.0, log_std_max=2.0):
        super().__init__()
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max
        self.trunk = Mlp(latent_dim, [hidden_dim, hidden_dim], 2 * action_dim, small_output=True)

    def forward(self, latent, compute_pi=True, compute_log_pi=True, generator=None):
        mu, log_std = self.trunk(latent).chunk(2, dim=-1)

        # rescale into [log_std_min, log_std_max]
        log_std = torch.tanh(log_std)
        log_std = self.log_std_min + 0.5 * (self.log_std_max - self.log_std_min) * (log_std + 1)

        if compute_pi:
            noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            pi = mu + noise * log_std.exp()
        else:
            noise, pi = None, None

        log_pi = gaussian_logprob(noise, log_std) if compute_pi and compute_log_pi else None
        mu, pi, log_pi = squash(mu, pi, log_pi)
        return mu, pi, log_pi, log_std


class CriticPair(nn.Module):
    """Two independent Q networks over (latent, action)"""

    def __init__(self, latent_dim, action_dim, hidden_dim=1024):
        super().__init__()
        self.q1 = Mlp(latent_dim + action_dim, [hidden_dim, hidden_dim], 1, small_output=True)
        self.q2 = Mlp(latent_dim + action_dim, [hidden_dim, hidden_dim], 1, small_output=True)

    def forward(self, latent, action):
        x = torch.cat([latent, action], dim=-1)
        return self.q1(x), self.q2(x)


class Neck(nn.Module):
    """Critic-owned projection between the encoder latent and the heads"""

    def __init__(self, latent_dim):
        super().__init__()
        self.fc = nn.Linear(latent_dim, latent_dim)
        self.ln = nn.LayerNorm(latent_dim)

    def forward(self, latent):
        return self.ln(self.fc(latent))


class SacAgent:
    """
    Actor, twin critics, learned temperature and their target copies.

    The critic store holds encoder + neck + critics; actor and temperature
    have their own stores. Targets: encoder and neck follow at encoder_tau,
    Q heads at critic_tau.
    """

    def __init__(self, encoder, action_dim, config, generator=None):
        self.config = config
        self.action_dim = action_dim
        self.discount = config.discount
        self.actor_update_freq = config.critic_update_frequency
        self.target_entropy = -float(action_dim)
        self.generator = generator

        latent_dim = encoder.latent_dim
        self.encoder = encoder
        self.neck = Neck(latent_dim)
        self.actor = Actor(latent_dim, action_dim, config.hidden_dim,
                           config.actor_log_std_min, config.actor_log_std_max)
        self.critic = CriticPair(latent_dim, action_dim, config.hidden_dim)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(config.initial_temperature)))

        self.encoder_target = EmaShadow(encoder, config.encoder_tau)
        self.neck_target = EmaShadow(self.neck, config.encoder_tau)
        self.critic_target = EmaShadow(self.critic, config.critic_tau)

        self.critic_store = ParamStore.from_modules(
            config.critic_lr, betas=(config.critic_beta, 0.999),
            encoder=encoder, neck=self.neck, critic=self.critic,
        )
        self.actor_store = ParamStore.from_modules(
            config.actor_lr, betas=(config.actor_beta, 0.999), actor=self.actor,
        )
        self.alpha_store = ParamStore.from_modules(
            config.alpha_lr, betas=(config.alpha_beta, 0.999), log_alpha=self.log_alpha,
        )

        self.critic_updates = 0
        self.actor_updates = 0

    @property
    def alpha(self):
        return self.log_alpha.exp()

    def encode(self, obs, target=False):
        if target:
            return self.neck_target(self.encoder_target(obs))
        return self.neck(self.encoder(obs))

    @torch.no_grad()
    def select_action(self, obs, mode="train"):
        """
        Act on one cropped float stack (9, 84, 84) or a batch of them

        Args:
            obs (torch.Tensor): Observation scaled to [0, 1]
            mode (str): "train" samples the squashed Gaussian, "eval" returns tanh(mean)

        Returns:
            numpy.ndarray: Action(s) in (-1, 1)
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
        single = obs.dim() == 3
        if single:
            obs = obs.unsqueeze(0)
        latent = self.encode(obs)
        mu, pi, _, _ = self.actor(latent, compute_pi=mode == "train", compute_log_pi=False,
                                  generator=self.generator)
        action = mu if mode == "eval" else pi
        action = action.cpu().numpy().astype(np.float64)
        return action[0] if single else action

    def critic_loss(self, batch):
        """Mean over both critics of the squared Bellman error; the target carries no gradient"""
        with torch.no_grad():
            _, next_pi, next_log_pi, _ = self.actor(self.encode(batch.next_obs), generator=self.generator)
            target_q1, target_q2 = self.critic_target(self.encode(batch.next_obs, target=True), next_pi)
            target_v = torch.min(target_q1, target_q2) - self.alpha.detach() * next_log_pi
            target_q = batch.reward + batch.not_done * self.discount * target_v

        current_q1, current_q2 = self.critic(self.encode(batch.obs), batch.action)
        return 0.5 * (F.mse_loss(current_q1, target_q) + F.mse_loss(current_q2, target_q))

    def actor_and_alpha_loss(self, batch):
        """
        Returns:
            tuple: (actor loss, alpha loss, log_pi); the encoder latent is detached
        """
        latent = self.encode(batch.obs).detach()
        _, pi, log_pi, _ = self.actor(latent, generator=self.generator)
        actor_q1, actor_q2 = self.critic(latent, pi)
        actor_loss = (self.alpha.detach() * log_pi - torch.min(actor_q1, actor_q2)).mean()
        alpha_loss = (self.alpha * (-log_pi - self.target_entropy).detach()).mean()
        return actor_loss, alpha_loss, log_pi

    def update_critic(self, batch):
        batch.validate()
        loss = self.critic_loss(batch)
        self.critic_store.zero_grad()
        loss.backward()
        adam_step(self.critic_store)
        self.critic_updates += 1
        return float(loss.detach())

    def update_actor_and_alpha(self, batch):
        actor_loss, alpha_loss, _ = self.actor_and_alpha_loss(batch)

        self.actor_store.zero_grad()
        actor_loss.backward()
        adam_step(self.actor_store)

        self.alpha_store.zero_grad()
        alpha_loss.backward()
        adam_step(self.alpha_store)

        # actor backprop leaves gradients on the critic heads
        self.critic_store.zero_grad()
        self.actor_updates += 1
        return float(actor_loss.detach()), float(alpha_loss.detach())

    def update_targets(self):
        ema_update(self.critic_target, self.critic)
        ema_update(self.encoder_target, self.encoder)
        ema_update(self.neck_target, self.neck)

    def update(self, batch, step):
        """
        One scheduled update: critic every call; actor, temperature and
        targets when step is a multiple of the actor update frequency

        Returns:
            dict: critic_loss, and actor_loss/alpha_loss when they ran
        """
        losses = {"critic_loss": self.update_critic(batch)}
        if step % self.actor_update_freq == 0:
            losses["actor_loss"], losses["alpha_loss"] = self.update_actor_and_alpha(batch)
            self.update_targets()
        return losses

    def state_dict(self):
        return {
            "neck": self.neck.state_dict(),
            "actor": self.actor.state_dict(),
            "critic": self.critic.state_dict(),
            "log_alpha": self.log_alpha.detach().clone(),
            "encoder_target": self.encoder_target.state_dict(),
            "neck_target": self.neck_target.state_dict(),
            "critic_target": self.critic_target.state_dict(),
            "critic_store": self.critic_store.state_dict(),
            "actor_store": self.actor_store.state_dict(),
            "alpha_store": self.alpha_store.state_dict(),
            "critic_updates": self.critic_updates,
            "actor_updates": self.actor_updates,
        }

    def load_state_dict(self, state):
        self.neck.load_state_dict(state["neck"])
        self.actor.load_state_dict(state["actor"])
        self.critic.load_state_dict(state["critic"])
        with torch.no_grad():
            self.log_alpha.copy_(state["log_alpha"])
        self.encoder_target.load_state_dict(state["encoder_target"])
        self.neck_target.load_state_dict(state["neck_target"])
        self.critic_target.load_state_dict(state["critic_target"])
        self.critic_store.load_state_dict(state["critic_store"])
        self.actor_store.load_state_dict(state["actor_store"])
        self.alpha_store.load_state_dict(state["alpha_store"])
        self.critic_updates = state["critic_updates"]
        self.actor_updates = state["actor_updates"]
