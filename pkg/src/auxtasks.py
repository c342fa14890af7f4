"""
Self-supervised auxiliary objectives sharing the RL encoder:
Data2Vec feature regression, MAE masked reconstruction, momentum contrastive learning
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import per_patch_normalize, random_crop_batch, sample_mask_batch, to_float
from .encoders import ViTEncoder, patchify
from .logging_config import get_logger
from .nncore import EmaShadow, Mlp, ParamStore, TransformerBlock, adam_step, ema_update, layer_norm, linear

logger = get_logger("auxtasks")

AUX_TASKS = ("none", "data2vec", "mae", "contrastive")


def gather_tokens(tokens, indices):
    """Pick (B, M) token positions out of a (B, N, D) sequence"""
    return torch.gather(tokens, 1, indices.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


class Data2VecHead(nn.Module):
    def __init__(self, dim=128):
        super().__init__()
        self.decoder = Mlp(dim, [dim], dim)

    def forward(self, tokens):
        return self.decoder(tokens)


class MaeDecoder(nn.Module):
    """Lightweight transformer decoder over the full 49-slot grid"""

    def __init__(self, embed_dim=128, decoder_dim=64, depth=2, heads=4, mlp_dim=128,
                 num_patches=49, patch_dim=1296):
        super().__init__()
        self.num_patches = num_patches
        self.input_proj = nn.Linear(embed_dim, decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, decoder_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches, decoder_dim))
        self.blocks = nn.ModuleList([TransformerBlock(decoder_dim, heads, mlp_dim) for _ in range(depth)])
        self.norm = nn.LayerNorm(decoder_dim)
        self.output_proj = nn.Linear(decoder_dim, patch_dim)

        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, visible_tokens, positions):
        x = self.input_proj(visible_tokens)
        B, _, D = x.shape
        full = self.mask_token.expand(B, self.num_patches, D)
        full = full.scatter(1, positions.unsqueeze(-1).expand(-1, -1, D), x)
        full = full + self.pos_embed
        for block in self.blocks:
            full = block(full)
        return self.output_proj(self.norm(full))


# ---------------------------------------------------------------------------
# Data2Vec

@torch.no_grad()
def data2vec_target(obs, momentum_encoder, k=2, include_first=False):
    """Sum of parameter-free layer norms of the momentum encoder's last block outputs on the unmasked view"""
    seq = momentum_encoder.embed(patchify(obs, momentum_encoder.config.patch_size))
    terms = k + 1 if include_first else k
    out = momentum_encoder.forward_tokens(seq, collect_last_k=terms)
    return sum(layer_norm(a) for a in out.per_block_activations)


def data2vec_predict(obs, mask, encoder, head):
    """Encode the masked view with mask tokens and decode the masked positions"""
    seq = encoder.embed(patchify(obs, encoder.config.patch_size), mask, use_mask_token=True)
    out = encoder.forward_tokens(seq)
    return head(gather_tokens(out.tokens.tokens, seq.mask_indices))


def data2vec_loss(target, prediction, beta=2.0):
    """Smooth L1 averaged over masked tokens and channels"""
    return F.smooth_l1_loss(prediction, target.detach(), beta=beta)


# ---------------------------------------------------------------------------
# MAE

def mae_forward(obs, mask, encoder, decoder):
    """
    Encode only visible patches, decode the full grid

    Returns:
        tuple: (predicted patches (B, 49, 1296), encoder output on visible tokens)
    """
    seq = encoder.embed(patchify(obs, encoder.config.patch_size), mask, use_mask_token=False)
    out = encoder.forward_tokens(seq)
    return decoder(out.tokens.tokens, out.tokens.positions), out


def mae_loss(prediction, obs, mask, patch_size=12):
    """Mean squared error against per-patch normalized pixels, masked patches only"""
    with torch.no_grad():
        target = per_patch_normalize(patchify(obs, patch_size))
    mask = torch.as_tensor(mask, dtype=torch.long, device=prediction.device)
    if mask.dim() == 1:
        mask = mask.expand(prediction.shape[0], -1)
    diff = gather_tokens(prediction, mask) - gather_tokens(target, mask)
    return (diff ** 2).mean()


# ---------------------------------------------------------------------------
# Contrastive

def info_nce(queries, keys, W):
    """Cross-entropy with positives on the diagonal of the bilinear logits q^T W k"""
    logits = linear(queries, W) @ keys.detach().T
    logits = logits - logits.max(dim=1, keepdim=True).values
    labels = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, labels)


def contrastive_pair(obs_source, rng, encoder, projection, momentum_encoder, momentum_projection):
    """Queries from one random crop through the online path, keys from another through the momentum path"""
    view_q = to_float(random_crop_batch(obs_source, rng))
    view_k = to_float(random_crop_batch(obs_source, rng))
    queries = projection(encoder(view_q))
    with torch.no_grad():
        keys = momentum_projection(momentum_encoder(view_k))
    return queries, keys


# ---------------------------------------------------------------------------
# Tasks

class AuxiliaryTask:
    """One objective with its heads, momentum copies and optimizer state"""
    name = "none"

    def __init__(self, encoder, config):
        self.encoder = encoder
        self.config = config
        self.store = None

    def update(self, obs_source, rng):
        """Run one update on a (B, 9, 100, 100) uint8 batch; returns the loss value"""
        return 0.0

    def parts(self):
        """Modules and shadows to checkpoint, by name"""
        return {}

    def state_dict(self):
        state = {name: part.state_dict() for name, part in self.parts().items()}
        if self.store is not None:
            state["store"] = self.store.state_dict()
        return state

    def load_state_dict(self, state):
        for name, part in self.parts().items():
            part.load_state_dict(state[name])
        if self.store is not None:
            self.store.load_state_dict(state["store"])

    def _step(self, loss):
        self.store.zero_grad()
        loss.backward()
        adam_step(self.store)
        return float(loss.detach())


class NoAuxTask(AuxiliaryTask):
    """Plain encoder baseline: the critic alone trains the encoder"""
    name = "none"


class Data2VecTask(AuxiliaryTask):
    name = "data2vec"

    def __init__(self, encoder, config):
        super().__init__(encoder, config)
        self.head = Data2VecHead(encoder.latent_dim)
        self.momentum_encoder = EmaShadow(encoder, config.encoder_tau)
        self.store = ParamStore.from_modules(config.encoder_lr, encoder=encoder, head=self.head)

    def parts(self):
        return {"head": self.head, "momentum_encoder": self.momentum_encoder}

    def update(self, obs_source, rng):
        obs = to_float(random_crop_batch(obs_source, rng))
        mask = sample_mask_batch(self.config.d2v_mask_ratio, len(obs), rng)

        target = data2vec_target(obs, self.momentum_encoder.module, self.config.data2vec_k,
                                 self.config.d2v_target_includes_first)
        prediction = data2vec_predict(obs, mask, self.encoder, self.head)
        loss = data2vec_loss(gather_tokens(target, mask), prediction, self.config.data2vec_beta)

        value = self._step(loss)
        ema_update(self.momentum_encoder, self.encoder)
        return value


class MaeTask(AuxiliaryTask):
    name = "mae"

    def __init__(self, encoder, config):
        super().__init__(encoder, config)
        cfg = encoder.config
        self.decoder = MaeDecoder(
            embed_dim=cfg.embed_dim,
            decoder_dim=config.mae_decoder_dim,
            depth=config.mae_decoder_depth,
            heads=config.mae_decoder_heads,
            mlp_dim=2 * config.mae_decoder_dim,
            num_patches=cfg.num_patches,
            patch_dim=cfg.patch_dim,
        )
        self.store = ParamStore.from_modules(config.encoder_lr, encoder=encoder, decoder=self.decoder)

    def parts(self):
        return {"decoder": self.decoder}

    def update(self, obs_source, rng):
        obs = to_float(random_crop_batch(obs_source, rng))
        mask = sample_mask_batch(self.config.mae_mask_ratio, len(obs), rng)
        prediction, _ = mae_forward(obs, mask, self.encoder, self.decoder)
        return self._step(mae_loss(prediction, obs, mask, self.encoder.config.patch_size))


class ContrastiveTask(AuxiliaryTask):
    name = "contrastive"

    def __init__(self, encoder, config):
        super().__init__(encoder, config)
        dim = encoder.latent_dim
        self.projection = Mlp(dim, [dim], dim)
        self.W = nn.Parameter(torch.rand(dim, dim))
        self.momentum_encoder = EmaShadow(encoder, config.encoder_tau)
        self.momentum_projection = EmaShadow(self.projection, config.encoder_tau)
        self.store = ParamStore.from_modules(config.encoder_lr, encoder=encoder,
                                             projection=self.projection, W=self.W)

    def parts(self):
        return {
            "projection": self.projection,
            "momentum_encoder": self.momentum_encoder,
            "momentum_projection": self.momentum_projection,
        }

    def state_dict(self):
        state = super().state_dict()
        state["W"] = self.W.detach().clone()
        return state

    def load_state_dict(self, state):
        super().load_state_dict(state)
        with torch.no_grad():
            self.W.copy_(state["W"])

    def update(self, obs_source, rng):
        obs_source = obs_source[:self.config.contrastive_batch_size]
        queries, keys = contrastive_pair(obs_source, rng, self.encoder, self.projection,
                                         self.momentum_encoder, self.momentum_projection)
        value = self._step(info_nce(queries, keys, self.W))
        ema_update(self.momentum_encoder, self.encoder)
        ema_update(self.momentum_projection, self.projection)
        return value


TASK_CLASSES = {
    "none": NoAuxTask,
    "data2vec": Data2VecTask,
    "mae": MaeTask,
    "contrastive": ContrastiveTask,
}


def make_aux_task(name, encoder, config):
    if name not in TASK_CLASSES:
        raise ValueError(f"Unknown aux task '{name}'. Available: {list(AUX_TASKS)}")
    if name != "none" and not isinstance(encoder, ViTEncoder):
        raise ValueError(f"aux task '{name}' needs a ViT encoder")
    logger.info(f"Auxiliary task: {name}")
    return TASK_CLASSES[name](encoder, config)


def aux_update(task, obs_source, rng):
    """One auxiliary update: loss, backprop into encoder and heads, Adam step, momentum follow"""
    return task.update(obs_source, rng)
