from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from ..api import ShapeError, ViewBatch
from .config import EmaSchedule, ModelConfig
from .geometry import ScaleMixer, batch_decoder_pos_embeds, grid_positions_a, sincos_pe
from .log import LOG
from .nn import Linear, Module, TransformerStack, copy_state
from .tensor import Tensor, broadcast_to, concat, gather_rows, no_grad, parameter, slice_


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """
    (B, H, W, 3) images to (B, N, p*p*3) patches in row-major token order;
    each patch is flattened as (row, column, channel).
    """
    if images.ndim != 4:
        raise ShapeError(f"patchify: expected B x H x W x C images, got {images.shape}")

    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify: image {h}x{w} is not divisible by patch size {p}")

    x = images.reshape(b, h // p, p, w // p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, (h // p) * (w // p), p * p * c))


def normalized_pixel_targets(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + eps)


class Encoder(Module):
    """
    ViT backbone: linear patch embedding, fixed sine-cosine positions over
    the view's own token grid, then layer-norm transformer blocks.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype: np.dtype):
        self.patch_embed = Linear(cfg.patch_size**2 * 3, cfg.backbone_dim, rng, dtype)
        self.pos_embed = sincos_pe(grid_positions_a(cfg.grid), cfg.backbone_dim).astype(dtype)
        self.blocks = TransformerStack(
            cfg.backbone_dim,
            cfg.backbone_depth,
            cfg.backbone_heads,
            cfg.mlp_ratio,
            "layer-norm",
            rng,
            dtype,
        )

    def forward(self, patches: np.ndarray, visible: Optional[np.ndarray] = None) -> Tensor:
        x = self.patch_embed(Tensor(patches)) + self.pos_embed
        if visible is not None:
            x = gather_rows(x, visible)
        return self.blocks(x)


class Projector(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype: np.dtype):
        self.proj_in = Linear(cfg.backbone_dim, cfg.embed_dim, rng, dtype)
        self.blocks = TransformerStack(
            cfg.embed_dim,
            cfg.projector_depth,
            cfg.heads,
            cfg.mlp_ratio,
            cfg.norm_kind,
            rng,
            dtype,
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(self.proj_in(x))


class SimModel(Module):
    """
    Online branch (encoder, projector, decoder, mask token, scale mixer,
    pixel head) and the EMA target branch (encoder, projector). Target
    parameters are frozen and only ever run outside a tape.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        rng: Optional[np.random.Generator] = None,
        log_base: float = 10.0,
    ):
        if rng is None:
            rng = np.random.default_rng(cfg.init_seed)

        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.grid = cfg.grid
        self.log_base = log_base

        dim = cfg.embed_dim

        self.encoder = Encoder(cfg, rng, self.dtype)
        self.projector = Projector(cfg, rng, self.dtype)
        self.decoder = TransformerStack(
            dim, cfg.decoder_depth, cfg.heads, cfg.mlp_ratio, cfg.norm_kind, rng, self.dtype
        )
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=dim).astype(self.dtype))
        self.scale_mixer = ScaleMixer(dim, rng, self.dtype)
        self.pixel_head = Linear(dim, cfg.patch_size**2 * 3, rng, self.dtype)

        self.target_encoder = Encoder(cfg, rng, self.dtype).freeze()
        self.target_projector = Projector(cfg, rng, self.dtype).freeze()
        copy_state(self.encoder, self.target_encoder)
        copy_state(self.projector, self.target_projector)

    @property
    def num_tokens(self) -> int:
        return self.grid.n

    def online_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    def target_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters() if not p.requires_grad}

    def patchify(self, images: np.ndarray) -> np.ndarray:
        return patchify(np.asarray(images, dtype=self.dtype), self.cfg.patch_size)

    def patch_embed(self, images: np.ndarray) -> Tensor:
        return self.encoder.patch_embed(Tensor(self.patchify(images)))

    def encode_online(self, patches: np.ndarray, visible: np.ndarray) -> Tensor:
        """
        y_a: backbone over the visible tokens only, then the projector.
        ``visible`` is (B, N_v), ascending per row.
        """
        return self.projector(self.encoder(patches, visible))

    def decode_predict(self, y_a: Tensor, p_a_visible: np.ndarray, p_b: Tensor) -> Tensor:
        """
        y_b: the decoder runs over Concat(y_a + p_a, mask_token + p_b) and
        the trailing N outputs are the predictions for view b's tokens.
        """
        b, n_v, dim = y_a.shape
        if p_a_visible.shape != y_a.shape:
            raise ShapeError(
                f"decode_predict: p_a {p_a_visible.shape} does not match y_a {y_a.shape}"
            )
        if p_b.ndim != 3 or p_b.shape[0] != b or p_b.shape[2] != dim:
            raise ShapeError(f"decode_predict: p_b {p_b.shape} does not match y_a {y_a.shape}")

        n = p_b.shape[1]
        masks = broadcast_to(self.mask_token, (b, n, dim)) + p_b

        x = self.decoder(concat([y_a + p_a_visible, masks], axis=1))
        return slice_(x, (slice(None), slice(n_v, None)))

    def encode_target(self, patches: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.target_projector(self.target_encoder(patches)).data

    def predict(self, batch: ViewBatch) -> Tensor:
        """
        Online prediction y_b (B, N, D) for a batch of view pairs.
        """
        patches_a = self.patchify(batch.images_a)
        y_a = self.encode_online(patches_a, batch.visible)

        p_a, p_b = batch_decoder_pos_embeds(
            batch.crops_a,
            batch.crops_b,
            self.grid,
            self.cfg.embed_dim,
            self.scale_mixer,
            self.log_base,
        )
        p_a_visible = p_a[batch.visible]

        return self.decode_predict(y_a, p_a_visible, p_b)

    def predict_pixels(self, y_b: Tensor) -> Tensor:
        return self.pixel_head(y_b)

    def target_features(self, batch: ViewBatch) -> np.ndarray:
        return self.encode_target(self.patchify(batch.images_b))

    def pixel_targets(self, batch: ViewBatch) -> np.ndarray:
        return normalized_pixel_targets(self.patchify(batch.images_b))

    def extract_backbone_features(self, images: np.ndarray) -> np.ndarray:
        """
        Mean-pooled online backbone features (B, backbone_dim), full token
        set, evaluation mode, off the tape.
        """
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                tokens = self.encoder(self.patchify(images))
        finally:
            self.train(was_training)

        return tokens.data.mean(axis=1)

    def update_target(self, momentum: float):
        ema_update(self.encoder, self.target_encoder, momentum)
        ema_update(self.projector, self.target_projector, momentum)


def ema_momentum(step: int, schedule: EmaSchedule, total_steps: Optional[int] = None) -> float:
    """
    Cosine ramp of the EMA coefficient from base (step 0) to final (last
    step). Steps outside [0, total] are clamped.
    """
    total = schedule.total_steps or total_steps or 0
    if total <= 0:
        return schedule.final_momentum

    if step < 0 or step > total:
        LOG.warning("EMA step %d outside [0, %d], clamping", step, total)
        step = min(max(step, 0), total)

    base, final = schedule.base_momentum, schedule.final_momentum
    return final - (final - base) * (math.cos(math.pi * step / total) + 1.0) / 2.0


def ema_update(online: Module, target: Module, momentum: float):
    """
    target <- m * target + (1 - m) * online over the parameters of two
    structurally identical modules. Buffers are left to each branch.
    """
    src = dict(online.named_parameters())
    dst = dict(target.named_parameters())

    if src.keys() != dst.keys():
        raise ShapeError("ema_update: online and target parameter trees differ")

    for name, p in dst.items():
        if p.shape != src[name].shape:
            raise ShapeError(f"ema_update: {name} {src[name].shape} vs {p.shape}")
        p.data *= momentum
        p.data += (1.0 - momentum) * src[name].data
