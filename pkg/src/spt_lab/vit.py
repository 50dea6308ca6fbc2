"""A plain pre-norm vision transformer small enough to train on a laptop CPU."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    default_dtype,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

LN_EPS = 1e-6
HEAD_MODES = ("cls_token", "gap")


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    head_mode: str = "cls_token"

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide dim {self.dim}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.depth < 1 or self.num_classes < 1:
            raise ConfigError("depth and num_classes must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def has_cls(self) -> bool:
        return self.head_mode == "cls_token"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def named(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _xavier(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class VitModel:
    """Backbone parameters plus a linear task head.

    Parameter names follow ``blocks.{i}.{field}`` for block weights; the same
    names are used as SPTC entry names by :mod:`spt_lab.dataio`.
    """

    def __init__(self, config: VitConfig, seed: int = 0, dtype=None):
        self.config = config
        dtype = dtype or default_dtype()
        rng = np.random.default_rng(seed)
        c = config
        D, H = c.dim, c.mlp_hidden

        def t(a, name):
            return Tensor(a, name=name, dtype=dtype)

        self.patch_proj = t(_xavier(rng, c.patch_dim, D, dtype), "patch_proj")
        n_pos = c.num_patches + (1 if c.has_cls else 0)
        self.pos_embed = t(rng.normal(0, 0.02, (n_pos, D)), "pos_embed")
        self.cls_token = t(rng.normal(0, 0.02, (D,)), "cls_token") if c.has_cls else None
        self.blocks: list[Block] = []
        for i in range(c.depth):
            p = f"blocks.{i}."
            self.blocks.append(Block(
                ln1_g=t(np.ones(D), p + "ln1_g"), ln1_b=t(np.zeros(D), p + "ln1_b"),
                qkv_w=t(_xavier(rng, D, 3 * D, dtype), p + "qkv_w"), qkv_b=t(np.zeros(3 * D), p + "qkv_b"),
                proj_w=t(_xavier(rng, D, D, dtype), p + "proj_w"), proj_b=t(np.zeros(D), p + "proj_b"),
                ln2_g=t(np.ones(D), p + "ln2_g"), ln2_b=t(np.zeros(D), p + "ln2_b"),
                fc1_w=t(_xavier(rng, D, H, dtype), p + "fc1_w"), fc1_b=t(np.zeros(H), p + "fc1_b"),
                fc2_w=t(_xavier(rng, H, D, dtype), p + "fc2_w"), fc2_b=t(np.zeros(D), p + "fc2_b"),
            ))
        self.reset_head(c.num_classes, seed=seed)
        self.freeze_backbone(False)

    def reset_head(self, num_classes: int, seed: int = 0, std: float = 0.02) -> None:
        """Replace the task head; ``std=0`` gives an all-zero head."""
        self.config.num_classes = num_classes
        rng = np.random.default_rng(seed + 7919)
        dtype = self.patch_proj.dtype
        self.head_w = Tensor(rng.normal(0, std, (self.config.dim, num_classes)) if std else
                             np.zeros((self.config.dim, num_classes)), name="head_w", dtype=dtype,
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(num_classes), name="head_b", dtype=dtype, requires_grad=True)

    def named_backbone(self) -> list[tuple[str, Tensor]]:
        out = [("patch_proj", self.patch_proj), ("pos_embed", self.pos_embed)]
        if self.cls_token is not None:
            out.append(("cls_token", self.cls_token))
        for i, blk in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", p) for n, p in blk.named())
        return out

    def named_head(self) -> list[tuple[str, Tensor]]:
        return [("head_w", self.head_w), ("head_b", self.head_b)]

    def backbone_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_backbone()]

    def head_parameters(self) -> list[Tensor]:
        return [self.head_w, self.head_b]

    def parameter_count(self, include_head: bool = True) -> int:
        named = self.named_backbone() + (self.named_head() if include_head else [])
        return sum(p.data.size for _, p in named)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze_backbone(self, frozen: bool = True) -> None:
        self._frozen = frozen
        for p in self.backbone_parameters():
            p.requires_grad = not frozen
            p.grad = None

    def backbone_digest(self) -> str:
        """SHA-256 over every backbone parameter's bytes, in a fixed order."""
        h = hashlib.sha256()
        for name, p in self.named_backbone():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_backbone() + self.named_head()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if "head_w" in state:
            self.reset_head(state["head_w"].shape[1])
        for name, p in self.named_backbone() + self.named_head():
            if name not in state:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ConfigError(f"parameter {name!r}: checkpoint shape {state[name].shape} != model {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def astype(self, dtype) -> "VitModel":
        """A deep copy with every parameter cast to ``dtype``."""
        clone = VitModel.__new__(VitModel)
        clone.config = VitConfig.from_dict(self.config.to_dict())
        clone.patch_proj = Tensor(self.patch_proj.data, name="patch_proj", dtype=dtype)
        clone.pos_embed = Tensor(self.pos_embed.data, name="pos_embed", dtype=dtype)
        clone.cls_token = (Tensor(self.cls_token.data, name="cls_token", dtype=dtype)
                           if self.cls_token is not None else None)
        clone.blocks = [Block(**{n: Tensor(p.data, name=p.name, dtype=dtype) for n, p in b.named()})
                        for b in self.blocks]
        clone.head_w = Tensor(self.head_w.data, name="head_w", dtype=dtype, requires_grad=True)
        clone.head_b = Tensor(self.head_b.data, name="head_b", dtype=dtype, requires_grad=True)
        clone._frozen = False
        clone.freeze_backbone(self._frozen)
        return clone


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N_e, C*p*p], patches in row-major grid order."""
    B, C, H, W = images.shape
    p = patch_size
    x = images.reshape(B, C, H // p, p, W // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // p) * (W // p), C * p * p)


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ConfigError(f"expected [C,H,W] or [B,C,H,W] images, got shape {arr.shape}")
    return arr, False


def patch_embed(images, model: VitModel) -> Tensor:
    """Patch tokens plus positional table: [B, N_e, D] (or [N_e, D] for one image)."""
    batch, single = _as_batch(images)
    c = model.config
    if batch.shape[1:] != (c.channels, c.image_size, c.image_size):
        raise ConfigError(f"image shape {batch.shape[1:]} does not match config "
                          f"({c.channels}, {c.image_size}, {c.image_size})")
    patches = Tensor(patchify(batch, c.patch_size), dtype=model.patch_proj.dtype)
    offset = 1 if c.has_cls else 0
    E0 = matmul(patches, model.patch_proj) + model.pos_embed[offset:]
    return E0[0] if single else E0


def cls_embed(model: VitModel, batch: int) -> Tensor | None:
    """x_0: the class token plus its positional slot, broadcast to [B, 1, D]."""
    if model.cls_token is None:
        return None
    x0 = model.cls_token + model.pos_embed[0]
    return broadcast_to(x0.reshape(1, 1, -1), (batch, 1, model.config.dim))


def attention(x: Tensor, blk: Block, heads: int) -> Tensor:
    B, T, D = x.shape
    dh = D // heads
    qkv = (matmul(x, blk.qkv_w) + blk.qkv_b).reshape(B, T, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    mixed = matmul(softmax(scores, axis=-1), v)
    return matmul(mixed.transpose(0, 2, 1, 3).reshape(B, T, D), blk.proj_w) + blk.proj_b


def block_forward(tokens: Tensor, model: VitModel, index: int) -> Tensor:
    """Block ``index`` (0-based): x + MHSA(LN(x)), then + MLP(LN(.)). Shape preserving."""
    single = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if single else tokens
    blk = model.blocks[index]
    x = x + attention(layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS), blk, model.config.heads)
    h = gelu(matmul(layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS), blk.fc1_w) + blk.fc1_b)
    x = x + (matmul(h, blk.fc2_w) + blk.fc2_b)
    return x[0] if single else x


def forward_features(images, model: VitModel, prompts=None, order: str = "cls_first", trace=None):
    """Run the encoder and return ``(x_L, E_L)``; ``x_L`` is ``None`` in gap mode."""
    from .prompts import encode

    batch, _ = _as_batch(images)
    E0 = patch_embed(batch, model)
    x0 = cls_embed(model, batch.shape[0])
    if prompts is not None and prompts.dim != model.config.dim:
        raise ConfigError(f"prompt width {prompts.dim} != backbone dim {model.config.dim}")
    return encode(model, x0, E0, prompts, order=order, trace=trace)


def readout(model: VitModel, xL: Tensor | None, EL: Tensor) -> Tensor:
    """Head input: the class-token embedding, or the mean of patch outputs in gap mode."""
    if model.config.head_mode == "cls_token":
        return xL.reshape(xL.shape[0], -1)
    return EL.mean(axis=1)


def forward_logits(images, model: VitModel, prompts=None, order: str = "cls_first", trace=None) -> Tensor:
    """Class logits, [B, num_classes] (or [num_classes] for a single [C,H,W] image)."""
    _, single = _as_batch(images)
    xL, EL = forward_features(images, model, prompts, order=order, trace=trace)
    logits = matmul(readout(model, xL, EL), model.head_w) + model.head_b
    return logits[0] if single else logits


def predict(images: np.ndarray, model: VitModel, prompts=None, batch_size: int = 128) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        logits = forward_logits(images[start:start + batch_size], model, prompts)
        preds.append(logits.data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
