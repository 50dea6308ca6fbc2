"""Prompt attachment for shallow and deep prompt tuning.

Shallow: prompts are concatenated once before the first block and their block
outputs (Z_i) travel through the rest of the encoder. Deep: every block gets
its own fresh prompts and the block outputs at prompt positions are thrown
away. SPT and VPT share this machinery; they differ only in how the prompt
values are initialized (see :mod:`spt_lab.prompt_init`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, broadcast_to, concat

MODES = ("shallow", "deep")
ORDERS = ("cls_first", "prompts_first")


@dataclass
class PromptSet:
    mode: str
    tokens: list[Tensor]
    frozen: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"prompt mode must be one of {MODES}, got {self.mode!r}")
        if not self.tokens:
            raise ConfigError("a PromptSet needs at least one layer of tokens")
        if self.mode == "shallow" and len(self.tokens) != 1:
            raise ConfigError(f"shallow prompts hold one tensor, got {len(self.tokens)}")
        shapes = {t.shape for t in self.tokens}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ConfigError(f"every layer needs the same [N_p, D] shape, got {sorted(shapes)}")
        for i, t in enumerate(self.tokens):
            t.name = t.name or f"prompt.{i}"
        self.set_frozen(self.frozen)

    @classmethod
    def from_arrays(cls, mode: str, arrays, frozen: bool = False, dtype=None) -> "PromptSet":
        arrays = [arrays] if mode == "shallow" and np.ndim(arrays) == 2 else list(arrays)
        return cls(mode, [Tensor(a, name=f"prompt.{i}", dtype=dtype) for i, a in enumerate(arrays)], frozen)

    @property
    def n_prompts(self) -> int:
        return self.tokens[0].shape[0]

    @property
    def dim(self) -> int:
        return self.tokens[0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.tokens)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for t in self.tokens:
            t.requires_grad = not frozen
            t.grad = None

    def parameters(self) -> list[Tensor]:
        return [] if self.frozen else list(self.tokens)

    def arrays(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tokens]

    def astype(self, dtype) -> "PromptSet":
        return PromptSet.from_arrays(self.mode, [t.data for t in self.tokens], self.frozen, dtype=dtype)

    def validate(self, depth: int, dim: int) -> None:
        if self.dim != dim:
            raise ConfigError(f"prompt width {self.dim} != backbone dim {dim}")
        if self.mode == "deep" and self.depth != depth:
            raise ConfigError(f"deep prompts need {depth} layers, got {self.depth}")


@dataclass
class PromptTrace:
    """Per-block snapshots taken during a prompted forward pass.

    ``prompt_in[i]`` / ``patch_in[i]`` are the prompt and patch rows entering
    block i+1; for shallow prompts ``prompt_out[i]`` is Z_{i+1}.
    """

    prompt_in: list[np.ndarray] = field(default_factory=list)
    patch_in: list[np.ndarray] = field(default_factory=list)
    prompt_out: list[np.ndarray] = field(default_factory=list)


def _expand(tokens: Tensor, batch: int) -> Tensor:
    n, d = tokens.shape[-2:]
    if tokens.ndim == 3:
        return tokens
    return broadcast_to(tokens.reshape(1, n, d), (batch, n, d))


def _layout(x: Tensor | None, prompts: Tensor | None, E: Tensor, order: str):
    """Concatenate along the sequence axis; returns the sequence and slot slices."""
    n_x = 0 if x is None else x.shape[1]
    n_p = 0 if prompts is None else prompts.shape[1]
    if order == "cls_first":
        parts = [x, prompts, E]
        xs, ps = slice(0, n_x), slice(n_x, n_x + n_p)
    elif order == "prompts_first":
        parts = [prompts, x, E]
        ps, xs = slice(0, n_p), slice(n_p, n_p + n_x)
    else:
        raise ConfigError(f"order must be one of {ORDERS}, got {order!r}")
    es = slice(n_x + n_p, n_x + n_p + E.shape[1])
    parts = [p for p in parts if p is not None and p.shape[1] > 0]
    seq = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return seq, xs, ps, es


def _split(seq: Tensor, xs: slice, ps: slice, es: slice, has_x: bool, has_p: bool):
    x = seq[:, xs] if has_x else None
    p = seq[:, ps] if has_p else None
    return x, p, seq[:, es]


def attach_shallow(x0: Tensor | None, P0: Tensor, E0: Tensor, order: str = "cls_first") -> Tensor:
    """[x_0, P_0, E_0] on the sequence axis. Accepts batched [B, T, D] or single [T, D] inputs."""
    single = E0.ndim == 2
    if single:
        E0 = E0.reshape(1, *E0.shape)
        x0 = None if x0 is None else x0.reshape(1, -1, x0.shape[-1])
    widths = {E0.shape[-1], P0.shape[-1]} | ({x0.shape[-1]} if x0 is not None else set())
    if len(widths) != 1:
        raise ConfigError(f"token widths disagree: {sorted(widths)}")
    seq, *_ = _layout(x0, _expand(P0, E0.shape[0]), E0, order)
    return seq[0] if single else seq


def attach_deep_step(model, x_prev: Tensor | None, E_prev: Tensor, prompts_i: Tensor | None,
                     index: int, order: str = "cls_first", trace: PromptTrace | None = None):
    """Run block ``index`` (1-based) on [x_{i-1}, P_{i-1}, E_{i-1}] and drop the prompt outputs."""
    from .vit import block_forward

    if not 1 <= index <= model.config.depth:
        raise ConfigError(f"block index {index} outside 1..{model.config.depth}")
    if prompts_i is None:
        raise ConfigError(f"no prompts supplied for layer {index}")
    if prompts_i.shape[-1] != E_prev.shape[-1]:
        raise ConfigError(f"prompt width {prompts_i.shape[-1]} != token width {E_prev.shape[-1]}")
    P = _expand(prompts_i, E_prev.shape[0])
    if trace is not None:
        trace.prompt_in.append(prompts_i.data.copy())
        trace.patch_in.append(E_prev.data.copy())
    seq, xs, ps, es = _layout(x_prev, P, E_prev, order)
    out = block_forward(seq, model, index - 1)
    x_i, _, E_i = _split(out, xs, ps, es, x_prev is not None, False)
    return x_i, E_i


def encode(model, x0: Tensor | None, E0: Tensor, prompts: PromptSet | None,
           order: str = "cls_first", trace: PromptTrace | None = None):
    """The full encoder pass with optional prompts; returns ``(x_L, E_L)``."""
    from .vit import block_forward

    depth = model.config.depth
    if prompts is None:
        seq, xs, ps, es = _layout(x0, None, E0, order)
        for i in range(depth):
            if trace is not None:
                trace.patch_in.append(seq[:, es].data.copy())
            seq = block_forward(seq, model, i)
        x, _, E = _split(seq, xs, ps, es, x0 is not None, False)
        return x, E

    prompts.validate(depth, model.config.dim)
    if prompts.mode == "deep":
        x, E = x0, E0
        for i in range(1, depth + 1):
            x, E = attach_deep_step(model, x, E, prompts.tokens[i - 1], i, order, trace)
        return x, E

    seq, xs, ps, es = _layout(x0, _expand(prompts.tokens[0], E0.shape[0]), E0, order)
    has_p = prompts.n_prompts > 0
    for i in range(depth):
        if trace is not None:
            trace.prompt_in.append(seq[:, ps].data.copy())
            trace.patch_in.append(seq[:, es].data.copy())
        seq = block_forward(seq, model, i)
        if trace is not None:
            trace.prompt_out.append(seq[:, ps].data.copy())
    x, _, E = _split(seq, xs, ps, es, x0 is not None, has_p)
    return x, E


def prompt_parameter_count(mode: str, n_prompts: int, dim: int, depth: int) -> int:
    """N_p*D for shallow prompts, L*N_p*D for deep prompts."""
    if mode not in MODES:
        raise ConfigError(f"prompt mode must be one of {MODES}, got {mode!r}")
    return n_prompts * dim * (depth if mode == "deep" else 1)


@dataclass
class TrainableSummary:
    parameters: list[Tensor]
    prompt_count: int
    head_count: int

    @property
    def total(self) -> int:
        return self.prompt_count + self.head_count


def trainable_parameters(model, prompts: PromptSet | None) -> TrainableSummary:
    """Prompt tokens (unless frozen) plus the task head; the backbone never appears."""
    params: list[Tensor] = []
    prompt_count = 0
    if prompts is not None and not prompts.frozen:
        params.extend(prompts.tokens)
        prompt_count = sum(t.data.size for t in prompts.tokens)
    head_count = 0
    if model is not None:
        params.extend(model.head_parameters())
        head_count = sum(p.data.size for p in model.head_parameters())
    return TrainableSummary(params, prompt_count, head_count)
