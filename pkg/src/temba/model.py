"""Full network: stacked dilated-scan blocks, multi-scale fuser, heads.

Block k projects its input to the k-th rung of the channel ladder,
partitions time into eta = k phase-interleaved streams, runs one
independently parameterized bidirectional scan branch per phase, and
reassembles. Every block also emits auxiliary per-frame logits from its
own output so shallow blocks get direct supervision. The fuser maps all
block outputs to a common width, combines them (sum or concat), and
optionally refines the combination with one more scan branch before the
linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import tensor as tt
from .dilation import dilate, undilate
from .errors import ContractViolation, NumericFault, ValidationError
from .ssm import SSMBranch
from .tensor import Tensor

FUSER_VARIANTS = ("sum+proj", "sum+proj+ssm", "concat+proj", "concat+proj+ssm")
MODES = ("detection", "summarization")
CONS_PAIRS = ("all", "adjacent")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class ModelConfig:
    """Architecture and loss-weight settings; everything else derives."""

    input_dim: int = 1024
    num_classes: int = 10
    blocks: int = 3
    base_dim: int = 256
    growth: float = 1.5
    state_dim: int = 16
    conv_width: int = 4
    pad_len: int = 2500
    mode: str = "detection"
    alpha: float = 100.0
    beta: float = 1.0
    use_dilation: bool = True
    use_fuser: bool = True
    fuser_variant: str = "sum+proj+ssm"
    use_cons_loss: bool = True
    use_aux_loss: bool = True
    cons_pairs: str = "all"
    dtype: str = "float64"

    def validate(self) -> "ModelConfig":
        if self.blocks < 1:
            raise ValidationError(f"blocks must be >= 1, got {self.blocks}")
        for name in ("input_dim", "num_classes", "base_dim", "state_dim",
                     "conv_width", "pad_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.growth <= 0:
            raise ValidationError(f"growth must be > 0, got {self.growth}")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("loss weights alpha, beta must be >= 0")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fuser_variant not in FUSER_VARIANTS:
            raise ValidationError(
                f"fuser_variant must be one of {FUSER_VARIANTS}, got {self.fuser_variant!r}")
        if self.cons_pairs not in CONS_PAIRS:
            raise ValidationError(f"cons_pairs must be one of {CONS_PAIRS}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def block_dims(self) -> list[int]:
        """Channel ladder: block 1 keeps base_dim, later blocks expand."""
        dims = [self.base_dim]
        for _ in range(self.blocks - 1):
            dims.append(_round_half_up(self.growth * dims[-1]))
        return dims

    @property
    def fuser_dim(self) -> int:
        return self.block_dims[-1]

    @property
    def out_dim(self) -> int:
        return 1 if self.mode == "summarization" else self.num_classes

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def stride_for(self, block_index: int) -> int:
        """1-based block index -> dilation stride."""
        return block_index if self.use_dilation else 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dc_fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d).validate()


@dataclass
class ModelOutput:
    logits: Tensor                # (B, T, C) or (B, T, 1)
    block_outputs: list[Tensor]   # z_k, (B, T, D_k)
    aux_logits: list[Tensor]      # one per block, same last dim as logits
    fused: Tensor                 # head input, (B, T, E)


def _linear_init(rng, in_dim, out_dim, dtype):
    w = rng.normal(0.0, in_dim ** -0.5, (in_dim, out_dim)).astype(dtype)
    return (Tensor(w, requires_grad=True),
            Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True))


class TembaBlock:
    """One rung of the stack: project, phase-split, scan per phase, merge."""

    def __init__(self, index: int, in_dim: int, out_dim: int, stride: int,
                 state_dim: int, conv_width: int, aux_dim: int,
                 rng: np.random.Generator, dtype):
        self.index = index
        self.stride = stride
        self.out_dim = out_dim
        self.proj_w, self.proj_b = _linear_init(rng, in_dim, out_dim, dtype)
        self.branches = [SSMBranch(out_dim, state_dim, conv_width, rng, dtype)
                         for _ in range(stride)]
        self.aux_w, self.aux_b = _linear_init(rng, out_dim, aux_dim, dtype)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        x = tt.linear(z, self.proj_w, self.proj_b)
        try:
            if self.stride == 1:
                y = self.branches[0](x)
            else:
                streams, spec = dilate(x, self.stride)
                batch = spec.batch
                parts = []
                for i, branch in enumerate(self.branches):
                    rows = np.arange(batch) * self.stride + i
                    parts.append(branch(tt.index_select(streams, 0, rows)))
                # parts stack phase-major; restore the batch-major stream order
                stacked = tt.concat(parts, axis=0)
                s = np.arange(batch * self.stride)
                perm = (s % self.stride) * batch + s // self.stride
                y = undilate(tt.index_select(stacked, 0, perm), spec)
        except NumericFault as e:
            raise NumericFault(f"block {self.index}: {e}") from None
        aux = tt.linear(y, self.aux_w, self.aux_b)
        return y, aux

    __call__ = forward

    def cons_weights(self) -> list[Tensor]:
        """Forward-direction input->state maps, one per phase branch; the
        projection-consistency loss pulls these toward each other."""
        return [br.fwd.c_w for br in self.branches]

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.proj_w": self.proj_w, f"{prefix}.proj_b": self.proj_b}
        for i, br in enumerate(self.branches):
            out.update(br.named_params(f"{prefix}.branch{i}"))
        out[f"{prefix}.aux_w"] = self.aux_w
        out[f"{prefix}.aux_b"] = self.aux_b
        return out


class MSFuser:
    """Map every block output to width E, combine, optionally refine."""

    def __init__(self, block_dims: list[int], fused_dim: int, variant: str,
                 state_dim: int, conv_width: int, rng: np.random.Generator, dtype):
        if variant not in FUSER_VARIANTS:
            raise ContractViolation(f"unknown fuser variant {variant!r}")
        self.variant = variant
        self.concat = variant.startswith("concat")
        if self.concat:
            self.proj_w, self.proj_b = _linear_init(
                rng, sum(block_dims), fused_dim, dtype)
        else:
            self.projs = [_linear_init(rng, d, fused_dim, dtype)
                          for d in block_dims]
        self.ssm = (SSMBranch(fused_dim, state_dim, conv_width, rng, dtype)
                    if variant.endswith("+ssm") else None)

    def forward(self, zs: list[Tensor]) -> Tensor:
        if self.concat:
            fused = tt.linear(tt.concat(zs, axis=-1), self.proj_w, self.proj_b)
        else:
            fused = None
            for z, (w, b) in zip(zs, self.projs):
                part = tt.linear(z, w, b)
                fused = part if fused is None else tt.add(fused, part)
        if self.ssm is not None:
            fused = self.ssm(fused)
        return fused

    __call__ = forward

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        if self.concat:
            out[f"{prefix}.proj_w"] = self.proj_w
            out[f"{prefix}.proj_b"] = self.proj_b
        else:
            for i, (w, b) in enumerate(self.projs):
                out[f"{prefix}.proj{i}_w"] = w
                out[f"{prefix}.proj{i}_b"] = b
        if self.ssm is not None:
            out.update(self.ssm.named_params(f"{prefix}.ssm"))
        return out


class TembaModel:
    """The assembled network. Deterministic for a given (config, seed)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        dims = config.block_dims
        self.in_w, self.in_b = _linear_init(rng, config.input_dim,
                                            config.base_dim, dt)
        self.blocks: list[TembaBlock] = []
        prev = config.base_dim
        for k in range(1, config.blocks + 1):
            self.blocks.append(TembaBlock(
                k, prev, dims[k - 1], config.stride_for(k), config.state_dim,
                config.conv_width, config.out_dim, rng, dt))
            prev = dims[k - 1]
        self.fuser = (MSFuser(dims, config.fuser_dim, config.fuser_variant,
                              config.state_dim, config.conv_width, rng, dt)
                      if config.use_fuser else None)
        self.head_w, self.head_b = _linear_init(rng, dims[-1], config.out_dim, dt)

    def forward(self, features: Tensor, mask: np.ndarray | None = None) -> ModelOutput:
        """features (B, T, input_dim); mask (B, T) marks real frames.

        Padding frames are zeroed at entry so their content can never
        reach a real frame's output through the scans.
        """
        if features.ndim != 3 or features.shape[2] != self.config.input_dim:
            raise ContractViolation(
                f"expected (B, T, {self.config.input_dim}) features, got {features.shape}")
        if mask is not None:
            m = np.ascontiguousarray(mask, dtype=features.dtype.type)[:, :, None]
            features = tt.mul(features, Tensor(m))
        z = tt.linear(features, self.in_w, self.in_b)
        zs, auxs = [], []
        for blk in self.blocks:
            z, aux = blk(z)
            zs.append(z)
            auxs.append(aux)
        fused = self.fuser(zs) if self.fuser is not None else zs[-1]
        logits = tt.linear(fused, self.head_w, self.head_b)
        return ModelOutput(logits=logits, block_outputs=zs, aux_logits=auxs,
                           fused=fused)

    __call__ = forward

    def cons_weight_groups(self) -> list[list[Tensor]]:
        """Per block, the branch weights the consistency loss compares."""
        return [blk.cons_weights() for blk in self.blocks]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"input.w": self.in_w, "input.b": self.in_b}
        for k, blk in enumerate(self.blocks, start=1):
            out.update(blk.named_params(f"block{k}"))
        if self.fuser is not None:
            out.update(self.fuser.named_params("fuser"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())
