"""Frame-pair co-attention: affinity variants, normalization, gated summaries.

A feature map V of one frame (H x W x C) is flattened to a C x (HW)
matrix whose column i is the feature vector at spatial position i (rows
scanned first). The affinity between a query map Va and a reference map
Vb is an (HW) x (HW) matrix; its column-softmax turns each query position
into a convex weighting over reference positions, from which a summary
matrix Z is gathered, gated per position, and concatenated back onto the
query features.

Three affinity variants are supported:

* vanilla     - a dense learnable C x C mixing matrix between the maps
* symmetric   - same computation, trained with an orthogonality penalty
                on the mixing matrix
* channelwise - diagonal scaling only; either fixed per-channel weights
                (``static``) or squeeze-excitation style weights computed
                from the other branch's pooled features (``se``)
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import DimensionError, UsageError
from .tensor import Tensor

VARIANTS = ("vanilla", "symmetric", "channelwise")
CHANNEL_MODES = ("static", "se")


@dataclass
class CoattentionParams:
    """Learnable state for one co-attention block.

    Only the fields belonging to ``variant`` (and, for channelwise,
    ``channel_mode``) are populated; the rest stay None. The gate is shared
    by both Siamese branches.
    """

    variant: str
    channels: int
    gate_weight: Tensor  # (1, C), the 1x1 gate convolution
    gate_bias: Tensor  # (1, 1)
    weight: Tensor | None = None  # (C, C) for vanilla / symmetric
    ortho_lambda: float = 0.0  # symmetric only
    channel_mode: str = "se"
    d_a: Tensor | None = None  # (C, 1) static channel weights for the reference map
    d_b: Tensor | None = None  # (C, 1) static channel weights for the query map
    se_a_weight: Tensor | None = None  # (C, C), branch-a squeeze transform
    se_a_bias: Tensor | None = None  # (C, 1)
    se_b_weight: Tensor | None = None
    se_b_bias: Tensor | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        pairs = []
        if self.variant in ("vanilla", "symmetric"):
            pairs.append(("coatt.weight", self.weight))
        elif self.channel_mode == "static":
            pairs += [("coatt.d_a", self.d_a), ("coatt.d_b", self.d_b)]
        else:
            pairs += [
                ("coatt.se_a_weight", self.se_a_weight),
                ("coatt.se_a_bias", self.se_a_bias),
                ("coatt.se_b_weight", self.se_b_weight),
                ("coatt.se_b_bias", self.se_b_bias),
            ]
        pairs += [("coatt.gate_weight", self.gate_weight), ("coatt.gate_bias", self.gate_bias)]
        return pairs


def init_coattention_params(
    rng: np.random.Generator,
    channels: int,
    variant: str = "symmetric",
    channel_mode: str = "se",
    ortho_lambda: float = 1e-4,
) -> CoattentionParams:
    """Fresh parameters; the mixing matrix starts near the identity so early
    affinities behave like plain feature similarity."""
    if variant not in VARIANTS:
        raise UsageError(f"unknown co-attention variant {variant!r}")
    if channel_mode not in CHANNEL_MODES:
        raise UsageError(f"unknown channel mode {channel_mode!r}")

    def noise(shape, scale=0.01):
        return rng.uniform(-scale, scale, size=shape)

    params = CoattentionParams(
        variant=variant,
        channels=channels,
        gate_weight=Tensor(noise((1, channels)), requires_grad=True),
        gate_bias=Tensor(np.zeros((1, 1)), requires_grad=True),
        channel_mode=channel_mode,
        ortho_lambda=ortho_lambda if variant == "symmetric" else 0.0,
    )
    if variant in ("vanilla", "symmetric"):
        params.weight = Tensor(np.eye(channels) + noise((channels, channels)), requires_grad=True)
    elif channel_mode == "static":
        params.d_a = Tensor(1.0 + rng.uniform(0.0, 0.01, size=(channels, 1)), requires_grad=True)
        params.d_b = Tensor(1.0 + rng.uniform(0.0, 0.01, size=(channels, 1)), requires_grad=True)
    else:
        params.se_a_weight = Tensor(noise((channels, channels)), requires_grad=True)
        params.se_a_bias = Tensor(np.zeros((channels, 1)), requires_grad=True)
        params.se_b_weight = Tensor(noise((channels, channels)), requires_grad=True)
        params.se_b_bias = Tensor(np.zeros((channels, 1)), requires_grad=True)
    return params


@dataclass
class FeatureMap:
    """An H x W x C embedding plus its C x (HW) matrix view."""

    tensor: Tensor  # (H, W, C)
    flat: Tensor = field(init=False)  # (C, H*W), column i = position i (row-major)

    def __post_init__(self):
        if self.tensor.data.ndim != 3:
            raise DimensionError(f"FeatureMap needs an H x W x C tensor, got {self.tensor.shape}")
        h, w, c = self.tensor.shape
        self.flat = tt.transpose(tt.reshape(self.tensor, (h * w, c)))

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[0], self.tensor.shape[1]

    @property
    def channels(self) -> int:
        return self.tensor.shape[2]

    @property
    def positions(self) -> int:
        return self.tensor.shape[0] * self.tensor.shape[1]


@dataclass
class AffinityPair:
    """Raw affinity plus both normalizations (columns each sum to 1)."""

    s: Tensor  # (HW, HW)
    s_c: Tensor  # softmax over columns of s
    s_r: Tensor  # softmax over columns of s transposed


@dataclass
class AttentionSummary:
    """A gated summary matrix and the gate values that produced it."""

    z: Tensor  # (C, HW)
    gate_values: Tensor  # (HW,), each strictly inside (0, 1) for finite input


def _se_channel_weights(weight: Tensor, bias: Tensor, pooled: Tensor) -> Tensor:
    return tt.sigmoid(tt.add(tt.matmul(weight, pooled), bias))


def compute_affinity(params: CoattentionParams, va: FeatureMap, vb: FeatureMap) -> Tensor:
    """Affinity between query map ``va`` and reference map ``vb``.

    vanilla / symmetric:  S = Vb^T . W . Va
    channelwise static:   S = (diag(d_a) Vb)^T . (diag(d_b) Va)
    channelwise se:       like static, but each diagonal comes from the
                          other branch's average-pooled features pushed
                          through that branch's squeeze transform.
    """
    if va.channels != vb.channels:
        raise DimensionError(f"channel mismatch: {va.tensor.shape} vs {vb.tensor.shape}")
    if params.channels != va.channels:
        raise DimensionError(
            f"params built for C={params.channels}, feature maps have C={va.channels}"
        )
    if params.variant in ("vanilla", "symmetric"):
        return tt.matmul(tt.transpose(vb.flat), tt.matmul(params.weight, va.flat))
    if params.channel_mode == "static":
        d_a, d_b = params.d_a, params.d_b
    else:
        d_a = _se_channel_weights(params.se_a_weight, params.se_a_bias, tt.mean(va.flat, axis=1))
        d_b = _se_channel_weights(params.se_b_weight, params.se_b_bias, tt.mean(vb.flat, axis=1))
    scaled_b = tt.mul(vb.flat, d_a)
    scaled_a = tt.mul(va.flat, d_b)
    return tt.matmul(tt.transpose(scaled_b), scaled_a)


def normalize_affinity(s: Tensor) -> AffinityPair:
    return AffinityPair(s=s, s_c=tt.softmax_columns(s), s_r=tt.softmax_columns(tt.transpose(s)))


def attention_summary(vref: FeatureMap, s_norm: Tensor) -> Tensor:
    """Gather reference features: column i of the result is the convex
    combination of ``vref`` columns weighted by column i of ``s_norm``."""
    if s_norm.shape[0] != vref.positions:
        raise DimensionError(
            f"normalized affinity has {s_norm.shape[0]} rows, reference map has {vref.positions} positions"
        )
    return tt.matmul(vref.flat, s_norm)


def gate(params: CoattentionParams, z: Tensor) -> Tensor:
    """Per-position confidence: a 1x1 convolution over channels plus sigmoid."""
    if z.data.ndim != 2 or z.shape[0] != params.channels:
        raise DimensionError(f"gate expects a {params.channels} x HW summary, got {z.shape}")
    logits = tt.add(tt.matmul(params.gate_weight, z), params.gate_bias)
    return tt.reshape(tt.sigmoid(logits), (z.shape[1],))


def apply_gate(z: Tensor, gate_values: Tensor) -> AttentionSummary:
    """Scale each summary column by its gate value."""
    if gate_values.data.ndim != 1 or gate_values.shape[0] != z.shape[1]:
        raise DimensionError(f"gate values {gate_values.shape} do not match summary {z.shape}")
    return AttentionSummary(z=tt.mul(z, gate_values), gate_values=gate_values)


def fuse_summaries(summaries: list[AttentionSummary]) -> AttentionSummary:
    """Average gated summaries from several reference frames."""
    if not summaries:
        raise UsageError("fuse_summaries needs at least one summary")
    shape = summaries[0].z.shape
    for s in summaries[1:]:
        if s.z.shape != shape:
            raise DimensionError(f"summary shapes differ: {shape} vs {s.z.shape}")
    inv_n = 1.0 / len(summaries)
    acc_z = summaries[0].z
    acc_g = summaries[0].gate_values
    for s in summaries[1:]:
        acc_z = tt.add(acc_z, s.z)
        acc_g = tt.add(acc_g, s.gate_values)
    return AttentionSummary(
        z=tt.mul(acc_z, Tensor(np.asarray(inv_n))),
        gate_values=tt.mul(acc_g, Tensor(np.asarray(inv_n))),
    )


def concat_features(summary: AttentionSummary, v: FeatureMap) -> Tensor:
    """Stack the summary (reshaped to an H x W x C map) in front of the
    original features along channels, giving H x W x 2C."""
    h, w = v.spatial
    c = v.channels
    if summary.z.shape != (c, h * w):
        raise DimensionError(f"summary {summary.z.shape} does not match feature map {v.tensor.shape}")
    z_map = tt.reshape(tt.transpose(summary.z), (h, w, c))
    return tt.concat_channels(z_map, v.tensor)


def ortho_penalty(params: CoattentionParams) -> Tensor:
    """lambda * sum |W W^T - I|, entrywise."""
    if params.variant != "symmetric":
        raise UsageError(f"ortho_penalty applies to the symmetric variant, not {params.variant!r}")
    c = params.channels
    delta = tt.sub(tt.matmul(params.weight, tt.transpose(params.weight)), Tensor(np.eye(c)))
    return tt.mul(tt.tensor_sum(tt.absolute(delta)), Tensor(np.asarray(params.ortho_lambda)))
