"""The Siamese segmentation model.

One parameter set serves both input streams (weight sharing is structural:
the same tensors are used for each frame). The pipeline per frame pair is
embed -> co-attention -> gated summary -> concat -> small conv head ->
sigmoid -> bilinear upsample back to input resolution.

A separate 1x1 side-output conv on top of the embedder produces the
intermediate prediction used by the static-image training phase; its
parameters are disjoint from the pair head.
"""

from dataclasses import dataclass, replace
import hashlib
import json
from pathlib import Path

import numpy as np

from . import coattention as ca
from . import tensor as tt
from .coattention import AttentionSummary, CoattentionParams, FeatureMap
from .errors import DataError, DimensionError, UsageError
from .tensor import Tensor


@dataclass
class ConvLayer:
    weight: Tensor  # (kh, kw, cin, cout)
    bias: Tensor  # (cout,)
    stride: int = 1
    pad: int = 0

    def apply(self, x: Tensor) -> Tensor:
        return tt.add(tt.conv2d(x, self.weight, stride=self.stride, pad=self.pad), self.bias)


@dataclass
class Prediction:
    """A per-pixel foreground probability map at input resolution."""

    prob: Tensor  # (H0, W0), values in (0, 1)

    @property
    def array(self) -> np.ndarray:
        return self.prob.data


@dataclass
class ModelParams:
    embedder: list  # ConvLayer, stride-2 each
    coatt: CoattentionParams
    head: list  # ConvLayer x3: 3x3, 3x3, 1x1
    side: ConvLayer  # 1x1 side-output conv over embedder features
    channels: tuple  # embedder output channels per layer

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def downscale(self) -> int:
        return 2 ** len(self.embedder)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        pairs = []
        for i, layer in enumerate(self.embedder):
            pairs += [(f"embedder.{i}.weight", layer.weight), (f"embedder.{i}.bias", layer.bias)]
        pairs += self.coatt.named_parameters()
        for i, layer in enumerate(self.head):
            pairs += [(f"head.{i}.weight", layer.weight), (f"head.{i}.bias", layer.bias)]
        pairs += [("side.weight", self.side.weight), ("side.bias", self.side.bias)]
        return pairs

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def _glorot(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
    return rng.uniform(-limit, limit, size=(kh, kw, cin, cout))


def _conv_layer(rng, kh, kw, cin, cout, stride=1, pad=0) -> ConvLayer:
    return ConvLayer(
        weight=Tensor(_glorot(rng, kh, kw, cin, cout), requires_grad=True),
        bias=Tensor(np.zeros(cout), requires_grad=True),
        stride=stride,
        pad=pad,
    )


def init_model_params(
    rng: np.random.Generator,
    variant: str = "symmetric",
    channel_mode: str = "se",
    channels: tuple = (16, 32, 64),
    head_channels: int = 32,
    ortho_lambda: float = 1e-4,
) -> ModelParams:
    channels = tuple(int(c) for c in channels)
    c = channels[-1]
    embedder = []
    cin = 3
    for cout in channels:
        embedder.append(_conv_layer(rng, 3, 3, cin, cout, stride=2, pad=1))
        cin = cout
    coatt = ca.init_coattention_params(
        rng, c, variant=variant, channel_mode=channel_mode, ortho_lambda=ortho_lambda
    )
    head = [
        _conv_layer(rng, 3, 3, 2 * c, head_channels, stride=1, pad=1),
        _conv_layer(rng, 3, 3, head_channels, head_channels, stride=1, pad=1),
        _conv_layer(rng, 1, 1, head_channels, 1),
    ]
    side = _conv_layer(rng, 1, 1, c, 1)
    return ModelParams(embedder=embedder, coatt=coatt, head=head, side=side, channels=channels)


def replace_parameters(params: ModelParams, arrays: list) -> ModelParams:
    """A structurally identical model whose parameter tensors hold ``arrays``
    (in named_parameters order). Used by gradient checking."""
    names = [n for n, _ in params.named_parameters()]
    if len(arrays) != len(names):
        raise UsageError(f"expected {len(names)} parameter arrays, got {len(arrays)}")
    byname = {n: (a if isinstance(a, Tensor) else Tensor(a, requires_grad=True))
              for n, a in zip(names, arrays)}

    def conv(prefix, layer):
        return replace(layer, weight=byname[f"{prefix}.weight"], bias=byname[f"{prefix}.bias"])

    coatt = replace(
        params.coatt,
        **{
            field: byname[name]
            for name, field in [
                ("coatt.weight", "weight"),
                ("coatt.d_a", "d_a"),
                ("coatt.d_b", "d_b"),
                ("coatt.se_a_weight", "se_a_weight"),
                ("coatt.se_a_bias", "se_a_bias"),
                ("coatt.se_b_weight", "se_b_weight"),
                ("coatt.se_b_bias", "se_b_bias"),
                ("coatt.gate_weight", "gate_weight"),
                ("coatt.gate_bias", "gate_bias"),
            ]
            if name in byname
        },
    )
    return ModelParams(
        embedder=[conv(f"embedder.{i}", l) for i, l in enumerate(params.embedder)],
        coatt=coatt,
        head=[conv(f"head.{i}", l) for i, l in enumerate(params.head)],
        side=conv("side", params.side),
        channels=params.channels,
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def embed(params: ModelParams, frame) -> FeatureMap:
    """Embed an H x W x 3 image in [0,1] into an (H/8) x (W/8) x C feature map."""
    x = frame if isinstance(frame, Tensor) else Tensor(frame)
    if x.data.ndim != 3 or x.shape[2] != 3:
        raise DimensionError(f"embed expects an H x W x 3 frame, got {x.shape}")
    down = params.downscale
    if x.shape[0] % down or x.shape[1] % down:
        raise DimensionError(f"frame size {x.shape[:2]} not divisible by {down}")
    for layer in params.embedder:
        x = tt.relu(layer.apply(x))
    return FeatureMap(x)


def zero_summary(v: FeatureMap) -> AttentionSummary:
    """The no-reference stand-in: an all-zero summary with zero gates."""
    return AttentionSummary(
        z=Tensor(np.zeros((v.channels, v.positions))),
        gate_values=Tensor(np.zeros(v.positions)),
    )


def decode(params: ModelParams, summary: AttentionSummary, v: FeatureMap, out_size: tuple) -> Prediction:
    """Concat summary onto features, run the head, upsample to ``out_size``."""
    x = ca.concat_features(summary, v)
    x = tt.relu(params.head[0].apply(x))
    x = tt.relu(params.head[1].apply(x))
    p = tt.sigmoid(params.head[2].apply(x))
    h, w = v.spatial
    if out_size[0] % h or out_size[1] % w or out_size[0] // h != out_size[1] // w:
        raise DimensionError(f"cannot upsample {h}x{w} features to {out_size}")
    up = tt.bilinear_upsample(p, out_size[0] // h)
    return Prediction(prob=tt.reshape(up, out_size))


def gated_summary(params: ModelParams, vq: FeatureMap, vref: FeatureMap) -> AttentionSummary:
    """Gated attention summary for query features against one reference map."""
    s = ca.compute_affinity(params.coatt, vq, vref)
    s_c = tt.softmax_columns(s)
    z = ca.attention_summary(vref, s_c)
    return ca.apply_gate(z, ca.gate(params.coatt, z))


def forward_pair(params: ModelParams, fa, fb) -> tuple[Prediction, Prediction]:
    """Both streams of the training-time pair pass."""
    fa = fa if isinstance(fa, Tensor) else Tensor(fa)
    fb = fb if isinstance(fb, Tensor) else Tensor(fb)
    if fa.shape != fb.shape:
        raise DimensionError(f"frame shapes differ: {fa.shape} vs {fb.shape}")
    out_size = (fa.shape[0], fa.shape[1])
    va = embed(params, fa)
    vb = embed(params, fb)
    pair = ca.normalize_affinity(ca.compute_affinity(params.coatt, va, vb))
    z_a = ca.attention_summary(vb, pair.s_c)
    z_b = ca.attention_summary(va, pair.s_r)
    sum_a = ca.apply_gate(z_a, ca.gate(params.coatt, z_a))
    sum_b = ca.apply_gate(z_b, ca.gate(params.coatt, z_b))
    return (
        decode(params, sum_a, va, out_size),
        decode(params, sum_b, vb, out_size),
    )


def forward_query_features(
    params: ModelParams, vq: FeatureMap, refs: list, out_size: tuple
) -> Prediction:
    """Query pass over precomputed reference feature maps; an empty reference
    list decodes against the zero summary."""
    if refs:
        fused = ca.fuse_summaries([gated_summary(params, vq, vr) for vr in refs])
    else:
        fused = zero_summary(vq)
    return decode(params, fused, vq, out_size)


def forward_query(params: ModelParams, fq, ref_frames: list) -> Prediction:
    """Segment a query frame against N reference frames (summary fusion)."""
    if not ref_frames:
        raise UsageError("forward_query needs at least one reference frame")
    fq = fq if isinstance(fq, Tensor) else Tensor(fq)
    vq = embed(params, fq)
    refs = [embed(params, r) for r in ref_frames]
    return forward_query_features(params, vq, refs, (fq.shape[0], fq.shape[1]))


def forward_static(params: ModelParams, image) -> Prediction:
    """Side-output pass used by the static training phase."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    v = embed(params, image)
    p = tt.sigmoid(params.side.apply(v.tensor))
    up = tt.bilinear_upsample(p, image.shape[0] // v.spatial[0])
    return Prediction(prob=tt.reshape(up, (image.shape[0], image.shape[1])))


# ---------------------------------------------------------------------------
# checkpoints: manifest JSON + concatenated little-endian f64 blobs
# ---------------------------------------------------------------------------

_CHECKPOINT_FORMAT = "coattseg-checkpoint-v1"


def save_checkpoint(params: ModelParams, directory, hyperparameters: dict | None = None, seed: int | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = params.named_parameters()
    manifest = {
        "format": _CHECKPOINT_FORMAT,
        "variant": params.coatt.variant,
        "channel_mode": params.coatt.channel_mode,
        "channels": list(params.channels),
        "head_channels": params.head[0].weight.shape[3],
        "ortho_lambda": params.coatt.ortho_lambda,
        "dtype": "f64",
        "byte_order": "little",
        "seed": seed,
        "hyperparameters": hyperparameters or {},
        "layers": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    with open(directory / "params.bin", "wb") as fh:
        for _, p in named:
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(directory) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    bin_path = directory / "params.bin"
    if not manifest_path.exists() or not bin_path.exists():
        raise DataError(f"no checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != _CHECKPOINT_FORMAT:
        raise DataError(f"unrecognized checkpoint format in {manifest_path}")
    params = init_model_params(
        np.random.default_rng(0),
        variant=manifest["variant"],
        channel_mode=manifest["channel_mode"],
        channels=tuple(manifest["channels"]),
        head_channels=manifest["head_channels"],
        ortho_lambda=manifest["ortho_lambda"],
    )
    named = dict(params.named_parameters())
    raw = bin_path.read_bytes()
    offset = 0
    for entry in manifest["layers"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in named:
            raise DataError(f"checkpoint layer {name!r} not present in model")
        if named[name].shape != shape:
            raise DataError(f"checkpoint layer {name!r} has shape {shape}, model expects {named[name].shape}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        blob = raw[offset : offset + 8 * n]
        if len(blob) != 8 * n:
            raise DataError(f"checkpoint payload truncated at layer {name!r}")
        values = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(values)):
            raise DataError(f"checkpoint layer {name!r} contains non-finite values")
        named[name].data = values
        offset += 8 * n
    if offset != len(raw):
        raise DataError(f"checkpoint payload has {len(raw) - offset} trailing bytes")
    return params, manifest


def checkpoint_digest(directory) -> str:
    """SHA-256 over manifest and parameter payload, for run manifests."""
    directory = Path(directory)
    h = hashlib.sha256()
    for name in ("manifest.json", "params.bin"):
        h.update((directory / name).read_bytes())
    return h.hexdigest()
