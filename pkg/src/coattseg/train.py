"""Losses, pair sampling, and the alternating static/video training loop.

Training alternates batches of static saliency images (side-output head,
updates reach only the embedder and side conv) with batches of random
frame pairs drawn from training videos (full model). Updates are plain
SGD at a constant rate. Every draw flows through one seeded generator, so
a seed fixes the entire run bit for bit.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coattention as ca
from . import net
from . import tensor as tt
from .errors import UsageError
from .net import ModelParams
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 2.5e-4
    batch_size: int = 8
    ortho_lambda: float = 1e-4
    epochs: int = 12
    seed: int = 0
    alternation_ratio: tuple = (1, 1)  # static : video batches per cycle

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.ortho_lambda < 0:
            raise UsageError(f"ortho_lambda must be nonnegative, got {self.ortho_lambda}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be at least 1, got {self.epochs}")
        s, v = self.alternation_ratio
        if s < 0 or v < 1:
            raise UsageError(f"alternation_ratio needs nonnegative static and >=1 video, got {self.alternation_ratio}")


def weighted_bce(pred, mask: np.ndarray) -> Tensor:
    """Class-balanced binary cross entropy, summed over pixels.

    The foreground weight is (1 - eta) and the background weight eta,
    where eta is the foreground fraction of this sample's mask, clamped
    to [1e-6, 1 - 1e-6]. Predictions are clamped to [1e-7, 1 - 1e-7]
    inside the logs.
    """
    y = pred.prob if isinstance(pred, net.Prediction) else pred
    mask = np.asarray(mask, dtype=np.float64)
    if y.shape != mask.shape:
        raise UsageError(f"prediction shape {y.shape} does not match mask {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise UsageError("mask must be binary {0, 1}")
    eta = float(np.clip(mask.mean(), 1e-6, 1.0 - 1e-6))
    y_c = tt.clip(y, 1e-7, 1.0 - 1e-7)
    fg = tt.mul(tt.log(y_c), Tensor((1.0 - eta) * mask))
    bg = tt.mul(tt.log(tt.sub(Tensor(np.ones_like(mask)), y_c)), Tensor(eta * (1.0 - mask)))
    return tt.neg(tt.tensor_sum(tt.add(fg, bg)))


def _mean_loss(sample_losses: list) -> Tensor:
    if not sample_losses:
        raise UsageError("need at least one sample loss")
    acc = sample_losses[0]
    for term in sample_losses[1:]:
        acc = tt.add(acc, term)
    return tt.mul(acc, Tensor(np.asarray(1.0 / len(sample_losses))))


def total_loss(sample_losses: list, coatt: ca.CoattentionParams) -> Tensor:
    """Mean of per-sample losses plus the orthogonality penalty when the
    co-attention variant is symmetric."""
    loss = _mean_loss(sample_losses)
    if coatt.variant == "symmetric":
        loss = tt.add(loss, ca.ortho_penalty(coatt))
    return loss


def sample_pair(rng: np.random.Generator, sequence) -> tuple[int, int]:
    """A uniformly random ordered pair of distinct frame indices."""
    n = len(sequence)
    if n < 2:
        raise UsageError(f"pair sampling needs at least 2 frames, got {n}")
    a = int(rng.integers(n))
    b = int(rng.integers(n - 1))
    if b >= a:
        b += 1
    return a, b


@dataclass
class LossLogRow:
    step: int
    phase: str  # "static" | "video"
    loss: float
    ortho_penalty: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)


def write_loss_log(rows: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "phase", "loss", "ortho_penalty"])
        for row in rows:
            writer.writerow([row.step, row.phase, repr(row.loss), repr(row.ortho_penalty)])


def _sgd_step(params: ModelParams, lr: float) -> None:
    for _, p in params.named_parameters():
        if p.grad is not None:
            p.data = p.data - lr * p.grad
    params.zero_grads()


def _penalty_value(coatt: ca.CoattentionParams) -> float:
    if coatt.variant != "symmetric":
        return 0.0
    with tt.no_grad():
        return ca.ortho_penalty(coatt).item()


def steps_per_epoch(n_video_frames: int, config: TrainConfig) -> int:
    cycles = max(1, -(-n_video_frames // config.batch_size))
    s, v = config.alternation_ratio
    return cycles * (s + v)


def train(corpus, config: TrainConfig, params: ModelParams | None = None, log_hook=None) -> TrainResult:
    """Run the alternating schedule over a corpus.

    ``corpus`` must expose ``sequences("train")`` and ``static_pairs()``
    (see synthdata.Corpus). An existing ``params`` continues training;
    otherwise fresh symmetric-variant parameters are drawn from the
    config seed.
    """
    config.validate()
    train_seqs = corpus.sequences("train")
    static_pairs = corpus.static_pairs()
    if not train_seqs:
        raise UsageError("corpus has no training sequences")
    s_ratio, v_ratio = config.alternation_ratio
    if s_ratio > 0 and not static_pairs:
        raise UsageError("corpus has no static set but the schedule includes static batches")

    rng = np.random.default_rng(config.seed)
    if params is None:
        params = net.init_model_params(rng, ortho_lambda=config.ortho_lambda)

    # preloaded arrays: the corpus is desk-scale
    seq_frames = [s.load_frames() for s in train_seqs]
    seq_masks = [s.load_masks() for s in train_seqs]
    static_images = [None] * len(static_pairs)
    static_masks = [None] * len(static_pairs)
    from .synthdata import load_frame, load_mask

    for i, (img, mask) in enumerate(static_pairs):
        static_images[i] = load_frame(img)
        static_masks[i] = load_mask(mask)

    n_video_frames = sum(len(f) for f in seq_frames)
    cycles_per_epoch = max(1, -(-n_video_frames // config.batch_size))

    log: list = []
    step = 0
    for _ in range(config.epochs):
        for _ in range(cycles_per_epoch):
            for _ in range(s_ratio):
                step = _static_step(params, config, rng, static_images, static_masks, log, step, log_hook)
            for _ in range(v_ratio):
                step = _video_step(params, config, rng, seq_frames, seq_masks, log, step, log_hook)
    return TrainResult(params=params, log=log)


def _static_step(params, config, rng, images, masks, log, step, log_hook) -> int:
    losses = []
    for _ in range(config.batch_size):
        i = int(rng.integers(len(images)))
        pred = net.forward_static(params, images[i])
        losses.append(weighted_bce(pred, masks[i]))
    loss = _mean_loss(losses)
    return _finish_step(params, config, loss, "static", log, step, log_hook)


def _video_step(params, config, rng, seq_frames, seq_masks, log, step, log_hook) -> int:
    losses = []
    for _ in range(config.batch_size):
        s = int(rng.integers(len(seq_frames)))
        a, b = sample_pair(rng, seq_frames[s])
        ya, yb = net.forward_pair(params, seq_frames[s][a], seq_frames[s][b])
        losses.append(weighted_bce(ya, seq_masks[s][a]))
        losses.append(weighted_bce(yb, seq_masks[s][b]))
    loss = total_loss(losses, params.coatt)
    return _finish_step(params, config, loss, "video", log, step, log_hook)


def _finish_step(params, config, loss, phase, log, step, log_hook) -> int:
    penalty = _penalty_value(params.coatt)  # pre-update, matches the loss just built
    params.zero_grads()
    loss.backward()
    _sgd_step(params, config.learning_rate)
    row = LossLogRow(step=step, phase=phase, loss=loss.item(), ortho_penalty=penalty)
    log.append(row)
    if log_hook:
        log_hook(row)
    return step + 1
