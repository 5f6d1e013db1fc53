"""Video-level inference: reference selection and summary/prediction fusion.

Each frame of a video is segmented as a query against N reference frames
from the same video. Summary fusion averages the gated co-attention
summaries before a single decode; prediction fusion decodes once per
reference and averages the probability maps. N = 0 decodes against a zero
summary, removing co-attention from the path entirely. Every frame is
embedded exactly once per video, so reference-heavy configurations stay
cheap.
"""

from dataclasses import dataclass
import json
from pathlib import Path

import numpy as np

from . import coattention as ca
from . import net
from . import tensor as tt
from .errors import UsageError
from .net import ModelParams

STRATEGIES = ("global_uniform", "global_random", "local_consecutive")
FUSIONS = ("summary", "prediction")


@dataclass
class InferenceConfig:
    n_refs: int = 5
    strategy: str = "global_uniform"
    fusion: str = "summary"
    threshold: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_refs < 0:
            raise UsageError(f"n_refs must be nonnegative, got {self.n_refs}")
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}, pick one of {STRATEGIES}")
        if self.fusion not in FUSIONS:
            raise UsageError(f"unknown fusion {self.fusion!r}, pick one of {FUSIONS}")
        if not 0.0 < self.threshold < 1.0:
            raise UsageError(f"threshold must be inside (0, 1), got {self.threshold}")


def select_references(strategy: str, length: int, query: int, n: int, rng=None) -> list[int]:
    """Pick n reference frame indices for a query frame; the query itself is
    never selected.

    global_uniform: an evenly spaced grid over [0, length); indices that hit
    the query or repeat are shifted to the nearest unused frame (earlier
    wins ties).
    global_random: n distinct uniform draws.
    local_consecutive: the n frames nearest to the query, earlier wins ties.
    """
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}")
    if not 0 <= query < length:
        raise UsageError(f"query index {query} outside video of length {length}")
    if n > length - 1:
        raise UsageError(f"cannot pick {n} references from a video of {length} frames (query excluded)")
    if n == 0:
        return []

    if strategy == "global_random":
        if rng is None:
            raise UsageError("global_random selection needs an rng")
        pool = [i for i in range(length) if i != query]
        picks = rng.choice(len(pool), size=n, replace=False)
        return sorted(pool[i] for i in picks)

    if strategy == "local_consecutive":
        by_distance = sorted(
            (i for i in range(length) if i != query),
            key=lambda i: (abs(i - query), i),
        )
        return sorted(by_distance[:n])

    # global_uniform
    if n == 1:
        grid = [round((length - 1) / 2.0)]
    else:
        grid = [round(k * (length - 1) / (n - 1)) for k in range(n)]
    chosen: list[int] = []
    used = {query}
    for idx in grid:
        if idx not in used:
            chosen.append(idx)
            used.add(idx)
            continue
        for offset in range(1, length):
            for candidate in (idx - offset, idx + offset):
                if 0 <= candidate < length and candidate not in used:
                    chosen.append(candidate)
                    used.add(candidate)
                    break
            else:
                continue
            break
    return sorted(chosen)


@dataclass
class InferenceResult:
    probs: list  # per-frame (H, W) float64 probability maps
    masks: list  # per-frame (H, W) uint8 masks of {0, 255}


def infer_video(params: ModelParams, frames: list, config: InferenceConfig, rng=None) -> InferenceResult:
    """Segment every frame of one video."""
    config.validate()
    if not frames:
        raise UsageError("infer_video needs at least one frame")
    if config.n_refs > len(frames) - 1:
        raise UsageError(
            f"n_refs={config.n_refs} too large for a video of {len(frames)} frames"
        )
    if rng is None:
        rng = np.random.default_rng(config.seed)
    out_size = frames[0].shape[:2]
    with tt.no_grad():
        fmaps = [net.embed(params, f) for f in frames]
        probs = []
        for q in range(len(frames)):
            refs = select_references(config.strategy, len(frames), q, config.n_refs, rng)
            if not refs:
                pred = net.forward_query_features(params, fmaps[q], [], out_size)
            elif config.fusion == "summary":
                pred = net.forward_query_features(
                    params, fmaps[q], [fmaps[r] for r in refs], out_size
                )
            else:
                acc = None
                for r in refs:
                    single = net.forward_query_features(params, fmaps[q], [fmaps[r]], out_size)
                    acc = single.prob if acc is None else tt.add(acc, single.prob)
                pred = net.Prediction(prob=tt.mul(acc, tt.Tensor(np.asarray(1.0 / len(refs)))))
            probs.append(pred.array)
    masks = [(p > config.threshold).astype(np.uint8) * 255 for p in probs]
    return InferenceResult(probs=probs, masks=masks)


def run_manifest(config: InferenceConfig, checkpoint_dir, sequences: list) -> dict:
    from .net import checkpoint_digest

    return {
        "config": {
            "n_refs": config.n_refs,
            "strategy": config.strategy,
            "fusion": config.fusion,
            "threshold": config.threshold,
            "seed": config.seed,
        },
        "checkpoint_sha256": checkpoint_digest(checkpoint_dir),
        "sequences": list(sequences),
    }


def write_run_manifest(manifest: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
