"""Detector training: plain SGD over single or fused observations.

Two strategies share everything except the forward pass. Single-vehicle
training (the conventional baseline) shows the network one observation at a
time. Cooperative training runs the shared encoder on an ego observation
plus one or more paired coop observations, fuses the grids exactly like the
feature-sharing pipeline does at inference, and backpropagates the one loss
through every branch into the same weights, so the network learns features
that survive aggregation at the fusion multiplicities it will see.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from coopsim.aggregate import AGGREGATION_MODES, aggregate, aggregate_backward
from coopsim.align import FeatureGrid, place_on_canvas
from coopsim.bev import BevImage, GridSpec, cloud_to_global
from coopsim.dataio import ObservationFrame
from coopsim.detector import Box, LossWeights, default_anchors, loss
from coopsim.nn.network import Network, backward_layers
from coopsim.pipelines import Participant, padded_bev, truths_for_ego
from coopsim.rng import substream

__all__ = [
    "STRATEGIES",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "PairedSample",
    "pair_observations",
    "train",
]

log = logging.getLogger(__name__)

STRATEGIES = ("svt", "cvt")


class TrainingDiverged(RuntimeError):
    """Loss exploded or went non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "svt"
    epochs: int = 40
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    decay_at: tuple[float, float] = (0.6, 0.85)  # epoch fractions, x0.1 each
    aggregation: str = "sum"  # cvt fusion mode
    pair_radius_m: float = 40.0
    pair_coops: int = 1  # cvt: coops per sample drawn uniform from 1..this
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


@dataclass(frozen=True)
class PairedSample:
    """One training sample: an ego observation, optionally with coops."""

    frame_idx: int
    ego_id: int
    coop_ids: tuple[int, ...] = ()  # empty = single-vehicle sample


@dataclass
class TrainResult:
    curve: list[tuple[int, float]]  # (step, batch mean loss)
    samples: int
    skipped: int  # observations with no eligible coop (cvt only)


def _mutual_target(
    frame: ObservationFrame, ego_id: int, coop_id: int, radius: float
) -> bool:
    pe, pc = frame.poses[ego_id], frame.poses[coop_id]
    for _cls, box in frame.truths:
        if (
            math.hypot(box.cx - pe.x, box.cy - pe.y) < 1e-6
            or math.hypot(box.cx - pc.x, box.cy - pc.y) < 1e-6
        ):
            continue  # a vehicle is not its own target
        if (
            math.hypot(box.cx - pe.x, box.cy - pe.y) <= radius
            and math.hypot(box.cx - pc.x, box.cy - pc.y) <= radius
        ):
            return True
    return False


def pair_observations(
    frames: list[ObservationFrame], radius_m: float, seed: int,
    max_coops: int = 1,
) -> tuple[list[PairedSample], int]:
    """Pair every observation with uniformly drawn eligible coops.

    Eligible: within radius_m of the ego and sharing at least one mutual
    target inside that radius of both. Each sample draws its coop count
    uniformly from 1..max_coops (capped by how many are eligible), then that
    many distinct coops. Observations with no eligible coop are skipped and
    counted.
    """
    samples: list[PairedSample] = []
    skipped = 0
    for fi, frame in enumerate(frames):
        vids = sorted(frame.clouds)
        for ego_id in vids:
            pe = frame.poses[ego_id]
            eligible = [
                vid
                for vid in vids
                if vid != ego_id
                and math.hypot(
                    frame.poses[vid].x - pe.x, frame.poses[vid].y - pe.y
                )
                <= radius_m
                and _mutual_target(frame, ego_id, vid, radius_m)
            ]
            if not eligible:
                skipped += 1
                continue
            rng = substream(seed, "train.pairing", fi, ego_id)
            k = min(int(rng.integers(1, max_coops + 1)), len(eligible))
            picks = rng.choice(len(eligible), size=k, replace=False)
            samples.append(
                PairedSample(fi, ego_id, tuple(eligible[i] for i in sorted(picks)))
            )
    if skipped:
        log.info("pairing skipped %d observations with no eligible coop", skipped)
    return samples, skipped


def _observation_bev(
    frame: ObservationFrame, vid: int, spec: GridSpec, downsample: int
) -> BevImage:
    pose = frame.poses[vid]
    return padded_bev(
        cloud_to_global(frame.clouds[vid], pose), pose, spec, downsample, tma=True
    )


def _sample_truths(frame: ObservationFrame, ego_id: int) -> list[tuple[int, Box]]:
    ego = Participant(ego_id, frame.poses[ego_id], frame.clouds[ego_id])
    return truths_for_ego(frame.truths, ego)


def svt_gradients(
    net: Network,
    bev: BevImage,
    truths: list[tuple[int, Box]],
    spec: GridSpec,
    weights: LossWeights,
) -> float:
    """One single-observation forward/backward; grads accumulate in net."""
    out, caches = net.forward(bev.data, train=True)
    value, dout = loss(
        out, truths, default_anchors(), bev.extent, net.downsample,
        spec.meters_per_px, weights,
    )
    net.backward(dout, caches)
    return value


def cvt_gradients(
    net: Network,
    ego_bev: BevImage,
    coop_bevs: list[BevImage],
    truths: list[tuple[int, Box]],
    spec: GridSpec,
    weights: LossWeights,
    mode: str,
) -> float:
    """One fused forward/backward; all branches share the encoder weights,
    so their gradient contributions accumulate into the same arrays."""
    down = net.downsample
    branches = [net.encode(ego_bev.data, train=True)]
    branches += [net.encode(b.data, train=True) for b in coop_bevs]
    grids = [
        FeatureGrid(feats, bev.extent, down, source=i)
        for i, (bev, (feats, _caches)) in enumerate(
            zip([ego_bev] + coop_bevs, branches)
        )
    ]
    canvas, offsets = place_on_canvas(grids)
    fused, cache = aggregate(grids, mode, canvas, offsets)
    r0, c0 = offsets[0]
    h, w = grids[0].values.shape[:2]
    window = fused.values[r0 : r0 + h, c0 : c0 + w]
    out, head_caches = net.head_forward(window, train=True)
    value, dout = loss(
        out, truths, default_anchors(), ego_bev.extent, down,
        spec.meters_per_px, weights,
    )
    dwindow = backward_layers(net.head, dout, head_caches)
    dcanvas = np.zeros(fused.values.shape)
    dcanvas[r0 : r0 + h, c0 : c0 + w] = dwindow
    dgrids = aggregate_backward(cache, dcanvas)
    for dgrid, (_feats, caches) in zip(dgrids, branches):
        backward_layers(net.encoder, dgrid, caches)
    return value


def _learning_rate(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.learning_rate
    for fraction in cfg.decay_at:
        if epoch >= math.floor(fraction * cfg.epochs):
            lr *= 0.1
    return lr


def train(
    frames: list[ObservationFrame],
    net: Network,
    spec: GridSpec,
    cfg: TrainConfig,
    start_epoch: int = 0,
) -> TrainResult:
    """SGD with momentum over all observations, cfg.epochs passes.

    Deterministic given (frames, initial weights, cfg): sample order and
    pairing derive from cfg.seed via named substreams.
    """
    if cfg.strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {cfg.strategy!r}")
    if cfg.aggregation not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {cfg.aggregation!r}")
    if cfg.strategy == "cvt":
        samples, skipped = pair_observations(frames, cfg.pair_radius_m, cfg.seed)
    else:
        samples = [
            PairedSample(fi, vid)
            for fi, frame in enumerate(frames)
            for vid in sorted(frame.clouds)
        ]
        skipped = 0
    if not samples:
        raise ValueError("no trainable observations in the dataset")

    bev_cache: dict[tuple[int, int], BevImage] = {}

    def bev_of(fi: int, vid: int) -> BevImage:
        key = (fi, vid)
        if key not in bev_cache:
            bev_cache[key] = _observation_bev(frames[fi], vid, spec, net.downsample)
        return bev_cache[key]

    velocity = {
        (i, name): np.zeros_like(value) for i, name, value, _g in net.params()
    }
    curve: list[tuple[int, float]] = []
    step = start_epoch * ((len(samples) + cfg.batch_size - 1) // cfg.batch_size)
    for epoch in range(start_epoch, cfg.epochs):
        lr = _learning_rate(cfg, epoch)
        order = substream(cfg.seed, "train.order", epoch).permutation(len(samples))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[lo : lo + cfg.batch_size]]
            net.zero_grads()
            total = 0.0
            for s in batch:
                truths = _sample_truths(frames[s.frame_idx], s.ego_id)
                if cfg.strategy == "cvt":
                    value = cvt_gradients(
                        net,
                        bev_of(s.frame_idx, s.ego_id),
                        bev_of(s.frame_idx, s.coop_id),
                        truths, spec, cfg.loss_weights, cfg.aggregation,
                    )
                else:
                    value = svt_gradients(
                        net, bev_of(s.frame_idx, s.ego_id), truths, spec,
                        cfg.loss_weights,
                    )
                if not math.isfinite(value) or value > 1e6:
                    raise TrainingDiverged(
                        f"loss {value} at epoch {epoch} step {step} "
                        f"(frame {s.frame_idx}, ego {s.ego_id})"
                    )
                total += value
            scale = 1.0 / len(batch)
            for i, name, value_arr, grad in net.params():
                v = velocity[(i, name)]
                v *= cfg.momentum
                v += grad * scale
                value_arr -= lr * v
            curve.append((step, total / len(batch)))
            step += 1
    return TrainResult(curve=curve, samples=len(samples), skipped=skipped)
