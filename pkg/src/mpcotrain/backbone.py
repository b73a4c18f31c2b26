"""Per-plane 2D segmenters: a trainable softmax reference model.

The reference model classifies each pixel of a multi-channel slice from a
small handcrafted feature vector: the channel values at the pixel, mean
channel values over square patches of a few radii (edge-clamped at slice
borders), and the pixel's normalized row/column position.  On top of the
features sits either a linear softmax layer or, optionally, one tanh hidden
layer trained by manual backprop.

The pipeline only requires the duck-typed surface ``num_classes``,
``forward`` and ``predict_hard`` from a model, so any drop-in segmenter
with those members runs end to end.

Numerics: parameters are stored float32 (matching the weights file format),
all forward/gradient math runs in float64, and updates are quantized back
to float32.  Probabilities are clamped to ``PROB_FLOOR`` before any log.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .planar import Plane

PROB_FLOOR = 1e-12
WEIGHTS_FORMAT_VERSION = 1
_WEIGHTS_MAGIC = b"DMPW"

# Hidden-layer parameters are drawn uniformly from +-HIDDEN_INIT_SPAN;
# the pure linear model starts from exact zeros.
HIDDEN_INIT_SPAN = 0.05


class WeightsFormatError(ValueError):
    """Raised on malformed model weight files."""


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient stops being finite during training."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss/gradient at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class PatchFeatureSpec:
    """Defines the per-pixel feature vector layout.

    Feature order: the C channel values at the pixel; then for each pooling
    radius r the C patch-mean values over the (2r+1)^2 edge-clamped square;
    then, if enabled, (row / n_rows, col / n_cols).
    """

    channels: int = 3
    pooling_radii: tuple[int, ...] = (1, 2, 4)
    include_coords: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("need at least one channel")
        radii = tuple(int(r) for r in self.pooling_radii)
        if any(r < 1 for r in radii):
            raise ValueError(f"pooling radii must be >= 1, got {radii}")
        object.__setattr__(self, "pooling_radii", radii)

    @property
    def feature_dim(self) -> int:
        return self.channels * (1 + len(self.pooling_radii)) + 2 * bool(self.include_coords)


def feature_maps(slices: np.ndarray, spec: PatchFeatureSpec) -> np.ndarray:
    """Featurize a stack of channelized slices.

    Args:
        slices: float array of shape ``(N, h, w, C)``.
        spec: feature layout.

    Returns:
        float32 array of shape ``(N, h, w, feature_dim)``.
    """
    arr = np.asarray(slices, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected (N, h, w, C) slices, got shape {arr.shape}")
    n, h, w, c = arr.shape
    if c != spec.channels:
        raise ValueError(f"slices have {c} channels, spec expects {spec.channels}")
    parts = [arr]
    for r in spec.pooling_radii:
        size = (1, 2 * r + 1, 2 * r + 1, 1)
        parts.append(ndimage.uniform_filter(arr, size=size, mode="nearest"))
    if spec.include_coords:
        rows = np.broadcast_to((np.arange(h, dtype=np.float32) / h)[None, :, None, None], (n, h, w, 1))
        cols = np.broadcast_to((np.arange(w, dtype=np.float32) / w)[None, None, :, None], (n, h, w, 1))
        parts.extend([rows, cols])
    return np.concatenate(parts, axis=-1)


def featurize(slice_chw: np.ndarray, spec: PatchFeatureSpec, pixel: tuple[int, int]) -> np.ndarray:
    """Feature vector for one pixel of one channelized slice.

    Args:
        slice_chw: float array of shape ``(h, w, C)``.
        pixel: (row, col) position.

    Raises:
        IndexError: if the pixel lies outside the slice.
    """
    arr = np.asarray(slice_chw)
    if arr.ndim != 3:
        raise ValueError(f"expected an (h, w, C) slice, got shape {arr.shape}")
    r, c = int(pixel[0]), int(pixel[1])
    h, w = arr.shape[:2]
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"pixel {(r, c)} outside slice of shape {(h, w)}")
    return feature_maps(arr[None], spec)[0, r, c].copy()


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_core(params: dict[str, np.ndarray | None], feats: np.ndarray):
    """float64 forward pass over flat features (n, F) -> (probs, hidden)."""
    x = feats
    hidden = None
    if params["hidden_w"] is not None:
        hidden = np.tanh(x @ params["hidden_w"].T + params["hidden_b"])
        x = hidden
    probs = _softmax(x @ params["out_w"].T + params["out_b"])
    return probs, hidden


def _loss_core(params, feats: np.ndarray, labels: np.ndarray) -> float:
    probs, _ = _forward_core(params, feats)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def _loss_and_grads_core(params, feats: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the given pixels plus analytic gradients.

    The per-pixel, per-class gradient of the objective with respect to the
    output layer is ``(p_k - [y == k]) * input_k`` scaled by 1/n, n being
    the number of pixels contributing to the mean.
    """
    n = len(labels)
    probs, hidden = _forward_core(params, feats)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    x = hidden if hidden is not None else feats
    grads = {
        "out_w": delta.T @ x,
        "out_b": delta.sum(axis=0),
        "hidden_w": None,
        "hidden_b": None,
    }
    if hidden is not None:
        dh = (delta @ params["out_w"]) * (1.0 - hidden * hidden)
        grads["hidden_w"] = dh.T @ feats
        grads["hidden_b"] = dh.sum(axis=0)
    return loss, grads


@dataclass(frozen=True, eq=False)
class SoftmaxSegmenter:
    """Trained state of the reference per-plane segmenter.

    Attributes:
        out_weights: (K+1, F_in) float32; F_in is the feature dim for the
            linear model or the hidden width otherwise.
        out_bias: (K+1,) float32.
        hidden_weights / hidden_bias: tanh layer parameters, or None.
        feature_spec: feature layout used at train and inference time.
        num_classes: K, organ count excluding background.
        rng_seed: seed the training run derived its randomness from.
        step_count: SGD steps applied to reach this state.
    """

    out_weights: np.ndarray
    out_bias: np.ndarray
    hidden_weights: np.ndarray | None
    hidden_bias: np.ndarray | None
    feature_spec: PatchFeatureSpec
    num_classes: int
    rng_seed: int = 0
    step_count: int = 0

    def __post_init__(self):
        ow = np.ascontiguousarray(self.out_weights, dtype=np.float32)
        ob = np.ascontiguousarray(self.out_bias, dtype=np.float32)
        k1 = self.num_classes + 1
        if ob.shape != (k1,) or ow.ndim != 2 or ow.shape[0] != k1:
            raise ValueError(
                f"output layer shapes {ow.shape}/{ob.shape} do not match K={self.num_classes}"
            )
        expected_in = self.feature_spec.feature_dim
        hw, hb = self.hidden_weights, self.hidden_bias
        if (hw is None) != (hb is None):
            raise ValueError("hidden weights and bias must be given together")
        if hw is not None:
            hw = np.ascontiguousarray(hw, dtype=np.float32)
            hb = np.ascontiguousarray(hb, dtype=np.float32)
            if hw.ndim != 2 or hw.shape[1] != expected_in or hb.shape != (hw.shape[0],):
                raise ValueError(f"hidden layer shapes {hw.shape}/{hb.shape} are inconsistent")
            expected_in = hw.shape[0]
        if ow.shape[1] != expected_in:
            raise ValueError(f"output layer expects {expected_in} inputs, got {ow.shape[1]}")
        arrays = {"out_weights": ow, "out_bias": ob, "hidden_weights": hw, "hidden_bias": hb}
        for name, arr in arrays.items():
            if arr is not None and not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "out_weights", ow)
        object.__setattr__(self, "out_bias", ob)
        object.__setattr__(self, "hidden_weights", hw)
        object.__setattr__(self, "hidden_bias", hb)

    @property
    def hidden_units(self) -> int:
        return 0 if self.hidden_weights is None else int(self.hidden_weights.shape[0])

    def _params64(self) -> dict[str, np.ndarray | None]:
        return {
            "out_w": self.out_weights.astype(np.float64),
            "out_b": self.out_bias.astype(np.float64),
            "hidden_w": None if self.hidden_weights is None else self.hidden_weights.astype(np.float64),
            "hidden_b": None if self.hidden_bias is None else self.hidden_bias.astype(np.float64),
        }

    def _check_slice(self, slice_chw: np.ndarray) -> np.ndarray:
        arr = np.asarray(slice_chw)
        if arr.ndim != 3 or arr.shape[2] != self.feature_spec.channels:
            raise ValueError(
                f"expected (h, w, {self.feature_spec.channels}) slice, got shape {arr.shape}"
            )
        return arr

    def forward(self, slice_chw: np.ndarray) -> np.ndarray:
        """Per-pixel class probabilities for one slice: (h, w, K+1) float32."""
        return self.forward_stack(self._check_slice(slice_chw)[None])[0]

    def forward_stack(self, slices: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`forward` over a (N, h, w, C) stack."""
        feats = feature_maps(slices, self.feature_spec).astype(np.float64)
        n, h, w, f = feats.shape
        probs, _ = _forward_core(self._params64(), feats.reshape(n * h * w, f))
        return probs.reshape(n, h, w, -1).astype(np.float32)

    def predict_hard(self, slice_chw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hard labels and confidences for one slice.

        Returns:
            (labels, confidences): uint8 (h, w) argmax labels (ties resolved
            to the lowest class index) and float32 (h, w) max probability.
        """
        labels, conf = self.predict_hard_stack(self._check_slice(slice_chw)[None])
        return labels[0], conf[0]

    def predict_hard_stack(self, slices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`predict_hard` over a (N, h, w, C) stack."""
        feats = feature_maps(slices, self.feature_spec).astype(np.float64)
        n, h, w, f = feats.shape
        probs, _ = _forward_core(self._params64(), feats.reshape(n * h * w, f))
        labels = probs.argmax(axis=-1).astype(np.uint8)
        conf = probs.max(axis=-1).astype(np.float32)
        return labels.reshape(n, h, w), conf.reshape(n, h, w)

    def _flat_examples(self, slice_chw, label_hw):
        arr = self._check_slice(slice_chw)
        lab = np.asarray(label_hw)
        if lab.shape != arr.shape[:2]:
            raise ValueError(f"labels shape {lab.shape} does not match slice {arr.shape[:2]}")
        if lab.min() < 0 or lab.max() > self.num_classes:
            raise ValueError(
                f"labels must lie in 0..{self.num_classes}, got max {int(lab.max())}"
            )
        feats = feature_maps(arr[None], self.feature_spec)[0]
        f = feats.shape[-1]
        return feats.reshape(-1, f).astype(np.float64), lab.reshape(-1).astype(np.int64)

    def loss(self, slice_chw: np.ndarray, label_hw: np.ndarray) -> float:
        """Mean per-pixel cross-entropy of one fully labeled slice.

        Equals ``-(1 / (w*h)) * sum_i sum_k [y_i == k] * log p_ik`` with
        natural logs and probabilities clamped at ``PROB_FLOOR``.
        """
        feats, labels = self._flat_examples(slice_chw, label_hw)
        return _loss_core(self._params64(), feats, labels)

    def sgd_step(self, batch: Sequence[tuple[np.ndarray, np.ndarray]], learning_rate: float) -> "SoftmaxSegmenter":
        """One SGD update on a mini-batch of fully labeled slices.

        The gradient is the per-slice pixel-mean gradient averaged over the
        batch.  ``learning_rate=0`` returns an identical state (step count
        aside).  Raises :class:`TrainingDivergedError` on non-finite values.
        """
        if not batch:
            raise ValueError("empty mini-batch")
        if learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {learning_rate}")
        params = self._params64()
        total = None
        loss_sum = 0.0
        for slice_chw, label_hw in batch:
            feats, labels = self._flat_examples(slice_chw, label_hw)
            loss, grads = _loss_and_grads_core(params, feats, labels)
            loss_sum += loss
            if total is None:
                total = grads
            else:
                for key, g in grads.items():
                    if g is not None:
                        total[key] = total[key] + g
        scale = 1.0 / len(batch)
        mean_loss = loss_sum * scale
        finite = np.isfinite(mean_loss) and all(
            g is None or np.isfinite(g).all() for g in total.values()
        )
        if not finite:
            raise TrainingDivergedError(self.step_count, mean_loss)
        new = _apply_update(params, total, learning_rate * scale)
        return SoftmaxSegmenter(
            out_weights=new["out_w"],
            out_bias=new["out_b"],
            hidden_weights=new["hidden_w"],
            hidden_bias=new["hidden_b"],
            feature_spec=self.feature_spec,
            num_classes=self.num_classes,
            rng_seed=self.rng_seed,
            step_count=self.step_count + 1,
        )


def _apply_update(params, grads, scaled_lr: float) -> dict[str, np.ndarray | None]:
    out = {}
    for key in ("out_w", "out_b", "hidden_w", "hidden_b"):
        p = params[key]
        if p is None:
            out[key] = None
        else:
            out[key] = (p - scaled_lr * grads[key]).astype(np.float32)
    return out


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run of the reference model.

    ``pixels_per_slice=0`` disables subsampling (every pixel of a visited
    slice contributes).  ``hidden_units=0`` selects the pure linear model.
    """

    num_classes: int
    iterations: int = 10000
    learning_rate: float = 0.1
    batch_slices: int = 2
    pixels_per_slice: int = 512
    hidden_units: int = 0
    feature_spec: PatchFeatureSpec = field(default_factory=PatchFeatureSpec)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_slices < 1:
            raise ValueError("batch_slices must be >= 1")
        if self.pixels_per_slice < 0:
            raise ValueError("pixels_per_slice must be >= 0 (0 = all pixels)")
        if self.hidden_units < 0:
            raise ValueError("hidden_units must be >= 0")


def initial_state(config: TrainConfig, seed: int) -> SoftmaxSegmenter:
    """Seeded initial model: exact zeros (linear) or uniform +-0.05 (hidden)."""
    spec = config.feature_spec
    k1 = config.num_classes + 1
    f = spec.feature_dim
    if config.hidden_units == 0:
        hw = hb = None
        ow = np.zeros((k1, f), dtype=np.float32)
        ob = np.zeros(k1, dtype=np.float32)
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        span = HIDDEN_INIT_SPAN
        hw = rng.uniform(-span, span, size=(config.hidden_units, f)).astype(np.float32)
        hb = rng.uniform(-span, span, size=config.hidden_units).astype(np.float32)
        ow = rng.uniform(-span, span, size=(k1, config.hidden_units)).astype(np.float32)
        ob = rng.uniform(-span, span, size=k1).astype(np.float32)
    return SoftmaxSegmenter(
        out_weights=ow,
        out_bias=ob,
        hidden_weights=hw,
        hidden_bias=hb,
        feature_spec=spec,
        num_classes=config.num_classes,
        rng_seed=int(seed) & 0xFFFFFFFFFFFFFFFF,
        step_count=0,
    )


def train_segmenter(
    slices: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    config: TrainConfig,
    seed: int,
    init: SoftmaxSegmenter | None = None,
) -> tuple[SoftmaxSegmenter, list[float]]:
    """Train the reference model by mini-batch SGD.

    Slice order is reshuffled every epoch and, when subsampling is on, each
    visited slice contributes a fresh seeded sample of pixels.  The result
    is a deterministic function of (data, config, seed, init).

    Args:
        slices: channelized slices, each (h, w, C) with shared dims.
        labels: matching uint8 label slices, each (h, w).
        config: hyperparameters; ``config.iterations`` SGD steps are run.
        seed: child seed for shuffling, subsampling and initialization.
        init: warm-start state; default is :func:`initial_state`.

    Returns:
        (model, loss_curve): final state and the pre-update mini-batch loss
        at every step.

    Raises:
        ValueError: on an empty or inconsistent training set.
        TrainingDivergedError: if the loss or a gradient goes non-finite.
    """
    if len(slices) == 0:
        raise ValueError("cannot train on an empty slice set")
    if len(slices) != len(labels):
        raise ValueError(f"{len(slices)} slices vs {len(labels)} label slices")
    stack = np.stack([np.asarray(s, dtype=np.float32) for s in slices])
    lab = np.stack([np.asarray(l) for l in labels])
    if lab.shape != stack.shape[:3]:
        raise ValueError(f"label stack shape {lab.shape} does not match slices {stack.shape[:3]}")
    if lab.min() < 0 or lab.max() > config.num_classes:
        raise ValueError(
            f"labels must lie in 0..{config.num_classes}, got "
            f"[{int(lab.min())}, {int(lab.max())}]"
        )

    model = init if init is not None else initial_state(config, seed)
    if init is not None:
        if init.feature_spec != config.feature_spec or init.num_classes != config.num_classes:
            raise ValueError("warm-start state does not match the training config")
    if config.iterations == 0:
        return model, []

    feats = feature_maps(stack, config.feature_spec)
    n, h, w, f = feats.shape
    flat_feats = feats.reshape(n, h * w, f)
    flat_labels = lab.reshape(n, h * w).astype(np.int64)
    n_pixels = h * w
    sample = config.pixels_per_slice if 0 < config.pixels_per_slice < n_pixels else 0

    rng = np.random.Generator(np.random.PCG64(seed))
    params = model._params64()
    order: list[int] = []
    curve: list[float] = []
    step_count = model.step_count
    for step in range(config.iterations):
        while len(order) < config.batch_slices:
            order.extend(rng.permutation(n).tolist())
        picked, order = order[: config.batch_slices], order[config.batch_slices :]
        feat_rows = []
        label_rows = []
        for idx in picked:
            if sample:
                px = rng.choice(n_pixels, size=sample, replace=False)
                feat_rows.append(flat_feats[idx, px])
                label_rows.append(flat_labels[idx, px])
            else:
                feat_rows.append(flat_feats[idx])
                label_rows.append(flat_labels[idx])
        batch_feats = np.concatenate(feat_rows).astype(np.float64)
        batch_labels = np.concatenate(label_rows)
        loss, grads = _loss_and_grads_core(params, batch_feats, batch_labels)
        curve.append(loss)
        if not np.isfinite(loss) or any(
            g is not None and not np.isfinite(g).all() for g in grads.values()
        ):
            raise TrainingDivergedError(step_count + step, loss)
        for key, g in grads.items():
            if g is not None:
                params[key] = params[key] - config.learning_rate * g
    quantized = {
        key: None if p is None else p.astype(np.float32) for key, p in params.items()
    }
    final = SoftmaxSegmenter(
        out_weights=quantized["out_w"],
        out_bias=quantized["out_b"],
        hidden_weights=quantized["hidden_w"],
        hidden_bias=quantized["hidden_b"],
        feature_spec=config.feature_spec,
        num_classes=config.num_classes,
        rng_seed=int(seed) & 0xFFFFFFFFFFFFFFFF,
        step_count=step_count + config.iterations,
    )
    return final, curve


_PLANE_TAGS = {Plane.SAGITTAL: 0, Plane.CORONAL: 1, Plane.AXIAL: 2}
_TAG_PLANES = {v: k for k, v in _PLANE_TAGS.items()}


def save_model(model: SoftmaxSegmenter, path: str | Path, plane: Plane) -> None:
    """Write a model in the DMPW format (little-endian, row-major float32)."""
    spec = model.feature_spec
    parts = [
        struct.pack(
            "<4sHBH",
            _WEIGHTS_MAGIC,
            WEIGHTS_FORMAT_VERSION,
            _PLANE_TAGS[Plane(plane)],
            model.num_classes,
        ),
        struct.pack("<BB", spec.channels, len(spec.pooling_radii)),
        struct.pack(f"<{len(spec.pooling_radii)}H", *spec.pooling_radii)
        if spec.pooling_radii
        else b"",
        struct.pack("<B", 1 if spec.include_coords else 0),
        struct.pack("<HQQ", model.hidden_units, model.rng_seed, model.step_count),
    ]
    if model.hidden_weights is not None:
        parts.append(model.hidden_weights.astype("<f4", copy=False).tobytes())
        parts.append(model.hidden_bias.astype("<f4", copy=False).tobytes())
    parts.append(model.out_weights.astype("<f4", copy=False).tobytes())
    parts.append(model.out_bias.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> tuple[SoftmaxSegmenter, Plane]:
    """Read a DMPW file back into (model, plane).

    Raises:
        WeightsFormatError: on bad magic, version, plane tag, truncation or
            trailing bytes, naming the file.
    """
    buf = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise WeightsFormatError(f"truncated weights file: {path}")
        out = buf[off : off + n]
        off += n
        return out

    magic, version, plane_tag, k = struct.unpack("<4sHBH", take(9))
    if magic != _WEIGHTS_MAGIC:
        raise WeightsFormatError(f"not a DMPW file: {path}")
    if version != WEIGHTS_FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported DMPW version {version}: {path}")
    if plane_tag not in _TAG_PLANES:
        raise WeightsFormatError(f"unknown plane tag {plane_tag}: {path}")
    channels, n_radii = struct.unpack("<BB", take(2))
    radii = struct.unpack(f"<{n_radii}H", take(2 * n_radii)) if n_radii else ()
    (coords,) = struct.unpack("<B", take(1))
    hidden_units, rng_seed, step_count = struct.unpack("<HQQ", take(18))
    spec = PatchFeatureSpec(
        channels=channels, pooling_radii=radii, include_coords=bool(coords)
    )

    def read_f32(shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()

    f = spec.feature_dim
    if hidden_units:
        hw = read_f32((hidden_units, f))
        hb = read_f32((hidden_units,))
        in_dim = hidden_units
    else:
        hw = hb = None
        in_dim = f
    ow = read_f32((k + 1, in_dim))
    ob = read_f32((k + 1,))
    if off != len(buf):
        raise WeightsFormatError(f"weights file has {len(buf) - off} trailing bytes: {path}")
    model = SoftmaxSegmenter(
        out_weights=ow,
        out_bias=ob,
        hidden_weights=hw,
        hidden_bias=hb,
        feature_spec=spec,
        num_classes=k,
        rng_seed=rng_seed,
        step_count=step_count,
    )
    return model, _TAG_PLANES[plane_tag]
