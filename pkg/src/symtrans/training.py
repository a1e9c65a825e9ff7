"""Adam optimizer, synthetic volume pairs, and the unsupervised training loop.

Training pairs are synthesized on the fly from a seeded stream: a base volume
of labeled shapes is deformed by a smooth, fold-free random field, so every
pair comes with its ground-truth correspondence. One pair per iteration,
batch size 1.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .configio import from_dict, to_canonical_json
from .deformation import IntegrationConfig, integrate, jacobian_determinant, warp
from .losses import LossConfig, dice, metrics_report, total_loss, warp_labels
from .model import ModelConfig, forward, init_model_params, load_checkpoint, save_checkpoint
from .params import ParamBag
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, components):
        self.iteration = iteration
        self.components = components
        super().__init__(
            f"training diverged at iteration {iteration}: {components}"
        )


@dataclass
class SyntheticSpec:
    """Generator settings for labeled shape volumes and their deformations.

    The ground-truth field is a smooth random component (peak-normalized to
    ``warp_amplitude``) plus a global translation and a mild isotropic scaling
    about the volume center; the latter two move structures without risking
    folds, keeping the pre-registration overlap well below 1.
    """

    extents: tuple = (32, 32, 32)
    num_labels: int = 3
    shapes: str = "spheres"  # spheres | boxes | mixed
    radius_range: tuple = (4.5, 7.0)
    center_jitter: float = 1.5
    intensity_range: tuple = (0.55, 1.0)
    warp_amplitude: float = 3.0
    warp_sigma: float = 4.0
    translation_max: float = 3.25
    scale_jitter: float = 0.05
    blur_sigma: float = 1.0
    max_retries: int = 6

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.radius_range = tuple(float(r) for r in self.radius_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        if self.num_labels < 1:
            raise ValueError("num_labels must be >= 1")
        if self.shapes not in ("spheres", "boxes", "mixed"):
            raise ValueError(f"unknown shape family {self.shapes!r}")
        if self.warp_amplitude < 0:
            raise ValueError("warp_amplitude must be >= 0")
        if not 0 <= self.scale_jitter < 0.3:
            raise ValueError("scale_jitter must lie in [0, 0.3)")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 200
    seed: int = 0
    checkpoint_every: int = 100
    grad_clip: float = 0.0  # max global grad norm; 0 disables
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if tuple(self.data.extents) != tuple(self.model.input_shape):
            raise ValueError(
                f"data extents {self.data.extents} != model input "
                f"{self.model.input_shape}"
            )


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
        t=0,
    )


def adam_step(params, state: AdamState, cfg: TrainConfig) -> AdamState:
    """Standard bias-corrected Adam update, in place on the parameters."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, tns in params.items():
        if tns.grad is None:
            raise ValueError(f"adam_step: missing gradient for {name!r}")
        g = tns.grad
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        tns.data = tns.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return state


def clip_gradients(params, max_norm: float) -> float:
    total = 0.0
    for tns in params.values():
        if tns.grad is not None:
            total += float(np.sum(tns.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for tns in params.values():
            if tns.grad is not None:
                tns.grad *= np.float32(scale)
    return norm


def _canonical_centers(extents, count, rng, jitter):
    """Well-separated anchor points, jittered per sample."""
    anchors = np.array([
        (0.32, 0.34, 0.32),
        (0.68, 0.52, 0.40),
        (0.45, 0.68, 0.68),
        (0.65, 0.30, 0.66),
        (0.30, 0.62, 0.42),
    ])
    if count > len(anchors):
        extra = rng.uniform(0.25, 0.75, size=(count - len(anchors), 3))
        anchors = np.vstack([anchors, extra])
    centers = anchors[:count] * np.asarray(extents)
    return centers + rng.uniform(-jitter, jitter, size=centers.shape)


def _render_base(spec: SyntheticSpec, rng: np.random.Generator):
    grid = np.indices(spec.extents).astype(np.float64)
    image = np.zeros(spec.extents)
    labels = np.zeros(spec.extents, dtype=np.int64)
    centers = _canonical_centers(spec.extents, spec.num_labels, rng,
                                 spec.center_jitter)
    for lab, center in enumerate(centers, start=1):
        radius = rng.uniform(*spec.radius_range)
        intensity = rng.uniform(*spec.intensity_range)
        if spec.shapes == "boxes" or (spec.shapes == "mixed" and lab % 2 == 0):
            inside = np.all(
                np.abs(grid - center[:, None, None, None]) <= radius * 0.8, axis=0
            )
        else:
            r2 = sum((grid[i] - center[i]) ** 2 for i in range(3))
            inside = r2 <= radius ** 2
        image[inside] = intensity
        labels[inside] = lab
    if spec.blur_sigma > 0:
        image = gaussian_filter(image, spec.blur_sigma)
    return image.astype(np.float32), labels


def _smooth_random_field(spec: SyntheticSpec, rng: np.random.Generator,
                         amplitude: float) -> np.ndarray:
    v = rng.normal(size=(3,) + spec.extents)
    v = gaussian_filter(v, sigma=(0,) + (spec.warp_sigma,) * 3)
    peak = np.max(np.abs(v))
    if peak == 0:
        return np.zeros_like(v, dtype=np.float32)
    return (v / peak * amplitude).astype(np.float32)


def _affine_component(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    translation = rng.uniform(-spec.translation_max, spec.translation_max, size=3)
    scale = rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    grid = np.indices(spec.extents).astype(np.float64)
    center = (np.asarray(spec.extents, dtype=np.float64) - 1.0) / 2.0
    u = scale * (grid - center[:, None, None, None])
    u += translation[:, None, None, None]
    return u.astype(np.float32)


def generate_pair(spec: SyntheticSpec, rng: np.random.Generator):
    """One (moving, fixed, moving labels, fixed labels, true field) sample.

    The ground-truth field is regenerated at reduced amplitude until it is
    fold-free, so emitted pairs always have a diffeomorphic correspondence.
    """
    image, labels = _render_base(spec, rng)
    # zero amplitude means an identical pair, so it disables the affine part too
    if spec.warp_amplitude == 0:
        affine = np.zeros((3,) + spec.extents, dtype=np.float32)
    else:
        affine = _affine_component(spec, rng)
    amplitude = spec.warp_amplitude
    u_true = None
    for _ in range(spec.max_retries):
        candidate = _smooth_random_field(spec, rng, amplitude) + affine
        _, stats = jacobian_determinant(candidate)
        if stats.count == 0:
            u_true = candidate
            break
        amplitude *= 0.7
    if u_true is None:
        raise RuntimeError(
            f"could not draw a fold-free field after {spec.max_retries} tries"
        )
    moving = image[None]
    fixed = warp(Tensor(moving), Tensor(u_true)).data
    fixed_labels = warp_labels(labels, u_true)
    return moving, fixed, labels, fixed_labels, u_true


def pair_rng(seed: int, iteration: int) -> np.random.Generator:
    """The seeded stream: pair k depends only on (seed, k)."""
    return np.random.default_rng([seed, iteration])


@dataclass
class TrainResult:
    bag: ParamBag
    adam: AdamState
    curve: list
    checkpoints: list


OPT_MAGIC = b"SYMO"


def save_opt_state(path, adam: AdamState):
    with open(path, "wb") as f:
        f.write(OPT_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<Q", adam.t))
        f.write(struct.pack("<I", len(adam.m)))
        for name in adam.m:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            for arr in (adam.m[name], adam.v[name]):
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_opt_state(path) -> AdamState:
    with open(path, "rb") as f:
        if f.read(4) != OPT_MAGIC:
            raise ValueError(f"bad optimizer-state magic in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"unsupported optimizer-state version {version}")
        (t,) = struct.unpack("<Q", f.read(8))
        (count,) = struct.unpack("<I", f.read(4))
        m, v = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            arrays = []
            for _ in range(2):
                (rank,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
                n = int(np.prod(shape))
                arrays.append(
                    np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).copy()
                )
            m[name], v[name] = arrays
    return AdamState(m=m, v=v, t=t)


def train(cfg: TrainConfig, out_dir=None, resume=None, log=None) -> TrainResult:
    """Run the unsupervised loop: forward, loss, backward, Adam, checkpoints.

    ``resume`` names a checkpoint stem (without extension) written by a
    previous run; the step counter, parameters, and moments all continue.
    Raises :class:`TrainingDiverged` on non-finite losses or when the
    50-iteration moving average exceeds twice its running minimum.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ckpt_cfg, bag, params = load_checkpoint(str(resume) + ".symt")
        if ckpt_cfg != cfg.model:
            raise ValueError("resume checkpoint config differs from cfg.model")
        adam = load_opt_state(str(resume) + ".opt")
    else:
        bag, params = init_model_params(cfg.model, np.random.default_rng(cfg.seed))
        adam = init_adam(bag.tensors)

    curve = []
    checkpoints = []
    window = []
    ma_min = None

    def write_checkpoint(step):
        if out_path is None:
            return
        stem = out_path / f"checkpoint_{step:06d}"
        save_checkpoint(f"{stem}.symt", cfg.model, bag)
        save_opt_state(f"{stem}.opt", adam)
        checkpoints.append(str(stem))

    if adam.t == 0:
        write_checkpoint(0)

    start = adam.t
    for it in range(start, cfg.iterations):
        rng = pair_rng(cfg.seed, it)
        moving, fixed, _, _, _ = generate_pair(cfg.data, rng)
        bag.zero_grads()
        raw = forward(Tensor(moving), Tensor(fixed), params, cfg.model)
        loss, comp = total_loss(Tensor(moving), Tensor(fixed), raw,
                                cfg.loss, cfg.model.mode)
        if not np.isfinite(comp["loss"]):
            raise TrainingDiverged(it, comp)
        loss.backward()
        if cfg.grad_clip > 0:
            clip_gradients(bag.tensors, cfg.grad_clip)
        adam_step(bag.tensors, adam, cfg)
        curve.append((it + 1, comp["loss"], comp["loss_sim"], comp["loss_reg"]))
        if log is not None and (it + 1) % log == 0:
            print(f"iter {it + 1:6d}  loss {comp['loss']:.6f}  "
                  f"sim {comp['loss_sim']:.6f}  reg {comp['loss_reg']:.6f}")

        window.append(comp["loss"])
        if len(window) > 50:
            window.pop(0)
        if len(window) == 50:
            ma = float(np.mean(window))
            ma_min = ma if ma_min is None else min(ma_min, ma)
            if ma > 2.0 * ma_min:
                raise TrainingDiverged(it, {"moving_average": ma, "min": ma_min})

        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iterations:
            write_checkpoint(it + 1)

    if out_path is not None:
        write_curve(out_path / "loss.csv", curve)
    return TrainResult(bag=bag, adam=adam, curve=curve, checkpoints=checkpoints)


def write_curve(path, curve):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "loss_sim", "loss_reg"])
        for row in curve:
            writer.writerow([row[0], repr(float(row[1])), repr(float(row[2])),
                             repr(float(row[3]))])


def register(moving: np.ndarray, fixed: np.ndarray, params, cfg: ModelConfig,
             mode: str | None = None, loss_cfg: LossConfig | None = None,
             moving_labels=None, fixed_labels=None):
    """Single registration pass: field, warped volume, and a metrics bundle."""
    mode = mode or cfg.mode
    loss_cfg = loss_cfg or LossConfig()
    raw = forward(Tensor(moving), Tensor(fixed), params, cfg)
    if mode == "diffeomorphic":
        u = integrate(raw, loss_cfg.integration)
    elif mode == "displacement":
        u = raw
    else:
        raise ValueError(f"unknown registration mode {mode!r}")
    warped = warp(Tensor(moving), u)
    from .losses import similarity_loss, smoothness_loss

    sim = float(similarity_loss(warped, Tensor(fixed.astype(warped.data.dtype))).data)
    reg = float(smoothness_loss(u).data)
    components = {
        "loss": sim + loss_cfg.lambda_reg * reg,
        "loss_sim": sim,
        "loss_reg": reg,
    }
    metrics = metrics_report(u.data, components,
                             moving_labels=moving_labels,
                             fixed_labels=fixed_labels)
    return u.data, warped.data, metrics
