"""Optimization loop, Adam, evaluation and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ContractError, NonFiniteError
from .losses import LossWeights, PerceptualNet, loss_overall
from .metrics import MetricsReport
from .model import SCALES, HyperTransformerNet, ModelConfig, bicubic_baseline
from .pipeline import DEFAULT_SIGMA, Patch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 500
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_rec: float = 1.0
    lambda_vgg_per: float = 0.1
    lambda_t_per: float = 0.05
    scales: tuple[int, ...] = SCALES
    attention_bypass: bool = False
    heads: int = 16
    beta: float = 0.25
    scale_beta: bool = True
    fe_channels: tuple[int, int, int] = (32, 64, 128)
    residual_blocks: tuple[int, int, int] = (2, 2, 2)
    mean_mode: str = "global"
    softmax_dim: int = 2
    upsampler: str = "transposed"
    tail_init_gain: float = 0.0
    perceptual_tap: int = 3
    perceptual_seed: int = 1234
    perceptual_weights: str | None = None
    sigma: float = DEFAULT_SIGMA
    checkpoint_every: int = 50
    dtype: str = "float64"

    def __post_init__(self):
        self.scales = tuple(sorted(int(s) for s in self.scales))
        self.fe_channels = tuple(self.fe_channels)
        self.residual_blocks = tuple(self.residual_blocks)
        if not self.learning_rate >= 0:
            raise ContractError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ContractError("dtype must be float32 or float64")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_rec, self.lambda_vgg_per, self.lambda_t_per)

    def model_config(self, bands: int, hr_size) -> ModelConfig:
        return ModelConfig(
            bands=bands, hr_size=tuple(hr_size), fe_channels=self.fe_channels,
            residual_blocks=self.residual_blocks, heads=self.heads, beta=self.beta,
            scale_beta=self.scale_beta, scales=self.scales,
            attention_bypass=self.attention_bypass, mean_mode=self.mean_mode,
            softmax_dim=self.softmax_dim, upsampler=self.upsampler,
            tail_init_gain=self.tail_init_gain, seed=self.seed,
            dtype=self.dtype,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- Adam -------------------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    ``params`` maps names to arrays and ``grads`` maps the same names to
    gradients (``None`` skips a parameter).  Every gradient is checked for
    NaN/Inf before anything is modified.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        _adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                     lr / c1, 1.0 / c2, beta1, beta2, eps)


_CHUNK = 1 << 15


def _adam_update(p, g, m, v, step, inv_c2, beta1, beta2, eps):
    # chunked so the temporaries stay cache-resident; p, m, v are updated in place
    tmp = np.empty(min(_CHUNK, p.size), dtype=p.dtype)
    for lo in range(0, p.size, _CHUNK):
        hi = min(lo + _CHUNK, p.size)
        gs, ms, vs, t = g[lo:hi], m[lo:hi], v[lo:hi], tmp[: hi - lo]
        ms *= beta1
        np.multiply(gs, 1.0 - beta1, out=t)
        ms += t
        vs *= beta2
        np.multiply(gs, gs, out=t)
        t *= 1.0 - beta2
        vs += t
        np.multiply(vs, inv_c2, out=t)
        np.sqrt(t, out=t)
        t += eps
        np.divide(ms, t, out=t)
        t *= step
        p[lo:hi] -= t


class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state, self.lr, self.betas[0], self.betas[1], self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- manifests --------------------------------------------------------------------------
def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    config: dict
    model_config: dict
    source_hash: str
    dataset_seed: int | None
    loss_trace: list[dict] = field(default_factory=list)
    final_report: dict | None = None
    checkpoints: list[str] = field(default_factory=list)
    best_checkpoint: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    def write(self, path) -> None:
        from .cubeio import atomic_write

        atomic_write(path, self.to_json().encode("utf-8"))


# -- training / evaluation ----------------------------------------------------------------
def build_perceptual(config: TrainConfig) -> PerceptualNet:
    net = PerceptualNet(config.perceptual_tap, config.perceptual_seed, dtype=np.dtype(config.dtype))
    if config.perceptual_weights:
        checkpoint.load_perceptual(config.perceptual_weights, net)
    return net


def _check_dataset(dataset) -> tuple[int, tuple[int, int]]:
    if not dataset:
        raise ContractError("dataset is empty")
    first = dataset[0].x_ref.data.shape
    for patch in dataset:
        if patch.x_ref.data.shape != first:
            raise ContractError("all patches must share one shape")
        if patch.lr.data.shape != (first[0], first[1] // 4, first[2] // 4):
            raise ContractError(f"{patch.name}: LR cube {patch.lr.data.shape} does not match reference {first}")
        if patch.pan.data.shape != (1,) + first[1:]:
            raise ContractError(f"{patch.name}: PAN {patch.pan.data.shape} does not match reference {first}")
    return first[0], first[1:]


def predict(model: HyperTransformerNet, lr, pan) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            out = model(lr, pan)
    finally:
        model.train(was_training)
    return out.x.data.astype(np.float64)


def evaluate(model, dataset: list[Patch], *, seed: int | None = None, config_hash: str = "") -> MetricsReport:
    """Average metrics over ``dataset``; ``model`` is a network or a checkpoint path."""
    if not isinstance(model, HyperTransformerNet):
        model, _ = checkpoint.load_model(model)
    reports = []
    for patch in dataset:
        if patch.x_ref.data.shape[0] != model.config.bands:
            raise ContractError(
                f"{patch.name}: {patch.x_ref.data.shape[0]} bands, checkpoint expects {model.config.bands}"
            )
        reports.append(MetricsReport.compute(predict(model, patch.lr, patch.pan), patch.x_ref))
    return MetricsReport.average(reports, seed=seed, config_hash=config_hash)


def evaluate_baseline(dataset: list[Patch], kind: str = "bicubic", *, seed=None, config_hash="") -> MetricsReport:
    """Metrics of a non-learned predictor: ``bicubic`` upsampling or the ``reference`` itself."""
    reports = []
    for patch in dataset:
        if kind == "bicubic":
            pred = bicubic_baseline(patch.lr)
        elif kind == "reference":
            pred = patch.x_ref.data
        else:
            raise ContractError(f"unknown baseline {kind!r}")
        reports.append(MetricsReport.compute(pred, patch.x_ref))
    return MetricsReport.average(reports, seed=seed, config_hash=config_hash)


def train_step(model, optimizer, patch: Patch, weights: LossWeights, perceptual) -> tuple[float, dict]:
    optimizer.zero_grad()
    out = model(patch.lr, patch.pan)
    textures = {s: t.detach() for s, t in out.textures.items()}
    loss, parts = loss_overall(
        out.x, patch.x_ref, textures, weights, fe_hsi=model.fe_hsi, net=perceptual,
    )
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"loss became {value} on {patch.name or 'patch'}")
    if loss.requires_grad:
        T.backward(loss)
    optimizer.step()
    return value, parts


def train(config: TrainConfig, dataset: list[Patch], out_dir=None, *, eval_dataset=None,
          dataset_seed: int | None = None) -> tuple[HyperTransformerNet, RunManifest]:
    """Patch-at-a-time training; returns the trained model and its manifest.

    With ``out_dir`` set, cadence checkpoints, ``best.htck`` (by eval PSNR),
    ``final.htck`` and ``manifest.json`` are written there.
    """
    bands, hr = _check_dataset(dataset)
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    model = HyperTransformerNet(config.model_config(bands, hr))
    perceptual = build_perceptual(config)
    optimizer = Adam(
        model.named_parameters(), config.learning_rate,
        (config.adam_beta1, config.adam_beta2), config.adam_eps,
    )
    weights = config.loss_weights
    manifest = RunManifest(
        config=config.to_dict(), model_config=model.config.to_dict(),
        source_hash=source_hash(), dataset_seed=dataset_seed,
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    extra = {"train": config.to_dict()}
    best_psnr = -math.inf
    last_good = {k: v.copy() for k, v in model.state_dict().items()}

    model.train()
    for epoch in range(1, config.epochs + 1):
        losses, parts_sum = [], {}
        try:
            for patch in dataset:
                value, parts = train_step(model, optimizer, patch, weights, perceptual)
                losses.append(value)
                for k, v in parts.items():
                    parts_sum[k] = parts_sum.get(k, 0.0) + v
        except NonFiniteError:
            if out is not None:
                model.load_state_dict(last_good)
                checkpoint.save_model(out / "last_good.htck", model, extra)
            manifest.loss_trace.append({"epoch": epoch, "loss": "nan"})
            if out is not None:
                manifest.write(out / "manifest.json")
            raise
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        entry.update({k: v / len(dataset) for k, v in parts_sum.items()})
        manifest.loss_trace.append(entry)
        log.info("epoch %d loss %.6g", epoch, entry["loss"])

        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            last_good = {k: v.copy() for k, v in model.state_dict().items()}
            if out is not None:
                name = f"epoch_{epoch:04d}.htck"
                checkpoint.save_model(out / name, model, extra)
                manifest.checkpoints.append(name)
                report = evaluate(model, eval_dataset)
                if report.psnr_db > best_psnr:
                    best_psnr = report.psnr_db
                    checkpoint.save_model(out / "best.htck", model, extra)
                    manifest.best_checkpoint = name

    if out is not None:
        checkpoint.save_model(out / "final.htck", model, extra)
        manifest.checkpoints.append("final.htck")
        # report on the checkpoint itself so it matches a later `eval` run exactly
        report = evaluate(out / "final.htck", eval_dataset, seed=config.seed, config_hash=config.hash())
    else:
        report = evaluate(model, eval_dataset, seed=config.seed, config_hash=config.hash())
    manifest.final_report = report.to_dict()
    if out is not None:
        manifest.write(out / "manifest.json")
    return model, manifest


def load_dataset_dir(path, sigma: float = DEFAULT_SIGMA) -> list[Patch]:
    """Read ``*.ref.hsi`` cubes (plus optional ``.lr.hsi`` / ``.pan.hsi`` companions).

    Missing companions are simulated with the degradation pipeline.  Each
    reference is min-max normalized to [0, 1] at load.
    """
    from .cubeio import load_cube
    from .pipeline import HsiCube, PanImage, normalize_cube, synthesize_pan, walds_degrade  # noqa: F401

    root = Path(path)
    refs = sorted(root.glob("*.ref.hsi"))
    if not refs:
        raise ContractError(f"no *.ref.hsi cubes in {root}")
    patches = []
    for ref_path in refs:
        stem = ref_path.name[: -len(".ref.hsi")]
        raw = load_cube(ref_path).data.astype(np.float64)
        lo, span = raw.min(), raw.max() - raw.min()
        ref = HsiCube(normalize_cube(raw))

        def companion(p):
            # same affine map as the reference, so LR/PAN stay consistent with it
            data = load_cube(p).data.astype(np.float64)
            return (data - lo) / span if span > 0 else np.zeros_like(data)

        lr_path = root / f"{stem}.lr.hsi"
        pan_path = root / f"{stem}.pan.hsi"
        lr = HsiCube(companion(lr_path)) if lr_path.exists() else walds_degrade(ref, 4, sigma)
        pan = PanImage(companion(pan_path)) if pan_path.exists() else synthesize_pan(ref)
        patches.append(Patch(ref, pan, lr, stem))
    return patches


def save_dataset_dir(path, patches: list[Patch]) -> None:
    from .cubeio import save_cube

    os.makedirs(path, exist_ok=True)
    for i, patch in enumerate(patches):
        stem = patch.name or f"patch{i:03d}"
        save_cube(Path(path) / f"{stem}.ref.hsi", patch.x_ref)
        save_cube(Path(path) / f"{stem}.lr.hsi", patch.lr)
        save_cube(Path(path) / f"{stem}.pan.hsi", patch.pan.data)
