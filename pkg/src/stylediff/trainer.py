"""Training loop: freezing policy, decoupled-weight-decay Adam, seeded data
pipeline, and bit-exact checkpoint persistence."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import synthdata as sd
from .autodiff import GradTape, NonFiniteError, record
from .configio import config_from_text, config_to_text
from .losses import total_loss
from .model import ModelConfig, StyleDiffusionModel
from .rng import make_rng

CHECKPOINT_MAGIC = b"AWVR"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # Desk-scale defaults. The reference regime this scales down from used
    # AdamW at 1e-5 over 200k iterations on large-batch natural images; at
    # 32x32 with a cold host, 1e-3 over a few thousand steps is appropriate.
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_refs_min: int = 2
    n_refs_max: int = 5
    freeze_host: bool = False
    use_style_loss: bool = True
    use_disen_loss: bool = True
    grad_clip: float = 1.0  # global gradient-norm cap; hinge onsets spike otherwise
    n_per_family: int = 150
    families: tuple = sd.FAMILIES

    def validate(self):
        if not (1 <= self.n_refs_min <= self.n_refs_max <= 10):
            raise ValueError("n_refs range must lie within [1, 10]")
        for name in ("steps", "batch_size", "n_per_family"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.model.validate()
        return self


@dataclass
class Batch:
    x0: np.ndarray  # (B, 3, H, W)
    prompt_tokens: np.ndarray  # (B, L)
    ref_images: np.ndarray  # (B, n, 3, H, W)
    ref_captions: np.ndarray  # (B, n, L)
    t: np.ndarray  # (B,)
    eps: np.ndarray  # (B, 3, H, W)
    pos_images: np.ndarray  # (B, 3, H, W), style-preserving variants
    neg_images: np.ndarray  # (B, 3, H, W), style-destroyed variants


def build_batch(samples, config, step):
    """Deterministic batch for (config.seed, step)."""
    rng = make_rng(config.seed, 606, step)
    b = config.batch_size
    idx = rng.integers(0, len(samples), size=b)
    n_refs = int(rng.integers(config.n_refs_min, config.n_refs_max + 1))
    t = rng.integers(0, config.model.T, size=b)
    x0, prompts, refs, caps, pos, neg = [], [], [], [], [], []
    for i in idx:
        s = samples[int(i)]
        r = sd.make_reference_set(s, n_refs, seed=int(rng.integers(0, 2**31)))
        x0.append(s.image)
        prompts.append(sd.prompt_for(s.content_spec))
        refs.append(r.images)
        caps.append(r.caption_tokens)
        pos.append(sd.rigid_aug(s.image, seed=int(rng.integers(0, 2**31))))
        neg.append(sd.style_destroy_aug(s.image, seed=int(rng.integers(0, 2**31))))
    eps = rng.standard_normal((b, 3) + samples[0].image.shape[-2:])
    return Batch(
        x0=np.stack(x0),
        prompt_tokens=np.stack(prompts),
        ref_images=np.stack(refs),
        ref_captions=np.stack(caps),
        t=t,
        eps=eps,
        pos_images=np.stack(pos),
        neg_images=np.stack(neg),
    )


def clip_gradients(params, max_norm):
    """Scale all gradients down so their global L2 norm is <= max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data *= 1.0 - self.lr * self.weight_decay
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


class Trainer:
    def __init__(self, config, samples=None, model=None):
        self.config = config.validate()
        self.model = model or StyleDiffusionModel(config.model, seed=config.seed)
        self.samples = samples
        self.step = 0
        self.optimizer = AdamW(
            self.model.trainable_set(config.freeze_host),
            lr=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
            weight_decay=config.weight_decay,
        )

    def ensure_data(self):
        if self.samples is None:
            self.samples = sd.build_corpus(
                self.config.n_per_family,
                seed=self.config.seed,
                size=self.config.model.image_size,
                families=self.config.families,
            )
        return self.samples

    def train_step(self):
        """One optimizer step; deterministic in (config, seed, step counter)."""
        batch = build_batch(self.ensure_data(), self.config, self.step)
        self.optimizer.zero_grad()
        tape = GradTape()
        with record(tape):
            total, breakdown = total_loss(
                self.model,
                batch,
                use_style=self.config.use_style_loss,
                use_disen=self.config.use_disen_loss,
            )
        if not np.isfinite(total.data):
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {breakdown}")
        tape.backward(total)
        if self.config.grad_clip > 0:
            clip_gradients(self.optimizer.params, self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        return breakdown

    def run(self, on_step=None):
        while self.step < self.config.steps:
            breakdown = self.train_step()
            if on_step:
                on_step(self.step, breakdown)
        return self


# ---------------------------------------------------------------------------
# checkpoint persistence (little-endian, length-prefixed records)


def _named_state(trainer):
    """Every array the checkpoint persists, in sorted-name order."""
    state = {}
    for name, p in trainer.model.named_parameters().items():
        state[name] = p.data
    for name, arr in trainer.model.frozen.named_weights().items():
        state[name] = arr
    for name in trainer.optimizer.params:
        state[f"adam.m.{name}"] = trainer.optimizer.m[name]
        state[f"adam.v.{name}"] = trainer.optimizer.v[name]
    return dict(sorted(state.items()))


def _write_tensor(fh, name, arr):
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.astype("<f8").tobytes())


def _read_tensor(fh):
    head = fh.read(2)
    if len(head) < 2:
        raise CheckpointError("truncated checkpoint: tensor header")
    (nlen,) = struct.unpack("<H", head)
    name = fh.read(nlen).decode()
    ndim_raw = fh.read(1)
    if not ndim_raw:
        raise CheckpointError(f"truncated checkpoint: tensor {name}")
    ndim = ndim_raw[0]
    shape = []
    for _ in range(ndim):
        raw = fh.read(8)
        if len(raw) < 8:
            raise CheckpointError(f"truncated checkpoint: tensor {name}")
        shape.append(struct.unpack("<Q", raw)[0])
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * 8)
    if len(raw) < count * 8:
        raise CheckpointError(f"truncated checkpoint: tensor {name}")
    return name, np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(trainer, path):
    state = _named_state(trainer)
    config_text = config_to_text(trainer.config).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(config_text)))
        fh.write(config_text)
        fh.write(struct.pack("<QQQ", trainer.config.seed, trainer.step, trainer.optimizer.t))
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            _write_tensor(fh, name, arr)
    return path


def load_checkpoint(path, samples=None):
    """Rebuild a Trainer whose next step continues the saved run bit-exactly."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (cfg_len,) = struct.unpack("<Q", fh.read(8))
        config = config_from_text(fh.read(cfg_len).decode(), TrainConfig)
        seed, step, adam_t = struct.unpack("<QQQ", fh.read(24))
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        loaded = {}
        for _ in range(n_tensors):
            name, arr = _read_tensor(fh)
            loaded[name] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    trainer = Trainer(config, samples=samples)
    trainer.step = step
    trainer.optimizer.t = adam_t
    expected = _named_state(trainer)
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    shape_diff = sorted(
        name for name in set(expected) & set(loaded) if expected[name].shape != loaded[name].shape
    )
    if missing or extra or shape_diff:
        raise CheckpointError(
            f"{path}: tensor set mismatch (missing={missing}, extra={extra}, shapes={shape_diff})"
        )
    params = trainer.model.named_parameters()
    frozen = trainer.model.frozen.named_weights()
    for name, arr in loaded.items():
        if name.startswith("adam.m."):
            trainer.optimizer.m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            trainer.optimizer.v[name[len("adam.v.") :]] = arr
        elif name in params:
            params[name].data = arr
        elif name in frozen:
            frozen[name][:] = arr
    return trainer
