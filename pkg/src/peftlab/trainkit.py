"""Training objective, optimizers, hybrid update loop, and run plumbing.

A training step is: forward through the frozen backbone with the active
adapter, token-level mean negative log-likelihood, one backward pass
(classical adjoints everywhere, cached parameter-shift Jacobians at the
quantum nodes), then the optimizer update on every trainable scalar. For
sora the gate additionally passes through the soft-threshold proximal
step after the optimizer update.

Reproducibility contract: the run seed pins everything. Adapter
initialization and data order come from independent child streams of the
seed, the backbone stand-in pretraining uses its own fixed stream, and
the metrics CSV is byte-identical across repeats. Because of that
contract the CSV `ms` column is not a live wall-clock reading (which
would differ between repeats); per-step wall-clock telemetry goes to a
`timing.txt` sidecar instead and the CSV column stays 0.
"""
from __future__ import annotations

import dataclasses
import importlib.resources
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as adapters_mod
from . import checkpoint, model, tensor
from .adapters import METHODS, AdapterSet, SoraAdapter
from .model import ArchSpec, Backbone
from .tensor import AllMasked, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = "step,loss,ms,trainable_params,method"
_PRETRAIN_SEED = 0x5EED
_PRETRAIN_LR = 1e-3
DEFAULT_LR = {"full": 1e-4, "lora": 1e-3, "sora": 1e-3, "prefix": 1e-3, "qaa": 1e-3}


class ConfigError(ValueError):
    """Config file missing, malformed, or carrying unknown keys."""


class NonFiniteLoss(RuntimeError):
    """Loss became NaN/Inf; the run aborts at the offending step."""


class IoError(OSError):
    """Corpus or output file could not be read/written."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 4
    prefix_len: int = 4
    depth: int = 2
    sora_lambda: float = 1e-3


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float | None = None  # None -> per-method default
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    method: str = "qaa"
    arch: ArchSpec = model.DEFAULT_ARCH
    adapter: AdapterConfig = AdapterConfig()
    optimizer: OptimConfig = OptimConfig()
    steps: int = 1000
    batch_size: int = 4
    seq_len: int = 32
    seed: int = 0
    corpus: str | None = None  # None -> bundled toy corpus
    out_dir: str = "runs/out"
    pretrain_steps: int = 200

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}"
            )
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        if self.optimizer.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer.kind!r}")

    @property
    def lr(self) -> float:
        return self.optimizer.lr if self.optimizer.lr is not None else DEFAULT_LR[self.method]

    def replaced(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def _build_section(cls, raw: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return raw


def config_from_dict(raw: dict) -> RunConfig:
    """Strict RunConfig parser: unknown keys anywhere are a hard error."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    top = _build_section(RunConfig, dict(raw), "config")
    kwargs = dict(top)
    try:
        if "arch" in kwargs:
            kwargs["arch"] = ArchSpec(**_build_section(ArchSpec, kwargs["arch"], "arch"))
        if "adapter" in kwargs:
            kwargs["adapter"] = AdapterConfig(
                **_build_section(AdapterConfig, kwargs["adapter"], "adapter")
            )
        if "optimizer" in kwargs:
            opt = dict(_build_section(OptimConfig, kwargs["optimizer"], "optimizer"))
            if "betas" in opt:
                opt["betas"] = tuple(opt["betas"])
            kwargs["optimizer"] = OptimConfig(**opt)
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def config_from_file(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_corpus(path=None) -> np.ndarray:
    """Byte-tokenized corpus as uint8; bundled toy text when path is None."""
    try:
        if path is None:
            blob = (
                importlib.resources.files("peftlab")
                .joinpath("data/corpus.txt")
                .read_bytes()
            )
        else:
            blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read corpus: {exc}") from exc
    if len(blob) < 2:
        raise IoError("corpus is too short to sample from")
    return np.frombuffer(blob, dtype=np.uint8)


def make_copy_corpus(seed: int, pattern_len: int = 24, repeats: int = 64) -> np.ndarray:
    """Synthetic memorization task: one random printable pattern, tiled."""
    rng = np.random.default_rng(seed)
    pattern = rng.integers(32, 127, size=pattern_len, dtype=np.uint8)
    return np.tile(pattern, repeats)


def sample_batch(
    corpus: np.ndarray, rng: np.random.Generator, batch_size: int, seq_len: int
):
    """Random corpus windows: inputs, next-byte targets, all-true mask."""
    if len(corpus) < seq_len + 1:
        raise IoError(f"corpus length {len(corpus)} < seq_len + 1")
    offsets = rng.integers(0, len(corpus) - seq_len, size=batch_size)
    x = np.stack([corpus[o : o + seq_len] for o in offsets]).astype(np.int64)
    y = np.stack([corpus[o + 1 : o + seq_len + 1] for o in offsets]).astype(np.int64)
    return x, y, np.ones_like(x, dtype=bool)


# ---------------------------------------------------------------------------
# objective and optimizers
# ---------------------------------------------------------------------------


def lm_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean token-level negative log-likelihood over unmasked positions."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AllMasked("mask excludes every position")
    return tensor.cross_entropy(logits, targets, mask)


def zero_grads(params: list[Tensor]) -> None:
    for t in params:
        t.grad = None


class Sgd:
    """Plain gradient descent, theta <- theta - lr * grad."""

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: list[Tensor]) -> None:
        for t in params:
            if t.grad is None:
                continue
            if self.weight_decay:
                t.data *= 1.0 - self.lr * self.weight_decay
            t.data -= self.lr * t.grad


class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(
        self,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params: list[Tensor]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, t in enumerate(params):
            if t.grad is None:
                continue
            m = self._m.setdefault(i, np.zeros_like(t.data))
            v = self._v.setdefault(i, np.zeros_like(t.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * t.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * t.grad**2
            if self.weight_decay:
                t.data *= 1.0 - self.lr * self.weight_decay
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(config: RunConfig):
    opt = config.optimizer
    if opt.kind == "sgd":
        return Sgd(config.lr, opt.weight_decay)
    return Adam(config.lr, opt.betas, weight_decay=opt.weight_decay)


# ---------------------------------------------------------------------------
# run state and steps
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    step: int
    loss: float
    ms: float
    trainable_params: int
    method: str

    def csv_line(self) -> str:
        return f"{self.step},{self.loss!r},{self.ms:g},{self.trainable_params},{self.method}"


@dataclass
class TrainState:
    config: RunConfig
    backbone: Backbone
    adapters: AdapterSet
    trainables: list[Tensor]
    optimizer: object
    data_rng: np.random.Generator
    corpus: np.ndarray
    step: int = 0

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainables)


def pretrain_backbone(
    arch: ArchSpec,
    corpus: np.ndarray,
    steps: int,
    batch_size: int,
    seq_len: int,
) -> Backbone:
    """Stand-in for a released checkpoint: brief full training on the task
    corpus from a fixed seed, identical for every run configuration that
    shares (arch, corpus, steps, batch, seq)."""
    rng = np.random.default_rng(_PRETRAIN_SEED)
    backbone = Backbone(arch, rng)
    if steps == 0:
        return backbone
    backbone.set_trainable(True)
    none_adapters = AdapterSet("full", [None] * arch.n_layers, [None] * arch.n_layers, [])
    params = backbone.tensors()
    opt = Adam(_PRETRAIN_LR)
    data_rng = np.random.default_rng(_PRETRAIN_SEED + 1)
    for step in range(steps):
        x, y, mask = sample_batch(corpus, data_rng, batch_size, seq_len)
        zero_grads(params)
        loss = lm_loss(model.forward(backbone, none_adapters, x), y, mask)
        if not np.isfinite(loss.data):
            raise NonFiniteLoss(f"pretraining diverged at step {step + 1}")
        tensor.backward(loss)
        opt.step(params)
    backbone.set_trainable(False)
    return backbone


def setup_run(config: RunConfig) -> TrainState:
    """Deterministically build backbone, adapters, optimizer, and data rng."""
    corpus = load_corpus(config.corpus)
    if len(corpus) < config.seq_len + 1:
        raise ConfigError(
            f"corpus ({len(corpus)} bytes) shorter than seq_len + 1"
        )
    if config.seq_len + (config.adapter.prefix_len if config.method == "prefix" else 0) > config.arch.max_seq_len:
        raise ConfigError("seq_len plus prefix length exceeds max_seq_len")
    backbone = pretrain_backbone(
        config.arch, corpus, config.pretrain_steps, config.batch_size, config.seq_len
    )
    init_stream, data_stream = np.random.SeedSequence(config.seed).spawn(2)
    adapters = adapters_mod.init_adapters(
        config.method,
        config.arch,
        rank=config.adapter.rank,
        prefix_len=config.adapter.prefix_len,
        depth=config.adapter.depth,
        sora_lambda=config.adapter.sora_lambda,
        rng=np.random.default_rng(init_stream),
    )
    if config.method == "full":
        backbone.set_trainable(True)
        trainables = backbone.tensors()
    else:
        trainables = adapters.trainable_tensors()
    return TrainState(
        config=config,
        backbone=backbone,
        adapters=adapters,
        trainables=trainables,
        optimizer=make_optimizer(config),
        data_rng=np.random.default_rng(data_stream),
        corpus=corpus,
    )


def train_step(state: TrainState, batch) -> MetricsRow:
    """One hybrid quantum-classical update; returns the step's metrics row."""
    x, y, mask = batch
    state.step += 1
    zero_grads(state.trainables)
    logits = model.forward(state.backbone, state.adapters, x)
    loss = lm_loss(logits, y, mask)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}")
    tensor.backward(loss)
    state.optimizer.step(state.trainables)
    if state.config.method == "sora":
        eta = state.config.lr
        for site in state.adapters.attn_sites + state.adapters.ffn_sites:
            if isinstance(site, SoraAdapter):
                site.g.data = adapters_mod.sora_proximal_step(
                    site.g.data, np.zeros_like(site.g.data), eta, site.sparsity
                )
    return MetricsRow(
        step=state.step,
        loss=loss_val,
        ms=0.0,
        trainable_params=state.trainable_count(),
        method=state.config.method,
    )


def checkpoint_records(state: TrainState) -> list[tuple[str, np.ndarray]]:
    cfg = state.config
    arch = cfg.arch
    records: list[tuple[str, np.ndarray]] = [
        ("meta.method", checkpoint.encode_text(cfg.method)),
        (
            "meta.arch",
            np.array(
                [
                    arch.vocab_size,
                    arch.d_model,
                    arch.n_layers,
                    arch.n_heads,
                    arch.ffn_mult,
                    arch.max_seq_len,
                ],
                dtype=np.float64,
            ),
        ),
        (
            "meta.adapter",
            np.array(
                [
                    cfg.adapter.rank,
                    cfg.adapter.prefix_len,
                    cfg.adapter.depth,
                    cfg.adapter.sora_lambda,
                ],
                dtype=np.float64,
            ),
        ),
    ]
    records += [(name, t.data) for name, t in state.backbone.named_tensors()]
    records += [(name, t.data) for name, t in state.adapters.named_tensors()]
    return records


def restore_from_checkpoint(path) -> tuple[Backbone, AdapterSet, str]:
    """Rebuild a model (backbone + adapters) from a PEFTCKPT1 file."""
    records = checkpoint.load(path)
    try:
        method = checkpoint.decode_text(records["meta.method"])
        av = records["meta.arch"].astype(int)
        arch = ArchSpec(*[int(v) for v in av])
        rank, prefix_len, depth, sora_lambda = records["meta.adapter"]
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{path}: missing {exc} record") from exc
    backbone = Backbone(arch, np.random.default_rng(0))
    adapters = adapters_mod.init_adapters(
        method,
        arch,
        rank=int(rank),
        prefix_len=int(prefix_len),
        depth=int(depth),
        sora_lambda=float(sora_lambda),
        rng=np.random.default_rng(0),
    )
    named = dict(backbone.named_tensors() + adapters.named_tensors())
    for name, t in named.items():
        if name not in records:
            raise checkpoint.CheckpointError(f"{path}: missing record {name}")
        if records[name].shape != t.data.shape:
            raise checkpoint.CheckpointError(
                f"{path}: shape mismatch for {name}: "
                f"{records[name].shape} vs {t.data.shape}"
            )
        t.data = records[name].copy()
    return backbone, adapters, method


def run_experiment(config: RunConfig) -> list[MetricsRow]:
    """Execute a full run: metrics CSV, timing sidecar, final checkpoint.

    Deterministic given the config (including the seed); the CSV is
    byte-identical across repeats.
    """
    out_dir = Path(config.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output dir: {exc}") from exc

    state = setup_run(config)
    rows: list[MetricsRow] = []
    timings: list[float] = []
    metrics_path = out_dir / "metrics.csv"
    try:
        with open(metrics_path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for _ in range(config.steps):
                batch = sample_batch(
                    state.corpus, state.data_rng, config.batch_size, config.seq_len
                )
                t0 = time.perf_counter()
                row = train_step(state, batch)
                timings.append((time.perf_counter() - t0) * 1e3)
                rows.append(row)
                fh.write(row.csv_line() + "\n")
        with open(out_dir / "timing.txt", "w") as fh:
            for i, ms in enumerate(timings, start=1):
                fh.write(f"{i},{ms:.3f}\n")
            fh.write(f"total,{sum(timings):.3f}\n")
        checkpoint.save(out_dir / "checkpoint.bin", checkpoint_records(state))
    except OSError as exc:
        raise IoError(f"cannot write run outputs: {exc}") from exc
    return rows
