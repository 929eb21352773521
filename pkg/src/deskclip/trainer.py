"""Training orchestration: init policies, masked contrastive steps, scheduling,
loss scaling, checkpointing, benchmarking, and the toy ablation workflow."""

from __future__ import annotations

import json
import math
import resource
import statistics
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Batch, BatchStream, Corpus, TokenizerSpec, VOCAB_SIZE, random_resized_crop
from .encoders import (
    ImageEncoderConfig,
    MaskSpec,
    ModelConfig,
    TextEncoderConfig,
    assign_depth,
    interpolate_pos_embed,
)
from .errors import ContractError, DimensionError, DivergenceError, InputError
from .model import ClipModel
from .objective import LogitScale, clamp_scale, clip_loss, similarity_logits
from .optim import (
    LossScalerState,
    Optimizer,
    OptimizerConfig,
    ParamGroup,
    Schedule,
    lr_at,
    scaler_update,
)
from .tensor import Tensor

INIT_POLICIES = ("scratch", "image-from-checkpoint", "both-from-checkpoint")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    optimizer: OptimizerConfig = OptimizerConfig()
    peak_lr_image: float = 2e-4
    peak_lr_text: float = 2e-5
    layer_decay_image: float = 0.75
    layer_decay_text: float = 0.75
    schedule_shape: str = "cosine"
    warmup_steps: int = 2000
    total_steps: int = 10000
    mask_ratio: float = 0.5
    batch_size: int = 64
    seed: int = 0
    init_policy: str = "scratch"
    init_checkpoint: str = ""
    init_strict: bool = False
    augment: bool = True
    crop_scale_lo: float = 0.9
    crop_scale_hi: float = 1.0
    checkpoint_interval: int = 0  # 0 -> every 10% of total steps
    scale_init: float = 2.0**15
    scale_growth_interval: int = 2000
    data_manifest: str = ""

    def __post_init__(self):
        if self.init_policy not in INIT_POLICIES:
            raise ContractError(f"init_policy must be one of {INIT_POLICIES}, got {self.init_policy!r}")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.warmup_steps, self.total_steps, self.schedule_shape)

    @property
    def samples_planned(self) -> int:
        return self.batch_size * self.total_steps

    def to_flat(self) -> dict:
        img, txt = self.model.image, self.model.text
        return {
            "image_layers": img.layers, "image_width": img.width, "image_heads": img.heads,
            "image_size": img.image_size, "image_patch_size": img.patch_size,
            "image_channels": img.channels, "image_drop_path": img.drop_path,
            "text_layers": txt.layers, "text_width": txt.width, "text_heads": txt.heads,
            "text_vocab_size": txt.vocab_size, "text_context_length": txt.context_length,
            "embed_dim": self.model.embed_dim,
            "optimizer_kind": self.optimizer.kind, "beta1": self.optimizer.beta1,
            "beta2": self.optimizer.beta2, "optimizer_eps": self.optimizer.eps,
            "weight_decay": self.optimizer.weight_decay,
            "peak_lr_image": self.peak_lr_image, "peak_lr_text": self.peak_lr_text,
            "layer_decay_image": self.layer_decay_image, "layer_decay_text": self.layer_decay_text,
            "schedule_shape": self.schedule_shape, "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps, "mask_ratio": self.mask_ratio,
            "batch_size": self.batch_size, "seed": self.seed,
            "init_policy": self.init_policy, "init_checkpoint": self.init_checkpoint,
            "init_strict": self.init_strict, "augment": self.augment,
            "crop_scale_lo": self.crop_scale_lo, "crop_scale_hi": self.crop_scale_hi,
            "checkpoint_interval": self.checkpoint_interval,
            "scale_init": self.scale_init, "scale_growth_interval": self.scale_growth_interval,
            "data_manifest": self.data_manifest,
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        flat = dict(flat)
        model = ModelConfig(
            image=ImageEncoderConfig(
                layers=int(flat.pop("image_layers")), width=int(flat.pop("image_width")),
                heads=int(flat.pop("image_heads")), image_size=int(flat.pop("image_size")),
                patch_size=int(flat.pop("image_patch_size")),
                channels=int(flat.pop("image_channels", 3)),
                drop_path=float(flat.pop("image_drop_path", 0.0)),
            ),
            text=TextEncoderConfig(
                layers=int(flat.pop("text_layers")), width=int(flat.pop("text_width")),
                heads=int(flat.pop("text_heads")), vocab_size=int(flat.pop("text_vocab_size")),
                context_length=int(flat.pop("text_context_length")),
            ),
            embed_dim=int(flat.pop("embed_dim", 0)),
        )
        optimizer = OptimizerConfig(
            kind=str(flat.pop("optimizer_kind", "lamb")), beta1=float(flat.pop("beta1", 0.9)),
            beta2=float(flat.pop("beta2", 0.98)), eps=float(flat.pop("optimizer_eps", 1e-6)),
            weight_decay=float(flat.pop("weight_decay", 0.05)),
        )
        kwargs = {}
        for f in ("peak_lr_image", "peak_lr_text", "layer_decay_image", "layer_decay_text",
                  "mask_ratio", "crop_scale_lo", "crop_scale_hi", "scale_init"):
            if f in flat:
                kwargs[f] = float(flat.pop(f))
        for f in ("warmup_steps", "total_steps", "batch_size", "seed",
                  "checkpoint_interval", "scale_growth_interval"):
            if f in flat:
                kwargs[f] = int(flat.pop(f))
        for f in ("init_strict", "augment"):
            if f in flat:
                v = flat.pop(f)
                kwargs[f] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
        for f in ("schedule_shape", "init_policy", "init_checkpoint", "data_manifest"):
            if f in flat:
                kwargs[f] = str(flat.pop(f))
        if flat:
            raise InputError(f"unknown config keys: {sorted(flat)}")
        return cls(model=model, optimizer=optimizer, **kwargs)


@dataclass
class StepRecord:
    step: int
    loss: float
    lrs: dict[str, float]
    logit_scale: float
    overflow: bool
    tokens: int
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "loss": self.loss, "lrs": self.lrs,
             "logit_scale": self.logit_scale, "overflow": self.overflow,
             "tokens": self.tokens, "wall_time": self.wall_time},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        return cls(**json.loads(line))


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)  # left at fresh initialization
    resampled: list[str] = field(default_factory=list)
    unused: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return (f"loaded {len(self.loaded)}, fresh {len(self.missing)}, "
                f"resampled {len(self.resampled)}, unused {len(self.unused)}")


def init_from_checkpoint(model: ClipModel, ckpt: Checkpoint, policy: str = "permissive",
                         towers: tuple[str, ...] = ("image", "text", "logit_scale")) -> LoadReport:
    """Copy name-and-shape-matched tensors; resample mismatched image
    positional tables; everything else stays freshly initialized (permissive)
    or raises (strict)."""
    if policy not in ("permissive", "strict"):
        raise ContractError(f"unknown init policy {policy!r}")
    report = LoadReport()
    consumed = set()
    for name, param in model.params.items():
        selected = any(name == t or name.startswith(t + ".") for t in towers)
        if not selected:
            report.missing.append(name)
            continue
        src = ckpt.tensors.get(name)
        if src is not None and tuple(src.shape) == tuple(param.shape):
            param.data = src.astype(np.float32)
            report.loaded.append(name)
            consumed.add(name)
            continue
        if (src is not None and name == "image.pos_embed"
                and src.ndim == 2 and param.ndim == 2 and src.shape[1] == param.shape[1]):
            src_grid = math.isqrt(src.shape[0] - 1)
            dst_grid = math.isqrt(param.shape[0] - 1)
            if src_grid**2 == src.shape[0] - 1 and dst_grid**2 == param.shape[0] - 1:
                param.data = interpolate_pos_embed(Tensor(src.astype(np.float32)), dst_grid).data
                report.resampled.append(name)
                consumed.add(name)
                continue
        if policy == "strict":
            got = None if src is None else tuple(src.shape)
            raise DimensionError(
                f"{name}: checkpoint has {got}, model needs {tuple(param.shape)}"
            )
        report.missing.append(name)
    report.unused = sorted(set(ckpt.tensors) - consumed)
    return report


def build_param_groups(model: ClipModel, cfg: TrainConfig) -> list[ParamGroup]:
    image, text = [], []
    depths: dict[str, int] = {}
    for name in model.trainable():
        if name.startswith("image."):
            image.append(name)
            depths[name] = assign_depth(name[len("image."):], cfg.model.image.layers)
        elif name.startswith("text."):
            text.append(name)
            depths[name] = assign_depth(name[len("text."):], cfg.model.text.layers)
    return [
        ParamGroup("image", image, cfg.peak_lr_image, cfg.layer_decay_image,
                   {n: depths[n] for n in image}, cfg.model.image.layers),
        ParamGroup("text", text, cfg.peak_lr_text, cfg.layer_decay_text,
                   {n: depths[n] for n in text}, cfg.model.text.layers),
        ParamGroup("logit_scale", ["logit_scale"], cfg.peak_lr_text, 1.0, {"logit_scale": 1}, 0),
    ]


class Trainer:
    """Owns model, optimizer, scaler, and counters for one training run."""

    def __init__(self, cfg: TrainConfig, corpus: Corpus, run_dir: Path | None = None):
        if cfg.model.text.vocab_size != VOCAB_SIZE:
            raise InputError(
                f"byte tokenizer emits ids < {VOCAB_SIZE}; text vocab_size is "
                f"{cfg.model.text.vocab_size} (use a desk-scale text config for training)"
            )
        self.cfg = cfg
        self.corpus = corpus
        self.run_dir = Path(run_dir) if run_dir is not None else None
        init_ss, step_ss = np.random.SeedSequence(cfg.seed).spawn(2)
        self.model = ClipModel.init(cfg.model, np.random.default_rng(init_ss))
        self.load_report: LoadReport | None = None
        if cfg.init_policy != "scratch":
            if not cfg.init_checkpoint:
                raise InputError(f"init_policy {cfg.init_policy!r} needs init_checkpoint")
            towers = ("image",) if cfg.init_policy == "image-from-checkpoint" else (
                "image", "text", "logit_scale")
            ckpt = load_checkpoint(cfg.init_checkpoint)
            self.load_report = init_from_checkpoint(
                self.model, ckpt, "strict" if cfg.init_strict else "permissive", towers)
        self.stream = BatchStream(
            corpus.train, TokenizerSpec(cfg.model.text.context_length), seed=cfg.seed)
        self.groups = build_param_groups(self.model, cfg)
        self.opt = Optimizer(self.model.trainable(), self.groups, cfg.optimizer)
        self.scaler = LossScalerState(scale=cfg.scale_init,
                                      growth_interval=cfg.scale_growth_interval)
        self.rng_step = np.random.default_rng(step_ss)
        self.schedule_step = 0
        self.attempted = 0
        self.samples_seen = 0
        self.records: list[StepRecord] = []
        self.debug_overflow_steps: set[int] = set()  # fault injection for scaler tests
        self._log_file = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    # -- single step ---------------------------------------------------------

    def train_step(self, batch: Batch) -> StepRecord:
        cfg = self.cfg
        t0 = time.perf_counter()
        images = batch.images
        if cfg.augment:
            images = np.stack([
                random_resized_crop(img, (cfg.crop_scale_lo, cfg.crop_scale_hi), self.rng_step)
                for img in images
            ]).astype(np.float32)
        mask = MaskSpec(cfg.mask_ratio) if cfg.mask_ratio > 0 else None
        trace: dict = {}
        img_emb = self.model.encode_image(images, mask=mask, rng=self.rng_step, trace=trace)
        txt_emb = self.model.encode_text(batch.token_ids)
        scale = LogitScale(self.model.logit_scale)
        loss = clip_loss(similarity_logits(img_emb, txt_emb, scale))
        loss_value = loss.item()

        T.backward(T.mul(loss, Tensor(np.float32(self.scaler.scale))))
        params = self.model.trainable()
        if self.attempted in self.debug_overflow_steps:
            first = next(iter(params.values()))
            first.grad = first.grad if first.grad is not None else np.zeros_like(first.data)
            first.grad.reshape(-1)[0] = np.inf

        overflow = any(
            p.grad is not None and not np.isfinite(p.grad).all() for p in params.values())
        group_lrs = {g.name: lr_at(cfg.schedule, g.peak_lr, self.schedule_step)
                     for g in self.groups}
        if not overflow:
            inv = np.float32(1.0 / self.scaler.scale)  # scale is a power of two
            for p in params.values():
                if p.grad is not None:
                    p.grad = p.grad * inv
            self.opt.step(group_lrs)
            clamp_scale(scale)
        try:
            scaler_update(self.scaler, overflow)
        except DivergenceError as err:
            err.records = self.records[-10:]
            raise
        record = StepRecord(
            step=self.schedule_step,
            loss=loss_value,
            lrs=group_lrs,
            logit_scale=scale.value,
            overflow=overflow,
            tokens=batch.token_ids.shape[0] * trace.get("token_positions", 0)
            + int((~batch.pad_mask).sum()),
            wall_time=time.perf_counter() - t0,
        )
        if not overflow:
            self.samples_seen += batch.images.shape[0]
            self.schedule_step += 1
        if not math.isfinite(loss_value) and self.scaler.scale <= 2.0**-18:
            err = DivergenceError(f"loss {loss_value} with scale at {self.scaler.scale}")
            err.records = self.records[-10:]
            raise err
        T.zero_grads(params.values())
        self.records.append(record)
        self._log(record)
        self.attempted += 1
        return record

    # -- full runs ------------------------------------------------------------

    def train(self, max_seconds: float | None = None) -> Path | None:
        cfg = self.cfg
        interval = cfg.checkpoint_interval or max(1, cfg.total_steps // 10)
        start = time.perf_counter()
        while self.schedule_step < cfg.total_steps:
            if max_seconds is not None and time.perf_counter() - start >= max_seconds:
                break
            batch = self.stream.batch_at(self.attempted, cfg.batch_size)
            before = self.schedule_step
            self.train_step(batch)
            if (self.run_dir is not None and self.schedule_step != before
                    and self.schedule_step % interval == 0
                    and self.schedule_step < cfg.total_steps):
                self.save(self.run_dir / f"ckpt-{self.schedule_step:06d}.bin")
        final = None
        if self.run_dir is not None:
            final = self.run_dir / "final.bin"
            self.save(final)
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
        return final

    def _log(self, record: StepRecord) -> None:
        if self.run_dir is None:
            return
        if self._log_file is None:
            self._log_file = open(self.run_dir / "steps.jsonl", "a")
        self._log_file.write(record.to_json() + "\n")
        self._log_file.flush()

    # -- checkpointing -----------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        meta = {
            "format": "deskclip-checkpoint",
            "step": self.schedule_step,
            "attempted": self.attempted,
            "samples_seen": self.samples_seen,
            "log_scale": self.model.logit_scale.item(),
            "rng_state": self.rng_step.bit_generator.state,
            "scaler": {
                "scale": self.scaler.scale,
                "good_steps": self.scaler.good_steps,
                "growth_interval": self.scaler.growth_interval,
                "growth_factor": self.scaler.growth_factor,
                "backoff_factor": self.scaler.backoff_factor,
            },
            "config": self.cfg.to_flat(),
        }
        ckpt = Checkpoint(
            tensors={name: p.data for name, p in self.model.params.items()},
            optimizer=self.opt.state_arrays(),
            metadata=meta,
        )
        save_checkpoint(path, ckpt)
        return Path(path)

    def resume(self, ckpt: Checkpoint) -> None:
        """Restore params, optimizer state, rng, and counters for bit-exact continuation."""
        for name, param in self.model.params.items():
            src = ckpt.tensors[name]
            if tuple(src.shape) != tuple(param.shape):
                raise DimensionError(f"{name}: resume shape {src.shape} vs model {param.shape}")
            param.data = src.astype(np.float32)
        self.opt.load_state_arrays(ckpt.optimizer)
        meta = ckpt.metadata
        self.schedule_step = int(meta["step"])
        self.attempted = int(meta["attempted"])
        self.samples_seen = int(meta["samples_seen"])
        self.rng_step.bit_generator.state = meta["rng_state"]
        sc = meta["scaler"]
        self.scaler = LossScalerState(
            scale=float(sc["scale"]), good_steps=int(sc["good_steps"]),
            growth_interval=int(sc["growth_interval"]), growth_factor=float(sc["growth_factor"]),
            backoff_factor=float(sc["backoff_factor"]))


# -- benchmarking -------------------------------------------------------------------


def bench(cfg: TrainConfig, corpus: Corpus, steps: int, warmup: int = 5) -> dict:
    """Median step time with masking on vs off; first ``warmup`` steps excluded."""
    if steps < 1:
        raise ContractError(f"need at least 1 timed step, got {steps}")
    report: dict = {"steps_timed": steps, "warmup_excluded": warmup,
                    "batch_size": cfg.batch_size}
    for label, ratio in (("unmasked", 0.0), ("masked", cfg.mask_ratio or 0.5)):
        run_cfg = replace(cfg, mask_ratio=ratio, warmup_steps=0,
                          total_steps=warmup + steps, checkpoint_interval=0)
        trainer = Trainer(run_cfg, corpus)
        times = []
        for _ in range(warmup + steps):
            batch = trainer.stream.batch_at(trainer.attempted, run_cfg.batch_size)
            times.append(trainer.train_step(batch).wall_time)
        med = statistics.median(times[warmup:])
        report[label] = {
            "mask_ratio": ratio,
            "median_step_seconds": med,
            "seconds_per_sample": med / cfg.batch_size,
            "seconds_per_1m_samples": med / cfg.batch_size * 1e6,
        }
    report["step_time_ratio"] = (
        report["masked"]["median_step_seconds"] / report["unmasked"]["median_step_seconds"])
    report["peak_rss_kb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return report


# -- ablation workflow ------------------------------------------------------------------


def run_ablation(cfg: TrainConfig, corpus: Corpus, run_dir: Path | None = None,
                 pretrain_steps: int | None = None) -> dict:
    """Four-arm recipe comparison at toy scale, plus the stage-0 pretraining
    run that provides the initialization checkpoint (by default twice the arm
    budget, standing in for a separately pretrained model).

    Arms: from-scratch AdamW, initialized AdamW, initialized LAMB, and
    initialized LAMB with masking run on the wall-clock budget the unmasked
    LAMB arm used (so its step count shows the masking speedup).
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    def final_loss(records):
        tail = [r.loss for r in records[-10:] if not r.overflow]
        return float(np.mean(tail)) if tail else float("nan")

    def run_arm(name, arm_cfg, budget=None):
        arm_dir = run_dir / name if run_dir is not None else None
        trainer = Trainer(arm_cfg, corpus, run_dir=arm_dir)
        t0 = time.perf_counter()
        trainer.train(max_seconds=budget)
        wall = time.perf_counter() - t0
        return {
            "name": name,
            "optimizer": arm_cfg.optimizer.kind,
            "init": arm_cfg.init_policy,
            "mask_ratio": arm_cfg.mask_ratio,
            "steps": trainer.schedule_step,
            "final_loss": final_loss(trainer.records),
            "wall_seconds": wall,
            "ckpt": str(arm_dir / "final.bin") if arm_dir is not None else "",
        }, trainer

    # arms keep only their final checkpoint so saving never skews the
    # wall-clock budget comparison
    base = replace(cfg, init_policy="scratch", init_checkpoint="",
                   checkpoint_interval=10 * cfg.total_steps)
    lamb = base.optimizer if base.optimizer.kind == "lamb" else replace(base.optimizer, kind="lamb")
    adamw = replace(lamb, kind="adamw")
    mask_ratio = cfg.mask_ratio if cfg.mask_ratio > 0 else 0.5

    pretrain_steps = pretrain_steps or 2 * cfg.total_steps
    pre_cfg = replace(base, optimizer=lamb, mask_ratio=0.0, total_steps=pretrain_steps,
                      warmup_steps=min(cfg.warmup_steps, pretrain_steps))
    pre_row, pre_trainer = run_arm("stage0-pretrain", pre_cfg)
    if run_dir is not None:
        init_path = run_dir / "stage0-pretrain" / "final.bin"
    else:
        init_path = Path(tempfile.mkdtemp(prefix="deskclip-ablate-")) / "stage0.bin"
        pre_trainer.save(init_path)

    init = dict(init_policy="both-from-checkpoint", init_checkpoint=str(init_path))
    rows = [pre_row]
    arm1, _ = run_arm("scratch-adamw", replace(base, optimizer=adamw, mask_ratio=0.0))
    arm2, _ = run_arm("init-adamw", replace(base, optimizer=adamw, mask_ratio=0.0, **init))
    arm3, _ = run_arm("init-lamb", replace(base, optimizer=lamb, mask_ratio=0.0, **init))
    arm4, _ = run_arm(
        "init-lamb-mask",
        replace(base, optimizer=lamb, mask_ratio=mask_ratio,
                total_steps=cfg.total_steps * 4, **init),
        budget=arm3["wall_seconds"],
    )
    rows += [arm1, arm2, arm3, arm4]

    report = {
        "arms": rows,
        "checks": {
            "init_beats_scratch": arm2["final_loss"] < arm1["final_loss"],
            "masked_steps_multiple": arm4["steps"] / max(arm3["steps"], 1),
        },
    }
    if run_dir is not None:
        (run_dir / "ablate.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (run_dir / "ablate.txt").write_text(format_ablation_table(report))
    return report


def format_ablation_table(report: dict) -> str:
    header = f"{'arm':<18} {'optimizer':<9} {'init':<22} {'mask':>5} {'steps':>6} {'loss':>8} {'wall s':>8}"
    lines = [header, "-" * len(header)]
    for row in report["arms"]:
        lines.append(
            f"{row['name']:<18} {row['optimizer']:<9} {row['init']:<22} "
            f"{row['mask_ratio']:>5.2f} {row['steps']:>6d} {row['final_loss']:>8.4f} "
            f"{row['wall_seconds']:>8.2f}"
        )
    checks = report["checks"]
    lines.append("")
    lines.append(f"init beats scratch: {checks['init_beats_scratch']}")
    lines.append(f"masked steps multiple at equal wall-clock: {checks['masked_steps_multiple']:.2f}x")
    return "\n".join(lines) + "\n"
