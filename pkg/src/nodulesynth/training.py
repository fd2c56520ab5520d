"""Staged alternating optimization of the in-painting GAN.

Phase 1 (< adv_start_step): the generator trains on reconstruction only and
the critics are untouched. Phase 2 adds the Wasserstein terms with
``critic_steps_per_gen_step`` critic updates per generator update. Phase 3
(>= cls_start_step) adds the auxiliary domain-class terms to both sides.
The set of active loss terms only ever grows.

All per-step randomness (noise refills, interpolation coefficients, data
order) derives from ``config.seed`` and the step index, so resumed runs
replay the identical stream. A single training thread owns all parameters;
batches are immutable once handed to a step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from nodulesynth.critics import Critic, CriticConfig, build_critic, crop_local, load_critic, save_critic
from nodulesynth.generator import (
    GeneratorConfig,
    InpaintGenerator,
    build_generator,
    load_generator,
    save_generator,
)
from nodulesynth.losses import (
    LossReport,
    LossWeights,
    aux_class_loss,
    critic_objective,
    generator_objective,
    gradient_penalty,
    recon_loss,
    wgan_losses,
)
from nodulesynth.patches import PatchSample, apply_noise_mask, make_label_map
from nodulesynth.seeding import derive_seed
from nodulesynth.volume_io import DOMAIN_FAKE, LABEL_BENIGN, LABEL_MALIGNANT

logger = logging.getLogger(__name__)

_RUNNING_DECAY = 0.99


@dataclass
class GanConfig:
    """Hyperparameters and staged schedule for GAN training."""

    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic_local: CriticConfig = field(default_factory=lambda: CriticConfig(input_kind="local"))
    critic_global: CriticConfig = field(default_factory=lambda: CriticConfig(input_kind="global"))
    critic_steps_per_gen_step: int = 5
    recon_only_steps: int = 200
    adv_start_step: int = 200
    cls_start_step: int = 400
    total_steps: int = 600
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    seed: int = 0
    checkpoint_every: int = 0  # 0: checkpoint only at phase boundaries and the end

    def __post_init__(self) -> None:
        if not 0 <= self.recon_only_steps <= self.adv_start_step <= self.cls_start_step <= self.total_steps:
            raise ValueError(
                "phase boundaries must satisfy recon_only_steps <= adv_start_step "
                f"<= cls_start_step <= total_steps, got {self.recon_only_steps}, "
                f"{self.adv_start_step}, {self.cls_start_step}, {self.total_steps}"
            )
        if self.critic_steps_per_gen_step < 1:
            raise ValueError("critic_steps_per_gen_step must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.critic_local.input_kind != "local" or self.critic_global.input_kind != "global":
            raise ValueError("critic_local/critic_global input_kind fields are fixed")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GanConfig":
        def build(section_cls, section: dict, ctx: str):
            allowed = {f.name for f in fields(section_cls)}
            unknown = set(section) - allowed
            if unknown:
                raise ValueError(f"unknown keys {sorted(unknown)} in config section {ctx!r}")
            if section_cls is CriticConfig and "local_shape" in section:
                section = dict(section, local_shape=tuple(section["local_shape"]))
            return section_cls(**section)

        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)} in GAN config")
        kwargs = dict(data)
        for name, section_cls in (
            ("weights", LossWeights),
            ("generator", GeneratorConfig),
            ("critic_local", CriticConfig),
            ("critic_global", CriticConfig),
        ):
            if name in kwargs:
                kwargs[name] = build(section_cls, kwargs[name], name)
        return cls(**kwargs)


@dataclass
class TrainState:
    step: int
    generator: InpaintGenerator
    critic_local: Critic
    critic_global: Critic
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: GanConfig
    running: dict[str, float] = field(default_factory=dict)


def phase_of(step: int, config: GanConfig) -> int:
    if step < config.adv_start_step:
        return 1
    if step < config.cls_start_step:
        return 2
    return 3


def init_train_state(config: GanConfig) -> TrainState:
    gen = build_generator(config.generator, derive_seed(config.seed, "init", "generator"))
    d_local = build_critic(config.critic_local, derive_seed(config.seed, "init", "critic_local"))
    d_global = build_critic(config.critic_global, derive_seed(config.seed, "init", "critic_global"))
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(
        list(d_local.parameters()) + list(d_global.parameters()),
        lr=config.lr_d,
        betas=(config.beta1, config.beta2),
    )
    return TrainState(
        step=0,
        generator=gen,
        critic_local=d_local,
        critic_global=d_global,
        opt_g=opt_g,
        opt_d=opt_d,
        config=config,
    )


def _label_value(label: int) -> float:
    if label == LABEL_BENIGN:
        return 0.0
    if label == LABEL_MALIGNANT:
        return 1.0
    raise ValueError(f"label must be 1 or 2, got {label}")


def _batch_arrays(batch: Sequence[PatchSample]) -> dict[str, torch.Tensor]:
    raw = torch.from_numpy(np.stack([s.raw for s in batch])[:, None]).float()
    mask = torch.from_numpy(np.stack([s.mask for s in batch])[:, None].astype(np.float32))
    label_map = torch.from_numpy(
        np.stack([make_label_map(s.label, s.raw.shape) for s in batch])[:, None]
    )
    labels = torch.tensor([s.label for s in batch], dtype=torch.long)
    return {"raw": raw, "mask": mask, "label_map": label_map, "labels": labels}


def _fresh_masked(batch: Sequence[PatchSample], config: GanConfig, step: int, tag: str) -> torch.Tensor:
    arrays = [
        apply_noise_mask(s.raw, s.mask, derive_seed(config.seed, "noise", step, tag, i))
        for i, s in enumerate(batch)
    ]
    return torch.from_numpy(np.stack(arrays)[:, None]).float()


def _local_crops(images: torch.Tensor, masks: torch.Tensor, config: CriticConfig) -> torch.Tensor:
    crops = [
        crop_local(images[i, 0], masks[i, 0], config.local_crop_margin, config.local_shape)
        for i in range(images.shape[0])
    ]
    return torch.stack(crops)[:, None]


def _local_label_map(label_map: torch.Tensor, shape: tuple[int, int, int]) -> torch.Tensor:
    values = label_map.reshape(label_map.shape[0], -1)[:, :1]  # constant per sample
    return values.reshape(-1, 1, 1, 1, 1).expand(-1, 1, *shape).contiguous()


def _critic_update(
    state: TrainState,
    tensors: dict[str, torch.Tensor],
    fake: torch.Tensor,
    phase: int,
    step: int,
    k: int,
) -> dict[str, float | torch.Tensor]:
    config = state.config
    w = config.weights
    raw, mask, label_map, labels = (
        tensors["raw"],
        tensors["mask"],
        tensors["label_map"],
        tensors["labels"],
    )
    local_shape = config.critic_local.local_shape
    lm_local = _local_label_map(label_map, local_shape)
    real_local = _local_crops(raw, mask, config.critic_local)
    fake_local = _local_crops(fake, mask, config.critic_local)

    terms: dict[str, float | torch.Tensor] = {}
    adv, cls = [], []
    for name, critic, real_x, fake_x, lm in (
        ("local", state.critic_local, real_local, fake_local, lm_local),
        ("global", state.critic_global, raw, fake, label_map),
    ):
        real_out = critic(real_x, lm)
        fake_out = critic(fake_x, lm)
        gp = gradient_penalty(
            lambda x, c=critic, m=lm: c(x, m).wscore,
            real_x,
            fake_x,
            w.lambda_gp,
            seed=derive_seed(config.seed, "gp", step, k, name),
        )
        l_adv = wgan_losses(real_out.wscore, fake_out.wscore, gp)
        adv.append(l_adv)
        terms[f"l_adv_{name}"] = l_adv
        terms[f"gp_{name}"] = gp
        if phase >= 3:
            fake_targets = torch.full_like(labels, DOMAIN_FAKE)
            cls.append(
                0.5 * (aux_class_loss(real_out.class_logits, labels)
                       + aux_class_loss(fake_out.class_logits, fake_targets))
            )
    l_adv_mean = 0.5 * (adv[0] + adv[1])
    l_cls_d = 0.5 * (cls[0] + cls[1]) if cls else torch.zeros(())
    loss_d = critic_objective(l_adv_mean, l_cls_d, w)

    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()
    terms["l_cls_d"] = l_cls_d
    terms["l_d_total"] = loss_d
    return terms


def train_step(
    state: TrainState,
    batch: Sequence[PatchSample],
    config: GanConfig,
    monitor: Callable[[dict], None] | None = None,
) -> tuple[TrainState, LossReport]:
    """One scheduled step; mutates ``state`` in place and returns it.

    ``monitor``, when given, receives the generator-update tensors
    (masked/mask/raw inputs and the GeneratorOutput) after the update.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    step = state.step
    phase = phase_of(step, config)
    w = config.weights
    tensors = _batch_arrays(batch)
    raw, mask, label_map, labels = (
        tensors["raw"],
        tensors["mask"],
        tensors["label_map"],
        tensors["labels"],
    )

    critic_terms: dict[str, float | torch.Tensor] = {}
    if phase >= 2:
        for k in range(config.critic_steps_per_gen_step):
            masked_k = _fresh_masked(batch, config, step, f"d{k}")
            with torch.no_grad():
                fake = state.generator.generate(masked_k, mask, label_map).composite
            critic_terms = _critic_update(state, tensors, fake, phase, step, k)

    # Generator update.
    masked = _fresh_masked(batch, config, step, "g")
    out = state.generator.generate(masked, mask, label_map)
    lm_c, lg_c, _ = recon_loss(out.coarse, raw, mask, w.lambda1)
    lm_r, lg_r, _ = recon_loss(out.refined, raw, mask, w.lambda1)
    l_masked = 0.5 * (lm_c + lm_r)
    l_global = 0.5 * (lg_c + lg_r)
    l_recon = l_masked + w.lambda1 * l_global

    l_cls_g = torch.zeros(())
    adv_terms: list[torch.Tensor] = []
    if phase >= 2:
        fake_local = _local_crops(out.composite, mask, config.critic_local)
        lm_local = _local_label_map(label_map, config.critic_local.local_shape)
        out_local = state.critic_local(fake_local, lm_local)
        out_global = state.critic_global(out.composite, label_map)
        adv_terms = [out_local.wscore.mean(), out_global.wscore.mean()]
        if phase >= 3:
            l_cls_g = 0.5 * (
                aux_class_loss(out_local.class_logits, labels)
                + aux_class_loss(out_global.class_logits, labels)
            )
    if phase == 1:
        loss_g = w.lambda_recon * l_recon
    else:
        loss_g = generator_objective(adv_terms, l_cls_g, l_recon, w)

    state.opt_g.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()
    state.opt_d.zero_grad(set_to_none=True)  # discard critic grads from the generator pass

    def scalar(value) -> float:
        return float(value.detach()) if torch.is_tensor(value) else float(value)

    report = LossReport(
        l_masked=scalar(l_masked),
        l_global=scalar(l_global),
        l_recon=scalar(l_recon),
        l_adv_local=scalar(critic_terms.get("l_adv_local", 0.0)),
        l_adv_global=scalar(critic_terms.get("l_adv_global", 0.0)),
        gp_local=scalar(critic_terms.get("gp_local", 0.0)),
        gp_global=scalar(critic_terms.get("gp_global", 0.0)),
        l_cls_d=scalar(critic_terms.get("l_cls_d", 0.0)),
        l_cls_g=scalar(l_cls_g),
        l_d_total=scalar(critic_terms.get("l_d_total", 0.0)),
        l_g_total=scalar(loss_g),
    )
    _abort_on_nonfinite(report, step)
    for key, value in asdict(report).items():
        prev = state.running.get(key, value)
        state.running[key] = _RUNNING_DECAY * prev + (1 - _RUNNING_DECAY) * value

    if monitor is not None:
        monitor({"masked": masked, "mask": mask, "raw": raw, "labels": labels, "output": out})
    state.step = step + 1
    return state, report


def _abort_on_nonfinite(report: LossReport, step: int) -> None:
    for name, value in asdict(report).items():
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite loss term {name!r} at step {step}")


def _batch_indices(n_samples: int, batch_size: int, step: int, seed: int) -> list[int]:
    per_epoch = max(n_samples // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    rng = np.random.default_rng(derive_seed(seed, "order", epoch))
    perm = rng.permutation(n_samples)
    if n_samples < batch_size:
        perm = np.tile(perm, -(-batch_size // n_samples))
    return perm[pos * batch_size : pos * batch_size + batch_size].tolist()


def train(
    dataset: Sequence[PatchSample],
    config: GanConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    step_callback: Callable[[TrainState, LossReport, dict], None] | None = None,
) -> TrainState:
    """Run the staged schedule over ``dataset`` with seeded shuffling.

    Checkpoints land in ``out_dir/checkpoints/step_NNNNNN``; the training
    log (one JSON object per step) is appended to ``out_dir/train_log.ndjson``.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    shapes = {s.raw.shape for s in dataset}
    if len(shapes) != 1:
        raise ValueError(f"all samples must share one patch shape, got {shapes}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_train_state(resume_from)
        _check_resume_config(state.config, config)
        state.config = config
    else:
        state = init_train_state(config)

    boundaries = {config.adv_start_step, config.cls_start_step, config.total_steps}
    if config.total_steps == 0 or state.step >= config.total_steps:
        save_train_state(state, _ckpt_dir(out_dir, state.step))
        return state

    log_path = out_dir / "train_log.ndjson"
    with open(log_path, "a", encoding="utf-8") as log:
        while state.step < config.total_steps:
            idx = _batch_indices(len(dataset), config.batch_size, state.step, config.seed)
            batch = [dataset[i] for i in idx]
            extras_holder: dict = {}
            monitor = (lambda e: extras_holder.update(e)) if step_callback else None
            state, report = train_step(state, batch, config, monitor=monitor)
            record = {"step": state.step - 1, "wall_time": time.time()}
            record.update(json.loads(report.to_json()))
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if step_callback is not None:
                step_callback(state, report, extras_holder)
            hit_every = config.checkpoint_every and state.step % config.checkpoint_every == 0
            if state.step in boundaries or hit_every:
                save_train_state(state, _ckpt_dir(out_dir, state.step))
    return state


def _check_resume_config(saved: GanConfig, requested: GanConfig) -> None:
    a, b = saved.to_dict(), requested.to_dict()
    for key in ("total_steps", "checkpoint_every"):
        a.pop(key), b.pop(key)
    if a != b:
        diff = [k for k in a if a[k] != b[k]]
        raise ValueError(f"resume config differs from checkpoint in fields {diff}")


def _ckpt_dir(out_dir: Path, step: int) -> Path:
    return out_dir / "checkpoints" / f"step_{step:06d}"


def save_train_state(state: TrainState, ckpt_dir: str | Path) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_generator(state.generator, ckpt_dir / "generator")
    save_critic(state.critic_local, ckpt_dir / "critic_local")
    save_critic(state.critic_global, ckpt_dir / "critic_global")
    torch.save(
        {"opt_g": state.opt_g.state_dict(), "opt_d": state.opt_d.state_dict()},
        ckpt_dir / "optim.pt",
    )
    with open(ckpt_dir / "state.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"step": state.step, "config": state.config.to_dict(), "running": state.running},
            fh,
            indent=1,
            sort_keys=True,
        )


def load_train_state(ckpt_dir: str | Path) -> TrainState:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "state.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = GanConfig.from_dict(meta["config"])
    gen = load_generator(ckpt_dir / "generator")
    d_local = load_critic(ckpt_dir / "critic_local")
    d_global = load_critic(ckpt_dir / "critic_global")
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(
        list(d_local.parameters()) + list(d_global.parameters()),
        lr=config.lr_d,
        betas=(config.beta1, config.beta2),
    )
    opt_state = torch.load(ckpt_dir / "optim.pt", weights_only=True)
    opt_g.load_state_dict(opt_state["opt_g"])
    opt_d.load_state_dict(opt_state["opt_d"])
    return TrainState(
        step=int(meta["step"]),
        generator=gen,
        critic_local=d_local,
        critic_global=d_global,
        opt_g=opt_g,
        opt_d=opt_d,
        config=config,
        running={k: float(v) for k, v in meta.get("running", {}).items()},
    )


def synthesize_dataset(
    state: TrainState | InpaintGenerator,
    source: Sequence[PatchSample],
    target_label: int,
    n: int,
    seed: int,
    batch_size: int = 8,
) -> list[PatchSample]:
    """Generate ``n`` class-conditioned patches from re-noised source patches.

    Sources are sampled with replacement; each keeps its annotated-diameter
    mask but receives fresh seeded noise and the requested target label.
    Deterministic given (state, source, seed).
    """
    if target_label not in (LABEL_BENIGN, LABEL_MALIGNANT):
        raise ValueError(f"target_label must be 1 or 2, got {target_label}")
    if n == 0:
        return []
    if not source:
        raise ValueError("source patch list must be non-empty")
    generator = state.generator if isinstance(state, TrainState) else state
    if isinstance(state, TrainState) and state.step == 0:
        logger.warning("synthesizing from an untrained state (step 0)")

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(source), size=n)
    generator.eval()
    results: list[PatchSample] = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            chunk = picks[start : start + batch_size]
            sources = [source[int(i)] for i in chunk]
            masked_np = [
                apply_noise_mask(s.raw, s.mask, derive_seed(seed, "synth-noise", start + j))
                for j, s in enumerate(sources)
            ]
            masked = torch.from_numpy(np.stack(masked_np)[:, None]).float()
            mask = torch.from_numpy(np.stack([s.mask for s in sources])[:, None].astype(np.float32))
            label_map = torch.from_numpy(
                np.stack([make_label_map(target_label, s.raw.shape) for s in sources])[:, None]
            )
            out = generator.generate(masked, mask, label_map)
            composites = out.composite[:, 0].numpy()
            for j, s in enumerate(sources):
                sample = PatchSample(
                    raw=composites[j].astype(np.float32),
                    masked=masked_np[j],
                    mask=s.mask.copy(),
                    label=target_label,
                    diameter_mm=s.diameter_mm,
                    spacing=s.spacing,
                    synthetic=True,
                )
                sample.validate()
                results.append(sample)
    generator.train()
    return results
