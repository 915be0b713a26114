"""Alternating adversarial training, ablation conditions and the ablation matrix."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import losses, metrics
from .data import SampleError, epoch_order, load_manifest, make_training_sample
from .imagecore import apply_attention
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    ModelBundle,
    VGG16_WIDTHS,
    build_discriminator,
    build_generator,
    discriminator_logits,
    generator_forward,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class Ablation(str, Enum):
    DEFAULT = "DEFAULT"  # guided reconstruction + guided adversarial
    R_PLUS_A = "R_PLUS_A"  # both losses, no attention
    R_ONLY = "R_ONLY"  # reconstruction only, no discriminator
    UNET_SCRATCH = "UNET_SCRATCH"  # from-scratch U-Net


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    lam: float = 1.0
    lr_generator: float = 2e-5
    lr_discriminator: float = 2e-6
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1000
    batch_size: int = 1
    crop: int = 224
    seed: int = 0
    ablation: Ablation = Ablation.DEFAULT
    manifest: str | None = None
    weights: str | None = None
    output_dir: str = "runs/default"
    checkpoint_every: int = 50
    allow_lr_override: bool = False
    unet_adversarial: bool = False
    conditional_discriminator: bool = False
    width_divisor: int = 1

    def __post_init__(self):
        self.ablation = Ablation(self.ablation)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.lr_discriminator >= self.lr_generator:
            if not self.allow_lr_override:
                raise ConfigError(
                    "lr_discriminator must be below lr_generator (set allow_lr_override to force)"
                )
            log.warning(
                "lr_discriminator %g >= lr_generator %g; training is likely to diverge",
                self.lr_discriminator,
                self.lr_generator,
            )
        if self.batch_size < 1 or self.epochs < 0 or self.width_divisor < 1:
            raise ConfigError("batch_size and width_divisor must be >= 1, epochs >= 0")

    @property
    def uses_discriminator(self) -> bool:
        if self.ablation is Ablation.R_ONLY:
            return False
        if self.ablation is Ablation.UNET_SCRATCH:
            return self.unet_adversarial
        return True

    @property
    def uses_attention(self) -> bool:
        return self.ablation is Ablation.DEFAULT

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.uses_discriminator else 0.0

    def generator_spec(self) -> GeneratorSpec:
        if self.ablation is Ablation.UNET_SCRATCH:
            return GeneratorSpec.scratch_unet(self.width_divisor)
        widths = tuple(w // self.width_divisor for w in VGG16_WIDTHS)
        return GeneratorSpec(widths=widths, pretrained=self.weights is not None)

    def discriminator_spec(self) -> DiscriminatorSpec | None:
        if not self.uses_discriminator:
            return None
        return DiscriminatorSpec(
            in_channels=6 if self.conditional_discriminator else 3, base_width=64 // self.width_divisor
        )

    def hash(self) -> str:
        """Digest of everything that determines the trajectory (not length or paths)."""
        d = dataclasses.asdict(self)
        for k in ("epochs", "output_dir", "checkpoint_every", "manifest", "weights"):
            d.pop(k)
        d["ablation"] = self.ablation.value
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


CONFIG_ALIASES = {"lambda": "lam"}


def _coerce(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if raw.lower() in ("none", "") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: not a boolean: {raw!r}")
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{f.name}: {exc}") from exc
    return raw


def config_fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def parse_overrides(pairs: dict[str, str]) -> dict:
    fields = config_fields()
    out = {}
    for key, raw in pairs.items():
        name = CONFIG_ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _coerce(fields[name], str(raw))
    return out


def read_config_file(path: str | Path) -> dict:
    """``key = value`` lines (an optional ``[run]`` header is allowed); keys are RunConfig names."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None)
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_overrides(dict(parser["run"])) if parser.has_section("run") else {}


def make_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Defaults < config file < keyword overrides."""
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


@dataclass
class TrainState:
    config: RunConfig
    generator: torch.nn.Module
    discriminator: torch.nn.Module | None
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer | None
    epoch: int = 0
    step: int = 0
    history: list[losses.LossBreakdown] = field(default_factory=list)
    rec_epoch1: list[float] = field(default_factory=list)
    high_rec_streak: int = 0

    def bundle(self) -> ModelBundle:
        c = self.config
        return ModelBundle(
            self.generator,
            self.generator.spec,
            self.discriminator,
            None if self.discriminator is None else self.discriminator.spec,
            {"epoch": self.epoch, "step": self.step, "config_hash": c.hash(), "ablation": c.ablation.value},
        )


def init_state(config: RunConfig) -> TrainState:
    torch.manual_seed(config.seed)
    gspec = config.generator_spec()
    generator = build_generator(gspec, config.weights, seed=config.seed)
    betas = (config.adam_beta1, config.adam_beta2)
    params = list(generator.parameters())
    opt_g = torch.optim.Adam(params, lr=config.lr_generator, betas=betas, eps=config.adam_eps) if params else None
    discriminator = opt_d = None
    dspec = config.discriminator_spec()
    if dspec is not None:
        discriminator = build_discriminator(dspec, seed=config.seed + 1)
        opt_d = torch.optim.Adam(
            discriminator.parameters(), lr=config.lr_discriminator, betas=betas, eps=config.adam_eps
        )
    return TrainState(config, generator, discriminator, opt_g, opt_d)


def collate(samples) -> dict:
    def stack(key, channels_last=True):
        arr = np.stack([getattr(s, key) for s in samples])
        if channels_last:
            arr = arr.transpose(0, 3, 1, 2)
        else:
            arr = arr[:, None]
        return torch.from_numpy(np.ascontiguousarray(arr)).float()

    return {
        "flash": stack("flash_crop"),
        "ambient": stack("ambient_crop"),
        "attention": stack("attention", channels_last=False),
        "pair_ids": [s.pair_id for s in samples],
    }


def _disc_input(state: TrainState, flash, image):
    if state.config.conditional_discriminator:
        return torch.cat([flash, image], dim=1)
    return image


def _masks(state: TrainState, batch):
    if state.config.uses_attention:
        return batch["attention"]
    return torch.ones_like(batch["attention"])


def compute_losses(state: TrainState, batch, lam: float | None = None) -> losses.LossBreakdown:
    """Evaluate every loss term for ``batch`` without touching parameters."""
    lam = state.config.effective_lambda if lam is None else lam
    with torch.no_grad():
        fake = generator_forward(state.generator, batch["flash"])
        mask = _masks(state, batch)
        real_m = apply_attention(batch["ambient"], mask)
        fake_m = apply_attention(fake, mask)
        rec = losses.reconstruction_loss(real_m, fake_m)
        adv_d, adv_g = None, torch.zeros(())
        if state.discriminator is not None:
            d_real = discriminator_logits(state.discriminator, _disc_input(state, batch["flash"], real_m))
            d_fake = discriminator_logits(state.discriminator, _disc_input(state, batch["flash"], fake_m))
            adv_d = float(losses.discriminator_loss_logits(d_real, d_fake))
            adv_g = losses.generator_adversarial_loss_logits(d_fake)
        total = losses.total_generator_loss(rec, adv_g, lam)
    return losses.LossBreakdown(float(rec), adv_d, float(adv_g), float(total), lam)


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _step_losses(state: TrainState, flash, real_m, fake_m, lam):
    """Discriminator update (fake detached), then the generator objective against the updated D."""
    adv_d = None
    adv_g = torch.zeros(())
    if state.discriminator is not None:
        D = state.discriminator
        _set_requires_grad(D, True)
        state.opt_d.zero_grad(set_to_none=True)
        d_loss = losses.discriminator_loss_logits(
            discriminator_logits(D, _disc_input(state, flash, real_m)),
            discriminator_logits(D, _disc_input(state, flash, fake_m.detach())),
        )
        d_loss.backward()
        state.opt_d.step()
        adv_d = d_loss.item()
        _set_requires_grad(D, False)
        adv_g = losses.generator_adversarial_loss_logits(discriminator_logits(D, _disc_input(state, flash, fake_m)))
    rec = losses.reconstruction_loss(real_m, fake_m)
    return adv_d, adv_g, rec, losses.total_generator_loss(rec, adv_g, lam)


def train_step(state: TrainState, batch) -> tuple[TrainState, losses.LossBreakdown]:
    """One discriminator update followed by one generator update."""
    cfg = state.config
    lam = cfg.effective_lambda
    flash = batch["flash"]
    mask = _masks(state, batch)
    fake = generator_forward(state.generator, flash)
    real_m = apply_attention(batch["ambient"], mask)
    fake_m = apply_attention(fake, mask)

    try:
        adv_d, adv_g, rec, total = _step_losses(state, flash, real_m, fake_m, lam)
    except losses.NumericError as exc:
        _dump_batch(state, batch)
        raise TrainingDiverged(f"{exc} at step {state.step} on pairs {batch['pair_ids']}") from exc
    if not torch.isfinite(total) or (adv_d is not None and not math.isfinite(adv_d)):
        _dump_batch(state, batch)
        raise TrainingDiverged(f"non-finite loss at step {state.step} on pairs {batch['pair_ids']}")
    if state.opt_g is not None:
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
    state.step += 1
    record = losses.LossBreakdown(rec.item(), adv_d, adv_g.item(), total.item(), lam)
    state.history.append(record)
    _divergence_guard(state, record)
    return state, record


def _dump_batch(state: TrainState, batch):
    out = Path(state.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(
        out / f"diverged_step{state.step}.npz",
        flash=batch["flash"].numpy(),
        ambient=batch["ambient"].numpy(),
        attention=batch["attention"].numpy(),
        pair_ids=np.array(batch["pair_ids"]),
    )


DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


def _divergence_guard(state: TrainState, record: losses.LossBreakdown):
    if state.epoch == 0:
        state.rec_epoch1.append(record.reconstruction)
        return
    baseline = float(np.mean(state.rec_epoch1)) if state.rec_epoch1 else math.inf
    if record.reconstruction > DIVERGENCE_FACTOR * baseline:
        state.high_rec_streak += 1
        if state.high_rec_streak >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(
                f"reconstruction loss above {DIVERGENCE_FACTOR}x its first-epoch mean "
                f"({baseline:.4g}) for {DIVERGENCE_PATIENCE} steps"
            )
    else:
        state.high_rec_streak = 0


def _optimizer_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, opt in (("optim_g", state.opt_g), ("optim_d", state.opt_d)):
        if opt is None:
            continue
        for idx, st in opt.state_dict()["state"].items():
            for key, val in st.items():
                out[f"{prefix}.{idx}.{key}"] = torch.as_tensor(val).reshape(val.shape if val.ndim else ())
    return out


def save_train_state(state: TrainState, path: str | Path) -> None:
    """Checkpoint the models plus optimizer moments and guard statistics."""
    bundle = state.bundle()
    bundle.training_meta["rec_epoch1"] = state.rec_epoch1
    bundle.training_meta["high_rec_streak"] = state.high_rec_streak
    save_checkpoint(bundle, path, extra=_optimizer_tensors(state))


def load_train_state(config: RunConfig, path: str | Path) -> TrainState:
    meta, tensors = read_checkpoint(path)
    tm = meta["training_meta"]
    if tm.get("config_hash") != config.hash():
        raise ConfigError(f"{path} was written by a different run configuration")
    state = init_state(config)
    state.generator.load_state_dict({k[10:]: v for k, v in tensors.items() if k.startswith("generator.")})
    if state.discriminator is not None:
        state.discriminator.load_state_dict(
            {k[14:]: v for k, v in tensors.items() if k.startswith("discriminator.")}
        )
    for prefix, opt in (("optim_g", state.opt_g), ("optim_d", state.opt_d)):
        if opt is None:
            continue
        sd = opt.state_dict()
        per_param: dict[int, dict] = {}
        for k, v in tensors.items():
            if k.startswith(prefix + "."):
                _, idx, key = k.split(".", 2)
                per_param.setdefault(int(idx), {})[key] = v
        sd["state"] = per_param
        opt.load_state_dict(sd)
    state.epoch, state.step = tm["epoch"], tm["step"]
    state.rec_epoch1 = list(tm.get("rec_epoch1", []))
    state.high_rec_streak = tm.get("high_rec_streak", 0)
    return state


def _training_pairs(config: RunConfig, pairs):
    if pairs is not None:
        return list(pairs)
    if config.manifest is None:
        raise ConfigError("no manifest configured and no in-memory pairs given")
    manifest = load_manifest(config.manifest)
    train_pairs = manifest.split("train")
    if not train_pairs:
        raise ConfigError(f"{config.manifest}: train split is empty")
    return train_pairs


def _read_log(path: Path, up_to_step: int) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in rows if r["step"] <= up_to_step]


def train(config: RunConfig, pairs=None, resume: str | Path | None = None) -> tuple[ModelBundle, list[dict]]:
    """Train for ``config.epochs`` epochs and return the final bundle and the step log.

    ``pairs`` overrides the manifest's train split with manifest entries or in-memory
    ``PairImages``. Checkpoints go to ``<output_dir>/checkpoints`` every
    ``checkpoint_every`` epochs and to ``<output_dir>/final.safetensors``; each holds
    the optimizer state needed to ``resume``.
    """
    out = Path(config.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    items = _training_pairs(config, pairs)
    if resume is not None:
        state = load_train_state(config, resume)
        rows = _read_log(log_path, state.step)
        log.info("resumed at epoch %d step %d", state.epoch, state.step)
    else:
        state = init_state(config)
        rows = []
    log_path.write_text("".join(json.dumps(r) + "\n" for r in rows))

    with log_path.open("a") as log_fh:
        while state.epoch < config.epochs:
            order = epoch_order(len(items), config.seed, state.epoch)
            for start in range(0, len(order), config.batch_size):
                samples = []
                for index in order[start : start + config.batch_size]:
                    try:
                        samples.append(
                            make_training_sample(items[index], config.seed, state.epoch, int(index), config.crop)
                        )
                    except SampleError as exc:
                        log.warning("skipping sample: %s", exc)
                if not samples:
                    continue
                t0 = time.perf_counter()
                state, record = train_step(state, collate(samples))
                row = record.record(step=state.step, epoch=state.epoch + 1)
                row["wall_ms"] = round((time.perf_counter() - t0) * 1000, 3)
                rows.append(row)
                log_fh.write(json.dumps(row) + "\n")
            log_fh.flush()
            state.epoch += 1
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                save_train_state(state, out / "checkpoints" / f"epoch_{state.epoch:04d}.safetensors")
            if state.history:
                log.info("epoch %d: R=%.4f L=%.4f", state.epoch, state.history[-1].reconstruction, state.history[-1].total_g)
    save_train_state(state, out / "final.safetensors")
    state.history.clear()
    return state.bundle(), rows


@dataclass
class AblationRow:
    condition: Ablation
    psnr: float
    ssim: float
    discriminator_params: int
    error: str | None = None


def run_ablation_matrix(
    base: RunConfig, conditions=tuple(Ablation), train_pairs=None, test_pairs=None
) -> list[AblationRow]:
    """Train and evaluate each condition with the shared data and seed.

    A failing condition is recorded in its row and the others still run.
    """
    rows = []
    for cond in conditions:
        cond = Ablation(cond)
        cfg = dataclasses.replace(base, ablation=cond, output_dir=str(Path(base.output_dir) / cond.value))
        if cond is Ablation.UNET_SCRATCH:
            cfg = dataclasses.replace(cfg, weights=None)
        try:
            bundle, _ = train(cfg, train_pairs)
            test = test_pairs if test_pairs is not None else load_manifest(cfg.manifest)
            report = metrics.evaluate(test, bundle)
            n_disc = 0 if bundle.discriminator is None else sum(p.numel() for p in bundle.discriminator.parameters())
            rows.append(AblationRow(cond, report.mean_psnr, report.mean_ssim, n_disc))
        except Exception as exc:  # noqa: BLE001 - one condition must not sink the matrix
            log.exception("condition %s failed", cond.value)
            rows.append(AblationRow(cond, math.nan, math.nan, 0, f"{type(exc).__name__}: {exc}"))
    return rows


ABLATION_LABELS = {
    Ablation.DEFAULT: "1. Default (R_M + A_M)",
    Ablation.R_PLUS_A: "2. R + A",
    Ablation.R_ONLY: "3. R",
    Ablation.UNET_SCRATCH: "4. U-Net",
}


def format_ablation_table(rows: list[AblationRow]) -> str:
    body = [(ABLATION_LABELS[r.condition], r.psnr, r.ssim) for r in rows]
    ref = ", ".join(f"{k} {p:.2f}/{s:.3f}" for k, (p, s) in metrics.REFERENCE_ABLATION.items())
    footer = (
        "reference values at full scale (1000 epochs on the curated FAID split, not reproduced here): " + ref
    )
    errors = [f"{r.condition.value} failed: {r.error}" for r in rows if r.error]
    return metrics.format_table(body, header="Condition", footer="\n".join(errors + [footer]))
