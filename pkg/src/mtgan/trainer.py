"""Joint multitask optimization of the encoder, generator, critic, and classifier.

Each parameter group minimizes only its own objective:

* encoder:    w_triplet * L_T, plus (when the GAN is on) the generator-path
              feedback w_generator * L_G and, with the classifier on, the
              fake-sample softmax w_softmax * L_S(fake) — the embedding is the
              only route by which the classifier and critic reach the encoder;
* classifier: w_softmax * cross-entropy on real and fake samples, fakes
              labeled with the speaker of their conditioning embedding;
* critic:     w_critic * (mean fake - mean real + gp_lambda * penalty), once
              per round;
* generator:  w_generator * (-mean critic(fake)) plus the fake-sample softmax
              consistency term, g_steps_per_d_step times per round.

The weighted sum of all four components is computed only for logging. A
disabled module is never evaluated, so its parameters and buffers stay
bitwise unchanged. One logical thread mutates parameters; checkpoint writes
are atomic (write temp, then rename).

Noise draw order within a step (all from the per-epoch torch generator):
conditioning noise for the encoder round, the gradient-penalty mix, then one
noise batch per generator substep.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from . import losses, nets, sampler
from .features import FbankSlice, FeatureSet, save_features
from .losses import LossWeights, NonFiniteLossError
from .nets import NetBundle
from .sampler import SamplingPlan, TripletBatch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CSV_HEADER = ["step", "epoch", "L_T", "L_S", "L_G", "L_D", "total"]

_ADAM_BETAS = (0.9, 0.999)
_ADAM_BETAS_GAN = (0.0, 0.9)  # moment settings that keep the critic pair stable


class ConfigError(ValueError):
    """Invalid training configuration or config file."""


class CheckpointError(ValueError):
    """A checkpoint could not be loaded or does not match the config."""


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; training aborted."""


TRIPLET_REDUCTIONS = ("sum", "mean")
GAN_OBJECTIVES = ("wgan_gp", "log_loss")


@dataclass
class TrainConfig:
    """Every knob of the training pipeline; parses from flat key=value text."""

    # loss weights and margin
    w_triplet: float = 0.1
    w_softmax: float = 0.2
    w_generator: float = 0.2
    w_critic: float = 0.5
    margin: float = 0.2
    # sampling plan
    n_speakers: int = 10
    anchors_per_speaker: int = 2
    positives_per_anchor: int = 2
    negative_classes: int = 5
    negatives_per_class: int = 1
    sampling_mode: str = "random"
    # network sizes
    embed_dim: int = 512
    noise_dim: int = 128
    input_size: int = 128
    base_channels: int = 16
    # optimization
    lr_encoder: float = 1e-3
    lr_classifier: float = 1e-3
    lr_generator: float = 1e-4
    lr_critic: float = 1e-4
    g_steps_per_d_step: int = 2
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    # ablation switches and GAN details
    use_gan: bool = True
    use_softmax: bool = True
    use_triplet: bool = True
    gp_lambda: float = 10.0
    triplet_reduction: str = "sum"
    gan_objective: str = "wgan_gp"
    # artifacts
    dump_fakes_every: int = 0
    checkpoint_every: int = 0
    triple_log: str = ""

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("lr_encoder", "lr_classifier", "lr_generator", "lr_critic"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("w_triplet", "w_softmax", "w_generator", "w_critic", "gp_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.margin < 0:
            raise ConfigError(f"margin must be nonnegative, got {self.margin}")
        if not (self.use_gan or self.use_softmax or self.use_triplet):
            raise ConfigError("at least one of use_gan/use_softmax/use_triplet must be enabled")
        if self.g_steps_per_d_step < 1:
            raise ConfigError(f"g_steps_per_d_step must be >= 1, got {self.g_steps_per_d_step}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.triplet_reduction not in TRIPLET_REDUCTIONS:
            raise ConfigError(f"triplet_reduction must be one of {TRIPLET_REDUCTIONS}")
        if self.gan_objective not in GAN_OBJECTIVES:
            raise ConfigError(f"gan_objective must be one of {GAN_OBJECTIVES}")
        if self.sampling_mode not in sampler.MODES:
            raise ConfigError(f"sampling_mode must be one of {sampler.MODES}")
        for name in ("embed_dim", "noise_dim", "base_channels", "dump_fakes_every", "checkpoint_every"):
            if getattr(self, name) < 0 or (name in ("embed_dim", "noise_dim", "base_channels") and getattr(self, name) < 1):
                raise ConfigError(f"{name} is out of range: {getattr(self, name)}")

    def weights(self) -> LossWeights:
        return LossWeights(self.w_triplet, self.w_softmax, self.w_generator, self.w_critic)

    def plan(self) -> SamplingPlan:
        return SamplingPlan(
            n_speakers=self.n_speakers,
            anchors_per_speaker=self.anchors_per_speaker,
            positives_per_anchor=self.positives_per_anchor,
            negative_classes=self.negative_classes,
            negatives_per_class=self.negatives_per_class,
            mode=self.sampling_mode,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Parse flat `key = value` lines; '#' starts a comment. Unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, value, getattr(cls, key, None), lineno, path)
        return cls(**values)


def _coerce(key: str, value: str, default, lineno: int, path) -> object:
    kind = type(default)
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc


@dataclass
class LossRecord:
    """Per-step loss components; disabled components are logged as 0.0."""

    step: int
    epoch: int
    l_triplet: float
    l_softmax: float
    l_generator: float
    l_critic: float
    total: float

    def row(self) -> list[str]:
        return [
            str(self.step),
            str(self.epoch),
            repr(self.l_triplet),
            repr(self.l_softmax),
            repr(self.l_generator),
            repr(self.l_critic),
            repr(self.total),
        ]


@dataclass
class TrainState:
    """Step/epoch counters and the append-only loss history."""

    epoch: int = 0
    step: int = 0
    history: list[LossRecord] = field(default_factory=list)


def _epoch_torch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence(entropy=(seed, epoch, 0x7C)).generate_state(1)[0])


def _set_trainable(net: torch.nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Owns the four networks, their optimizers, and the step schedule."""

    def __init__(
        self,
        features: FeatureSet,
        config: TrainConfig,
        *,
        bundle: NetBundle | None = None,
        out_dir: str | Path | None = None,
        start_epoch: int = 0,
        start_step: int = 0,
    ):
        config.validate()
        features.validate()
        self.features = features
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.n_classes = features.n_classes
        self.bundle = bundle or nets.init_params(
            config.seed,
            input_size=config.input_size,
            embed_dim=config.embed_dim,
            noise_dim=config.noise_dim,
            n_classes=self.n_classes,
            base_channels=config.base_channels,
        )
        self.opts = {
            "encoder": torch.optim.Adam(
                self.bundle.encoder.parameters(), lr=config.lr_encoder, betas=_ADAM_BETAS
            ),
            "classifier": torch.optim.Adam(
                self.bundle.classifier.parameters(), lr=config.lr_classifier, betas=_ADAM_BETAS
            ),
            "generator": torch.optim.Adam(
                self.bundle.generator.parameters(), lr=config.lr_generator, betas=_ADAM_BETAS_GAN
            ),
            "critic": torch.optim.Adam(
                self.bundle.critic.parameters(), lr=config.lr_critic, betas=_ADAM_BETAS_GAN
            ),
        }
        self.state = TrainState(epoch=start_epoch, step=start_step)
        self._labels = torch.from_numpy(features.labels())
        self._matrices = torch.from_numpy(features.matrices()).unsqueeze(1)
        self._noise_rng = torch.Generator()
        self._noise_rng.manual_seed(_epoch_torch_seed(config.seed, start_epoch))
        self.last_checkpoint: Path | None = None
        self.capture_gradients = False
        self.last_gradients: dict[str, dict[str, torch.Tensor]] = {}

    # -- helpers ------------------------------------------------------------

    def _noise(self, n: int) -> torch.Tensor:
        return torch.randn(n, self.config.noise_dim, generator=self._noise_rng)

    def _gp_eps(self, n: int) -> torch.Tensor:
        return torch.rand((n, 1, 1, 1), generator=self._noise_rng)

    def _only(self, group: str) -> None:
        for name, net in self.bundle.named().items():
            _set_trainable(net, name == group)

    def _check_finite(self, name: str, value: torch.Tensor) -> None:
        if not torch.isfinite(value).all():
            ckpt = self.last_checkpoint or "none written yet"
            raise TrainingDivergedError(
                f"{name} loss is non-finite at step {self.state.step}; last good checkpoint: {ckpt}"
            )

    def _capture(self, group: str) -> None:
        if self.capture_gradients:
            net = self.bundle.named()[group]
            self.last_gradients[group] = {
                name: p.grad.detach().clone()
                for name, p in net.named_parameters()
                if p.grad is not None
            }

    def _gen_loss(self, fake_scores: torch.Tensor) -> torch.Tensor:
        if self.config.gan_objective == "wgan_gp":
            return -fake_scores.mean()
        return F.softplus(-fake_scores).mean()

    def _critic_loss(self, real_scores, fake_scores, gp) -> torch.Tensor:
        if self.config.gan_objective == "wgan_gp":
            return losses.gan_losses(real_scores, fake_scores, gp, self.config.gp_lambda)[1]
        return losses.log_loss_gan_losses(real_scores, fake_scores)[1]

    # -- the optimization round ----------------------------------------------

    def train_step(self, batch: TripletBatch) -> LossRecord:
        """One optimization round over a triplet batch; returns the loss record."""
        if len(batch) == 0:
            raise ValueError("empty triplet batch")
        cfg = self.config
        w = cfg.weights()
        x = self._matrices[batch.slice_ids]
        labels = self._labels[batch.slice_ids]
        triples = torch.from_numpy(batch.triples)
        enc, gen, critic, cls = (
            self.bundle.encoder,
            self.bundle.generator,
            self.bundle.critic,
            self.bundle.classifier,
        )
        l_t = l_s = l_g = l_d = 0.0

        # (i) encoder: triplet plus, with the GAN on, the generator-path terms.
        emb = fake = None
        if cfg.use_triplet or cfg.use_gan:
            self._only("encoder")
            enc.train()
            emb = enc(x)
            enc_loss = emb.sum() * 0.0
            if cfg.use_triplet:
                t = losses.triplet_loss(
                    emb[triples[:, 0]],
                    emb[triples[:, 1]],
                    emb[triples[:, 2]],
                    margin=cfg.margin,
                    reduction=cfg.triplet_reduction,
                )
                l_t = float(t.detach())
                enc_loss = enc_loss + w.triplet * t
            if cfg.use_gan:
                gen.train()
                z = self._noise(len(x))
                fake = gen(emb, z)
                enc_loss = enc_loss + w.generator * self._gen_loss(critic(fake))
                if cfg.use_softmax:
                    cls.train()
                    enc_loss = enc_loss + w.softmax * losses.softmax_loss(cls(fake), labels)
            self._check_finite("encoder", enc_loss)
            self.opts["encoder"].zero_grad(set_to_none=True)
            enc_loss.backward()
            self._capture("encoder")
            self.opts["encoder"].step()
            if fake is not None:
                fake = fake.detach()

        # (ii) classifier: softmax on real and (when available) fake samples,
        # fakes labeled with their conditioning speaker.
        if cfg.use_softmax:
            self._only("classifier")
            cls.train()
            if fake is not None:
                logits = cls(torch.cat([x, fake]))
                s = losses.softmax_loss(logits, torch.cat([labels, labels]))
            else:
                s = losses.softmax_loss(cls(x), labels)
            l_s = float(s.detach())
            self._check_finite("softmax", s)
            self.opts["classifier"].zero_grad(set_to_none=True)
            (w.softmax * s).backward()
            self._capture("classifier")
            self.opts["classifier"].step()

        # (iii) critic: one update per round.
        if cfg.use_gan:
            self._only("critic")
            gp = (
                losses.gradient_penalty(critic, x, fake, eps=self._gp_eps(len(x)))
                if cfg.gan_objective == "wgan_gp"
                else torch.zeros(())
            )
            d = self._critic_loss(critic(x), critic(fake), gp)
            l_d = float(d.detach())
            self._check_finite("critic", d)
            self.opts["critic"].zero_grad(set_to_none=True)
            (w.critic * d).backward()
            self._capture("critic")
            self.opts["critic"].step()

            # (iv) generator: several updates per critic update, fresh noise each.
            self._only("generator")
            emb_frozen = emb.detach()
            for sub in range(cfg.g_steps_per_d_step):
                gen.train()
                fresh = gen(emb_frozen, self._noise(len(x)))
                g = self._gen_loss(critic(fresh))
                if sub == 0:
                    l_g = float(g.detach())
                gen_loss = w.generator * g
                if cfg.use_softmax:
                    cls.train()
                    gen_loss = gen_loss + w.softmax * losses.softmax_loss(cls(fresh), labels)
                self._check_finite("generator", gen_loss)
                self.opts["generator"].zero_grad(set_to_none=True)
                gen_loss.backward()
                if sub == 0:
                    self._capture("generator")
                self.opts["generator"].step()

        for net in self.bundle.named().values():
            _set_trainable(net, True)

        try:
            total = losses.total_loss(l_t, l_s, l_g, l_d, w)
        except NonFiniteLossError as exc:
            ckpt = self.last_checkpoint or "none written yet"
            raise TrainingDivergedError(f"{exc}; last good checkpoint: {ckpt}") from exc
        self.state.step += 1
        record = LossRecord(self.state.step, self.state.epoch, l_t, l_s, l_g, l_d, total)
        self.state.history.append(record)
        return record

    # -- epochs and the full run ----------------------------------------------

    def epoch_batches(self, epoch: int) -> Iterator[TripletBatch]:
        return sampler.sample_epoch(
            self.config.plan(),
            self.features,
            encoder=self.bundle.encoder,
            batch_size=self.config.batch_size,
            epoch=epoch,
            margin=self.config.margin,
        )

    def train(self) -> Path:
        """Run epochs up to config.epochs; returns the final checkpoint path."""
        if self.out_dir is None:
            raise ValueError("trainer needs an out_dir to run the full loop")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.out_dir / "losses.csv"
        write_header = not csv_path.exists() or csv_path.stat().st_size == 0
        triple_log = open(self.config.triple_log, "a") if self.config.triple_log else None
        with csv_path.open("a", newline="") as fh:
            writer = csv.writer(fh)
            if write_header:
                writer.writerow(CSV_HEADER)
            for epoch in range(self.state.epoch, self.config.epochs):
                self.state.epoch = epoch
                self._noise_rng.manual_seed(_epoch_torch_seed(self.config.seed, epoch))
                for b, batch in enumerate(self.epoch_batches(epoch)):
                    record = self.train_step(batch)
                    writer.writerow(record.row())
                    if triple_log is not None:
                        triple_log.write("\n".join(sampler.format_triple_rows(epoch, b, batch)) + "\n")
                self.state.epoch = epoch + 1
                if self.config.dump_fakes_every and (epoch + 1) % self.config.dump_fakes_every == 0:
                    self.dump_fakes(self.out_dir / f"fakes_epoch{epoch + 1:04d}.mtgf")
                if self.config.checkpoint_every and (epoch + 1) % self.config.checkpoint_every == 0:
                    self.save_checkpoint(self.out_dir / f"checkpoint_epoch{epoch + 1:04d}.pt")
        if triple_log is not None:
            triple_log.close()
        return self.save_checkpoint(self.out_dir / "checkpoint_final.pt")

    def dump_fakes(self, path: Path, count: int = 16) -> None:
        """Generate samples conditioned on the first few corpus slices and save them."""
        count = min(count, len(self.features.slices))
        src = self.features.slices[:count]
        emb = nets.encode(self.bundle.encoder, np.stack([s.matrix for s in src]))
        z = self._noise(count)
        fakes = nets.generate(self.bundle.generator, emb, z).squeeze(1).numpy()
        slices = [
            FbankSlice(
                fakes[i],
                speaker_id=src[i].speaker_id,
                utterance_id=f"fake-e{self.state.epoch:04d}-{i:03d}",
            )
            for i in range(count)
        ]
        save_features(FeatureSet.from_slices(slices, tag="fake"), path)

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "n_classes": self.n_classes,
            "epoch": self.state.epoch,
            "step": self.state.step,
            "nets": {name: net.state_dict() for name, net in self.bundle.named().items()},
            "optimizers": {name: opt.state_dict() for name, opt in self.opts.items()},
        }
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)
        self.last_checkpoint = path
        return path


def train(features: FeatureSet, config: TrainConfig, out_dir: str | Path) -> Trainer:
    """Train from scratch; the returned trainer holds the nets and final checkpoint."""
    trainer = Trainer(features, config, out_dir=out_dir)
    trainer.train()
    return trainer


def load_checkpoint(path: str | Path) -> tuple[NetBundle, TrainConfig, dict]:
    """Load nets + config from a checkpoint; raises CheckpointError on problems."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('version') if isinstance(payload, dict) else '?'}"
        )
    config = TrainConfig.from_dict(payload["config"])
    bundle = nets.init_params(
        config.seed,
        input_size=config.input_size,
        embed_dim=config.embed_dim,
        noise_dim=config.noise_dim,
        n_classes=payload["n_classes"],
        base_channels=config.base_channels,
    )
    for name, net in bundle.named().items():
        net.load_state_dict(payload["nets"][name])
    return bundle, config, payload


def resume(
    checkpoint: str | Path,
    features: FeatureSet,
    config: TrainConfig | None = None,
    out_dir: str | Path | None = None,
) -> Trainer:
    """Continue a run from a checkpoint; everything but `epochs` must match.

    The resumed run's batches and noise re-derive from (seed, epoch), so its
    steps bit-match an uninterrupted run on the same platform.
    """
    bundle, stored, payload = load_checkpoint(checkpoint)
    if config is not None:
        mismatches = [
            key
            for key, value in stored.to_dict().items()
            if key != "epochs" and config.to_dict()[key] != value
        ]
        if mismatches:
            raise CheckpointError(
                f"config does not match checkpoint {checkpoint} on: {', '.join(sorted(mismatches))}"
            )
    else:
        config = stored
    if features.n_classes != payload["n_classes"]:
        raise CheckpointError(
            f"checkpoint was trained with {payload['n_classes']} classes,"
            f" features have {features.n_classes}"
        )
    trainer = Trainer(
        features,
        config,
        bundle=bundle,
        out_dir=out_dir,
        start_epoch=payload["epoch"],
        start_step=payload["step"],
    )
    for name, opt in trainer.opts.items():
        opt.load_state_dict(payload["optimizers"][name])
    if out_dir is not None:
        trainer.train()
    return trainer
