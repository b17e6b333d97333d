"""Training loop, configuration and checkpoint format.

Checkpoint format (``.npz``, loadable with any NumPy-compatible reader):

* one float array per parameter, keyed ``<module>/<parameter name>`` where
  module is ``encoder``, ``generator`` or ``discriminator`` and the name is
  the dotted PyTorch state-dict key;
* ``__meta__``: a 0-d unicode array holding JSON with ``format``
  (``"meshrir-checkpoint"``), ``version``, ``epoch``, ``step``, ``variant``,
  ``model`` (architecture sizes) and ``training`` (the full config).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import codec, gan
from .encoder import MeshEncoder, normalized_adjacency
from .mesh import TriangleMesh, load_mesh, mesh_to_graph, normalize_scene, simplify_mesh

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "meshrir-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "step", "L_CGAN", "L_EDR", "L_MSE", "L_G", "L_D", "lr")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class TrainingDivergedError(RuntimeError):
    pass


def _desk_model():
    return gan.ModelConfig(gen_channels=(128, 64, 32, 16, 8))


@dataclass
class TrainingConfig:
    batch_size: int = 16
    learning_rate: float = 8e-5
    lr_decay: float = 0.85
    lr_decay_every: int = 7
    epochs: int = 200
    g_steps_per_d_step: int = 3
    lambda_edr: float = 1.0
    lambda_mse: float = 10.0
    band_weights: tuple = gan.DEFAULT_BAND_WEIGHTS
    variant: str = "full"
    seed: int = 0
    max_g_steps: int = 0  # 0 = no cap
    checkpoint_every: int = 50
    target_faces: int = 2000
    weld_epsilon: float = 1e-4
    model: gan.ModelConfig = field(default_factory=_desk_model)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = gan.ModelConfig(**self.model)
        self.band_weights = tuple(float(w) for w in self.band_weights)
        if self.variant == "no-edr":
            self.lambda_edr = 0.0

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale schedule: batch 256, lr 8e-5 x0.85 every 7 epochs, 150 epochs."""
        base = dict(batch_size=256, learning_rate=8e-5, lr_decay=0.85, lr_decay_every=7,
                    epochs=150, g_steps_per_d_step=3, model=gan.ModelConfig())
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainingConfig":
        problems = []
        for key in ("batch_size", "epochs", "g_steps_per_d_step", "lr_decay_every",
                    "checkpoint_every", "target_faces"):
            if not isinstance(getattr(self, key), int) or getattr(self, key) < 1:
                problems.append(f"{key}: must be a positive integer, got {getattr(self, key)!r}")
        for key in ("learning_rate",):
            if not getattr(self, key) > 0:
                problems.append(f"{key}: must be > 0, got {getattr(self, key)!r}")
        if not 0 < self.lr_decay <= 1:
            problems.append(f"lr_decay: must lie in (0, 1], got {self.lr_decay!r}")
        for key in ("lambda_edr", "lambda_mse", "weld_epsilon"):
            if not getattr(self, key) >= 0:
                problems.append(f"{key}: must be >= 0, got {getattr(self, key)!r}")
        if len(self.band_weights) != 6 or any(not w > 0 for w in self.band_weights):
            problems.append(f"band_weights: need 6 positive weights, got {list(self.band_weights)}")
        if self.variant not in gan.VARIANTS:
            problems.append(f"variant: must be one of {', '.join(gan.VARIANTS)}, got {self.variant!r}")
        if self.max_g_steps < 0:
            problems.append("max_g_steps: must be >= 0")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        d = asdict(self)
        d["band_weights"] = list(self.band_weights)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown key" for k in unknown])
        return cls(**data)


# ---------------------------------------------------------------------------
# model container


class IRModel(torch.nn.Module):
    def __init__(self, model_config: gan.ModelConfig | None = None, variant: str = "full"):
        super().__init__()
        self.model_config = model_config or gan.ModelConfig()
        self.variant = variant
        cfg = self.model_config
        self.encoder = MeshEncoder(hidden=cfg.encoder_hidden, stages=cfg.encoder_stages,
                                   keep_ratio=cfg.keep_ratio)
        self.generator = gan.Generator(cfg)
        self.discriminator = gan.Discriminator(cfg, edr_input=(variant == "d-edr"))

    def critic_input(self, irs: torch.Tensor) -> torch.Tensor:
        if self.variant == "d-edr":
            return gan.edr_relief(irs[:, : codec.CROP_LENGTH])
        return irs


# ---------------------------------------------------------------------------
# data


def prepare_scene(mesh_path, target_faces: int = 2000, weld_epsilon: float = 1e-4):
    """load -> simplify -> translate to origin -> graph.

    Returns (simplified mesh in file coordinates, scene graph).
    """
    mesh = simplify_mesh(load_mesh(mesh_path), target_faces)
    lo = mesh.vertices.min(axis=0)
    return mesh, mesh_to_graph(TriangleMesh(mesh.vertices - lo, mesh.faces), weld_epsilon)


class IRDataset:
    """Manifest rows resolved to scene graphs, positions and training targets."""

    def __init__(self, rows, variant: str = "full", target_faces: int = 2000,
                 weld_epsilon: float = 1e-4):
        if not rows:
            raise ValueError("empty manifest")
        self.scene_keys = []
        self.graphs = []
        key_index = {}
        meshes = {}
        positions, targets, scene_of_row = [], [], []
        for r in rows:
            key = r["mesh"]
            if key not in key_index:
                meshes[key], graph = prepare_scene(key, target_faces, weld_epsilon)
                key_index[key] = len(self.scene_keys)
                self.scene_keys.append(key)
                self.graphs.append(graph)
            _, src, lis = normalize_scene(meshes[key], r["source"], r["listener"])
            positions.append(np.concatenate([src, lis]))
            packed = codec.read_wav(r["ir"]).samples
            if variant == "unprocessed":
                target = np.zeros(codec.PACKED_LENGTH)
                target[: codec.CROP_LENGTH] = codec.unpack_samples(packed)
            else:
                target = packed
            targets.append(target)
            scene_of_row.append(key_index[key])
        self.positions = np.array(positions)
        self.targets = np.array(targets)
        self.scene_of_row = np.array(scene_of_row)

    def __len__(self):
        return len(self.targets)


def encode_scenes(model: IRModel, dataset: IRDataset, scene_ids, adjacency=None):
    """Latent per scene id, each scene encoded exactly once."""
    out = []
    for s in scene_ids:
        adj = adjacency[s] if adjacency is not None else None
        out.append(model.encoder(dataset.graphs[s], adj))
    return torch.stack(out)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: IRModel, config: TrainingConfig | None, epoch: int, step: int):
    arrays = {}
    for name in ("encoder", "generator", "discriminator"):
        for k, v in getattr(model, name).state_dict().items():
            arrays[f"{name}/{k}"] = v.detach().cpu().numpy()
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "epoch": epoch,
            "step": step, "variant": model.variant, "model": model.model_config.to_dict(),
            "training": config.to_dict() if config is not None else None}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns (model, meta); the model is in eval mode."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        model = IRModel(gan.ModelConfig(**meta["model"]), meta["variant"])
        for name in ("encoder", "generator", "discriminator"):
            module = getattr(model, name)
            prefix = name + "/"
            state = {k[len(prefix):]: torch.from_numpy(np.array(data[k]))
                     for k in data.files if k.startswith(prefix)}
            module.load_state_dict(state)
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# training


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def train(manifest, config: TrainingConfig, out_dir, dataset: IRDataset | None = None,
          model: IRModel | None = None) -> list[Path]:
    """Adversarial training; returns the checkpoint paths written.

    Per batch: scenes are encoded once, the generator takes
    ``g_steps_per_d_step`` RMSprop steps against the shared encoding, the
    encoder takes one step with the gradients accumulated over those
    sub-steps, then the discriminator takes one step. Writes
    ``loss_log.csv`` (one row per generator step) into ``out_dir``.
    """
    from .shoebox import read_manifest

    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = IRDataset(read_manifest(manifest), config.variant, config.target_faces,
                            config.weld_epsilon)
    torch.manual_seed(config.seed)
    if model is None:
        model = IRModel(config.model, config.variant)
    model.train()
    rng = np.random.default_rng(config.seed)

    adjacency = [normalized_adjacency(g) for g in dataset.graphs]
    positions = torch.as_tensor(dataset.positions, dtype=torch.float32)
    targets = torch.as_tensor(dataset.targets, dtype=torch.float32)

    g_opt = torch.optim.RMSprop(model.generator.parameters(), lr=config.learning_rate)
    e_opt = torch.optim.RMSprop(model.encoder.parameters(), lr=config.learning_rate)
    d_opt = torch.optim.RMSprop(model.discriminator.parameters(), lr=config.learning_rate)
    lam_edr, lam_mse = config.lambda_edr, config.lambda_mse

    log_path = out / "loss_log.csv"
    log_fh = open(log_path, "w", newline="")
    writer = csv.writer(log_fh)
    writer.writerow(LOG_COLUMNS)
    checkpoints = []
    step = 0
    try:
        for epoch in range(config.epochs):
            lr = config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_every)
            for opt in (g_opt, e_opt, d_opt):
                _set_lr(opt, lr)
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), config.batch_size):
                rows = order[start:start + config.batch_size]
                scene_ids, inverse = np.unique(dataset.scene_of_row[rows], return_inverse=True)
                real = targets[rows]

                # generator + encoder
                for p in model.discriminator.parameters():
                    p.requires_grad_(False)
                e_opt.zero_grad()
                latents = encode_scenes(model, dataset, scene_ids, adjacency)
                emb = torch.cat([latents[torch.as_tensor(inverse)], positions[rows]], dim=1)
                pending = []
                for sub in range(config.g_steps_per_d_step):
                    g_opt.zero_grad()
                    fake = model.generator(emb)
                    l_cgan = gan.loss_cgan_logits(model.discriminator.logits(model.critic_input(fake), emb))
                    l_mse = gan.loss_mse(fake, real)
                    if lam_edr > 0:
                        l_edr = gan.loss_edr(fake, real, config.band_weights)
                    else:
                        l_edr = torch.zeros((), dtype=fake.dtype)
                    l_g = gan.loss_generator(l_cgan, l_edr, l_mse, lam_edr, lam_mse)
                    values = [float(v.detach()) for v in (l_cgan, l_edr, l_mse, l_g)]
                    if not all(math.isfinite(v) for v in values):
                        _dump_batch(out, epoch, step, rows, emb, real, fake)
                        raise TrainingDivergedError(
                            f"non-finite generator loss at epoch {epoch} step {step}: {values}")
                    l_g.backward(retain_graph=sub < config.g_steps_per_d_step - 1)
                    g_opt.step()
                    step += 1
                    pending.append([epoch, step] + values)
                    if config.max_g_steps and step >= config.max_g_steps:
                        break
                e_opt.step()
                for p in model.discriminator.parameters():
                    p.requires_grad_(True)

                # discriminator
                d_opt.zero_grad()
                cond = emb.detach()
                with torch.no_grad():
                    fake = model.generator(cond)
                z_real = model.discriminator.logits(model.critic_input(real), cond)
                z_fake = model.discriminator.logits(model.critic_input(fake), cond)
                l_d = gan.loss_discriminator_logits(z_real, z_fake)
                if not math.isfinite(float(l_d.detach())):
                    _dump_batch(out, epoch, step, rows, emb, real, fake)
                    raise TrainingDivergedError(f"non-finite discriminator loss at step {step}")
                (-l_d).backward()
                d_opt.step()
                for row in pending:
                    writer.writerow(row[:6] + [float(l_d.detach()), lr])
                if config.max_g_steps and step >= config.max_g_steps:
                    break
            done = (epoch + 1 == config.epochs) or (config.max_g_steps and step >= config.max_g_steps)
            if done or (epoch + 1) % config.checkpoint_every == 0:
                checkpoints.append(save_checkpoint(out / f"checkpoint_{epoch + 1:04d}.npz",
                                                   model, config, epoch + 1, step))
            log.info("epoch %d step %d lr %.3g", epoch + 1, step, lr)
            if done:
                break
    finally:
        log_fh.close()
    model.eval()
    return checkpoints


def _dump_batch(out, epoch, step, rows, emb, real, fake):
    path = Path(out) / f"diverged_epoch{epoch}_step{step}.npz"
    np.savez(path, rows=np.asarray(rows), embedding=emb.detach().numpy(),
             target=real.detach().numpy(), generated=fake.detach().numpy())
    log.error("dumped offending batch to %s", path)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
