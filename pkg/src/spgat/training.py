"""Adversarial training loop: ADAM, learning-rate schedule, data, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .errors import ConfigError, DataError, NumericalError
from .losses import (LossWeights, loss_adv_disc, loss_adv_gen, loss_image, loss_structure,
                     loss_total)
from .models import SPGAT, ModelConfig
from .tensor import Tape, Tensor, clamp_st, concat, detect_anomaly, no_grad

log = logging.getLogger(__name__)

RATIO_MODES = ("gen_per_disc", "disc_per_gen")


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_halving_epochs: int = 30
    epochs: int = 150
    batch: int = 2
    crop: int = 128
    r: int = 5
    ratio_mode: str = "gen_per_disc"
    seed: int = 0
    alpha: float = 0.1
    beta: float = 0.001

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.r < 1:
            raise ConfigError(f"r: must be >= 1, got {self.r}")
        if self.crop <= 0 or self.crop % 16:
            raise ConfigError(f"crop: must be a positive multiple of 16, got {self.crop}")
        if self.batch < 1:
            raise ConfigError(f"batch: must be >= 1, got {self.batch}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0: must be positive, got {self.lr0}")
        if self.lr_halving_epochs < 1:
            raise ConfigError("lr_halving_epochs: must be >= 1")
        if self.ratio_mode not in RATIO_MODES:
            raise ConfigError(f"ratio_mode: {self.ratio_mode!r} not in {RATIO_MODES}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha/beta: must be nonnegative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(epoch: int, lr0: float = 1e-4, halving_epochs: int = 30) -> float:
    return lr0 * 2.0 ** (-(epoch // halving_epochs))


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected ADAM update of ``params`` (name -> Tensor) in place."""
    missing = [n for n in params if grads.get(n) is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr * step).astype(p.dtype, copy=False)


class Adam:
    """ADAM over a fixed, named parameter group."""

    def __init__(self, named_params: dict):
        self.params = dict(named_params)
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        adam_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state, lr)


# ---------------------------------------------------------------- data

@dataclass
class ImagePair:
    low: np.ndarray     # L, (B, H, W, 3)
    high: np.ndarray    # E
    s: np.ndarray       # structure of L
    p: np.ndarray       # structure of E


class PairedDataset:
    """``<root>/low/<name>.png`` paired with ``<root>/high/<name>.png``."""

    def __init__(self, pairs: list[tuple[np.ndarray, np.ndarray]], names: list[str] | None = None):
        self.pairs = pairs
        self.names = names or [f"pair{i}" for i in range(len(pairs))]

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_dir(cls, root, min_size: int = 0) -> "PairedDataset":
        root = Path(root)
        low_dir, high_dir = root / "low", root / "high"
        if not low_dir.is_dir() or not high_dir.is_dir():
            raise DataError(f"{root}: expected 'low/' and 'high/' subdirectories")
        pairs, names = [], []
        high_names = {p.name for p in high_dir.glob("*.png")}
        for lp in sorted(low_dir.glob("*.png")):
            if lp.name not in high_names:
                log.warning("skipping %s: no matching high/%s", lp.name, lp.name)
                continue
            try:
                lo = imageio.read_png(lp)
                hi = imageio.read_png(high_dir / lp.name)
            except DataError as exc:
                log.warning("skipping %s: %s", lp.name, exc)
                continue
            if lo.shape != hi.shape:
                log.warning("skipping %s: low %s and high %s sizes differ", lp.name, lo.shape, hi.shape)
                continue
            if min(lo.shape[:2]) < min_size:
                log.warning("skipping %s: smaller than crop %d", lp.name, min_size)
                continue
            pairs.append((lo, hi))
            names.append(lp.name)
        for name in sorted(high_names - {p.name for p in low_dir.glob("*.png")}):
            log.warning("skipping high/%s: no matching low image", name)
        if not pairs:
            raise DataError(f"{root}: no usable image pairs")
        return cls(pairs, names)


def random_crop(lo: np.ndarray, hi: np.ndarray, crop: int, rng) -> tuple[np.ndarray, np.ndarray]:
    h, w = lo.shape[:2]
    if h < crop or w < crop:
        raise DataError(f"image {h}x{w} is smaller than crop {crop}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    return lo[y:y + crop, x:x + crop], hi[y:y + crop, x:x + crop]


class BatchSampler:
    """Shuffled epochs of aligned random crops; all randomness from one generator."""

    def __init__(self, dataset: PairedDataset, batch: int, crop: int, rng, prior: str = "gradient"):
        from .models import structure_prior
        self._prior = lambda a: structure_prior(a, prior)
        self.dataset = dataset
        self.batch = batch
        self.crop = crop
        self.rng = rng
        self.perm = np.zeros(0, dtype=np.int64)
        self.cursor = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.dataset) / self.batch)

    def next_batch(self) -> ImagePair:
        idx = []
        while len(idx) < self.batch:
            if self.cursor >= len(self.perm):
                self.perm = self.rng.permutation(len(self.dataset))
                self.cursor = 0
            idx.append(int(self.perm[self.cursor]))
            self.cursor += 1
        lows, highs = [], []
        for i in idx:
            lo, hi = random_crop(*self.dataset.pairs[i], self.crop, self.rng)
            lows.append(lo)
            highs.append(hi)
        low = np.stack(lows).astype(np.float32)
        high = np.stack(highs).astype(np.float32)
        return ImagePair(low, high, self._prior(low), self._prior(high))

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(),
                "cursor": self.cursor}

    def load_state(self, st: dict) -> None:
        self.rng.bit_generator.state = st["rng"]
        self.perm = np.asarray(st["perm"], dtype=np.int64)
        self.cursor = int(st["cursor"])


def data_batch(dataset: PairedDataset, rng, batch: int = 2, crop: int = 128) -> ImagePair:
    return BatchSampler(dataset, batch, crop, rng).next_batch()


# ---------------------------------------------------------------- trainer

@dataclass
class TrainState:
    step: int = 0       # generator updates so far
    d_steps: int = 0    # discriminator updates so far
    epoch: int = 0
    seed: int = 0
    r_counter: int = 0  # generator updates since the last discriminator update


def _img6(image: Tensor, struct) -> Tensor:
    return concat([image, struct], axis=-1)


class Trainer:
    def __init__(self, cfg: TrainConfig, model_cfg: ModelConfig, dataset: PairedDataset):
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.dataset = dataset
        model_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        self.model = SPGAT(model_cfg, rng=np.random.default_rng(model_seq))
        self.sampler = BatchSampler(dataset, cfg.batch, cfg.crop,
                                    np.random.default_rng(data_seq), model_cfg.structure_prior)
        self.state = TrainState(seed=cfg.seed)
        gen_named = dict(self.model.generator.named_parameters("generator."))
        if self.model.spe is not None:
            gen_named.update(self.model.spe.named_parameters("spe."))
        self.gen_opt = Adam(gen_named)
        self.disc_opts = {name: Adam(dict(net.named_parameters(name + ".")))
                          for name, net in self.model.discriminator_nets().items()}
        self.trace: list[str] = []

    @property
    def adversarial(self) -> bool:
        return self.cfg.beta > 0 and bool(self.disc_opts)

    @property
    def lr(self) -> float:
        return lr_at(self.state.epoch, self.cfg.lr0, self.cfg.lr_halving_epochs)

    def _freeze(self, train_generator: bool) -> None:
        for p in self.gen_opt.params.values():
            p.requires_grad = train_generator
        for opt in self.disc_opts.values():
            for p in opt.params.values():
                p.requires_grad = not train_generator

    # one batch through generator + SPE, plus the discriminator terms if enabled
    def _generator_losses(self, batch: ImagePair) -> dict:
        model = self.model
        fake = model.forward_bundle(batch.low, batch.s)
        e_hat = clamp_st(fake.image)
        out = {"L_i": loss_image(e_hat, Tensor(batch.high))}
        if fake.structure is not None:
            out["L_s"] = loss_structure(fake.structure, Tensor(batch.p))
        if self.adversarial:
            with no_grad():
                real = model.forward_bundle(batch.high, batch.p)
            real_in = _img6(Tensor(batch.high), Tensor(batch.p))
            fake_in = _img6(e_hat, fake.structure if fake.structure is not None
                            else Tensor(batch.s))
            for stream, key in (("enc", "L_a_e"), ("dec", "L_a_d")):
                net = model.disc_for(stream)
                with no_grad():
                    real_logits = net(real_in, *real.stream(stream))
                fake_logits = net(fake_in, *fake.stream(stream))
                out[key] = loss_adv_gen(real_logits, fake_logits)
        out["total"] = loss_total(out["L_i"], out.get("L_s"), out.get("L_a_e"),
                                  out.get("L_a_d"), self.cfg.weights)
        return out

    def step_generator(self, batch: ImagePair) -> dict:
        self._freeze(train_generator=True)
        with Tape() as tape:
            losses = self._generator_losses(batch)
        total = losses["total"]
        if not np.isfinite(total.data):
            self._diagnose(lambda: self._generator_losses(batch))
        self.gen_opt.zero_grad()
        tape.backward(total)
        self.gen_opt.step(self.lr)
        self.state.step += 1
        self.trace.append("G")
        return {k: float(v.data) for k, v in losses.items()}

    def _disc_losses(self, batch: ImagePair) -> dict:
        model = self.model
        with no_grad():
            fake = model.forward_bundle(batch.low, batch.s)
            real = model.forward_bundle(batch.high, batch.p)
            fake_struct = fake.structure if fake.structure is not None else Tensor(batch.s)
            fake_in = _img6(clamp_st(fake.image), fake_struct)
            real_in = _img6(Tensor(batch.high), Tensor(batch.p))
        out = {}
        for stream, key in (("enc", "D_e"), ("dec", "D_d")):
            net = model.disc_for(stream)
            real_logits = net(real_in, *real.stream(stream))
            fake_logits = net(fake_in, *fake.stream(stream))
            out[key] = loss_adv_disc(real_logits, fake_logits)
        return out

    def step_discriminators(self, batch: ImagePair) -> dict:
        self._freeze(train_generator=False)
        with Tape() as tape:
            losses = self._disc_losses(batch)
            total = losses["D_e"] if len(losses) == 1 else losses["D_e"] + losses["D_d"]
        if not np.isfinite(total.data):
            self._diagnose(lambda: self._disc_losses(batch))
        for opt in self.disc_opts.values():
            opt.zero_grad()
        tape.backward(total)
        for opt in self.disc_opts.values():
            opt.step(self.lr)
        self._freeze(train_generator=True)
        self.state.d_steps += 1
        self.trace.append("D")
        return {k: float(v.data) for k, v in losses.items()}

    def _diagnose(self, forward) -> None:
        try:
            with Tape(), detect_anomaly():
                forward()
        except (NumericalError, ZeroDivisionError) as exc:
            raise NumericalError(f"non-finite loss at step {self.state.step}: {exc}") from exc
        raise NumericalError(f"non-finite loss at step {self.state.step}")

    def train_step(self) -> dict:
        """One generator update, followed by discriminator updates when due."""
        batch = self.sampler.next_batch()
        out = self.step_generator(batch)
        self.state.r_counter += 1
        if self.adversarial:
            if self.cfg.ratio_mode == "gen_per_disc":
                if self.state.r_counter >= self.cfg.r:
                    out.update(self.step_discriminators(batch))
                    self.state.r_counter = 0
            else:
                for _ in range(self.cfg.r):
                    out.update(self.step_discriminators(batch))
                self.state.r_counter = 0
        self.state.epoch = self.state.step // self.sampler.steps_per_epoch
        out["lr"] = self.lr
        out["step"] = self.state.step
        return out

    # ------------------------------------------------------------ persistence

    def save(self, path) -> None:
        save_checkpoint(path, self)

    def load(self, path) -> None:
        load_checkpoint(path, self)


# ---------------------------------------------------------------- checkpoint format

MAGIC = b"SPGATCKPT"
FORMAT_VERSION = 1


def _tensor_records(trainer: Trainer) -> list[tuple[str, np.ndarray]]:
    recs = [("model/" + n, p.data) for n, p in trainer.model.named_parameters()]
    opts = {"gen": trainer.gen_opt, **trainer.disc_opts}
    for oname, opt in opts.items():
        for pname in opt.params:
            if pname in opt.state.m:
                recs.append((f"opt/{oname}/m/{pname}", opt.state.m[pname]))
                recs.append((f"opt/{oname}/v/{pname}", opt.state.v[pname]))
    return recs


def write_checkpoint(path, meta: dict, records: list[tuple[str, np.ndarray]]) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in records:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        return _parse_checkpoint(path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise DataError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc


def _parse_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not data.startswith(MAGIC):
        raise ConfigError(f"{path}: not a checkpoint (bad magic bytes)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: checkpoint format version {version}, "
                          f"this build reads version {FORMAT_VERSION}")
    (blen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + blen].decode("utf-8"))
    off += blen
    tensors = {}
    while off < len(data):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    return meta, tensors


def save_checkpoint(path, trainer: Trainer) -> None:
    st = trainer.state
    meta = {
        "model_config": trainer.model_cfg.to_dict(),
        "train_config": trainer.cfg.to_dict(),
        "train_state": dataclasses.asdict(st),
        "sampler": trainer.sampler.state(),
        "adam_t": {"gen": trainer.gen_opt.state.t,
                   **{k: o.state.t for k, o in trainer.disc_opts.items()}},
    }
    write_checkpoint(path, meta, _tensor_records(trainer))


def check_model_config(stored: dict, cfg: ModelConfig) -> None:
    mine = cfg.to_dict()
    diffs = [f"{k}: checkpoint={stored.get(k)!r} vs requested={mine[k]!r}"
             for k in mine if stored.get(k) != mine[k]]
    if diffs:
        raise ConfigError("checkpoint model config does not match: " + "; ".join(diffs))


def load_checkpoint(path, trainer: Trainer) -> None:
    meta, tensors = read_checkpoint(path)
    check_model_config(meta["model_config"], trainer.model_cfg)
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    trainer.model.load_state_dict(model_state)
    opts = {"gen": trainer.gen_opt, **trainer.disc_opts}
    for oname, opt in opts.items():
        opt.state = AdamState(t=int(meta["adam_t"].get(oname, 0)))
        for pname in opt.params:
            m = tensors.get(f"opt/{oname}/m/{pname}")
            if m is not None:
                opt.state.m[pname] = m.copy()
                opt.state.v[pname] = tensors[f"opt/{oname}/v/{pname}"].copy()
    trainer.state = TrainState(**meta["train_state"])
    trainer.sampler.load_state(meta["sampler"])


def load_model(path, seed: int = 0) -> SPGAT:
    """Model for inference from a checkpoint, config taken from the file."""
    meta, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = SPGAT(cfg, seed=seed)
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items()
                           if k.startswith("model/")})
    return model
