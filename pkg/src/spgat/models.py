"""Generator, structural prior estimator, discriminators, and their fusion sites."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .nn import Linear, Module
from .pwstb import PwStbBlock
from .tensor import Tensor, add, as_tensor, concat, mul
from .windowing import PatchCombine, PatchEmbed, PatchMerge, PatchUnembed, TokenGrid

log = logging.getLogger(__name__)

SPGM_VARIANTS = ("multiply_add", "concat_linear", "off")
SKIP_STYLES = ("concat", "sum", "off")
DISC_MODES = ("dual", "single", "off")
STRUCTURE_PRIORS = ("gradient", "highpass", "image", "off")
N_STAGES = 4


@dataclass
class ModelConfig:
    C: int = 32
    gen_depths: tuple = (4, 4, 4, 2)
    spe_depths: tuple = (2, 2, 2, 2)
    disc_depth_per_stage: int = 1
    heads: int = 4
    windows: tuple = (2, 4, 8)
    spgm_variant: str = "multiply_add"
    enc_dec_skip: str = "concat"
    discriminators: str = "dual"
    gd_skip: bool = True
    disc_prior_guidance: bool = True
    structure_prior: str = "gradient"
    rel_pos_bias: bool = True

    def __post_init__(self):
        self.gen_depths = tuple(int(d) for d in self.gen_depths)
        self.spe_depths = tuple(int(d) for d in self.spe_depths)
        self.windows = tuple(int(k) for k in self.windows)
        self.validate()

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if self.C <= 0:
            bad("C", f"must be positive, got {self.C}")
        if self.heads <= 0 or self.C % self.heads:
            bad("heads", f"C={self.C} must be divisible by heads={self.heads}")
        for name in ("gen_depths", "spe_depths"):
            depths = getattr(self, name)
            if len(depths) != N_STAGES or any(d < 1 for d in depths):
                bad(name, f"need {N_STAGES} positive stage depths, got {list(depths)}")
        if self.disc_depth_per_stage < 1:
            bad("disc_depth_per_stage", "must be >= 1")
        if not self.windows or any(k < 1 for k in self.windows):
            bad("windows", f"need a non-empty list of positive sizes, got {list(self.windows)}")
        for name, allowed in (("spgm_variant", SPGM_VARIANTS), ("enc_dec_skip", SKIP_STYLES),
                              ("discriminators", DISC_MODES),
                              ("structure_prior", STRUCTURE_PRIORS)):
            if getattr(self, name) not in allowed:
                bad(name, f"{getattr(self, name)!r} not in {allowed}")

    @property
    def has_spe(self) -> bool:
        return self.structure_prior != "off"

    @property
    def spgm_active(self) -> bool:
        return self.has_spe and self.spgm_variant != "off"

    @property
    def disc_guided(self) -> bool:
        return self.has_spe and self.disc_prior_guidance

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("gen_depths", "spe_depths", "windows"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------- structure priors

def extract_structure(img):
    """Per-channel |forward x-difference| + |forward y-difference|.

    The last row/column difference is taken against zero padding.
    """
    is_tensor = isinstance(img, Tensor)
    x = img.data if is_tensor else np.asarray(img)
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    dy[:, :-1] = x[:, 1:] - x[:, :-1]
    out = np.abs(dx) + np.abs(dy)
    return Tensor(out) if is_tensor else out


def highpass_structure(img, sigma: float = 1.0):
    """Image minus its Gaussian blur (reflect boundary), per channel."""
    x = np.asarray(img.data if isinstance(img, Tensor) else img)
    blur = ndimage.gaussian_filter(x, sigma=(0, sigma, sigma, 0), mode="reflect")
    return (x - blur).astype(x.dtype)


def structure_prior(img: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gradient":
        return extract_structure(img)
    if kind == "highpass":
        return highpass_structure(img)
    if kind == "image":
        return np.array(img, copy=True)
    if kind == "off":
        return np.zeros_like(img)
    raise ConfigError(f"unknown structure prior {kind!r}")


# ---------------------------------------------------------------- fusion

def spgm_apply(f_e: Tensor, f_p: Tensor | None, variant: str,
               fuse: Linear | None = None) -> Tensor:
    """Structure-guided gating of a generator feature.

    ``multiply_add``: f_p * f_e + f_e. ``concat_linear``: Linear([f_p, f_e]).
    ``off`` (or no prior feature): f_e unchanged.
    """
    if variant == "off" or f_p is None:
        return f_e
    if f_p.shape[:-1] != f_e.shape[:-1]:
        raise ShapeError(f"spgm: prior {f_p.shape} and feature {f_e.shape} are not aligned")
    if variant == "multiply_add":
        if f_p.shape != f_e.shape:
            raise ShapeError(f"spgm: prior {f_p.shape} and feature {f_e.shape} differ")
        return add(mul(f_p, f_e), f_e)
    if variant == "concat_linear":
        if fuse is None:
            raise ConfigError("spgm concat_linear needs a fusion Linear")
        return fuse(concat([f_p, f_e], axis=-1))
    raise ConfigError(f"unknown spgm variant {variant!r}")


def disc_fuse(f_d: Tensor, f_g: Tensor | None, f_p: Tensor | None,
              skip: Linear | None = None) -> Tensor:
    """H(f_d, f_g) gated by f_p: f_p * H + H, with H = Linear([f_d, f_g]).

    Without ``skip`` (or ``f_g``) H is the identity on f_d; without ``f_p``
    the gating is skipped.
    """
    h = f_d
    if skip is not None and f_g is not None:
        if f_g.shape[:-1] != f_d.shape[:-1]:
            raise ShapeError(f"disc_fuse: generator feature {f_g.shape} vs "
                             f"discriminator feature {f_d.shape}")
        h = skip(concat([f_d, f_g], axis=-1))
    if f_p is not None:
        if f_p.shape != h.shape:
            raise ShapeError(f"disc_fuse: prior {f_p.shape} vs fused feature {h.shape}")
        h = add(mul(f_p, h), h)
    return h


# ---------------------------------------------------------------- networks

class Stage(Module):
    def __init__(self, dim: int, depth: int, cfg: ModelConfig, rng):
        self.blocks = [PwStbBlock(dim, rng, cfg.windows, cfg.heads, cfg.rel_pos_bias)
                       for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class UNetTransformer(Module):
    """U-shaped PW-STB network used for both the generator and the SPE.

    Encoder stage ``i`` runs at ``1 / 2**(i+1)`` resolution with ``C * 2**i``
    channels. Decoder stage ``j`` mirrors encoder stage ``3 - j``; decoder
    stage 0 continues straight from the deepest encoder stage.
    """

    def __init__(self, cfg: ModelConfig, depths: Sequence[int], rng, guided: bool,
                 in_ch: int = 3, out_ch: int = 3):
        c = cfg.C
        self.cfg = cfg
        self.guided = guided
        self.embed = PatchEmbed(in_ch, c, rng)
        self.encoder = [Stage(c * 2 ** i, depths[i], cfg, rng) for i in range(N_STAGES)]
        self.merges = [PatchMerge(c * 2 ** i, rng) for i in range(N_STAGES - 1)]
        self.combines = [PatchCombine(c * 2 ** (N_STAGES - j), rng) for j in range(1, N_STAGES)]
        self.skip_fuse = ([Linear(2 * c * 2 ** (N_STAGES - 1 - j), c * 2 ** (N_STAGES - 1 - j), rng)
                           for j in range(1, N_STAGES)]
                          if cfg.enc_dec_skip == "concat" else [])
        self.decoder = [Stage(c * 2 ** (N_STAGES - 1 - j), depths[N_STAGES - 1 - j], cfg, rng)
                        for j in range(N_STAGES)]
        self.spgm_fuse = []
        if guided and cfg.spgm_variant == "concat_linear":
            dims = [c * 2 ** i for i in range(N_STAGES)] + \
                   [c * 2 ** (N_STAGES - 1 - j) for j in range(N_STAGES)]
            self.spgm_fuse = [Linear(2 * d, d, rng) for d in dims]
        self.unembed = PatchUnembed(c, out_ch, rng)

    def stage_dims(self) -> list[int]:
        c = self.cfg.C
        return [c * 2 ** i for i in range(N_STAGES)] + \
               [c * 2 ** (N_STAGES - 1 - j) for j in range(N_STAGES)]

    def _site(self, n: int, x: Tensor, guide) -> Tensor:
        if not self.guided or guide is None:
            return x
        fuse = self.spgm_fuse[n] if self.spgm_fuse else None
        return spgm_apply(x, guide[n], self.cfg.spgm_variant, fuse)

    def __call__(self, img: Tensor, guide: Sequence[Tensor] | None = None):
        """Returns (image, encoder stage features, decoder stage features).

        ``guide`` holds the 8 prior features (4 encoder, then 4 decoder) used
        at the SPGM site after each stage.
        """
        b, h, w, _ = img.shape
        if h % 16 or w % 16:
            raise ShapeError(f"network input {h}x{w} must be a multiple of 16; pad it first")
        grid = self.embed(img)
        enc: list[Tensor] = []
        x = grid.tensor
        for i in range(N_STAGES):
            x = self.encoder[i](x)
            x = self._site(i, x, guide)
            enc.append(x)
            if i < N_STAGES - 1:
                x = self.merges[i](TokenGrid(x, 2 ** (i + 1))).tensor
        dec: list[Tensor] = []
        for j in range(N_STAGES):
            r = N_STAGES - 1 - j
            if j > 0:
                x = self.combines[j - 1](TokenGrid(x, 2 ** (r + 2))).tensor
                x = self._skip(j - 1, x, enc[r])
            x = self.decoder[j](x)
            x = self._site(N_STAGES + j, x, guide)
            dec.append(x)
        out = self.unembed(TokenGrid(x, 2))
        return out, enc, dec

    def _skip(self, n: int, x: Tensor, e: Tensor) -> Tensor:
        style = self.cfg.enc_dec_skip
        if style == "concat":
            return self.skip_fuse[n](concat([x, e], axis=-1))
        if style == "sum":
            return add(x, e)
        return x


class Discriminator(Module):
    """Patch-embedded PW-STB discriminator producing a logits map.

    Stage ``i`` fuses the generator feature of matching resolution (and the
    prior feature, when guided) before its blocks.
    """

    def __init__(self, cfg: ModelConfig, rng, in_ch: int = 6):
        c = cfg.C
        self.cfg = cfg
        self.embed = PatchEmbed(in_ch, c, rng)
        self.fuse = [Linear(2 * c * 2 ** i, c * 2 ** i, rng) for i in range(N_STAGES)] \
            if cfg.gd_skip else []
        self.stages = [Stage(c * 2 ** i, cfg.disc_depth_per_stage, cfg, rng)
                       for i in range(N_STAGES)]
        self.merges = [PatchMerge(c * 2 ** i, rng) for i in range(N_STAGES - 1)]
        self.head = Linear(c * 2 ** (N_STAGES - 1), 1, rng)

    def __call__(self, img6: Tensor, gen_feats: Sequence[Tensor] | None = None,
                 spe_feats: Sequence[Tensor] | None = None) -> Tensor:
        """``gen_feats``/``spe_feats`` are ordered from the finest stage to the coarsest."""
        x = self.embed(img6).tensor
        for i in range(N_STAGES):
            f_g = gen_feats[i] if (gen_feats is not None and self.fuse) else None
            f_p = spe_feats[i] if (spe_feats is not None and self.cfg.disc_guided) else None
            x = disc_fuse(x, f_g, f_p, self.fuse[i] if self.fuse else None)
            x = self.stages[i](x)
            if i < N_STAGES - 1:
                x = self.merges[i](TokenGrid(x, 2 ** (i + 1))).tensor
        return self.head(x)


def discriminator_forward(img6: Tensor, gen_feats, spe_feats, net: Discriminator) -> Tensor:
    return net(img6, gen_feats, spe_feats)


# ---------------------------------------------------------------- assembly

@dataclass
class FeatureBundle:
    image: Tensor
    structure: Tensor | None
    enc_feats: list
    dec_feats: list
    spe_enc: list = field(default_factory=list)
    spe_dec: list = field(default_factory=list)

    def stream(self, which: str):
        """Generator and prior features for one discriminator, finest stage first."""
        if which == "enc":
            return self.enc_feats, (self.spe_enc or None)
        gen = list(reversed(self.dec_feats))
        spe = list(reversed(self.spe_dec)) if self.spe_dec else None
        return gen, spe


class SPGAT(Module):
    """Generator + SPE + discriminators built from one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        if not cfg.has_spe and (cfg.spgm_variant != "off" or cfg.disc_prior_guidance):
            log.warning("structure_prior=off: SPGM and discriminator guidance are inert")
        self.generator = UNetTransformer(cfg, cfg.gen_depths, rng, guided=cfg.spgm_active)
        self.spe = UNetTransformer(cfg, cfg.spe_depths, rng, guided=False) if cfg.has_spe else None
        self.disc_e = self.disc_d = None
        if cfg.discriminators == "dual":
            self.disc_e = Discriminator(cfg, rng)
            self.disc_d = Discriminator(cfg, rng)
        elif cfg.discriminators == "single":
            self.disc_e = Discriminator(cfg, rng)

    # parameter groups
    def generator_parameters(self) -> list:
        params = self.generator.parameters()
        if self.spe is not None:
            params += self.spe.parameters()
        return params

    def discriminator_nets(self) -> dict[str, Discriminator]:
        nets = {}
        if self.disc_e is not None:
            nets["disc_e"] = self.disc_e
        if self.disc_d is not None:
            nets["disc_d"] = self.disc_d
        return nets

    def disc_for(self, stream: str) -> Discriminator | None:
        """Network judging ``stream`` ('enc' or 'dec'); a single net judges both."""
        if self.cfg.discriminators == "single":
            return self.disc_e
        return self.disc_e if stream == "enc" else self.disc_d

    def structure(self, img: np.ndarray) -> np.ndarray:
        return structure_prior(img, self.cfg.structure_prior)

    def spe_forward(self, s: Tensor):
        """Returns (P_hat, 8 stage features) or (None, None) without an SPE."""
        if self.spe is None:
            return None, None
        p_hat, enc, dec = self.spe(s)
        return p_hat, enc + dec

    def generator_forward(self, img: Tensor, spe_feats=None):
        return self.generator(img, spe_feats if self.cfg.spgm_active else None)

    def forward_bundle(self, img, struct) -> FeatureBundle:
        img = as_tensor(img)
        p_hat, feats = self.spe_forward(as_tensor(struct)) if self.spe is not None else (None, None)
        out, enc, dec = self.generator_forward(img, feats)
        spe_enc = feats[:N_STAGES] if feats else []
        spe_dec = feats[N_STAGES:] if feats else []
        return FeatureBundle(out, p_hat, enc, dec, spe_enc, spe_dec)


def param_count(net: Module) -> int:
    return net.num_parameters()


# ---------------------------------------------------------------- ablation presets

_BASE = ModelConfig()

ABLATIONS: dict[str, dict] = {
    # basic components: skip style, SPGM variant, adversarial learning (beta)
    "M1": dict(enc_dec_skip="off", spgm_variant="off", adversarial=False),
    "M2": dict(enc_dec_skip="sum", spgm_variant="off", adversarial=False),
    "M3": dict(enc_dec_skip="sum", spgm_variant="multiply_add", adversarial=False),
    "M4": dict(enc_dec_skip="concat", spgm_variant="off", adversarial=False),
    "M5": dict(enc_dec_skip="concat", spgm_variant="concat_linear", adversarial=False),
    "M6": dict(enc_dec_skip="concat", spgm_variant="multiply_add", adversarial=False),
    "M7": dict(enc_dec_skip="concat", spgm_variant="multiply_add", adversarial=True),
    # discriminator study: G-D skip, prior guidance in D, single/dual
    "D1": dict(gd_skip=False, disc_prior_guidance=False, discriminators="single"),
    "D2": dict(gd_skip=False, disc_prior_guidance=False, discriminators="dual"),
    "D3": dict(gd_skip=True, disc_prior_guidance=False, discriminators="single"),
    "D4": dict(gd_skip=True, disc_prior_guidance=True, discriminators="single"),
    "D5": dict(gd_skip=True, disc_prior_guidance=False, discriminators="dual"),
    "D6": dict(gd_skip=True, disc_prior_guidance=True, discriminators="dual"),
    # structure prior kind
    "P-image": dict(structure_prior="image"),
    "P-highpass": dict(structure_prior="highpass"),
    "P-gradient": dict(structure_prior="gradient"),
    # window combinations
    "W2": dict(windows=(2,)),
    "W4": dict(windows=(4,)),
    "W8": dict(windows=(8,)),
    "W222": dict(windows=(2, 2, 2)),
    "W444": dict(windows=(4, 4, 4)),
    "W888": dict(windows=(8, 8, 8)),
    "W248": dict(windows=(2, 4, 8)),
    # generator/discriminator update ratio
    "R1": dict(r=1), "R2": dict(r=2), "R3": dict(r=3), "R5": dict(r=5), "R10": dict(r=10),
}

ABLATION_TABLES = {
    "basic": ["M1", "M2", "M3", "M4", "M5", "M6", "M7"],
    "discriminators": ["D1", "D2", "D3", "D4", "D5", "D6"],
    "structure": ["P-image", "P-highpass", "P-gradient"],
    "windows": ["W2", "W4", "W8", "W222", "W444", "W888", "W248"],
    "ratio": ["R1", "R2", "R3", "R5", "R10"],
}

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


def ablation_overrides(name: str) -> tuple[dict, dict]:
    """Split a preset into (model-config overrides, training overrides)."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    model_kw, train_kw = {}, {}
    for k, v in ABLATIONS[name].items():
        if k == "adversarial":
            if not v:
                train_kw["beta"] = 0.0
        elif k in MODEL_KEYS:
            model_kw[k] = v
        else:
            train_kw[k] = v
    return model_kw, train_kw


def ablation_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    model_kw, _ = ablation_overrides(name)
    return (base or _BASE).replace(**model_kw)
