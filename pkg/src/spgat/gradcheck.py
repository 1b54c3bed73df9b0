"""Finite-difference gradient suites at op, block, and model scope.

Tape gradients are computed in float32. The central-difference oracle runs on
a float64 copy of the same function so its own rounding stays far below the
tolerance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .attention import WindowAttention, swmsa
from .losses import loss_adv_disc, loss_adv_gen, loss_structure, ssim
from .models import SPGAT, ModelConfig
from .pwstb import PwStbBlock
from .tensor import (GradCheckReport, Tape, Tensor, abs_, add, concat, crop, div, exp,
                     finite_diff_check, log, matmul, mean, mul, no_grad, numeric_grad, pad,
                     permute, reshape, roll, sigmoid, softmax, sqrt, square, sub,
                     sum_, take)
from .windowing import PatchCombine, PatchMerge, TokenGrid, window_partition, window_reverse

TOL = 1e-3
H = 1e-4
# tensors whose true gradient is (near) zero, such as key biases under softmax,
# are judged against this fraction of the largest gradient in the group
GRAD_FLOOR = 1e-4
SCOPES = ("op", "block", "model")


@dataclass
class CheckResult:
    scope: str
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        r = self.report
        status = "PASS" if r.passed else "FAIL"
        return (f"{status}  {self.scope:<5} {self.name:<28} rel={r.max_rel_err:.2e} "
                f"abs={r.max_abs_err:.2e} n={r.n_checked}")


def _proj(shape, seed=1):
    return np.random.default_rng(seed).standard_normal(shape)


def _scalar(y: Tensor, seed: int = 1) -> Tensor:
    """sum(y * R) with a fixed random projection R in y's dtype."""
    return sum_(mul(y, Tensor(_proj(y.shape, seed).astype(y.dtype))))


def _op_cases() -> list[tuple[str, Callable, np.ndarray]]:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = x + np.sign(x) * 0.2     # keep |x| away from the kink at 0
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 5))
    img = rng.uniform(0.1, 0.9, (1, 16, 16, 2))
    ref = rng.uniform(0.1, 0.9, (1, 16, 16, 2))
    grid = rng.standard_normal((2, 4, 4, 3))
    logits = rng.standard_normal((2, 2, 2, 1))
    idx = np.array([[0, 2], [1, 1]])

    def c(v, like):
        return Tensor(v.astype(like.dtype))

    return [
        ("add", lambda t: _scalar(add(t, c(b, t))), x),
        ("sub", lambda t: _scalar(sub(c(b, t), t)), x),
        ("mul", lambda t: _scalar(mul(t, t)), x),
        ("div", lambda t: _scalar(div(c(b, t), t)), pos),
        ("exp", lambda t: _scalar(exp(t)), x),
        ("log", lambda t: _scalar(log(t)), pos),
        ("sigmoid", lambda t: _scalar(sigmoid(t)), x),
        ("sqrt", lambda t: _scalar(sqrt(t)), pos),
        ("abs", lambda t: _scalar(abs_(t)), away),
        ("square", lambda t: _scalar(square(t)), x),
        ("sum", lambda t: _scalar(sum_(t, axis=1)), x),
        ("mean", lambda t: _scalar(mean(t, axis=0, keepdims=True)), x),
        ("matmul", lambda t: _scalar(matmul(t, c(m, t))), x),
        ("softmax", lambda t: _scalar(softmax(t, axis=-1)), x),
        ("reshape", lambda t: _scalar(reshape(t, (4, 3))), x),
        ("permute", lambda t: _scalar(permute(t, (1, 0))), x),
        ("concat", lambda t: _scalar(concat([t, mul(t, 2.0)], axis=0)), x),
        ("roll", lambda t: _scalar(roll(t, (1, -1), (0, 1))), x),
        ("pad", lambda t: _scalar(pad(t, ((1, 0), (0, 2)))), x),
        ("crop", lambda t: _scalar(crop(t, (slice(1, 3), slice(0, 2)))), x),
        ("take", lambda t: _scalar(take(t, idx)), x),
        ("linear", lambda t: _scalar(nn.linear(t, c(m, t), c(m[0], t))), x),
        ("layer_norm", lambda t: _scalar(nn.layer_norm(t, c(pos[0], t), c(b[0], t))), x),
        ("gelu", lambda t: _scalar(nn.gelu(t)), x),
        ("window_partition", lambda t: _scalar(window_partition(t, 2).tensor), grid),
        ("window_reverse", lambda t: _scalar(window_reverse(window_partition(t, 2))), grid),
        ("ssim", lambda t: ssim(t, c(ref, t)), img),
        ("loss_structure", lambda t: loss_structure(t, c(x + 0.5, t)), x),
        ("loss_adv_disc", lambda t: loss_adv_disc(t, c(logits[::-1], t)), logits),
        ("loss_adv_gen", lambda t: loss_adv_gen(c(logits[::-1], t), t), logits),
    ]


def op_suite(tol: float = TOL) -> list[CheckResult]:
    out = []
    for name, f, x in _op_cases():
        rep = finite_diff_check(f, x.astype(np.float32), h=H, tol=tol)
        out.append(CheckResult("op", name, rep))
    return out


def module_param_check(module, loss_fn: Callable[[object, np.dtype], Tensor],
                       names=None, max_per_tensor: int = 6, tol: float = TOL,
                       seed: int = 0, directional: bool = False) -> dict[str, GradCheckReport]:
    """Check ``loss_fn(module, dtype)`` gradients w.r.t. named parameters.

    Analytic gradients come from the float32 module; the oracle perturbs a
    float64 copy. Each sampled coordinate's error is scaled by the largest
    gradient of its tensor (floored at ``GRAD_FLOOR`` of the group's). With ``directional`` an extra entry ``"<direction>"`` holds
    the derivative along one random direction over every parameter in
    ``names`` at once, scaled by sum |g_i v_i| since it is a single dot product.
    """
    params = dict(module.named_parameters())
    names = list(params) if names is None else list(names)
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn(module, np.float32)
    tape.backward(loss)
    global_max = max(float(np.max(np.abs(params[n].grad))) for n in names)
    twin = module.astype(np.float64)
    twin_params = dict(twin.named_parameters())
    rng = np.random.default_rng(seed)
    reports = {}
    for name in (names if max_per_tensor > 0 else []):
        p = twin_params[name]
        analytic = params[name].grad.reshape(-1)
        k = min(max_per_tensor, analytic.size)
        idx = np.sort(rng.choice(analytic.size, k, replace=False))
        orig = p.data

        def f(t, p=p):
            p.data = t.data
            return loss_fn(twin, np.float64)

        numeric = numeric_grad(f, orig, H, idx)
        p.data = orig
        ab = float(np.max(np.abs(analytic[idx] - numeric)))
        scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))),
                    GRAD_FLOOR * global_max)
        reports[name] = GradCheckReport(ab / max(scale, 1e-30), ab, k, tol)
    if directional:
        dirs = {n: rng.standard_normal(params[n].shape) for n in names}
        analytic = sum(float(np.sum(params[n].grad.astype(np.float64) * dirs[n])) for n in names)
        scale = sum(float(np.sum(np.abs(params[n].grad * dirs[n]))) for n in names)
        origs = {n: twin_params[n].data for n in names}
        vals = []
        with no_grad():
            for sign in (1.0, -1.0):
                for n in names:
                    twin_params[n].data = origs[n] + sign * H * dirs[n]
                vals.append(float(loss_fn(twin, np.float64).data))
        for n in names:
            twin_params[n].data = origs[n]
        numeric = (vals[0] - vals[1]) / (2 * H)
        ab = abs(analytic - numeric)
        reports["<direction>"] = GradCheckReport(ab / max(scale, 1e-12), ab,
                                                 sum(params[n].size for n in names), tol)
    return reports


def sample_names(names: list[str], per_block: int = 4, seed: int = 0) -> list[str]:
    """Every tensor outside transformer blocks plus ``per_block`` tensors of each block."""
    rng = np.random.default_rng(seed)
    keep, blocks = [], {}
    for n in names:
        if ".blocks." in n:
            head, _, rest = n.partition(".blocks.")
            blocks.setdefault(head + ".blocks." + rest.split(".")[0], []).append(n)
        else:
            keep.append(n)
    for members in blocks.values():
        pick = rng.choice(len(members), min(per_block, len(members)), replace=False)
        keep += [members[i] for i in sorted(pick)]
    return [n for n in names if n in set(keep)]


def _merge(scope: str, name: str, reports: dict) -> CheckResult:
    worst = max(reports.values(), key=lambda r: r.max_rel_err)
    n = sum(r.n_checked for r in reports.values())
    return CheckResult(scope, name, GradCheckReport(worst.max_rel_err,
                                                    max(r.max_abs_err for r in reports.values()),
                                                    n, worst.tol))


def block_suite(tol: float = TOL, dim: int = 8, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((1, 8, 8, dim))
    results = []

    block = PwStbBlock(dim, np.random.default_rng(seed), heads=2)
    _randomize_norms(block, rng)

    def block_loss(m, dtype):
        return _scalar(m(Tensor(x0.astype(dtype))))

    results.append(_merge("block", "pwstb.params", module_param_check(block, block_loss, tol=tol)))
    block64 = block.astype(np.float64)
    results.append(CheckResult("block", "pwstb.input", finite_diff_check(
        lambda t: _scalar((block if t.dtype == np.float32 else block64)(t)),
        x0.astype(np.float32), h=H, tol=tol, max_checks=48)))

    attn = WindowAttention(dim, 4, np.random.default_rng(seed + 1), heads=2)
    attn.rel_bias.data = rng.standard_normal(attn.rel_bias.shape).astype(np.float32) * 0.5

    def attn_loss(m, dtype):
        return _scalar(swmsa(Tensor(x0.astype(dtype)), m, shifted=True))

    results.append(_merge("block", "swmsa.params", module_param_check(attn, attn_loss, tol=tol)))

    merge = PatchMerge(dim, np.random.default_rng(seed + 2))
    results.append(_merge("block", "patch_merge.params", module_param_check(
        merge, lambda m, dt: _scalar(m(TokenGrid(Tensor(x0.astype(dt)), 2)).tensor), tol=tol)))
    comb = PatchCombine(dim, np.random.default_rng(seed + 3))
    results.append(_merge("block", "patch_combine.params", module_param_check(
        comb, lambda m, dt: _scalar(m(TokenGrid(Tensor(x0.astype(dt)), 4)).tensor), tol=tol)))
    return results


def _randomize_norms(module, rng) -> None:
    # identity-initialised norms hide errors in the gamma/beta paths
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data = (1.0 + 0.3 * rng.standard_normal(p.shape)).astype(p.dtype)
        elif name.endswith("beta") or name.endswith("bias"):
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(p.dtype)


def tiny_config(**kw) -> ModelConfig:
    base = dict(C=8, gen_depths=(1, 1, 1, 1), spe_depths=(1, 1, 1, 1), heads=2)
    base.update(kw)
    return ModelConfig(**base)


def model_suite(tol: float = TOL, seed: int = 0, max_per_tensor: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    model = SPGAT(tiny_config(), seed=seed)
    _randomize_norms(model, rng)
    low = rng.uniform(0.0, 1.0, (1, 32, 32, 3))
    s = model.structure(low)

    def gen_loss(m, dtype):
        b = m.forward_bundle(Tensor(low.astype(dtype)), Tensor(s.astype(dtype)))
        return add(_scalar(b.image), _scalar(b.structure, seed=2))

    all_gen = [n for n, _ in model.named_parameters() if n.startswith(("generator.", "spe."))]
    reports = module_param_check(model, gen_loss, all_gen, 0, tol, seed, directional=True)
    results = [CheckResult("model", "generator+spe.direction", reports["<direction>"])]
    reports = module_param_check(model, gen_loss, sample_names(all_gen, seed=seed),
                                 max_per_tensor, tol, seed)
    gen_r = {k: v for k, v in reports.items() if k.startswith("generator.")}
    spe_r = {k: v for k, v in reports.items() if k.startswith("spe.")}
    results += [_merge("model", "generator.params", gen_r), _merge("model", "spe.params", spe_r)]

    with no_grad():
        bundle = model.forward_bundle(Tensor(low.astype(np.float32)), Tensor(s.astype(np.float32)))
    feats = [f.data for f in bundle.enc_feats + bundle.dec_feats + bundle.spe_enc + bundle.spe_dec]
    img6 = np.concatenate([np.clip(bundle.image.data, 0, 1), bundle.structure.data], -1)

    def disc_loss(m, dtype):
        ff = [Tensor(f.astype(dtype)) for f in feats]
        fb = type(bundle)(Tensor(img6.astype(dtype)), None, ff[0:4], ff[4:8], ff[8:12], ff[12:16])
        net = m.disc_for("dec")
        return _scalar(net(Tensor(img6.astype(dtype)), *fb.stream("dec")))

    d_names = [n for n, _ in model.named_parameters() if n.startswith("disc_d.")]
    reports = module_param_check(model, disc_loss, sample_names(d_names, seed=seed),
                                 max_per_tensor, tol, seed)
    results.append(_merge("model", "disc_d.params", reports))
    reports = module_param_check(model, disc_loss, d_names, 0, tol, seed, directional=True)
    results.append(CheckResult("model", "disc_d.direction", reports["<direction>"]))
    return results


def run(scope: str = "all", tol: float = TOL, log: Callable[[str], None] | None = None):
    """Run the selected suites; returns (all passed, results, seconds)."""
    scopes = SCOPES if scope == "all" else (scope,)
    suites = {"op": op_suite, "block": block_suite, "model": model_suite}
    results = []
    t0 = time.perf_counter()
    for sc in scopes:
        for r in suites[sc](tol=tol):
            results.append(r)
            if log:
                log(r.line())
    return all(r.passed for r in results), results, time.perf_counter() - t0
