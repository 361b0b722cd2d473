"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    rel_err: np.ndarray = field(repr=False)
    n_redrawn: int = 0
    metric: str = "max rel err"

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    indices: Sequence[int] | None = None,
    name: str = "",
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f(x)`` with central differences.

    ``x`` must be a leaf with ``requires_grad``. Its ``grad`` is overwritten.
    ``indices`` selects flat positions to probe; all positions by default.
    """
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs x.requires_grad")
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic_full = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    numeric = np.empty(idx.size)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * step)
    analytic = analytic_full[idx]
    rel = relative_error(analytic, numeric)
    return GradCheckReport(name, float(rel.max(initial=0.0)), tol, int(idx.size), analytic, numeric, rel)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_samples: int,
    rng: np.random.Generator,
    step: float = 1e-5,
    tol: float = 1e-3,
    skip: dict[str, np.ndarray] | None = None,
    max_redraws: int = 50,
) -> GradCheckReport:
    """Finite-difference check over a random subsample of many named parameters.

    Probes are spread across parameters proportionally to their size, with at
    least one probe per parameter when ``n_samples`` allows it. A probe whose
    +/- step changes a ReLU sign or a max-pool winner straddles a point where the
    loss is not differentiable, so it is replaced by a fresh draw from the same
    parameter. ``skip`` maps a parameter name to a boolean mask of flat entries
    that are never probed (entries whose gradient is zero by construction).
    """
    from .ops import record_branches

    skip = skip or {}
    names = sorted(params)
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic_by_name = {k: params[k].grad.reshape(-1).copy() for k in names}

    sizes = np.array([params[k].size for k in names])
    per = np.maximum(1, np.floor(n_samples * sizes / sizes.sum())).astype(int)
    per = np.minimum(per, sizes)
    analytic, numeric = [], []
    redrawn = 0
    with no_grad():
        for k, count in zip(names, per):
            flat = params[k].data.reshape(-1)
            allowed = np.flatnonzero(~skip[k].reshape(-1)) if k in skip else np.arange(flat.size)
            order = iter(rng.permutation(allowed))
            taken = 0
            for i in order:
                if taken == count:
                    break
                orig = flat[i]
                with record_branches() as plus:
                    flat[i] = orig + step
                    fp = loss_fn().item()
                with record_branches() as minus:
                    flat[i] = orig - step
                    fm = loss_fn().item()
                flat[i] = orig
                if not _same_branches(plus, minus):
                    redrawn += 1
                    if redrawn > max_redraws:
                        raise RuntimeError("too many probes straddle non-differentiable points; reduce step")
                    continue
                numeric.append((fp - fm) / (2 * step))
                analytic.append(analytic_by_name[k][i])
                taken += 1
    a, n = np.array(analytic), np.array(numeric)
    rel = relative_error(a, n)
    return GradCheckReport("parameters", float(rel.max(initial=0.0)), tol, int(a.size), a, n, rel, redrawn)


# -- suite ------------------------------------------------------------------------
def _leaf(rng, shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape, margin: float) -> Tensor:
    x = rng.uniform(-2.0, 2.0, shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _projection(fn, rng):
    """Wrap ``fn`` into a scalar ``sum(fn(x) * R)`` with a fixed random ``R``."""
    cache = {}

    def scalar(x):
        out = fn(x)
        if "r" not in cache:
            cache["r"] = Tensor(rng.uniform(-1.0, 1.0, out.shape), dtype=np.float64)
        return (out * cache["r"]).sum()

    return scalar


def op_checks(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> list[GradCheckReport]:
    """Finite-difference checks for every differentiable primitive, in float64."""
    from . import ops, tfm
    from .config import RunConfig
    from .crm import CrmModel
    from .tensor import default_dtype, getitem, linear, matmul, roll

    rng = np.random.default_rng(seed)
    reports = []

    def check(name, fn, x, **kw):
        reports.append(finite_diff_check(_projection(fn, rng), x, step=step, tol=tol, name=name, **kw))

    x = _leaf(rng, (2, 3, 7, 6))
    w = _leaf(rng, (4, 3, 3, 3))
    b = _leaf(rng, (4,))
    conv = dict(stride=2, padding=2, dilation=2)
    check("conv2d.x", lambda t: ops.conv2d(t, w, b, **conv), x)
    check("conv2d.weight", lambda t: ops.conv2d(x, t, b, **conv), w)
    check("conv2d.bias", lambda t: ops.conv2d(x, w, t, **conv), b)
    check("conv2d.x(stride1,pad1)", lambda t: ops.conv2d(t, w, b, 1, 1, 1), x)

    check("maxpool2d", lambda t: ops.maxpool2d(t, 2), _leaf(rng, (2, 3, 4, 6)))

    xb = _leaf(rng, (3, 2, 3, 4))
    gamma = _leaf(rng, (2,), 0.5, 1.5)
    beta = _leaf(rng, (2,))
    check("batchnorm2d.x(train)", lambda t: ops.batchnorm2d(t, gamma, beta, ops.RunningStats(2), True), xb)
    check("batchnorm2d.gamma", lambda t: ops.batchnorm2d(xb, t, beta, ops.RunningStats(2), True), gamma)
    check("batchnorm2d.beta", lambda t: ops.batchnorm2d(xb, gamma, t, ops.RunningStats(2), True), beta)
    stats = ops.RunningStats(2)
    stats.mean[:] = [0.3, -0.2]
    stats.var[:] = [1.5, 0.7]
    check("batchnorm2d.x(eval)", lambda t: ops.batchnorm2d(t, gamma, beta, stats, False), xb)

    xl = _leaf(rng, (2, 5, 6))
    lg, lb = _leaf(rng, (6,), 0.5, 1.5), _leaf(rng, (6,))
    check("layernorm.x", lambda t: ops.layernorm(t, lg, lb), xl)
    check("layernorm.gamma", lambda t: ops.layernorm(xl, t, lb), lg)

    check("relu", ops.relu, _away_from_zero(rng, (4, 5), 10 * step))
    check("gelu", ops.gelu, _leaf(rng, (4, 5)))
    check("softmax", lambda t: ops.softmax(t, -1), _leaf(rng, (3, 4, 5)))

    xm, wm, bm = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,))
    check("linear.x", lambda t: linear(t, wm, bm), xm)
    check("linear.weight", lambda t: linear(xm, t, bm), wm)
    check("linear.bias", lambda t: linear(xm, wm, t), bm)
    mb = _leaf(rng, (2, 4, 3))
    check("matmul.a", lambda t: matmul(t, mb), xm)
    check("matmul.b", lambda t: matmul(xm, t), mb)
    check("roll", lambda t: roll(t, -1, 2), _leaf(rng, (1, 4, 4, 2)))
    idx = rng.integers(0, 6, size=10)
    check("gather", lambda t: getitem(t, idx), _leaf(rng, (6, 3)))

    # Keep |d| away from the Smooth L1 knee at 1.
    target = Tensor(np.array([0.0, 0.0, 0.0, 0.0]), dtype=np.float64)
    pred = Tensor(np.array([0.4, -0.3, 2.5, -3.0]), requires_grad=True, dtype=np.float64)
    reports.append(finite_diff_check(lambda t: ops.smooth_l1(t, target), pred, step=step, tol=tol, name="smooth_l1"))

    # Transformer pieces at a small width.
    with default_dtype(np.float64):
        cfg = RunConfig.toy().update({"tfm.embed_dim": "8", "tfm.depths": "2", "tfm.num_heads": "2"}).model_config().tfm
        attn = tfm.WindowAttention(rng, 8, 2, 4)
        mask = tfm.build_swmsa_mask(8, 8, 4, 2)
        xw = _leaf(rng, (4, 16, 8))
        check("window_attention.x(masked)", lambda t: attn(t, mask), xw)
        # Parameters are perturbed in place, so the closure reads them directly.
        check("window_attention.qkv", lambda _: attn(xw, mask), attn.qkv.weight)
        check("window_attention.bias_table", lambda _: attn(xw, mask), attn.bias_table)
        w_layer = tfm.SwinLayer(rng, cfg, 2, shifted=False)
        s_layer = tfm.SwinLayer(rng, cfg, 2, shifted=True)
        check("stl_pair.x", lambda t: s_layer(w_layer(t, (8, 8)), (8, 8)), _leaf(rng, (1, 64, 8)))
        block = tfm.Mstb(rng, cfg, 2, 2)
        check("mstb.x", lambda t: block(t, (4, 8)), _leaf(rng, (1, 32, 8)))
        tmodel = tfm.TfmModel(cfg, 5, rng)
        check("channel_reduce.x", tmodel.channel_reduce, _leaf(rng, (1, 5, 4, 4)))
        check("tfm.x", tmodel, _leaf(rng, (1, 5, 4, 4)))
        crm = CrmModel(8, rng)
        check("crm.x", crm, _leaf(rng, (2, 8, 5, 5)))
    return reports


def structural_zero_masks(model) -> dict[str, np.ndarray]:
    """Entries whose gradient vanishes identically in a train-mode forward.

    A conv bias followed by batch-statistics normalization is cancelled by the
    mean subtraction, and the key part of an attention ``qkv`` bias adds the same
    constant to every logit of a query row, which softmax ignores.
    """
    from .tfm import WindowAttention

    masks = {}
    cfm = model.cfm
    for i in range(len(cfm.convs)):
        masks[f"cfm.convs.{i}.bias"] = np.ones(cfm.convs[i].bias.shape, dtype=bool)
    for name in ("conv1", "conv2"):
        masks[f"crm.{name}.bias"] = np.ones(getattr(model.crm, name).bias.shape, dtype=bool)
    for prefix, mod in model.named_modules():
        if isinstance(mod, WindowAttention):
            dim = mod.qkv.weight.shape[0]
            m = np.zeros(3 * dim, dtype=bool)
            m[dim : 2 * dim] = True
            masks[f"{prefix}.qkv.bias"] = m
    return masks


def model_check(
    n_params: int = 200, seed: int = 0, step: float = 1e-5, tol: float = 1e-3, zero_tol: float = 1e-9
) -> list[GradCheckReport]:
    """End-to-end toy model (two 64x64 images, train-mode BN) checked on a parameter subsample.

    Returns the relative-error report over the probed parameters and an
    absolute report confirming that the structurally-zero entries have
    (numerically) zero analytic gradient.
    """
    from .config import RunConfig
    from .model import build_model
    from .tensor import default_dtype

    cfg = RunConfig.toy()
    with default_dtype(np.float64):
        model = build_model(cfg.model_config(), seed)
    rng = np.random.default_rng(seed + 1)
    images = model.images_to_tensor(rng.integers(0, 256, size=(2, 64, 64, 3)))
    weights = Tensor(rng.uniform(-1.0, 1.0, (2, 1, 8, 8)), dtype=np.float64)
    model.train()

    def loss():
        return (model(images) * weights).sum()

    params = dict(model.named_parameters())
    skip = structural_zero_masks(model)
    report = check_parameters(loss, params, n_params, rng, step=step, tol=tol, skip=skip)
    report.name = "jctnet.toy(parameters)"

    zeros = np.concatenate([params[k].grad.reshape(-1)[m.reshape(-1)] for k, m in sorted(skip.items())])
    worst = float(np.abs(zeros).max(initial=0.0))
    invariance = GradCheckReport(
        "jctnet.toy(zero-gradient entries)",
        worst,
        zero_tol,
        int(zeros.size),
        zeros,
        np.zeros_like(zeros),
        np.abs(zeros),
        metric="max |grad|",
    )
    return [report, invariance]


def run_suite(include_model: bool = True, n_params: int = 200, seed: int = 0) -> list[GradCheckReport]:
    reports = op_checks(seed)
    if include_model:
        reports.extend(model_check(n_params, seed))
    return reports
