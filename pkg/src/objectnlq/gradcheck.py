"""Finite-difference verification of every backward rule and of the full loss."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import tensor as T
from .encoders import EncoderInputs, GroundingModel, ModelConfig, gate_fusion, init_object_params_from_text
from .layers import Attention
from .tensor import Tensor

REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def _coord_error(analytic, numeric):
    """Relative error whose denominator is floored so tiny gradients are judged absolutely.

    err <= REL_TOL  <=>  relative error <= REL_TOL, or absolute error <= ABS_FLOOR
    for gradients smaller than ABS_FLOOR / REL_TOL.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR / REL_TOL)


def check_function(fn, tensors, h=1e-5, coords=None, rng=None):
    """Max relative error between backprop and central differences.

    ``coords`` limits the check to that many randomly drawn coordinates per
    tensor (all coordinates when None).
    """
    tensors = list(tensors)
    grads = T.grad_values(fn, tensors)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with T.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size) if coords is None or coords >= flat.size else rng.choice(flat.size, coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn().data)
                flat[i] = orig - h
                down = float(fn().data)
                flat[i] = orig
                worst = max(worst, _coord_error(float(g.reshape(-1)[i]), (up - down) / (2 * h)))
    return worst


# ---------------------------------------------------------------- op suite


def _op_cases(rng):
    def r(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    cases = {}
    a, b = r(3, 4), r(4, 5)
    w = Tensor(rng.standard_normal((3, 5)))
    cases["matmul"] = (lambda: (T.matmul(a, b) * w).sum(), [a, b])

    x = r(4, 6)
    mask = rng.random((4, 6)) > 0.3
    mask[:, 0] = True
    ws = Tensor(rng.standard_normal((4, 6)))
    cases["softmax"] = (lambda: (T.softmax(x, -1, mask) * ws).sum(), [x])

    xl, g, bt = r(3, 7), r(7), r(7)
    wl = Tensor(rng.standard_normal((3, 7)))
    cases["layer_norm"] = (lambda: (T.layer_norm(xl, g, bt) * wl).sum(), [xl, g, bt])

    xp = r(12)
    wp = Tensor(rng.standard_normal(12))
    sign = Tensor(np.where(rng.random(12) > 0.5, 1.0, -1.0))
    cases["gelu"] = (lambda: (T.gelu(xp) * wp).sum(), [xp])
    # relu away from the kink
    xr = Tensor(np.abs(rng.standard_normal(12)) + 0.1, requires_grad=True)
    cases["relu"] = (lambda: (T.relu(xr * sign) * wp).sum(), [xr])
    cases["sigmoid"] = (lambda: (T.sigmoid(xp) * wp).sum(), [xp])
    cases["softplus"] = (lambda: (T.softplus(xp) * wp).sum(), [xp])

    e1, e2 = r(8), r(8)
    cases["elementwise"] = (
        lambda: (T.exp(e1 * 0.5) / (T.square(e2) + 1.0) + T.log(T.square(e1) + 0.5) - T.maximum(e1, e2) * T.minimum(e1, e2)).sum(),
        [e1, e2],
    )
    xs = r(2, 3, 4)
    cases["shape_ops"] = (
        lambda: (T.concat([T.transpose(xs, (0, 2, 1)), T.reshape(xs, (2, 4, 3))], axis=1)[:, 1:5].sum(axis=1) * T.getitem(xs, (slice(None), [0, 2, 2], 1))).sum(),
        [xs],
    )

    xc, kc, bc = r(2, 9, 3), r(3, 3, 4), r(4)
    for stride in (1, 2):
        wc = Tensor(rng.standard_normal((2, -(-9 // stride), 4)))
        cases[f"conv1d_s{stride}"] = ((lambda s, w_: lambda: (T.conv1d(xc, kc, bc, s) * w_).sum())(stride, wc), [xc, kc, bc])

    att = Attention(rng, 8, 2)
    q, kv = r(2, 5, 8), r(2, 5, 8)
    km = np.ones((2, 5), dtype=bool)
    km[1, 3:] = False
    wa = Tensor(rng.standard_normal((2, 5, 8)))
    cases["attention"] = (
        lambda: (att(q, kv, kv, window=3, q_mask=km, k_mask=km) * wa).sum(),
        [q, kv] + list(att.params.values()),
    )
    from .heads import AslParams, diou_regression_loss, focal_bce_loss, gaussian_asl_weight

    lg = r(10)
    labels = (rng.random(10) > 0.6).astype(float)
    wf = Tensor(rng.uniform(0.2, 1.0, 10), requires_grad=True)
    cases["focal_loss"] = (lambda: focal_bce_loss(lg, labels, wf), [lg, wf])
    pred = Tensor(rng.uniform(0.5, 3.0, (6, 2)), requires_grad=True)
    gt = rng.uniform(0.5, 3.0, (6, 2))
    wd = Tensor(rng.uniform(0.2, 1.0, 6), requires_grad=True)
    cases["diou_loss"] = (lambda: diou_regression_loss(pred, gt, wd), [pred, wd])
    asl = AslParams(3)
    asl.rho_raw.data = rng.normal(0, 0.5, 3)
    asl.tau_raw.data = rng.normal(0, 0.5, 3)
    segs = np.array([[1.0, 9.0], [2.0, 5.0], [0.0, 12.0], [3.0, 4.5]])
    times = np.array([2.0, 4.0, 7.5, 3.2])
    levels = np.array([0, 1, 2, 1])
    cases["asl_weight"] = (lambda: gaussian_asl_weight(times, levels, segs, asl).sum(), asl.parameters())
    return cases


def _tiny_config(**overrides):
    base = dict(
        model_dim=8,
        heads=2,
        text_blocks=1,
        object_blocks=1,
        mm_blocks=1,
        pyramid_levels=3,
        mha_window=3,
        ffn_expansion=2,
        video_dim=6,
        text_dim=5,
        object_dim=5,
        asl_sigma_floor=0.05,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_batch(rng, cfg: ModelConfig, B=2, T_len=16, L=4, N=10):
    video = rng.standard_normal((B, T_len, cfg.video_dim))
    vmask = np.ones((B, T_len), dtype=bool)
    vmask[1, 13:] = False
    text = rng.standard_normal((B, L, cfg.text_dim))
    tmask = np.ones((B, L), dtype=bool)
    tmask[1, 3:] = False
    objs = rng.standard_normal((B, N, cfg.object_dim))
    omask = np.ones((B, N), dtype=bool)
    omask[0, 8:] = False
    frames = rng.integers(0, 13, size=(B, N))
    inputs = EncoderInputs(video, vmask, text, tmask, objs, omask, frames)
    segments = [(2.3, 9.7), (1.1, 6.4)]
    return inputs, segments


def loss_closure(model, inputs, segments, base_stride=1.0):
    from .heads import forward, pyramid_points, total_loss

    cfg = model.config
    lengths = [-(-inputs.video.shape[1] // 2**l) for l in range(cfg.pyramid_levels)]
    table = pyramid_points(lengths, base_stride, cfg.range_base_steps)

    def fn():
        logits, offsets, pmask = forward(model, inputs, base_stride)
        return total_loss(model, logits, offsets, pmask, [table] * len(segments), segments).total

    return fn


def _sample_parameters(model, n, rng):
    """(tensor, flat index) pairs: every ASL and gate coordinate first, then random others."""
    named = list(model.named_parameters())
    must = [(p, i) for name, p in named if name.startswith("asl.") for i in range(p.data.size)]
    gates = [p for name, p in named if ".gate." in name]
    must += [(p, int(i)) for p in gates[:4] for i in rng.choice(p.data.size, 4, replace=False)]
    pool = [(p, i) for _, p in named for i in range(p.data.size)]
    picks = rng.choice(len(pool), size=max(0, n - len(must)), replace=False)
    return must + [pool[i] for i in picks]


def check_model(cfg: ModelConfig, n_params=240, seed=0, h=1e-5):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        model = GroundingModel(cfg, seed=seed)
        init_object_params_from_text(model)
        # break the copies so the object path has its own gradients
        for p in model.parameters():
            p.data = p.data + 0.01 * rng.standard_normal(p.shape)
        model.asl.rho_raw.data = rng.normal(0.0, 0.5, model.asl.rho_raw.shape)
        model.asl.tau_raw.data = rng.normal(0.5, 0.3, model.asl.tau_raw.shape)
        inputs, segments = tiny_batch(rng, cfg)
        fn = loss_closure(model, inputs, segments)
        params = model.parameters()
        grads = T.grad_values(fn, params)
        gmap = {id(p): g for p, g in zip(params, grads)}
        coords = _sample_parameters(model, n_params, rng)
        worst = 0.0
        with T.no_grad():
            for p, i in coords:
                flat = p.data.reshape(-1)
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn().data)
                flat[i] = orig - h
                down = float(fn().data)
                flat[i] = orig
                worst = max(worst, _coord_error(float(gmap[id(p)].reshape(-1)[i]), (up - down) / (2 * h)))
    return worst, len(coords)


def gradcheck(cfg: ModelConfig | None = None, n_params=240, seed=0):
    """Run the op suite plus full-model checks; returns a JSON-able report."""
    start = time.time()
    report = {"tolerance": REL_TOL, "h": 1e-5, "ops": {}, "models": {}}
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        for name, (fn, tensors) in _op_cases(rng).items():
            report["ops"][name] = check_function(fn, tensors)
        r2 = np.random.default_rng(seed + 1)
        ht, ho = Tensor(r2.standard_normal((1, 4, 6)), requires_grad=True), Tensor(r2.standard_normal((1, 4, 6)), requires_grad=True)
        from .encoders import GateMLP

        gate = GateMLP(r2, 6)
        wg = Tensor(r2.standard_normal((1, 4, 6)))
        report["ops"]["gate_fusion"] = check_function(lambda: (gate_fusion(ht, ho, gate) * wg).sum(), [ht, ho] + gate.parameters())
    cfg = cfg or _tiny_config()
    variants = {"ObjectNLQ": cfg, "SA+CA": dataclasses.replace(cfg, object_encoder_variant="SA+CA"),
                "SOA": dataclasses.replace(cfg, mm_variant="SOA")}
    for name, vcfg in variants.items():
        n = n_params if name == "ObjectNLQ" else max(40, n_params // 6)
        err, count = check_model(vcfg, n, seed)
        report["models"][name] = {"max_rel_error": err, "coordinates": count}
    report["max_rel_error"] = max(list(report["ops"].values()) + [m["max_rel_error"] for m in report["models"].values()])
    report["passed"] = report["max_rel_error"] <= REL_TOL
    report["seconds"] = time.time() - start
    return report
