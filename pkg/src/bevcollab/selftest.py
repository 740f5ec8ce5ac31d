"""Fast built-in verification: gradient checks and structural invariants."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, identity_grid
from .detection import LossConfig, focal_loss, smooth_l1
from .encoders import AgentTypeSpec, MessageSpec, init_encoder_params
from .geometry import FeatureMap, GridSpec, RelativePose, warp_feature
from .pyramid import PyramidConfig, fuse, init_pyramid_params, single_agent_path
from .scene import MODALITY_DENSE_SCAN

GRAD_TOL = 1e-4


def _op_gradient_checks(seeds: int = 20) -> float:
    """Max grad-check error across all differentiable ops on random small shapes."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        shape = (int(rng.integers(1, 4)), int(rng.integers(3, 9)), int(rng.integers(3, 9)))
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        y = Tensor(rng.normal(size=shape), requires_grad=True)

        cases = [
            lambda a, b: ad.tensor_sum(ad.mul(ad.add(a, b), b)),
            lambda a, b: ad.tensor_mean(ad.mul(ad.sub(a, b), a)),
            lambda a, b: ad.tensor_sum(ad.leaky_relu(ad.add(a, ad.add_const(b, 0.3)))),
            lambda a, b: ad.tensor_sum(ad.sigmoid(ad.mul(a, b))),
            lambda a, b: ad.tensor_mean(ad.log(ad.add_const(ad.mul(a, a), 1.0))),
            lambda a, b: ad.tensor_sum(ad.pow_const(ad.add_const(ad.sigmoid(a), 0.5), 2.0)),
            lambda a, b: ad.tensor_sum(ad.huber(ad.mul_const(ad.sub(a, b), 0.7))),
            lambda a, b: ad.tensor_mean(ad.clamp(a, -0.8, 0.8)),
            lambda a, b: ad.tensor_sum(ad.mul(ad.upsample_nearest(a, 2), ad.upsample_nearest(b, 2))),
            lambda a, b: ad.tensor_sum(ad.mul(ad.concat_channels([a, b]),
                                              ad.concat_channels([b, a]))),
            lambda a, b: ad.tensor_sum(ad.slice_channels(ad.mul(a, b), 0, shape[0])),
            lambda a, b: ad.tensor_sum(ad.mul(ad.softmax_over_agents(a), b)),
        ]
        for f in cases:
            worst = max(worst, grad_check(f, [x, y]))

        k = int(rng.integers(0, 2)) * 2 + 1
        kernel = Tensor(rng.normal(size=(2, shape[0], k, k)), requires_grad=True)
        worst = max(worst, grad_check(
            lambda a, w: ad.tensor_sum(ad.mul(ad.conv2d(a, w, 1, k // 2),
                                              ad.conv2d(a, w, 1, k // 2))), [x, kernel]))

        grid = identity_grid(shape[1], shape[2])
        jitter = rng.uniform(-0.15, 0.15, size=grid.shape)
        worst = max(worst, grad_check(
            lambda a: ad.tensor_sum(ad.mul(ad.bilinear_sample(a, grid + jitter),
                                           ad.bilinear_sample(a, grid + jitter))), [x]))

        target = (rng.uniform(size=(1, shape[1], shape[2])) < 0.3).astype(np.float64)
        logits = Tensor(rng.normal(size=(1, shape[1], shape[2])), requires_grad=True)
        worst = max(worst, grad_check(lambda l: focal_loss(l, target), [logits]))
        valid = (rng.uniform(size=shape) < 0.5).astype(np.float64)
        reg_target = rng.normal(size=shape) * valid
        worst = max(worst, grad_check(lambda p: smooth_l1(p, reg_target, valid), [x]))
    return worst


def _full_path_gradient_check(seeds: int = 3) -> float:
    """End-to-end check: encoder -> fusion -> head -> loss on a tiny configuration."""
    from .detection import head_forward, init_head_params, total_loss, assign_targets, stack_agent_targets
    from .geometry import OrientedBox

    msg = MessageSpec(channels=4, height=16, width=16, extent_x=8.0, extent_y=8.0)
    pyr_cfg = PyramidConfig(dims=(4, 6), blocks=(1, 1))
    loss_cfg = LossConfig(alphas=(0.4, 0.2))
    spec = AgentTypeSpec("tiny", MODALITY_DENSE_SCAN, channels=(3,), kernels=(3, 1), init_seed=5)
    boxes = [OrientedBox(0.5, -1.0, 3.0, 1.5, 0.4)]
    head_grid = msg.grid().halved()
    targets = assign_targets(boxes, head_grid, levels=2)
    targets = stack_agent_targets([targets], targets)

    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(2000 + seed)
        obs = rng.normal(size=(2, 16, 16)) * 0.3
        enc = init_encoder_params(spec, msg, seed=seed)
        pyr = init_pyramid_params(pyr_cfg, msg, seed=seed + 50)
        head = init_head_params(pyr_cfg.fused_channels, seed=seed + 90)
        names = ([("enc", k) for k in enc.tensors] + [("pyr", k) for k in pyr.tensors]
                 + [("head", k) for k in head.tensors])
        tensors = [*enc.tensors.values(), *pyr.tensors.values(), *head.tensors.values()]

        def path(*params):
            from .params import ParamGroup

            lookup = dict(zip(names, params))
            h = Tensor(obs.astype(params[0].dtype))
            for i, k in enumerate(spec.kernels):
                h = ad.conv2d(h, lookup[("enc", f"conv{i}.weight")], 1, k // 2)
                h = ad.add(h, lookup[("enc", f"conv{i}.bias")])
                if i < len(spec.kernels) - 1:
                    h = ad.leaky_relu(h)
            pg = ParamGroup("pyramid", {k: lookup[("pyr", k)] for k in pyr.tensors})
            hg = ParamGroup("head", {k: lookup[("head", k)] for k in head.tensors})
            fused, trace = fuse([FeatureMap(h, msg.grid())], pyr_cfg, pg, msg)
            out = head_forward(fused.data, hg)
            return total_loss(out, trace, targets, loss_cfg)

        worst = max(worst, grad_check(path, tensors))
    return worst


def run_selftest(verbose: bool = True) -> bool:
    """Run every suite; print one pass/fail line each; True iff all pass."""
    results: list[tuple[str, bool, str]] = []

    err = _op_gradient_checks(seeds=20)
    results.append(("op-gradients", err < GRAD_TOL, f"max rel err {err:.2e}"))

    err = _full_path_gradient_check(seeds=2)
    results.append(("full-path-gradient", err < GRAD_TOL, f"max rel err {err:.2e}"))

    rng = np.random.default_rng(3)
    msg = MessageSpec(channels=4, height=16, width=16, extent_x=8.0, extent_y=8.0)
    pyr_cfg = PyramidConfig(dims=(4, 6), blocks=(1, 1))
    pyr = init_pyramid_params(pyr_cfg, msg, seed=11)
    ok = True
    for _ in range(20):
        fm = FeatureMap(Tensor(rng.normal(size=(4, 16, 16)).astype(np.float32)), msg.grid())
        a, _ = fuse([fm], pyr_cfg, pyr, msg)
        b, _ = single_agent_path(fm, pyr_cfg, pyr, msg)
        ok &= np.array_equal(a.data.data, b.data.data)
    results.append(("single-agent-reduction", ok, "fuse([f]) == single path bitwise"))

    grid = GridSpec(16, 16, 8.0, 8.0)
    ok = True
    for _ in range(10):
        fm = FeatureMap(Tensor(rng.normal(size=(3, 16, 16)).astype(np.float32)), grid)
        out = warp_feature(fm, RelativePose.identity())
        ok &= np.array_equal(out.data.data, fm.data.data)
        shift = RelativePose.from_angle(0.0, (grid.cell_x, 0.0))
        out = warp_feature(fm, shift)
        ok &= np.array_equal(out.data.data[:, :, 1:], fm.data.data[:, :, :-1])
    results.append(("warp-exactness", ok, "identity and whole-cell shifts are exact"))

    s = Tensor(rng.normal(size=(3, 8, 8)))
    w = ad.softmax_over_agents(s)
    sums = w.data.sum(axis=0)
    ok = np.abs(sums - 1.0).max() < 1e-6
    shifted = ad.softmax_over_agents(Tensor(s.data + rng.normal(size=(1, 8, 8))))
    ok &= np.abs(shifted.data - w.data).max() < 1e-6
    results.append(("softmax-normalization", ok, "per-cell sums 1; shift invariant"))

    from .evaluation import average_precision
    from .detection import DetectionSet
    from .geometry import OrientedBox
    gts = [[OrientedBox(0, 0, 4, 2, 0.0), OrientedBox(10, 0, 4, 2, 0.0)]]
    dets = [DetectionSet(boxes=[
        OrientedBox(0, 0, 4, 2, 0.0, confidence=0.9),
        OrientedBox(5, 5, 4, 2, 0.0, confidence=0.8),
        OrientedBox(10, 0, 4, 2, 0.0, confidence=0.7)], frame=0)]
    ap = average_precision(dets, gts, 0.5)
    ok = ap is not None and abs(ap - 5.0 / 6.0) < 1e-9
    results.append(("ap-hand-case", ok, f"AP {ap:.6f} == 5/6"))

    all_ok = True
    for name, passed, note in results:
        all_ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {note}")
    return all_ok
