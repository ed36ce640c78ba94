"""Three-stage refinement orchestration, the composite rendering loss,
image metrics, and the train / evaluate / ablate protocols.

Stage schedule: stage 1 (fusion) refines {color, opacity, rotation,
scale} with centers frozen; stage 2 (interaction) refines {centers,
degree-0 color, opacity} with rotation and scale frozen. With all decoder
heads zero-initialized the whole stack is the identity, so every ablation
variant renders identically at iteration 0.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import deformation as df
from . import diffgrad as dg
from . import fusion as fu
from . import interaction as ia
from . import kernels
from . import nn
from .diffgrad import Tensor
from .gaussians import concat_gaussian_sets, sh_band_count
from .rasterizer import rasterize

VARIANTS = ("full", "no_fusion", "no_interaction", "none")


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-3
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_lpips: float = 0.0
    seed: int = 0
    variant: str = "full"
    sh_degree: int = 1
    gamma: float = 0.1
    context_view_count: int = 4
    instance_feature_dim: int = 64
    tau_deg: int = 1
    fusion_color_bands: str = "all"  # or "band0": which SH bands stage 1 updates
    checkpoint_every: int = 500
    threads: int = 1
    train_camera_ids: list = field(default_factory=list)  # empty = all cameras

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.lambda_l1 + self.lambda_ssim <= 0:
            raise ValueError("need lambda_l1 + lambda_ssim > 0")
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError("iterations must be >= 0 and lr positive")


@dataclass
class MetricsReport:
    variant: str
    per_view: list
    mean_psnr: float
    mean_ssim: float
    render_ms_per_frame: float

    def to_dict(self):
        return {
            "variant": self.variant,
            "per_view": self.per_view,
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim},
            "render_ms_per_frame": self.render_ms_per_frame,
        }


class TrainDivergence(RuntimeError):
    """Raised when the loss goes non-finite during training."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _gaussian_window(size=_SSIM_WINDOW, sigma=_SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_WINDOW = _gaussian_window()


def ssim(a, b):
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, dynamic range
    1) averaged over channels and valid window positions; differentiable.
    Images smaller than the window are reflect-padded first."""
    at = a if isinstance(a, Tensor) else Tensor(a)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    if at.shape != bt.shape:
        raise ValueError(f"ssim shape mismatch {at.shape} vs {bt.shape}")
    if at.ndim == 2:
        at, bt = at.reshape(*at.shape, 1), bt.reshape(*bt.shape, 1)
    if min(at.shape[0], at.shape[1]) < _SSIM_WINDOW:
        pad = _SSIM_WINDOW // 2
        at, bt = nn.reflect_pad(at, pad), nn.reflect_pad(bt, pad)
    win = _WINDOW.astype(at.dtype)
    mu_a = nn.window_filter(at, win)
    mu_b = nn.window_filter(bt, win)
    aa = nn.window_filter(at * at, win)
    bb = nn.window_filter(bt * bt, win)
    ab = nn.window_filter(at * bt, win)
    var_a = aa - mu_a * mu_a
    var_b = bb - mu_b * mu_b
    cov = ab - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + _SSIM_C1) * (cov * 2.0 + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return (num / den).mean()


def psnr(a, b, mask=None):
    """10 log10(1 / MSE) in dB, capped at 99; mask optionally restricts
    the MSE to pixels where it is true."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            return PSNR_CAP
        diff = (a - b)[m]
    else:
        diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


_lpips_plugin = None


def set_lpips_plugin(fn):
    """Register an image-pair -> scalar Tensor perceptual term (or None)."""
    global _lpips_plugin
    _lpips_plugin = fn


def render_loss(rendered, target, mask, weights, lpips_plugin=None):
    """Composite loss on the union-masked pair.

    L1 is the mean absolute difference over masked pixels; the SSIM term
    uses both images composited to black outside the mask. Returns
    (scalar Tensor, dict of float parts).
    """
    lam_l1, lam_ssim, lam_lpips = weights
    target = np.asarray(target, dtype=rendered.dtype)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        warnings.warn("empty loss mask; returning zero loss")
        zero = Tensor(np.zeros((), dtype=rendered.dtype))
        return zero, {"l1": 0.0, "ssim_term": 0.0, "lpips_term": 0.0}
    m3 = m[:, :, None].astype(rendered.dtype)
    masked_r = rendered * Tensor(m3)
    masked_t = Tensor(target * m3)
    l1 = dg.absolute(masked_r - masked_t).sum() * (1.0 / (3.0 * m.sum()))
    ssim_term = 1.0 - ssim(masked_r, masked_t)
    loss = l1 * lam_l1 + ssim_term * lam_ssim
    parts = {"l1": float(l1.data), "ssim_term": float(ssim_term.data)}
    plugin = lpips_plugin if lpips_plugin is not None else _lpips_plugin
    if lam_lpips > 0 and plugin is not None:
        lp = plugin(masked_r, masked_t)
        loss = loss + lp * lam_lpips
        parts["lpips_term"] = float(lp.data)
    else:
        parts["lpips_term"] = 0.0
    return loss, parts


# ---------------------------------------------------------------------------
# networks + train state
# ---------------------------------------------------------------------------


class RefinementNetworks:
    """All shared learnable modules, keyed for checkpointing."""

    def __init__(self, rng, band_count, human_joint_counts, config):
        self.encoder = nn.ConvEncoder(rng, 3, fu.FEATURE_CHANNELS, name="encoder")
        self.fusion_decoder = fu.FusionDecoder(
            rng, band_count, config.instance_feature_dim, name="fusion_decoder",
            color_bands=config.fusion_color_bands,
        )
        self.gat = ia.GraphAttention(rng, config.instance_feature_dim, name="gat")
        self.interaction_decoder = ia.InteractionDecoder(
            rng, config.instance_feature_dim, name="interaction_decoder"
        )
        # node features for the no-fusion ablation: lifted visual features
        # mean-pooled then linearly mapped to the instance feature width
        self.no_fusion_proj = nn.Linear(
            rng, fu.FEATURE_CHANNELS, config.instance_feature_dim, "no_fusion_proj"
        )
        self.modulators = {
            k: df.WeightModulator(rng, k, name=f"lbs_mlp_k{k}")
            for k in sorted(human_joint_counts)
        }

    def parameters_for(self, variant):
        params = []
        for mod in self.modulators.values():
            params += mod.parameters()
        if variant in ("full", "no_interaction"):
            params += self.encoder.parameters() + self.fusion_decoder.parameters()
        if variant == "no_fusion":
            params += self.encoder.parameters() + self.no_fusion_proj.parameters()
        if variant in ("full", "no_fusion"):
            params += self.gat.parameters() + self.interaction_decoder.parameters()
        return params

    def all_parameters(self):
        params = []
        for mod in self.modulators.values():
            params += mod.parameters()
        params += self.encoder.parameters()
        params += self.fusion_decoder.parameters()
        params += self.no_fusion_proj.parameters()
        params += self.gat.parameters()
        params += self.interaction_decoder.parameters()
        return params


class TrainState:
    """Canonical per-instance attribute tensors + shared networks."""

    def __init__(self, scene, config):
        rng = np.random.default_rng(config.seed)
        bands = sh_band_count(config.sh_degree)
        self.config = config
        self.scene = scene
        joint_counts = {
            inst.template.joint_count
            for inst in scene.instances
            if inst.kind == "human"
        }
        self.networks = RefinementNetworks(rng, bands, joint_counts, config)
        self.canonical = {}
        for inst in scene.instances:
            init = df.initialize_gaussian_attributes(
                inst.template.canonical_centers, sh_bands=bands
            )
            self.canonical[inst.id] = type(init)(
                centers=init.centers,  # fixed template geometry
                sh_coeffs=dg.parameter(init.sh_coeffs.data, f"instance.{inst.id}.sh_coeffs"),
                opacity_logit=dg.parameter(
                    init.opacity_logit.data, f"instance.{inst.id}.opacity_logit"
                ),
                rotation=dg.parameter(init.rotation.data, f"instance.{inst.id}.rotation"),
                log_scale=dg.parameter(
                    init.log_scale.data, f"instance.{inst.id}.log_scale"
                ),
            )
        ids = config.train_camera_ids or sorted(scene.cameras)
        self.train_camera_ids = list(ids)

    def trainable_parameters(self):
        params = list(self.networks.parameters_for(self.config.variant))
        for iid in sorted(self.canonical):
            gs = self.canonical[iid]
            params += [gs.sh_coeffs, gs.opacity_logit, gs.rotation, gs.log_scale]
        return params

    def named_tensors(self):
        """Everything persisted in a checkpoint, name -> Tensor."""
        out = {}
        for p in self.networks.all_parameters():
            out[p.name] = p
        for iid in sorted(self.canonical):
            gs = self.canonical[iid]
            for p in (gs.sh_coeffs, gs.opacity_logit, gs.rotation, gs.log_scale):
                out[p.name] = p
        return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _pose_instances(state, frame):
    posed = {}
    for inst in state.scene.instances:
        canonical = state.canonical[inst.id]
        pose = frame.poses[inst.id]
        if inst.kind == "human":
            modulator = state.networks.modulators[inst.template.joint_count]
            posed[inst.id] = df.pose_human(inst.template, pose, canonical, modulator)
        else:
            posed[inst.id] = df.pose_object(inst.template, pose, canonical)
    return posed


def _context_views(state, frame, instance_id):
    masks = {
        cid: frame.masks[cid] == instance_id + 1 for cid in state.train_camera_ids
    }
    n_ctx = min(state.config.context_view_count, len(state.train_camera_ids))
    return fu.select_context_views(masks, n_ctx)


def _lift_batched(state, feature_maps, stage0, contexts):
    """One lift per camera over the concatenated centers of all instances
    that use it as a context view; returns {(iid, cam_id): (G_i, C)}."""
    by_view = {}
    for iid, ctx in contexts.items():
        for cid in ctx:
            by_view.setdefault(cid, []).append(iid)
    lifted = {}
    for cid, iids in by_view.items():
        if len(iids) == 1:
            iid = iids[0]
            lifted[iid, cid] = fu.lift_features(
                feature_maps[cid], stage0[iid].centers, state.scene.cameras[cid]
            )
            continue
        joined = dg.concatenate([stage0[iid].centers for iid in iids], axis=0)
        vis = fu.lift_features(feature_maps[cid], joined, state.scene.cameras[cid])
        offset = 0
        for iid in iids:
            g = stage0[iid].count
            lifted[iid, cid] = vis[offset : offset + g]
            offset += g
    return lifted


def forward_frame(state, frame, camera_ids, variant=None, training=False,
                  dropout_rng=None, raster_config=None, collect_debug=None):
    """Run the staged refinement for one frame and rasterize the requested
    cameras. Returns {camera_id: RenderedImage}."""
    cfg = state.config
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant}")
    nets = state.networks
    stage0 = _pose_instances(state, frame)
    instance_ids = sorted(stage0)

    needs_encoder = variant in ("full", "no_interaction", "no_fusion")
    feature_maps = {}
    if needs_encoder:
        for cid in state.train_camera_ids:
            feature_maps[cid] = fu.encode_image(nets.encoder, frame.images[cid], cid)

    stage1 = {}
    node_features = {}
    if needs_encoder:
        contexts = {iid: _context_views(state, frame, iid) for iid in instance_ids}
        lifted = _lift_batched(state, feature_maps, stage0, contexts)
    if variant in ("full", "no_interaction"):
        for iid in instance_ids:
            per_view = [
                fu.view_dependent_features(lifted[iid, cid], stage0[iid])
                for cid in contexts[iid]
            ]
            fused = fu.cross_view_fuse(per_view, cfg.gamma)
            refined, inst_feat = fu.decode_fusion(
                nets.fusion_decoder, fused, stage0[iid]
            )
            stage1[iid] = refined
            node_features[iid] = inst_feat
    else:
        stage1 = dict(stage0)
        if variant == "no_fusion":
            for iid in instance_ids:
                acc = None
                for cid in contexts[iid]:
                    pooled = lifted[iid, cid].mean(axis=0)
                    acc = pooled if acc is None else acc + pooled
                mean_vis = acc * (1.0 / len(contexts[iid]))
                node_features[iid] = nets.no_fusion_proj(
                    mean_vis.reshape(1, -1)
                ).reshape(-1)

    final = stage1
    if variant in ("full", "no_fusion"):
        boxes = {iid: ia.instance_aabb(stage0[iid].centers) for iid in instance_ids}
        feats = dg.stack([node_features[iid] for iid in instance_ids], axis=0)
        graph = ia.build_scene_graph(boxes, feats)
        active = ia.active_instances(graph, cfg.tau_deg)
        if active:
            aggregated = nets.gat(feats, graph, training=training, rng=dropout_rng)
            rows = [instance_ids.index(a) for a in active]
            d_center, d_color0, d_logit = nets.interaction_decoder(aggregated[rows])
            residuals = {
                iid: (d_center[j], d_color0[j], d_logit[j])
                for j, iid in enumerate(active)
            }
            final = ia.apply_stage2_updates(stage1, residuals)
        if collect_debug is not None:
            collect_debug["graph"] = graph
            collect_debug["active"] = active

    scene_set = concat_gaussian_sets([final[iid] for iid in instance_ids])
    out = {}
    for cid in camera_ids:
        out[cid] = rasterize(
            scene_set, state.scene.cameras[cid], config=raster_config
        )
    return out


def union_mask(frame, camera_id):
    return frame.masks[camera_id] > 0


# ---------------------------------------------------------------------------
# training / evaluation / ablation
# ---------------------------------------------------------------------------


def train(scene, config, out_checkpoint=None, curve_path=None, state=None):
    """Round-robin (frame, camera) optimization of the full parameter set.

    Returns (TrainState, loss_curve) where loss_curve rows are
    (iteration, loss, l1, ssim_term, lpips_term). Writes a checkpoint
    every `checkpoint_every` iterations and at the end when a path is
    given, plus the loss-curve CSV. Pass an existing state to resume.
    """
    from . import sceneio

    kernels.set_tile_workers(config.threads)
    if state is None:
        state = TrainState(scene, config)
    params = state.trainable_parameters()
    adam = dg.AdamState(params, lr=config.lr)
    pairs = [
        (f_idx, cid)
        for f_idx in range(len(scene.frames))
        for cid in state.train_camera_ids
    ]
    weights = (config.lambda_l1, config.lambda_ssim, config.lambda_lpips)
    curve = []
    for it in range(config.iterations):
        frame_idx, cam_id = pairs[it % len(pairs)]
        frame = scene.frames[frame_idx]
        dropout_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, it, frame_idx])
        )
        rendered = forward_frame(
            state, frame, [cam_id], training=True, dropout_rng=dropout_rng
        )[cam_id]
        loss, parts = render_loss(
            rendered.pixels,
            frame.images[cam_id],
            union_mask(frame, cam_id),
            weights,
        )
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainDivergence(
                f"non-finite loss at iteration {it}; "
                f"parameter norms: {_norm_dump(params)}"
            )
        loss.backward()
        for p in params:
            if p.grad is None:  # modules skipped this frame (e.g. empty active set)
                p.grad = np.zeros_like(p.data)
        dg.adam_step(params, adam)
        # diverged parameters can escape the loss check by falling behind
        # the near plane; sweep them periodically
        if it % 50 == 0 and any(
            not np.isfinite(p.data).all() for p in params
        ):
            raise TrainDivergence(
                f"non-finite parameter after iteration {it}; "
                f"parameter norms: {_norm_dump(params)}"
            )
        curve.append((it, value, parts["l1"], parts["ssim_term"], parts["lpips_term"]))
        if out_checkpoint and config.checkpoint_every > 0 and it > 0 \
                and it % config.checkpoint_every == 0:
            sceneio.save_checkpoint(state, out_checkpoint)
    if out_checkpoint:
        sceneio.save_checkpoint(state, out_checkpoint)
    if curve_path:
        write_loss_curve(curve_path, curve)
    return state, curve


def _norm_dump(params):
    return {p.name: float(np.linalg.norm(p.data)) for p in params}


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "l1", "ssim_term", "lpips_term"])
        for row in curve:
            writer.writerow(row)


def evaluate(scene, state, camera_ids, variant=None, graph_dump_dir=None):
    """Render every frame from the given cameras and report PSNR/SSIM
    inside the union-mask region, plus render timing. graph_dump_dir,
    when given, receives one scene-graph debug JSON per frame."""
    variant = variant or state.config.variant
    for cid in camera_ids:
        if cid not in scene.cameras:
            raise ValueError(f"camera {cid} not in scene")
    per_view = []
    total_time = 0.0
    renders = 0
    for frame in scene.frames:
        debug = {} if graph_dump_dir else None
        start = time.perf_counter()
        with dg.no_grad():
            rendered = forward_frame(state, frame, list(camera_ids),
                                     variant=variant, collect_debug=debug)
        total_time += time.perf_counter() - start
        renders += len(camera_ids)
        if debug and "graph" in debug:
            ia.dump_scene_graph(
                os.path.join(graph_dump_dir, f"graph_f{frame.index:03d}.json"),
                debug["graph"], frame.index, debug["active"],
            )
        for cid in camera_ids:
            img = rendered[cid].array()
            target = frame.images[cid]
            m = union_mask(frame, cid)
            m3 = m[:, :, None]
            view_psnr = psnr(img, target, mask=np.repeat(m3, 3, axis=2))
            with dg.no_grad():
                view_ssim = float(ssim(img * m3, target * m3).data)
            per_view.append(
                {
                    "frame": frame.index,
                    "camera": cid,
                    "psnr": view_psnr,
                    "ssim": view_ssim,
                }
            )
    mean_psnr = float(np.mean([v["psnr"] for v in per_view]))
    mean_ssim = float(np.mean([v["ssim"] for v in per_view]))
    ms_per_frame = 1000.0 * total_time / max(renders, 1)
    return MetricsReport(
        variant=variant,
        per_view=per_view,
        mean_psnr=mean_psnr,
        mean_ssim=mean_ssim,
        render_ms_per_frame=ms_per_frame,
    )


def ablate(scene, config, holdout_camera=None, out_path=None):
    """Train all four variants with identical seeds/budgets and compare on
    the held-out camera (defaults to the highest camera id)."""
    camera_ids = sorted(scene.cameras)
    if holdout_camera is None:
        holdout_camera = camera_ids[-1]
    if holdout_camera not in scene.cameras:
        raise ValueError(f"holdout camera {holdout_camera} not in scene")
    train_ids = [c for c in camera_ids if c != holdout_camera]
    table = {"holdout_camera": holdout_camera, "iterations": config.iterations,
             "seed": config.seed, "variants": {}}
    for variant in VARIANTS:
        cfg = TrainConfig(**{**asdict(config), "variant": variant,
                             "train_camera_ids": train_ids})
        state, curve = train(scene, cfg)
        report = evaluate(scene, state, [holdout_camera])
        fps = 1000.0 / report.render_ms_per_frame if report.render_ms_per_frame else 0.0
        table["variants"][variant] = {
            "psnr": report.mean_psnr,
            "ssim": report.mean_ssim,
            "render_fps": fps,
            "final_loss": curve[-1][1] if curve else None,
        }
    if out_path:
        with open(out_path, "w") as f:
            json.dump(table, f, indent=1)
            f.write("\n")
    return table
