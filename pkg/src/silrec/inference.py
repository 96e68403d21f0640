"""Silhouette-driven reconstruction by joint latent-code / pose optimization.

The objective is ``L_sil + lambda * L_shape``: a two-sided 2D Chamfer term
between the projected decoded cloud and the silhouette samples, plus the GMM
negative log-likelihood of the latent code.  lambda follows a two-phase
schedule (high early to resolve shape-pose ambiguity, low late for detail).

One optimization restart is run from each GMM mean with the rotation
initialized at zero; the restart with the lowest final total loss wins.

Plateau rule: at iteration t >= window, if the relative change between the
loss now and the loss ``window`` iterations ago is below the tolerance, the
run either drops to the low-lambda phase (if still in the high phase) or
terminates.  This makes "the rate of change in the loss diminishes" precise
and testable.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .metrics import chamfer2, chamfer_grad, chamfer_with_grad
from .neural import (
    DecoderParams,
    _decode_batch_input_grad,
    _decode_batch_with_cache,
    _decode_with_cache,
    adam_init,
    adam_step,
    decode_grad,
)
from .pose import ImageAlign, Pose, project, project_grad
from .prior import GmmModel, gmm_nll, gmm_nll_grad

RESULT_FORMAT_VERSION = 1


class InferenceError(RuntimeError):
    """All restarts produced non-finite losses."""


@dataclass(frozen=True)
class InferenceConfig:
    lambda_high: float = 1.0
    lambda_low: float = 0.001
    switch_iteration: int = 500
    max_iterations: int = 1000
    plateau_window: int = 20
    plateau_tol: float = 1e-6
    latent_lr: float = 0.01
    pose_lr: float = 0.05
    optimize_alignment: bool = False

    def __post_init__(self):
        if not (self.lambda_high >= self.lambda_low > 0) and self.lambda_high != 0:
            raise ValueError("need lambda_high >= lambda_low > 0 (or both zero)")
        if not (0 < self.switch_iteration <= self.max_iterations):
            raise ValueError("need 0 < switch_iteration <= max_iterations")
        if self.plateau_window < 1 or self.plateau_tol < 0:
            raise ValueError("bad plateau settings")

    def without_prior(self) -> "InferenceConfig":
        """The same config with the prior term forced off (lambda = 0)."""
        return InferenceConfig(
            lambda_high=0.0, lambda_low=0.0,
            switch_iteration=self.switch_iteration,
            max_iterations=self.max_iterations,
            plateau_window=self.plateau_window, plateau_tol=self.plateau_tol,
            latent_lr=self.latent_lr, pose_lr=self.pose_lr,
            optimize_alignment=self.optimize_alignment,
        )


def lambda_at(cfg: InferenceConfig, iteration: int) -> float:
    """Two-phase prior weight: high before the switch iteration, low after."""
    if not (0 <= iteration < cfg.max_iterations):
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iterations})")
    return cfg.lambda_high if iteration < cfg.switch_iteration else cfg.lambda_low


# ---------------------------------------------------------------------------
# objective


def total_loss(decoder: DecoderParams, gmm: GmmModel, sil: np.ndarray,
               code: np.ndarray, pose: Pose, lam: float,
               align: ImageAlign | None = None):
    """Evaluate the objective; returns ``(total, l_sil, l_shape)``."""
    cloud = _decode_with_cache(decoder, np.asarray(code, dtype=np.float64))[0]
    l_sil = chamfer2(project(cloud, pose, align), sil)
    l_shape = gmm_nll(gmm, code)
    return l_sil + lam * l_shape, l_sil, l_shape


def total_loss_grad(decoder: DecoderParams, gmm: GmmModel, sil: np.ndarray,
                    code: np.ndarray, pose: Pose, lam: float,
                    align: ImageAlign | None = None):
    """Objective value and gradients.

    Returns ``((total, l_sil, l_shape), g_code, g_angles, g_align)`` where
    ``g_align`` is None when no alignment is passed.
    """
    code = np.asarray(code, dtype=np.float64)
    cloud, cache = _decode_with_cache(decoder, code)
    if not np.all(np.isfinite(cloud)):
        return (math.nan, math.nan, math.nan), None, None, None
    proj = project(cloud, pose, align)
    l_sil = chamfer2(proj, sil)
    g_proj = chamfer_grad(proj, sil)
    pg = project_grad(cloud, pose, g_proj, align)
    _, g_code_sil = decode_grad(decoder, cache, pg.points)
    l_shape = gmm_nll(gmm, code)
    g_code = g_code_sil + lam * gmm_nll_grad(gmm, code)
    return (l_sil + lam * l_shape, l_sil, l_shape), g_code, pg.angles, pg.align


# ---------------------------------------------------------------------------
# optimization


@dataclass
class RestartRecord:
    code: np.ndarray
    pose: Pose
    align: ImageAlign | None
    total: float
    l_sil: float
    l_shape: float
    n_iterations: int
    finite: bool
    trace: dict = field(default_factory=dict)  # iteration-indexed arrays


@dataclass
class InferenceResult:
    code: np.ndarray
    pose: Pose
    align: ImageAlign | None
    cloud: np.ndarray
    total: float
    l_sil: float
    l_shape: float
    best_index: int
    restarts: list[RestartRecord]
    wall_time_s: float = 0.0


def _run_batch(decoder: DecoderParams, gmm: GmmModel, sil: np.ndarray,
               init_codes: np.ndarray, init_pose: Pose,
               cfg: InferenceConfig) -> list[RestartRecord]:
    """Optimize every restart of a batch in lockstep.  Deterministic.

    All restarts share each iteration's batched decoder passes (the decoder
    weights dominate the memory traffic, so a batch of restarts costs about
    the same as one).  Plateau stopping is tracked per restart; a stopped
    restart's variables are frozen while the rest continue.
    """
    sil = np.asarray(sil, dtype=np.float64)
    codes = np.array(init_codes, dtype=np.float64)
    if codes.ndim != 2:
        raise ValueError(f"init_codes must be (B, D), got {codes.shape}")
    n = len(codes)
    angles = np.tile(init_pose.as_array(), (n, 1))
    use_align = cfg.optimize_alignment
    aligns = np.tile([1.0, 0.0, 0.0], (n, 1)) if use_align else None

    code_state = adam_init([codes], lr=cfg.latent_lr)
    pose_params = [angles] + ([aligns] if use_align else [])
    pose_state = adam_init(pose_params, lr=cfg.pose_lr)

    traces = [{"total": [], "l_sil": [], "l_shape": [], "lambda": []}
              for _ in range(n)]
    forced_low = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    finite = np.ones(n, dtype=bool)
    n_iters = np.full(n, cfg.max_iterations)

    for it in range(cfg.max_iterations):
        if not active.any():
            break
        clouds, cache = _decode_batch_with_cache(decoder, codes)
        g_clouds = np.zeros_like(clouds)
        g_angles = np.zeros_like(angles)
        g_aligns = np.zeros_like(aligns) if use_align else None
        g_prior = np.zeros_like(codes)
        for b in range(n):
            if not active[b]:
                continue
            lam = cfg.lambda_low if forced_low[b] else lambda_at(cfg, it)
            if not np.all(np.isfinite(clouds[b])):
                finite[b] = False
                active[b] = False
                n_iters[b] = len(traces[b]["total"])
                continue
            pose_b = Pose.from_array(angles[b])
            align_b = ImageAlign.from_array(aligns[b]) if use_align else None
            proj = project(clouds[b], pose_b, align_b)
            l_sil, g_proj = chamfer_with_grad(proj, sil)
            l_shape = gmm_nll(gmm, codes[b])
            tot = l_sil + lam * l_shape
            if not math.isfinite(tot):
                finite[b] = False
                active[b] = False
                n_iters[b] = len(traces[b]["total"])
                continue
            tr = traces[b]
            tr["total"].append(tot)
            tr["l_sil"].append(l_sil)
            tr["l_shape"].append(l_shape)
            tr["lambda"].append(lam)

            w = cfg.plateau_window
            if len(tr["total"]) > w:
                ref = tr["total"][-1 - w]
                if abs(tot - ref) <= cfg.plateau_tol * max(abs(ref), 1e-12):
                    in_high_phase = (not forced_low[b] and it < cfg.switch_iteration
                                     and cfg.lambda_high != cfg.lambda_low)
                    if in_high_phase:
                        forced_low[b] = True  # enter the refinement phase early
                    else:
                        active[b] = False
                        n_iters[b] = it + 1
                        continue
            pg = project_grad(clouds[b], pose_b, g_proj, align_b)
            g_clouds[b] = pg.points
            g_angles[b] = pg.angles
            if use_align:
                g_aligns[b] = pg.align
            g_prior[b] = lam * gmm_nll_grad(gmm, codes[b])
        if not active.any():
            break

        g_codes = _decode_batch_input_grad(decoder, cache, g_clouds) + g_prior
        prev = [codes.copy(), angles.copy()] + ([aligns.copy()] if use_align else [])
        code_state, new_code = adam_step(code_state, [codes], [g_codes],
                                         names=["latent"])
        pose_grads = [g_angles] + ([g_aligns] if use_align else [])
        pose_state, new_pose = adam_step(pose_state, pose_params, pose_grads,
                                         names=["pose", "align"])
        codes = new_code[0]
        pose_params = new_pose
        angles = pose_params[0]
        if use_align:
            aligns = pose_params[1]
        # frozen restarts keep their stopping-time variables
        frozen = ~active
        if frozen.any():
            codes[frozen] = prev[0][frozen]
            angles[frozen] = prev[1][frozen]
            if use_align:
                aligns[frozen] = prev[2][frozen]

    records = []
    for b in range(n):
        tr = traces[b]
        if finite[b] and tr["total"]:
            final = (tr["total"][-1], tr["l_sil"][-1], tr["l_shape"][-1])
        else:
            final = (math.nan, math.nan, math.nan)
            finite[b] = False
            n_iters[b] = len(tr["total"])
        records.append(RestartRecord(
            code=codes[b].copy(),
            pose=Pose.from_array(angles[b]),
            align=ImageAlign.from_array(aligns[b]) if use_align else None,
            total=final[0], l_sil=final[1], l_shape=final[2],
            n_iterations=int(n_iters[b]),
            finite=bool(finite[b]),
            trace={k: np.array(v) for k, v in tr.items()},
        ))
    return records


def run_single(decoder: DecoderParams, gmm: GmmModel, sil: np.ndarray,
               init_code: np.ndarray, init_pose: Pose,
               cfg: InferenceConfig) -> RestartRecord:
    """One optimization run from the given initialization.  Deterministic."""
    init = np.asarray(init_code, dtype=np.float64)[None, :]
    return _run_batch(decoder, gmm, sil, init, init_pose, cfg)[0]


def reconstruct(decoder: DecoderParams, gmm: GmmModel, sil: np.ndarray,
                cfg: InferenceConfig) -> InferenceResult:
    """Multi-restart reconstruction: one run per GMM mean, best final loss wins."""
    t0 = time.perf_counter()
    restarts = _run_batch(decoder, gmm, sil, gmm.means, Pose(), cfg)
    usable = [i for i, r in enumerate(restarts) if r.finite]
    if not usable:
        raise InferenceError("every restart produced a non-finite loss")
    best = min(usable, key=lambda i: restarts[i].total)
    winner = restarts[best]
    from .neural import decode  # local import to avoid cycle at module load

    return InferenceResult(
        code=winner.code, pose=winner.pose, align=winner.align,
        cloud=decode(decoder, winner.code),
        total=winner.total, l_sil=winner.l_sil, l_shape=winner.l_shape,
        best_index=best, restarts=restarts,
        wall_time_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# serialization


def result_to_dict(result: InferenceResult) -> dict:
    """JSON-ready view of a result; timing lives under the "timing" key."""
    doc = {
        "format_version": RESULT_FORMAT_VERSION,
        "code": [float(v) for v in result.code],
        "pose_radians": {
            "azimuth": result.pose.azimuth,
            "elevation": result.pose.elevation,
            "tilt": result.pose.tilt,
        },
        "pose_degrees": result.pose.degrees(),
        "losses": {
            "total": result.total,
            "l_sil": result.l_sil,
            "l_shape": result.l_shape,
        },
        "best_restart": result.best_index,
        "restarts": [
            {
                "final_total": r.total if r.finite else None,
                "final_l_sil": r.l_sil if r.finite else None,
                "final_l_shape": r.l_shape if r.finite else None,
                "iterations": r.n_iterations,
                "finite": r.finite,
            }
            for r in result.restarts
        ],
        "timing": {"wall_time_s": result.wall_time_s},
    }
    if result.align is not None:
        doc["alignment"] = {
            "scale": result.align.scale,
            "shift_x": result.align.shift_x,
            "shift_y": result.align.shift_y,
        }
    return doc


def save_result(path: str | Path, result: InferenceResult,
                cloud_path: str | Path | None = None) -> None:
    Path(path).write_text(json.dumps(result_to_dict(result), sort_keys=True, indent=1))
    if cloud_path is not None:
        geometry.save_ply(cloud_path, result.cloud)


def save_traces_csv(path: str | Path, result: InferenceResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["restart", "iteration", "total", "l_sil", "l_shape", "lambda"])
        for ri, r in enumerate(result.restarts):
            tr = r.trace
            for i in range(len(tr["total"])):
                writer.writerow([ri, i, repr(float(tr["total"][i])),
                                 repr(float(tr["l_sil"][i])),
                                 repr(float(tr["l_shape"][i])),
                                 repr(float(tr["lambda"][i]))])
