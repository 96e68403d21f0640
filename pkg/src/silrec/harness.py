"""Experiment orchestration: synthetic dataset generation, training, prior
fitting, reconstruction, and evaluation.

Commands communicate only through files under the configured output
directory:

    dataset/   train_###.xyz, test_###.xyz, test_###.off, test_###.pgm,
               manifest.json
    models/    autoencoder.json, loss_curve.csv, gmm.json, mean_#.ply
    results/<label>/   case_###.json, case_###.ply  (label: full | noprior)
    eval/      evaluation.csv, summary.json

All randomness flows from the single root seed in the config, split per
purpose with ``numpy.random.SeedSequence([root_seed, PURPOSE, index])`` where
PURPOSE is one of the documented codes below.  Re-running any command with
the same config reproduces its outputs byte for byte (timing fields under
"timing" keys aside).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, masks, metrics, neural, prior
from .inference import InferenceConfig, reconstruct, save_result, save_traces_csv
from .pose import Pose, project

# seed-purpose codes (documented part of the reproducibility contract)
SEED_PARAMS = 1      # shape-family parameter sampling
SEED_SURFACE = 2     # mesh surface sampling
SEED_POSE = 3        # ground-truth test poses
SEED_TRAIN = 4       # autoencoder training
SEED_GMM = 5         # EM initialization
SEED_MASK = 6        # silhouette point sampling


def derived_seed(root: int, purpose: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([root, purpose, index]).generate_state(1)[0])


@dataclass
class DatasetConfig:
    n_train: int = 200
    n_test: int = 30
    n_points: int = 256
    dense_points: int = 2048
    mask_resolution: int = 128
    splat_radius: float = 0.05
    azimuth_range_deg: tuple[float, float] = (-60.0, 60.0)
    elevation_range_deg: tuple[float, float] = (0.0, 30.0)


@dataclass
class PriorConfig:
    n_components: int = 5
    max_iter: int = 200
    tol: float = 1e-7
    cov_floor: float | None = None
    covariance_type: str = "full"
    # decoded means closer than this in 3D Chamfer are flagged as indistinct
    distinct_means_cd: float = 1e-3

    def em_config(self, seed: int) -> prior.EmConfig:
        return prior.EmConfig(
            n_components=self.n_components, max_iter=self.max_iter, tol=self.tol,
            cov_floor=self.cov_floor, covariance_type=self.covariance_type, seed=seed,
        )


@dataclass
class ReconstructConfig:
    mask_samples: int = 512
    mask_frame: str = "raster"  # "raster" for pipeline masks, "rms" for external
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    save_traces: bool = False


@dataclass
class ExperimentConfig:
    out_dir: str
    seed: int = 0
    family: geometry.ShapeFamilySpec = field(
        default_factory=lambda: geometry.ShapeFamilySpec("slat-chair"))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: neural.TrainConfig = field(default_factory=neural.TrainConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    thresholds: dict = field(default_factory=dict)  # e.g. {"mean_cd_max": 0.05}

    # ------------------------------------------------------------------
    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        fam = doc.get("family", {})
        family = geometry.ShapeFamilySpec(
            fam.get("name", "slat-chair"),
            {k: tuple(v) for k, v in fam.get("ranges", {}).items()},
        )
        ds = DatasetConfig(**doc.get("dataset", {}))
        if isinstance(ds.azimuth_range_deg, list):
            ds.azimuth_range_deg = tuple(ds.azimuth_range_deg)
        if isinstance(ds.elevation_range_deg, list):
            ds.elevation_range_deg = tuple(ds.elevation_range_deg)
        train = neural.TrainConfig(**doc.get("train", {}))
        pc = PriorConfig(**doc.get("prior", {}))
        rec_doc = dict(doc.get("reconstruct", {}))
        inf = InferenceConfig(**rec_doc.pop("inference", {}))
        rec = ReconstructConfig(inference=inf, **rec_doc)
        return ExperimentConfig(
            out_dir=doc["out_dir"], seed=doc.get("seed", 0), family=family,
            dataset=ds, train=train, prior=pc, reconstruct=rec,
            thresholds=doc.get("thresholds", {}),
        )

    @staticmethod
    def load(path: str | Path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "family": {"name": self.family.family,
                       "ranges": {k: list(v) for k, v in self.family.ranges.items()}},
            "dataset": {**asdict(self.dataset),
                        "azimuth_range_deg": list(self.dataset.azimuth_range_deg),
                        "elevation_range_deg": list(self.dataset.elevation_range_deg)},
            "train": asdict(self.train),
            "prior": asdict(self.prior),
            "reconstruct": {
                "mask_samples": self.reconstruct.mask_samples,
                "mask_frame": self.reconstruct.mask_frame,
                "save_traces": self.reconstruct.save_traces,
                "inference": asdict(self.reconstruct.inference),
            },
            "thresholds": self.thresholds,
        }

    # ------------------------------------------------------------------
    @property
    def dataset_dir(self) -> Path:
        return Path(self.out_dir) / "dataset"

    @property
    def models_dir(self) -> Path:
        return Path(self.out_dir) / "models"

    def results_dir(self, label: str) -> Path:
        return Path(self.out_dir) / "results" / label

    @property
    def eval_dir(self) -> Path:
        return Path(self.out_dir) / "eval"

    @property
    def manifest_path(self) -> Path:
        return self.dataset_dir / "manifest.json"

    @property
    def model_path(self) -> Path:
        return self.models_dir / "autoencoder.json"

    @property
    def gmm_path(self) -> Path:
        return self.models_dir / "gmm.json"


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: ExperimentConfig) -> Path:
    """Generate the synthetic dataset: clouds, test meshes, poses, masks."""
    ds = cfg.dataset
    out = cfg.dataset_dir
    out.mkdir(parents=True, exist_ok=True)
    n_total = ds.n_train + ds.n_test
    entries = []
    for i in range(n_total):
        rng = np.random.default_rng(derived_seed(cfg.seed, SEED_PARAMS, i))
        params = geometry.sample_params(cfg.family, rng)
        mesh = geometry.generate_shape(cfg.family, params)
        dense = geometry.sample_surface(mesh, max(ds.dense_points, ds.n_points),
                                        derived_seed(cfg.seed, SEED_SURFACE, i))
        dense = geometry.normalize_cloud(dense)
        cloud = dense[: ds.n_points]
        is_test = i >= ds.n_train
        split = "test" if is_test else "train"
        idx = i - ds.n_train if is_test else i
        stem = f"{split}_{idx:03d}"
        geometry.save_xyz(out / f"{stem}.xyz", cloud)
        entry = {"id": stem, "split": split,
                 "params": [float(v) for v in params],
                 "cloud": f"{stem}.xyz"}
        if is_test:
            geometry.save_off(out / f"{stem}.off", mesh)
            prng = np.random.default_rng(derived_seed(cfg.seed, SEED_POSE, idx))
            az = math.radians(prng.uniform(*ds.azimuth_range_deg))
            el = math.radians(prng.uniform(*ds.elevation_range_deg))
            gt_pose = Pose(az, el, 0.0)
            mask = masks.rasterize(project(dense, gt_pose), ds.mask_resolution,
                                   ds.splat_radius)
            masks.save_mask(out / f"{stem}.pgm", mask)
            entry.update({
                "mesh": f"{stem}.off", "mask": f"{stem}.pgm",
                "pose_radians": {"azimuth": az, "elevation": el, "tilt": 0.0},
            })
        entries.append(entry)
    manifest = {"config": cfg.to_dict(), "cases": entries}
    cfg.manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out


def load_manifest(cfg: ExperimentConfig) -> dict:
    return json.loads(cfg.manifest_path.read_text())


def _split_clouds(cfg: ExperimentConfig, split: str) -> list[tuple[str, np.ndarray]]:
    manifest = load_manifest(cfg)
    out = []
    for case in manifest["cases"]:
        if case["split"] == split:
            out.append((case["id"], geometry.load_xyz(cfg.dataset_dir / case["cloud"])))
    return out


# ---------------------------------------------------------------------------
# train / fit-prior


def cmd_train(cfg: ExperimentConfig) -> Path:
    """Train the autoencoder on the train split; writes model + loss curve."""
    clouds = [c for _, c in _split_clouds(cfg, "train")]
    tc = neural.TrainConfig(**{**asdict(cfg.train),
                               "seed": derived_seed(cfg.seed, SEED_TRAIN)})
    model = neural.train_autoencoder(clouds, tc)
    cfg.models_dir.mkdir(parents=True, exist_ok=True)
    neural.save_model(cfg.model_path, model)
    with open(cfg.models_dir / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_chamfer"])
        for e, v in enumerate(model.epoch_losses):
            writer.writerow([e, repr(float(v))])
    return cfg.model_path


def model_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_fitprior(cfg: ExperimentConfig) -> Path:
    """Encode the train split, fit the GMM, and write it plus decoded means."""
    model = neural.load_model(cfg.model_path)
    clouds = [c for _, c in _split_clouds(cfg, "train")]
    latents = np.stack([neural.encode(model.encoder, c) for c in clouds])
    fit = prior.fit_gmm(latents, cfg.prior.em_config(derived_seed(cfg.seed, SEED_GMM)))
    prior.save_gmm(cfg.gmm_path, fit.model, latent_model_hash=model_hash(cfg.model_path))
    decoded = [neural.decode(model.decoder, m) for m in fit.model.means]
    for k, cloud in enumerate(decoded):
        geometry.save_ply(cfg.models_dir / f"mean_{k}.ply", cloud)
    # distinctness guideline: every pair of decoded means should differ
    pairs = [
        metrics.chamfer3(decoded[i], decoded[j])
        for i in range(len(decoded)) for j in range(i + 1, len(decoded))
    ]
    report = {
        "log_likelihood_trace": [float(v) for v in fit.log_likelihood_trace],
        "n_iter": fit.n_iter,
        "converged": fit.converged,
        "min_pairwise_decoded_mean_cd": min(pairs) if pairs else None,
        "means_distinct": bool(not pairs or min(pairs) >= cfg.prior.distinct_means_cd),
    }
    (cfg.models_dir / "gmm_fit_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    return cfg.gmm_path


# ---------------------------------------------------------------------------
# reconstruct / evaluate


def _test_cases(cfg: ExperimentConfig) -> list[dict]:
    return [c for c in load_manifest(cfg)["cases"] if c["split"] == "test"]


def cmd_reconstruct(cfg: ExperimentConfig, no_prior: bool = False,
                    mask_path: str | Path | None = None,
                    label: str | None = None) -> Path:
    """Reconstruct every test mask (or one explicit mask file)."""
    model = neural.load_model(cfg.model_path)
    gmm = prior.load_gmm(cfg.gmm_path)
    icfg = cfg.reconstruct.inference
    if no_prior:
        icfg = icfg.without_prior()
    label = label or ("noprior" if no_prior else "full")
    out = cfg.results_dir(label)
    out.mkdir(parents=True, exist_ok=True)

    if mask_path is not None:
        cases = [{"id": Path(mask_path).stem, "mask_file": Path(mask_path)}]
    else:
        cases = [
            {"id": c["id"], "mask_file": cfg.dataset_dir / c["mask"]}
            for c in _test_cases(cfg)
        ]
    for i, case in enumerate(cases):
        mask = masks.load_mask(case["mask_file"])
        if cfg.reconstruct.mask_frame == "raster":
            mask = masks.erode(mask, cfg.dataset.splat_radius)
        m = min(cfg.reconstruct.mask_samples, mask.n_foreground)
        sil = masks.sample_mask(mask, m, derived_seed(cfg.seed, SEED_MASK, i),
                                frame=cfg.reconstruct.mask_frame)
        result = reconstruct(model.decoder, gmm, sil, icfg)
        save_result(out / f"{case['id']}.json", result,
                    cloud_path=out / f"{case['id']}.ply")
        if cfg.reconstruct.save_traces:
            save_traces_csv(out / f"{case['id']}_trace.csv", result)
    return out


def cmd_evaluate(cfg: ExperimentConfig, labels: list[str] | None = None) -> dict:
    """Per-case metrics CSV plus per-condition summary.

    Returns the summary dict; ``summary["thresholds_met"]`` drives the CLI
    exit code.  Never mutates dataset or model files.
    """
    if labels is None:
        root = Path(cfg.out_dir) / "results"
        labels = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.exists() else []
    if not labels:
        raise FileNotFoundError("no result directories to evaluate")
    cases = _test_cases(cfg)
    cfg.eval_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    summary: dict = {"conditions": {}}
    for label in labels:
        rdir = cfg.results_dir(label)
        cds, emds = [], []
        for case in cases:
            # one-off labels (single-mask runs) may cover only some cases
            if not (rdir / f"{case['id']}.json").exists():
                continue
            gt = geometry.load_xyz(cfg.dataset_dir / case["cloud"])
            rec_cloud = geometry.load_ply(rdir / f"{case['id']}.ply")
            doc = json.loads((rdir / f"{case['id']}.json").read_text())
            t0 = time.perf_counter()
            cd = metrics.chamfer3(rec_cloud, gt)
            emd = metrics.emd_approx(rec_cloud, gt, resample=True)
            rows.append({
                "condition": label, "case": case["id"],
                "cd": cd, "emd": emd,
                "l_sil": doc["losses"]["l_sil"], "l_shape": doc["losses"]["l_shape"],
                "restart": doc["best_restart"],
                "iterations": doc["restarts"][doc["best_restart"]]["iterations"],
                "wall_time_s": doc["timing"]["wall_time_s"] + time.perf_counter() - t0,
            })
            cds.append(cd)
            emds.append(emd)
        if not cds:
            continue
        summary["conditions"][label] = {
            "mean_cd": float(np.mean(cds)), "mean_emd": float(np.mean(emds)),
            "n_cases": len(cds),
        }
    if not rows:
        raise FileNotFoundError(f"no per-case result files under labels {labels}")
    with open(cfg.eval_dir / "evaluation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    met = True
    th = cfg.thresholds
    for label, cond in summary["conditions"].items():
        if "mean_cd_max" in th and cond["mean_cd"] > th["mean_cd_max"]:
            met = False
        if "mean_emd_max" in th and cond["mean_emd"] > th["mean_emd_max"]:
            met = False
    if "full" in summary["conditions"] and "noprior" in summary["conditions"]:
        full = summary["conditions"]["full"]
        nop = summary["conditions"]["noprior"]
        summary["prior_improves_cd"] = full["mean_cd"] <= nop["mean_cd"]
        if th.get("require_prior_improves_cd") and not summary["prior_improves_cd"]:
            met = False
    summary["thresholds_met"] = met
    (cfg.eval_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary
