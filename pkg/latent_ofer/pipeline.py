"""
Experiment orchestration: stage training, evaluation drivers and reports
"""

import functools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, get_config, seed_everything
from .encoder import embed_patches
from .errors import DataError, ModelError
from .ferhead import (
    FUSIONS,
    ExpressionNet,
    PipelineModels,
    Prediction,
    classify_image,
    grad_cam,
    predict_pipeline,
    train_expression_net,
)
from .losses import LossWeights
from .patchgrid import OcclusionMask, occlude, partition, synth_occlude
from .reconstruct import HybridReconstructor, ReconstructionResult, evaluate_reconstruction, reconstruct, train_reconstructor
from .svdd import (
    DetectionMetrics,
    PatchScore,
    SvddModel,
    collect_unoccluded_latents,
    detect_occlusion,
    detection_metrics_from_flags,
    train_svdd,
)
from .toydata import OCCLUDER_KINDS, FaceDataset, generate_toy_dataset, ingest, make_occluder, random_placement

logger = logging.getLogger(__name__)

SEMANTIC_FER = "fer_semantic"
SWEEP_FUSION = "cnn+extracted"
ASSEMBLY_STAGES = {"self-assembly": "reconstructor", "conv": "reconstructor_conv"}


def fer_stage(fusion: str) -> str:
    """Stage name of a fusion variant, e.g. cnn+extracted -> fer_cnn_extracted"""
    return "fer_" + fusion.replace("+", "_")


def requires_stages(*stages: str):
    """Load the named stages before the call; ModelError names the first one missing"""

    def decorator(method):
        @functools.wraps(method)
        def wrapper(self, *args, **kwargs):
            for stage in stages:
                self.stage(stage)
            return method(self, *args, **kwargs)

        return wrapper

    return decorator


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], num_classes: int = 7) -> np.ndarray:
    """counts[true, predicted]"""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValueError(f"{labels.size} labels but {predictions.size} predictions")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


def accuracy_from_confusion(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        raise ValueError("Accuracy of an empty evaluation is undefined")
    return float(np.trace(counts) / total)


def _check_accuracy(value: float, where: str):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{where}: accuracy {value} outside [0, 1]")


@dataclass
class EvaluationReport:
    """
    Sweep curves, detection metrics, reconstruction quality and the ablation

    Accuracies are stored next to the per-image predictions they were
    computed from.
    """

    seed: int
    sweep: Dict[str, Dict[str, float]] = field(default_factory=dict)
    detection: Dict[str, Any] = field(default_factory=dict)
    reconstruction: Dict[str, Any] = field(default_factory=dict)
    ablation: List[Dict[str, Any]] = field(default_factory=list)
    predictions: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)

    def __post_init__(self):
        for curve, points in self.sweep.items():
            for proportion, value in points.items():
                _check_accuracy(value, f"sweep {curve} @ {proportion}")
        for row in self.ablation:
            _check_accuracy(row["accuracy"], f"ablation {row['fusion']}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "sweep": self.sweep,
            "detection": self.detection,
            "reconstruction": self.reconstruction,
            "ablation": self.ablation,
            "predictions": self.predictions,
        }

    def save(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            json.dump(_json_safe(self.to_dict()), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: str) -> "EvaluationReport":
        if not os.path.exists(path):
            raise DataError(f"Report not found: {path}", code="missing-file")
        with open(path, "r") as f:
            return cls(**json.load(f))


def _json_safe(value: Any) -> Any:
    """Replace non-finite floats by strings so reports stay valid JSON"""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def image_seed(seed: int, index: int) -> int:
    """Per-image occlusion seed derived from the run seed"""
    return int(np.random.default_rng([seed, index]).integers(0, 2 ** 31 - 1))


class LatentOfer:
    """
    Facade over the trained stages of one experiment

    Usage:
        config = ExperimentConfig("experiment.toml")
        ofer = LatentOfer(config)
        ofer.generate_data()
        ofer.train_all()
        prediction = ofer.predict(image)
    """

    def __init__(self, config: Optional[ExperimentConfig] = None):
        self.config = config or get_config()
        self.seed = self.config.seed
        self._models: Dict[str, Any] = {}
        self._dataset: Optional[FaceDataset] = None

    # stages

    def model_path(self, stage: str) -> str:
        return os.path.join(self.config.models_dir, f"{stage}.ckpt")

    def has(self, stage: str) -> bool:
        return stage in self._models or os.path.exists(self.model_path(stage))

    def stage(self, name: str) -> Any:
        """Trained model of a stage, loaded on first use"""
        if name not in self._models:
            path = self.model_path(name)
            if not os.path.exists(path):
                raise ModelError(name, f"No trained model for stage '{name}' (expected {path})")
            if name.startswith("reconstructor"):
                self._models[name] = HybridReconstructor.load(path)
            elif name == "svdd":
                self._models[name] = SvddModel.load(path)
            else:
                self._models[name] = ExpressionNet.load(path)
            logger.debug("Loaded %s from %s", name, path)
        return self._models[name]

    def models(self, fusion: str = SWEEP_FUSION) -> PipelineModels:
        return PipelineModels(
            detector=self.stage("svdd"), reconstructor=self.stage("reconstructor"), fer=self.stage(fer_stage(fusion))
        )

    # data

    def generate_data(self, n: Optional[int] = None) -> str:
        out_dir = os.path.dirname(self.config.manifest)
        return generate_toy_dataset(
            n or self.config.get("data.n_images"), self.seed, out_dir, self.config.get("data.image_size")
        )

    def dataset(self) -> FaceDataset:
        if self._dataset is None:
            self._dataset = ingest(self.config.manifest, self.config.get("data.image_size"))
        return self._dataset

    def splits(self) -> Tuple[FaceDataset, FaceDataset]:
        return self.dataset().split(self.config.get("data.val_fraction"), self.seed)

    # training

    def _fer_kwargs(self) -> Dict[str, Any]:
        fer = self.config.section("fer")
        return {
            "latent_dim": self.config.get("model.latent_dim"),
            "cnn_channels": self.config.get("model.cnn_channels"),
            "epochs": fer["epochs"],
            "lr": fer["lr"],
            "batch_size": fer["batch_size"],
        }

    def train_semantic_fer(self) -> ExpressionNet:
        """Frozen CNN-only expression network for the semantic consistency term"""
        train, _ = self.splits()
        seed_everything(self.seed + 1)
        model, history = train_expression_net(
            train.images, train.labels, fusion="cnn", seed=self.seed + 1, **self._fer_kwargs()
        )
        model.save(self.model_path(SEMANTIC_FER), history)
        self._models[SEMANTIC_FER] = model
        return model

    @requires_stages(SEMANTIC_FER)
    def train_reconstructor(self, assembly: Optional[str] = None, resume: bool = False) -> HybridReconstructor:
        """Both assembly variants share the seed so their epochs line up"""
        assembly = assembly or self.config.get("recon.assembly")
        stage = ASSEMBLY_STAGES[assembly]
        recon = self.config.section("recon")
        train, _ = self.splits()

        seed_everything(self.seed)
        model = HybridReconstructor.from_config(self.config, assembly=assembly)
        weights = LossWeights(recon["lambda_re"], recon["lambda_c"], recon["lambda_sc"], recon["lambda_d"])
        model, _ = train_reconstructor(
            train.images,
            model,
            fer=self.stage(SEMANTIC_FER),
            weights=weights,
            epochs=recon["epochs"],
            checkpoint_path=self.model_path(stage),
            resume=resume,
            lr=recon["lr"],
            disc_lr=recon["disc_lr"],
            batch_size=recon["batch_size"],
            masked_weight=recon["masked_weight"],
            min_proportion=recon["min_proportion"],
            max_proportion=recon["max_proportion"],
            seed=self.seed,
        )
        self._models[stage] = model
        return model

    @requires_stages("reconstructor")
    def clean_latents(self, images: np.ndarray) -> torch.Tensor:
        """(n, N, D) encoder latents of unmasked images"""
        embedder = self.stage("reconstructor").embedder
        latents = collect_unoccluded_latents(embedder, images)
        return latents.reshape(len(images), embedder.num_patches, embedder.dim)

    @requires_stages("reconstructor")
    def train_fer_variants(self, fusions: Sequence[str] = FUSIONS) -> Dict[str, ExpressionNet]:
        """The CNN-only variant is trained first; the others warm-start from its CNN"""
        train, _ = self.splits()
        latents = self.clean_latents(train.images)
        trained = {}
        ordered = sorted(fusions, key=lambda f: f != "cnn")
        for fusion in ordered:
            init_from = None
            if fusion != "cnn":
                init_from = trained["cnn"] if "cnn" in trained else self.stage(fer_stage("cnn"))
            seed_everything(self.seed)
            model, history = train_expression_net(
                train.images,
                train.labels,
                fusion=fusion,
                latents=latents if fusion != "cnn" else None,
                init_from=init_from,
                seed=self.seed,
                **self._fer_kwargs(),
            )
            model.save(self.model_path(fer_stage(fusion)), history)
            self._models[fer_stage(fusion)] = model
            trained[fusion] = model
        return trained

    @requires_stages("reconstructor")
    def train_detector(self) -> SvddModel:
        """One-class fit on latents of clean training patches only"""
        svdd = self.config.section("svdd")
        train, _ = self.splits()
        latents = collect_unoccluded_latents(self.stage("reconstructor").embedder, train.images)
        model = train_svdd(
            latents,
            hidden_dim=self.config.get("model.svdd_hidden"),
            out_dim=self.config.get("model.svdd_out"),
            weight_decay=svdd["weight_decay"],
            quantile=svdd["quantile"],
            epochs=svdd["epochs"],
            lr=svdd["lr"],
            batch_size=svdd["batch_size"],
            seed=self.seed,
        )
        model.save(self.model_path("svdd"))
        self._models["svdd"] = model
        return model

    def train_all(self, with_conv_baseline: bool = True):
        self.train_semantic_fer()
        self.train_reconstructor("self-assembly")
        if with_conv_baseline:
            self.train_reconstructor("conv")
        self.train_fer_variants()
        self.train_detector()

    # inference

    @requires_stages("svdd", "reconstructor")
    def detect(self, image: np.ndarray) -> Tuple[OcclusionMask, List[PatchScore]]:
        return detect_occlusion(self.stage("reconstructor").embedder, self.stage("svdd"), image)

    @requires_stages("reconstructor")
    def reconstruct(self, image: np.ndarray, mask: OcclusionMask, stage: str = "reconstructor") -> ReconstructionResult:
        if mask.flags.all():
            raise DataError("Every patch is masked; nothing to reconstruct from", code="fully-occluded")
        return reconstruct(self.stage(stage), image, mask)

    @requires_stages("svdd", "reconstructor")
    def predict(self, image: np.ndarray, fusion: str = SWEEP_FUSION, reconstruction: bool = True) -> Prediction:
        return predict_pipeline(image, self.models(fusion), reconstruction)

    def _classify(self, image: np.ndarray, fer: ExpressionNet, latents) -> int:
        distribution, _ = classify_image(fer, image, latents if fer.uses_latents else None)
        return distribution.label

    def _restore(self, image: np.ndarray) -> Tuple[np.ndarray, Any]:
        """Detect then reconstruct; a fully flagged image is classified as is"""
        recon = self.stage("reconstructor")
        mask, _ = self.detect(image)
        if mask.flags.all():
            logger.warning("Every patch flagged as occluded; classifying without reconstruction")
            return image, embed_patches(recon.embedder, partition(image, recon.patch_size))
        result = reconstruct(recon, image, mask)
        return result.refined, result.latents

    def _occluded_view(self, image: np.ndarray) -> Tuple[np.ndarray, Any]:
        recon = self.stage("reconstructor")
        return image, embed_patches(recon.embedder, partition(image, recon.patch_size))

    # evaluation

    @requires_stages("svdd", "reconstructor", "fer_cnn", fer_stage(SWEEP_FUSION))
    def run_occlusion_sweep(self, with_reconstruction: bool = True) -> EvaluationReport:
        """
        Accuracy against occlusion proportion for both protocols

        The protocol curves classify the occluded input directly; with
        with_reconstruction the random protocol is also run through the
        full pipeline.
        """
        _, val = self.splits()
        patch_size = self.config.get("model.patch_size")
        fer = self.stage(fer_stage(SWEEP_FUSION))
        cam_model = self.stage("fer_cnn")
        cams = [grad_cam(cam_model, image, int(label)) for image, label in zip(val.images, val.labels)]

        curves = [("random", False), ("grad", False)]
        if with_reconstruction:
            curves.append(("random", True))

        sweep: Dict[str, Dict[str, float]] = {}
        predictions: Dict[str, List[Dict[str, Any]]] = {}
        for protocol, restored in curves:
            name = f"{protocol}+reconstruction" if restored else protocol
            sweep[name] = {}
            records = []
            for proportion in self.config.proportions:
                preds = []
                for i, (image, label) in enumerate(zip(val.images, val.labels)):
                    occluded, _ = occlude(
                        image, protocol, proportion, seed=image_seed(self.seed, i), attention=cams[i], patch_size=patch_size
                    )
                    view, latents = self._restore(occluded) if restored else self._occluded_view(occluded)
                    pred = self._classify(view, fer, latents)
                    preds.append(pred)
                    records.append(
                        {"proportion": proportion, "filename": val.filenames[i], "label": int(label), "prediction": pred}
                    )
                acc = accuracy_from_confusion(confusion_matrix(val.labels, preds))
                sweep[name][f"{proportion:.2f}"] = acc
                logger.info("sweep %s p=%.2f accuracy %.4f", name, proportion, acc)
            predictions[f"sweep/{name}"] = records
        return EvaluationReport(self.seed, sweep=sweep, predictions=predictions)

    @requires_stages("svdd", "reconstructor", *[fer_stage(f) for f in FUSIONS])
    def run_ablation(self) -> EvaluationReport:
        """
        Ten rows: reconstruction off, then on, each over the five fusions

        Images are occluded with the configured protocol and proportion.
        """
        _, val = self.splits()
        protocol = self.config.get("eval.protocol")
        proportion = self.config.get("eval.proportion")
        patch_size = self.config.get("model.patch_size")
        cam_model = self.stage("fer_cnn")

        occluded = []
        for i, (image, label) in enumerate(zip(val.images, val.labels)):
            attention = grad_cam(cam_model, image, int(label)) if protocol == "grad" else None
            view, _ = occlude(image, protocol, proportion, seed=image_seed(self.seed, i), attention=attention, patch_size=patch_size)
            occluded.append(view)

        rows: List[Dict[str, Any]] = []
        predictions: Dict[str, List[Dict[str, Any]]] = {}
        for enabled in (False, True):
            views = [self._restore(img) if enabled else self._occluded_view(img) for img in occluded]
            for fusion in FUSIONS:
                fer = self.stage(fer_stage(fusion))
                preds = [self._classify(view, fer, latents) for view, latents in views]
                acc = accuracy_from_confusion(confusion_matrix(val.labels, preds))
                rows.append({"reconstruction": enabled, "fusion": fusion, "accuracy": acc})
                predictions[f"ablation/{'recon' if enabled else 'plain'}/{fusion}"] = [
                    {"filename": f, "label": int(y), "prediction": int(p)}
                    for f, y, p in zip(val.filenames, val.labels, preds)
                ]
                logger.info("ablation reconstruction=%s fusion=%s accuracy %.4f", enabled, fusion, acc)
        return EvaluationReport(self.seed, ablation=rows, predictions=predictions)

    @requires_stages("svdd", "reconstructor")
    def evaluate_detection(self) -> DetectionMetrics:
        """Pooled patch metrics on validation faces covered by procedural occluders"""
        _, val = self.splits()
        size = self.config.get("data.image_size")
        patch_size = self.config.get("model.patch_size")
        threshold = self.config.get("eval.coverage_threshold")
        predicted, truth = [], []
        for i, image in enumerate(val.images):
            rng = np.random.default_rng([self.seed, i, 1])
            kind = OCCLUDER_KINDS[i % len(OCCLUDER_KINDS)]
            occluder = make_occluder(kind, int(rng.integers(size // 4, size // 2 + 1)), seed=image_seed(self.seed, i))
            position = random_placement(image.shape, occluder.shape[0], rng)
            occluded, true_mask = synth_occlude(image, occluder, position, patch_size, threshold)
            mask, _ = self.detect(occluded)
            predicted.append(mask.flags)
            truth.append(true_mask.flags)
        metrics = detection_metrics_from_flags(np.concatenate(predicted), np.concatenate(truth))
        logger.info("detection accuracy %.4f precision %.4f recall %.4f", *metrics.as_tuple())
        return metrics

    def evaluation_masks(self, images: np.ndarray) -> List[OcclusionMask]:
        """Random-protocol masks shared by every reconstruction variant"""
        patch_size = self.config.get("model.patch_size")
        proportion = self.config.get("eval.proportion")
        return [
            occlude(image, "random", proportion, seed=image_seed(self.seed, i), patch_size=patch_size)[1]
            for i, image in enumerate(images)
        ]

    def evaluate_reconstruction(self) -> Dict[str, Any]:
        """Quality report per trained assembly variant, on identical masks"""
        _, val = self.splits()
        masks = self.evaluation_masks(val.images)
        fer = self.stage(SEMANTIC_FER) if self.has(SEMANTIC_FER) else None
        masked_weight = self.config.get("recon.masked_weight")
        results = {}
        for assembly, stage in ASSEMBLY_STAGES.items():
            if self.has(stage):
                results[assembly] = evaluate_reconstruction(self.stage(stage), val.images, masks, fer, masked_weight)
        if not results:
            raise ModelError("reconstructor")
        return results

    def report(self) -> EvaluationReport:
        """Detection, reconstruction, sweep and ablation in one report"""
        sweep = self.run_occlusion_sweep()
        ablation = self.run_ablation()
        detection = self.evaluate_detection()
        return EvaluationReport(
            self.seed,
            sweep=sweep.sweep,
            detection={
                "accuracy": detection.accuracy,
                "precision": detection.precision,
                "recall": detection.recall,
                "undefined": list(detection.undefined),
            },
            reconstruction=self.evaluate_reconstruction(),
            ablation=ablation.ablation,
            predictions={**sweep.predictions, **ablation.predictions},
        )

    def training_histories(self) -> Dict[str, List[Dict[str, float]]]:
        """Per-epoch histories stored in the checkpoints that exist"""
        histories = {}
        for stage in ("reconstructor", "reconstructor_conv", SEMANTIC_FER, *[fer_stage(f) for f in FUSIONS]):
            if os.path.exists(self.model_path(stage)):
                _, meta = load_checkpoint(self.model_path(stage))
                histories[stage] = meta.get("history", [])
        if os.path.exists(self.model_path("svdd")):
            _, meta = load_checkpoint(self.model_path("svdd"))
            histories["svdd"] = [{"loss": v} for v in meta.get("loss_history", [])]
        return histories


def run_occlusion_sweep(config: ExperimentConfig) -> EvaluationReport:
    return LatentOfer(config).run_occlusion_sweep()


def run_ablation(config: ExperimentConfig) -> EvaluationReport:
    return LatentOfer(config).run_ablation()
