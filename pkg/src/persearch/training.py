"""Training loop and the benchmark inference pipeline.

One step processes one scene: fabricate detections around the ground-truth
boxes, match them back by Hungarian assignment, run the re-ID transformer
on the scene pyramid at the detection centers, and descend the combined
loss.  Detection-side losses (focal classification, IoU, smooth-L1) come
from the frozen detector stub and carry no gradient; only the identity
branch (per-scale embeddings against the running OIM class matrices)
trains the model.

The same detection and embedding path serves retrieval: ``build_gallery``
embeds every gallery scene, ``build_query_entries`` picks each query's
detection slot by box overlap, and the evaluation protocol consumes the
result.  Detections derive from (run seed, scene id), so a training run
and a later evaluation of its checkpoint see identical boxes.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .data import Benchmark
from .detector import (
    DetectionSet,
    assign_detections,
    focal_cls_loss,
    iou,
    jitter_detect,
    smooth_l1,
)
from .errors import ConfigError, DataError, NumericError
from .evaluation import GalleryEntry, QueryEntry, select_query_embedding
from .losses import (
    BACKGROUND,
    DEFAULT_MOMENTUM,
    DEFAULT_TAU,
    LossWeights,
    OIMState,
    focal_oim_loss,
)
from .tensor import GradTape, Tensor, read_blob, write_blob
from .transformer import ReIDTransformer

__all__ = [
    "TrainSettings",
    "TrainResult",
    "detect_scene",
    "slot_labels",
    "detection_losses",
    "init_oim_states",
    "train",
    "write_loss_curve",
    "save_checkpoint",
    "load_checkpoint",
    "build_gallery",
    "build_query_entries",
]

# Per-purpose RNG stream tags, combined with the run seed.
DETECTION_STREAM = 7
EPOCH_STREAM = 29

OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainSettings:
    steps: int = 2000
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    grad_clip: float | None = None
    queue_size: int = 32
    oim_momentum: float = DEFAULT_MOMENTUM
    oim_tau: float = DEFAULT_TAU
    focal_gamma: float = 2.0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.weight_decay < 0.0 or self.focal_gamma < 0.0:
            raise ConfigError("weight_decay and focal_gamma must be non-negative")
        if self.queue_size < 0:
            raise ConfigError("queue_size must be non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0.0:
            raise ConfigError("grad_clip must be positive when set")


@dataclass
class TrainResult:
    model: ReIDTransformer
    oim_states: list[OIMState]
    curve: list[dict]


def detect_scene(
    bench: Benchmark, scene_id: int, num_slots: int, run_seed: int
) -> DetectionSet:
    """Deterministic detections for one scene, matched to ground truth."""
    boxes = [b for b, _ in bench.truth(scene_id)]
    det = jitter_detect(
        boxes,
        num_slots,
        bench.config.detector_sigma,
        seed=[run_seed, scene_id, DETECTION_STREAM],
    )
    return assign_detections(det, boxes)


def slot_labels(det: DetectionSet, bench: Benchmark, scene_id: int) -> list[int]:
    """OIM identity per slot: person label, UNLABELED, or BACKGROUND."""
    persons = bench.scenes[scene_id].persons
    return [
        BACKGROUND if a is None else persons[a].label for a in det.assigned
    ]


def detection_losses(det: DetectionSet, bench: Benchmark, scene_id: int):
    """Gradient-free detector stub losses: (focal cls, IoU, smooth-L1)."""
    boxes = [b for b, _ in bench.truth(scene_id)]
    cls_labels = [0 if a is None else 1 for a in det.assigned]
    l_cls = focal_cls_loss(det.scores, cls_labels)
    matched = [(d, boxes[a]) for d, a in zip(det.boxes, det.assigned) if a is not None]
    if matched:
        l_iou = float(np.mean([1.0 - iou(d, t) for d, t in matched]))
        l_l1 = float(
            np.mean([smooth_l1(d.as_array(), t.as_array()) for d, t in matched])
        )
    else:
        l_iou = 0.0
        l_l1 = 0.0
    return l_cls, l_iou, l_l1


def init_oim_states(
    model: ReIDTransformer, num_labeled: int, settings: TrainSettings
) -> list[OIMState]:
    """One running class matrix per embedding scale.

    Every scheme emits per-scale rows of width ``query_width``; the shared
    and parallel schemes keep three independent states, the multi-scale
    schemes one.
    """
    cfg = model.config
    return [
        OIMState.initial(
            num_labeled,
            cfg.query_width,
            settings.queue_size,
            momentum=settings.oim_momentum,
            tau=settings.oim_tau,
        )
        for _ in range(cfg.output_scales)
    ]


def _scene_losses(
    model: ReIDTransformer,
    oim_states: list[OIMState],
    bench: Benchmark,
    scene_id: int,
    run_seed: int,
    settings: TrainSettings,
):
    """Forward one scene; returns (total Tensor, row dict, new states)."""
    det = detect_scene(bench, scene_id, model.config.num_queries, run_seed)
    labels = slot_labels(det, bench, scene_id)
    l_cls, l_iou, l_l1 = detection_losses(det, bench, scene_id)

    emb = model.forward(bench.pyramid(scene_id), det.refs)
    for scale in emb.per_scale:
        if not np.isfinite(scale.data).all():
            raise NumericError("non-finite re-ID embeddings")
    scale_losses = []
    new_states = []
    for scale, state in zip(emb.per_scale, oim_states):
        loss, state = focal_oim_loss(
            tt.l2_normalize_rows(scale), labels, state, gamma=settings.focal_gamma
        )
        scale_losses.append(loss)
        new_states.append(state)
    l_oim = scale_losses[0]
    for extra in scale_losses[1:]:
        l_oim = tt.add(l_oim, extra)
    l_oim = tt.scale(l_oim, 1.0 / len(scale_losses))

    w = settings.weights
    total = tt.add_scalar(
        tt.scale(l_oim, w.oim), w.cls * l_cls + w.iou * l_iou + w.l1 * l_l1
    )
    if not np.isfinite(float(total.data)):
        raise NumericError(f"non-finite loss {float(total.data)}")
    row = {
        "l_cls": l_cls,
        "l_iou": l_iou,
        "l_l1": l_l1,
        "l_oim": float(l_oim.data),
        "total": float(total.data),
    }
    return total, row, new_states


def _step_losses(model, oim_states, bench, scene_id, run_seed, settings, step):
    try:
        return _scene_losses(model, oim_states, bench, scene_id, run_seed, settings)
    except NumericError as e:
        raise NumericError(f"{e} at step {step}") from None


def _clip_gradients(grads: list[np.ndarray], limit: float) -> list[np.ndarray]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm <= limit or norm == 0.0:
        return grads
    return [g * (limit / norm) for g in grads]


class _Optimizer:
    """SGD or Adam over the model's flat parameter dict."""

    def __init__(self, names: list[str], settings: TrainSettings):
        self.names = names
        self.settings = settings
        self.step_count = 0
        if settings.optimizer == "adam":
            self.m = {n: 0.0 for n in names}
            self.v = {n: 0.0 for n in names}

    def apply(self, params: dict[str, Tensor], grads: list[np.ndarray]) -> None:
        s = self.settings
        self.step_count += 1
        for name, g in zip(self.names, grads):
            p = params[name].data
            if s.weight_decay > 0.0:
                g = g + s.weight_decay * p
            if s.optimizer == "sgd":
                step = s.learning_rate * g
            else:
                b1, b2, eps = 0.9, 0.999, 1e-8
                self.m[name] = b1 * self.m[name] + (1 - b1) * g
                self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
                m_hat = self.m[name] / (1 - b1**self.step_count)
                v_hat = self.v[name] / (1 - b2**self.step_count)
                step = s.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            params[name] = Tensor(p - step)


def train(
    model: ReIDTransformer,
    bench: Benchmark,
    settings: TrainSettings,
    run_seed: int,
    progress=None,
) -> TrainResult:
    """Descend the combined loss over epoch-permuted training scenes.

    The loss curve holds one row per step with the losses measured before
    that step's update; zero steps still evaluates one row so a curve file
    is never empty.  Raises NumericError as soon as the total loss stops
    being finite.
    """
    settings.validate()
    train_ids = bench.train_ids
    if not train_ids:
        raise DataError("benchmark has no training scenes")
    oim_states = init_oim_states(
        model, bench.config.labeled_identities, settings
    )
    names = sorted(model.params)
    opt = _Optimizer(names, settings)
    curve: list[dict] = []

    if settings.steps == 0:
        _, row, _ = _step_losses(
            model, oim_states, bench, train_ids[0], run_seed, settings, 0
        )
        curve.append({"step": 0, **row})
        return TrainResult(model, oim_states, curve)

    step = 0
    epoch = 0
    while step < settings.steps:
        rng = np.random.default_rng([run_seed, EPOCH_STREAM, epoch])
        order = rng.permutation(len(train_ids))
        for idx in order:
            if step >= settings.steps:
                break
            scene_id = train_ids[idx]
            with GradTape() as tape:
                total, row, oim_states = _step_losses(
                    model, oim_states, bench, scene_id, run_seed, settings, step
                )
                grads = tape.gradients(total, [model.params[n] for n in names])
            if settings.grad_clip is not None:
                grads = _clip_gradients(grads, settings.grad_clip)
            opt.apply(model.params, grads)
            curve.append({"step": step, **row})
            if progress is not None:
                progress(step, row)
            step += 1
        epoch += 1
    return TrainResult(model, oim_states, curve)


def write_loss_curve(path, curve: list[dict]) -> None:
    """CSV with one row per step; floats via repr for exact round-trips."""
    cols = ["step", "l_cls", "l_iou", "l_l1", "l_oim", "total"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in curve:
            fh.write(
                ",".join(
                    str(row["step"]) if c == "step" else repr(row[c]) for c in cols
                )
                + "\n"
            )


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(
    out_dir, model: ReIDTransformer, oim_states: list[OIMState], meta: dict
) -> None:
    """Model tensors plus OIM matrices and scalars, all byte-stable."""
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    model.save(os.path.join(out_dir, "model"))
    oim_meta = []
    for i, st in enumerate(oim_states):
        write_blob(os.path.join(out_dir, f"oim{i}_lut.sqt"), Tensor(st.lut))
        entry = {
            "momentum": st.momentum,
            "tau": st.tau,
            "num_labeled": st.num_labeled,
            "queue_capacity": st.queue_capacity,
            "queue_len": len(st.queue),
        }
        if st.queue:
            write_blob(
                os.path.join(out_dir, f"oim{i}_queue.sqt"),
                Tensor(np.stack(list(st.queue))),
            )
        oim_meta.append(entry)
    manifest = {
        "format_version": 1,
        "kind": "checkpoint",
        "meta": meta,
        "oim": oim_meta,
    }
    with open(os.path.join(out_dir, "checkpoint.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(ckpt_dir):
    """Returns (model, oim_states, meta); raises DataError when malformed."""
    ckpt_dir = str(ckpt_dir)
    path = os.path.join(ckpt_dir, "checkpoint.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint manifest {path}: {e}") from e
    if manifest.get("kind") != "checkpoint":
        raise DataError(f"{path} is not a checkpoint manifest")
    model = ReIDTransformer.load(os.path.join(ckpt_dir, "model"))
    oim_states = []
    for i, entry in enumerate(manifest["oim"]):
        lut = read_blob(os.path.join(ckpt_dir, f"oim{i}_lut.sqt")).data
        queue = deque(maxlen=entry["queue_capacity"])
        if entry["queue_len"]:
            qmat = read_blob(os.path.join(ckpt_dir, f"oim{i}_queue.sqt")).data
            for row in qmat:
                queue.append(row)
        oim_states.append(
            OIMState(
                lut=lut,
                queue=queue,
                momentum=entry["momentum"],
                tau=entry["tau"],
            )
        )
    return model, oim_states, manifest.get("meta", {})


# ----------------------------------------------------------------------
# retrieval pipeline
# ----------------------------------------------------------------------


def build_gallery(model: ReIDTransformer, bench: Benchmark, run_seed: int):
    """Embed every gallery scene's detections.

    Returns (entries, truth, per_scene) where per_scene maps scene id to
    (first entry index, detections, embedding matrix) for query lookup.
    """
    entries: list[GalleryEntry] = []
    truth = {sid: bench.truth(sid) for sid in bench.gallery_ids}
    per_scene: dict[int, tuple[int, DetectionSet, np.ndarray]] = {}
    for sid in bench.gallery_ids:
        det = detect_scene(bench, sid, model.config.num_queries, run_seed)
        emb = model.matching_embeddings(bench.pyramid(sid), det.refs).data
        per_scene[sid] = (len(entries), det, emb)
        for i, box in enumerate(det.boxes):
            entries.append(GalleryEntry(sid, box, float(det.scores[i]), emb[i]))
    return entries, truth, per_scene


def build_query_entries(bench: Benchmark, per_scene) -> list[QueryEntry]:
    """One QueryEntry per benchmark query, embedded via its own detections."""
    out = []
    for q in bench.queries:
        sid = q["scene"]
        person = bench.scenes[sid].persons[q["person"]]
        start, det, emb = per_scene[sid]
        slot, embedding = select_query_embedding(det.boxes, emb, person.box)
        out.append(
            QueryEntry(
                scene_id=sid,
                box=person.box,
                identity=q["identity"],
                embedding=embedding,
                source_index=start + slot,
            )
        )
    return out
