"""Unsupervised joint optimisation of segmentation, motion and scene flow."""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, ConvGeometry, backbone_forward, init_backbone_params
from .geom import RotationGroup, icosahedral_group, nearest_group_element
from .heads import (HeadConfig, correlate, estimate_motion, init_head_params, part_features,
                    rotation_logits, segment)
from .metrics import epe3d, hungarian, mean_of, motion_scores, segmentation_scores
from .rigidfit import PartMotionSet, fit_multibody, residuals
from .scenegen import SceneSample

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainerConfig:
    flow_decay: float = 0.9
    consensus_temperature: float = 10.0
    learning_rate: float = 1e-3
    epochs: int = 10
    cold_start_epochs: int = 1
    lambda_seg: float = 1.0
    lambda_mot: float = 0.5
    seed: int = 0
    use_consensus: bool = True
    supervised: bool = False

    def __post_init__(self):
        if not 0.0 <= self.flow_decay <= 1.0:
            raise ValueError("flow_decay must lie in [0, 1]")
        if self.consensus_temperature <= 0:
            raise ValueError("consensus_temperature must be positive")
        if self.learning_rate <= 0 or self.epochs < 0 or self.cold_start_epochs < 0:
            raise ValueError("learning_rate > 0, epochs >= 0, cold_start_epochs >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown trainer keys {sorted(extra)}")
        return cls(**d)


@dataclass
class FlowState:
    flow: np.ndarray
    tag: str = "initial"


@dataclass
class TrainRecord:
    epochs: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.epochs.append(dict(row))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.epochs)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainRecord":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


# ------------------------------------------------------------------ model

@dataclass
class Model:
    backbone: BackboneConfig
    heads: HeadConfig
    params: dc.ParamStore

    @classmethod
    def create(cls, backbone: BackboneConfig | None = None, heads: HeadConfig | None = None,
               seed: int = 0) -> "Model":
        backbone = backbone or BackboneConfig()
        heads = heads or HeadConfig()
        rng = np.random.default_rng(seed)
        store = dc.ParamStore()
        init_backbone_params(backbone, store, rng)
        init_head_params(backbone.layer_dims, heads, store, rng)
        return cls(backbone, heads, store)

    def features(self, geo: ConvGeometry, params=None):
        params = params if params is not None else {k: self.params[k] for k in self.params.names()}
        return backbone_forward(geo, self.backbone, params)

    def predict(self, P: np.ndarray) -> np.ndarray:
        """Soft mask for one frame."""
        F = self.features(ConvGeometry(P, self.backbone))
        return segment(F, {k: self.params[k] for k in self.params.names()})


# -------------------------------------------------------------- operations

def cold_start(scene: SceneSample) -> FlowState:
    if scene.flow_noisy is None or len(scene.flow_noisy) == 0:
        raise ValueError(f"scene {scene.id} has no noisy flow channel")
    return FlowState(np.array(scene.flow_noisy, dtype=float), "initial")


def model_flow(Pk, M, motions: PartMotionSet) -> np.ndarray:
    """sum_s m_is (T_s p_i) - p_i."""
    Pk = np.asarray(Pk, dtype=float)
    return np.einsum("ns,nsa->na", np.asarray(M, dtype=float), motions.apply(Pk)) - Pk


def update_flow(state: FlowState, Pk, M, motions: PartMotionSet, alpha: float) -> FlowState:
    if alpha == 1.0:
        return FlowState(state.flow.copy(), "updated")
    new = alpha * state.flow + (1.0 - alpha) * model_flow(Pk, M, motions)
    return FlowState(new, "updated")


def consensus(Pk, state: FlowState, motions: PartMotionSet, tau: float) -> np.ndarray:
    return np.exp(-tau * residuals(Pk, state.flow, motions))


def consensus_refit(Pk, state: FlowState, M, motions: PartMotionSet, tau: float) -> PartMotionSet:
    """Refit the part motions with every (i, s) weight scaled by beta_is, so
    points whose flow disagrees with their part's motion stop dragging it."""
    return fit_multibody(Pk, state.flow, np.asarray(M) * consensus(Pk, state, motions, tau))


def point_consensus(M, beta) -> np.ndarray:
    """Each point's consensus under its own soft assignment, sum_s m_is beta_is,
    repeated over the slots.

    Weighting (i, s) by beta_is itself would make a slot cheaper the worse
    its motion explains the point, which pulls points towards wrong slots.
    """
    M = np.asarray(M, dtype=float)
    return np.repeat((M * np.asarray(beta)).sum(axis=1, keepdims=True), M.shape[1], axis=1)


def segmentation_loss(Pk, state: FlowState, M, kabsch: PartMotionSet, beta):
    """(1/NS) sum_i sum_s beta_is m_is |p_i + flow_i - T_s p_i|.

    ``beta`` and the transforms are constants; only ``M`` carries gradient.
    """
    r = residuals(Pk, state.flow, kabsch)
    n, S = r.shape
    w = np.asarray(beta, dtype=float) * r / (n * S)
    return dc.sum(dc.mul(M, w))


def motion_loss(dist, kabsch: PartMotionSet, G: RotationGroup | None = None, active=None, weights=None):
    """Cross-entropy of each slot's rotation distribution against the bin
    nearest the Kabsch rotation, averaged over active slots.

    ``dist`` is a PartMotionSet (its distributions are used) or an S x |G|
    array/Var of log-probabilities.  ``weights`` (per slot, e.g. mask mass)
    turns the plain average into a weighted one.
    """
    G = G or icosahedral_group()
    if isinstance(dist, PartMotionSet):
        logp = np.log(np.maximum(dist.distributions, 1e-300))
        if active is None:
            active = dist.active
    else:
        logp = dist
    S = np.shape(dc._val(logp))[0]
    if active is None:
        active = kabsch.active if kabsch.active is not None else np.ones(S, dtype=bool)
    active = np.asarray(active, dtype=bool) & np.asarray(kabsch.active, dtype=bool)
    if not active.any():
        log.warning("motion_loss: all slots inactive")
        return 0.0
    targets = np.array([nearest_group_element(G, R)[0] for R in kabsch.rotations])
    sel = np.zeros((S, len(G)))
    w = np.ones(S) if weights is None else np.asarray(weights, dtype=float)
    w = np.where(active, w, 0.0)
    if w.sum() <= 0:
        log.warning("motion_loss: all slots carry zero weight")
        return 0.0
    sel[np.flatnonzero(active), targets[active]] = -w[active] / w.sum()
    return dc.sum(dc.mul(logp, sel))


def supervised_segmentation_loss(M, gt):
    """Cross-entropy after Hungarian-matching ground-truth parts to slots."""
    gt = np.asarray(gt, dtype=float)
    Mv = np.asarray(dc._val(M), dtype=float)
    n, S = Mv.shape
    if gt.shape[1] > S:
        raise ValueError(f"{gt.shape[1]} ground-truth parts exceed {S} slots")
    logm = np.log(np.maximum(Mv, 1e-300))
    cost = -(gt.T @ logm)  # parts x slots
    w = np.zeros((n, S))
    for g, s in hungarian(cost, maximize=False):
        w[:, s] += gt[:, g]
    return dc.sum(dc.mul(dc.log(dc.add(M, 1e-300)), -w / n))


# ------------------------------------------------------------------ training

def pair_step(model: Model, scene: SceneSample, state: FlowState, cfg: TrainerConfig, epoch: int,
              geo_k: ConvGeometry | None = None, geo_l: ConvGeometry | None = None,
              frozen: dict | None = None, params: dc.ParamStore | None = None, with_grad: bool = True):
    """Losses and gradients for one scene pair.  Returns (grads, info).

    The Kabsch motions, head motions, consensus weights and the masks used
    for part pooling are constants of the loss graph.  They are computed from the current forward pass unless
    ``frozen`` (an earlier ``info``) supplies them, which makes the graph a
    fixed function of the parameters for finite-difference checks.  With
    ``with_grad=False`` only the forward pass runs and grads is None.
    """
    G = icosahedral_group()
    geo_k = geo_k or ConvGeometry(scene.points_k, model.backbone)
    geo_l = geo_l or ConvGeometry(scene.points_l, model.backbone)
    params = params if params is not None else model.params
    Pk = scene.points_k
    info = {}

    def program(tape, p, _inputs):
        Fk = backbone_forward(geo_k, model.backbone, p)
        Fl = backbone_forward(geo_l, model.backbone, p)
        Mk, Ml = segment(Fk, p), segment(Fl, p)
        # the motion loss trains the features only; letting it move the masks
        # collapses them onto one slot
        if frozen is None:
            pool_k, pool_l = dc.stop_gradient(Mk), dc.stop_gradient(Ml)
        else:
            pool_k, pool_l = frozen["mask"], frozen["mask_l"]
        C = correlate(part_features(Fk[-1], pool_k), part_features(Fl[-1], pool_l))
        z = dc.mul(rotation_logits(C, G), 1.0 / model.heads.motion_temperature)
        logp = dc.log_softmax(dc.transpose(z, (1, 0)), axis=1)

        if frozen is None:
            head = estimate_motion(C.value, Pk, state.flow, Mk.value, G, model.heads.motion_temperature)
            kab = fit_multibody(Pk, state.flow, Mk.value)
            if cfg.supervised or not (cfg.use_consensus and epoch >= cfg.cold_start_epochs):
                beta = np.ones_like(Mk.value)
            else:
                beta = point_consensus(Mk.value, consensus(Pk, state, kab, cfg.consensus_temperature))
        else:
            head, kab, beta = frozen["head"], frozen["kabsch"], frozen["beta"]
        if cfg.supervised:
            l_seg = supervised_segmentation_loss(Mk, scene.hard_mask())
        else:
            l_seg = segmentation_loss(Pk, state, Mk, kab, beta)
        l_mot = motion_loss(logp, kab, G)
        info.update(head=head, kabsch=kab, mask=Mk.value, mask_l=pool_l, beta=beta,
                    l_seg=float(dc._val(l_seg)), l_mot=float(dc._val(l_mot)))
        return dc.add(dc.mul(l_seg, cfg.lambda_seg), dc.mul(l_mot, cfg.lambda_mot))

    total, tape = dc.forward(program, params)
    info["total"] = float(total)
    info["branches"] = tuple(tape.branches)
    if not np.isfinite(total):
        raise NonFiniteLoss(f"epoch {epoch}, scene {scene.id}: l_seg={info.get('l_seg')}, "
                            f"l_mot={info.get('l_mot')}")
    if not with_grad:
        return None, info
    return dc.backward(tape), info


def evaluate_scene(model: Model, scene: SceneSample, flow=None) -> dict:
    """Predict on one scene and score it.  ``flow`` defaults to the noisy
    channel; the reported flow estimate is the model-derived one."""
    G = icosahedral_group()
    p = {k: model.params[k] for k in model.params.names()}
    flow = scene.flow_noisy if flow is None else flow
    Fk = backbone_forward(ConvGeometry(scene.points_k, model.backbone), model.backbone, p)
    Fl = backbone_forward(ConvGeometry(scene.points_l, model.backbone), model.backbone, p)
    Mk, Ml = segment(Fk, p), segment(Fl, p)
    C = correlate(part_features(Fk[-1], Mk), part_features(Fl[-1], Ml))
    head = estimate_motion(C, scene.points_k, flow, Mk, G, model.heads.motion_temperature)
    kab = fit_multibody(scene.points_k, flow, Mk)
    pred_flow = model_flow(scene.points_k, Mk, kab)
    seg = segmentation_scores(Mk, scene.mask)
    mot = motion_scores(head, pred_flow, scene, Mk)
    return {"id": scene.id, **seg.as_dict(), "EPE3D": mot.EPE3D, "angular_error": mot.angular_error,
            "translation_error": mot.translation_error, "EPE3D_input": epe3d(flow, scene.flow_clean)}


def oracle_scene(scene: SceneSample) -> dict:
    """Score the ground truth against itself (masks and motions injected)."""
    M = scene.hard_mask()
    motions = PartMotionSet(scene.rotations, scene.translations)
    pred_flow = model_flow(scene.points_k, M, motions)
    seg = segmentation_scores(M, scene.mask)
    mot = motion_scores(motions, pred_flow, scene, M)
    return {"id": scene.id, **seg.as_dict(), "EPE3D": mot.EPE3D, "angular_error": mot.angular_error,
            "translation_error": mot.translation_error,
            "EPE3D_input": epe3d(scene.flow_noisy if scene.flow_noisy is not None else scene.flow_clean,
                                 scene.flow_clean)}


def evaluate(model: Model, scenes: list[SceneSample], mapper=map) -> tuple[list[dict], dict]:
    rows = list(mapper(functools.partial(evaluate_scene, model), scenes))
    agg = mean_of([{k: v for k, v in r.items() if k != "id"} for r in rows])
    return rows, agg


def train(dataset: list[SceneSample], cfg: TrainerConfig, model: Model, val: list[SceneSample] | None = None,
          record: TrainRecord | None = None, flows: dict | None = None, progress=None):
    """Run ``cfg.epochs`` epochs of joint optimisation.

    Returns ``(params, record, flow_states)``.  ``record``/``flows`` from a
    previous run resume epoch numbering and the flow estimates.
    """
    if not dataset:
        raise ValueError("empty training set")
    record = record or TrainRecord()
    flows = dict(flows) if flows else {}
    for s in dataset:
        if s.id not in flows:
            flows[s.id] = cold_start(s)
    start = len(record.epochs)
    for epoch in range(start, start + cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        seg_l, mot_l, cons = [], [], []
        for idx in order:
            scene = dataset[idx]
            state = flows[scene.id]
            grads, info = pair_step(model, scene, state, cfg, epoch)
            dc.adam_step(model.params, grads, cfg.learning_rate)
            if not cfg.supervised and epoch >= cfg.cold_start_epochs:
                M, mot = info["mask"], info["kabsch"]
                if cfg.use_consensus:
                    mot = consensus_refit(scene.points_k, state, M, mot, cfg.consensus_temperature)
                flows[scene.id] = update_flow(state, scene.points_k, M, mot, cfg.flow_decay)
            seg_l.append(info["l_seg"])
            mot_l.append(info["l_mot"])
            cons.append(float(np.mean(info["beta"])))
        row = {"epoch": epoch, "l_seg": float(np.mean(seg_l)), "l_mot": float(np.mean(mot_l)),
               "consensus": float(np.mean(cons)),
               "train_flow_EPE3D": float(np.mean([epe3d(flows[s.id].flow, s.flow_clean) for s in dataset]))}
        if val:
            _, agg = evaluate(model, val)
            row.update({"val_AP": agg["AP"], "val_EPE3D": agg["EPE3D"], "val_angular_error": agg["angular_error"]})
        if not all(v is None or math.isfinite(v) for v in row.values()):
            raise NonFiniteLoss(f"epoch {epoch}: non-finite epoch aggregate {row}")
        record.append(row)
        if progress:
            progress(row)
    return model.params, record, flows
