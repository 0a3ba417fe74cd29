"""Adam, the alternating E/M training loop, the ERM baseline, metrics and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import (
    ConfigError,
    IncompatibleCheckpointError,
    NumericError,
    ParseError,
    UndefinedMetricError,
    ValidationError,
)
from .graph import Batch, DatasetSplit, Graph, batch_graphs
from .model import (
    PHI_GROUPS,
    THETA_GROUP,
    DerogParams,
    Dims,
    ErmParams,
    erm_forward,
    forward_full,
    infer_latents,
)
from .objective import (
    LossWeights,
    e_step_loss_v2,
    kl_gaussian_prior_loss,
    m_step_loss,
    sample_contrastive_sets,
)
from .tensor import Tape, Tensor, add

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
VARIANTS = ("v1", "v2", "erm")
METRICS = ("accuracy", "roc_auc")
GRL_SCOPES = ("downstream", "all")


@dataclass
class AblationFlags:
    with_obi: bool = False
    without_em: bool = False
    without_grl: bool = False
    without_l_env: bool = False
    without_l_cl: bool = False
    without_h_y_tilde: bool = False
    noise_e: bool = False
    noise_g_hat: bool = False

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "AblationFlags":
        flags = cls()
        for name in names:
            name = name.strip()
            if not name:
                continue
            if name not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown ablation flag {name!r}")
            setattr(flags, name, True)
        return flags

    def active(self) -> list[str]:
        return [k for k, v in dataclasses.asdict(self).items() if v]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    hidden: int = 32
    num_layers: int = 3
    epochs: int = 30
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    lambda_grl: float = 1.0
    seed: int = 0
    variant: str = "v2"
    metric: str = "accuracy"
    # "downstream": only the rationale path sees the reversed gradient;
    # "all": every E-step term reaches the environment GNN reversed
    grl_scope: str = "downstream"

    def validate(self) -> None:
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be a finite non-negative number")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.hidden < 1 or self.num_layers < 1 or self.batch_size < 1:
            raise ConfigError("hidden, num_layers and batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r} (expected one of {VARIANTS})")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r} (expected one of {METRICS})")
        if self.grl_scope not in GRL_SCOPES:
            raise ConfigError(f"unknown grl_scope {self.grl_scope!r} (expected one of {GRL_SCOPES})")
        if not math.isfinite(self.lambda_grl):
            raise ConfigError("lambda_grl must be finite")
        self.weights.validate()

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        w = obj.pop("weights", {}) or {}
        bad = sorted(set(w) - set(LossWeights.__dataclass_fields__))
        if bad:
            raise ConfigError(f"unknown loss-weight keys: {bad}")
        cfg = cls(**obj, weights=LossWeights(**w))
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, weight_decay: float) -> None:
    """One Adam update in place, with decoupled weight decay applied first."""
    if len(params) != len(grads):
        raise ValidationError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    bc1 = 1.0 - BETA1 ** state.step
    bc2 = 1.0 - BETA2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValidationError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def _update(groups: dict[str, list[Tensor]], names: Sequence[str], grads: dict,
            states: dict[str, AdamState], cfg: TrainConfig) -> None:
    for name in names:
        params = groups[name]
        g = [grads.get(p, np.zeros(p.shape)) for p in params]
        adam_step(params, g, states[name], cfg.lr, cfg.weight_decay)


def _backward(loss: Tensor) -> dict:
    # a loss that touched no parameter (e.g. every weight zero) carries no tape
    if loss.tape_node is None:
        return {}
    return loss.tape_node[0].backward(loss)


def _check_finite(loss: Tensor, name: str, epoch: int, batch_no: int) -> None:
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(f"non-finite {name} at epoch {epoch}, batch {batch_no}: {loss.data[0]}")


# ---------------------------------------------------------------------------
# models


def build_model(cfg: TrainConfig, dims: Dims, rng: np.random.Generator):
    if cfg.variant == "erm":
        return ErmParams.init(dims, rng)
    return DerogParams.init(dims, rng)


def dims_for(dataset: DatasetSplit, cfg: TrainConfig) -> Dims:
    f = dataset.train[0].feature_dim if dataset.train else dataset.ood_test[0].feature_dim
    return Dims(f=f, d=cfg.hidden, c=dataset.class_count, num_layers=cfg.num_layers,
                env_count=max(dataset.env_count, 1))


def effective_weights(cfg: TrainConfig, flags: AblationFlags) -> LossWeights:
    w = dataclasses.replace(cfg.weights)
    if cfg.variant == "v1":
        w.lambda_env = 0.0
        w.lambda_cl = 0.0
    if flags.without_l_env:
        w.lambda_env = 0.0
    if flags.without_l_cl:
        w.lambda_cl = 0.0
    if flags.without_h_y_tilde:
        w.lambda_y_tilde = 0.0
    return w


def e_step_objective(p: DerogParams, batch: Batch, latents, cfg: TrainConfig, flags: AblationFlags,
                     rng: np.random.Generator) -> Tensor:
    w = effective_weights(cfg, flags)
    base = kl_gaussian_prior_loss(latents, w, batch) if flags.with_obi else None
    sets = None
    if w.lambda_cl:
        sets = sample_contrastive_sets(latents.g_hat, batch.graph_index, int(w.k), rng)
        if sets.skipped:
            log.debug("contrastive: skipped %d of %d graphs", sets.skipped, batch.graph_count)
    return e_step_loss_v2(latents, w, sets, p.phi_e.head, batch, base=base)


def _forward_kwargs(cfg: TrainConfig, flags: AblationFlags, rng) -> dict:
    return dict(lambda_grl=cfg.lambda_grl, use_grl=not flags.without_grl,
                noise_e=flags.noise_e, noise_g_hat=flags.noise_g_hat, rng=rng,
                reverse_own_terms=cfg.grl_scope == "all")


def make_batches(graphs: Sequence[Graph], batch_size: int, order=None) -> list[Batch]:
    idx = range(len(graphs)) if order is None else order
    idx = list(idx)
    return [batch_graphs([graphs[i] for i in idx[s:s + batch_size]]) for s in range(0, len(idx), batch_size)]


def em_epoch(p: DerogParams, batches: Sequence[Batch], cfg: TrainConfig, flags: AblationFlags,
             rng: np.random.Generator, states: dict[str, AdamState], epoch: int = 0) -> tuple[float, float]:
    """One pass of alternating E- and M-steps; returns mean E and M losses."""
    groups = p.groups()
    e_total = m_total = 0.0
    for b, batch in enumerate(batches):
        if flags.without_em:
            with Tape():
                latents, y_hat = forward_full(p, batch, detach_latents=False, **_forward_kwargs(cfg, flags, rng))
                loss_e = e_step_objective(p, batch, latents, cfg, flags, rng)
                loss_m = m_step_loss(y_hat, batch.labels)
                _check_finite(loss_e, "e_loss", epoch, b)
                _check_finite(loss_m, "m_loss", epoch, b)
                grads = _backward(add(loss_e, loss_m))
            _update(groups, (*PHI_GROUPS, THETA_GROUP), grads, states, cfg)
        else:
            with Tape():
                latents = infer_latents(p, batch, cfg.lambda_grl, not flags.without_grl,
                                        cfg.grl_scope == "all")
                loss_e = e_step_objective(p, batch, latents, cfg, flags, rng)
                _check_finite(loss_e, "e_loss", epoch, b)
                grads = _backward(loss_e)
            _update(groups, PHI_GROUPS, grads, states, cfg)
            with Tape():
                _, y_hat = forward_full(p, batch, detach_latents=True, **_forward_kwargs(cfg, flags, rng))
                loss_m = m_step_loss(y_hat, batch.labels)
                _check_finite(loss_m, "m_loss", epoch, b)
                grads = _backward(loss_m)
            _update(groups, (THETA_GROUP,), grads, states, cfg)
        e_total += float(loss_e.data[0])
        m_total += float(loss_m.data[0])
    n = max(len(batches), 1)
    return e_total / n, m_total / n


def erm_epoch(p: ErmParams, batches: Sequence[Batch], cfg: TrainConfig,
              states: dict[str, AdamState], epoch: int = 0) -> float:
    groups = p.groups()
    total = 0.0
    for b, batch in enumerate(batches):
        with Tape():
            loss = m_step_loss(erm_forward(p, batch), batch.labels)
            _check_finite(loss, "m_loss", epoch, b)
            grads = _backward(loss)
        _update(groups, ("classifier",), grads, states, cfg)
        total += float(loss.data[0])
    return total / max(len(batches), 1)


# ---------------------------------------------------------------------------
# metrics


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise UndefinedMetricError("roc_auc: labels must be binary")
    pos, neg = scores[labels == 1], np.sort(scores[labels == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("roc_auc: both classes must be present")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    # doubled numerator keeps the count an exact integer
    twice = int(np.sum(2 * below + (upto - below)))
    return twice / (2 * len(pos) * len(neg))


def accuracy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return math.nan
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    flags: AblationFlags
    dims: Dims
    params: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: list[int] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": {
                **self.config.to_json(),
                "ablations": dataclasses.asdict(self.flags),
                "dims": dataclasses.asdict(self.dims),
            },
            "epoch": self.epoch,
            "rng_state": list(self.rng_state),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Checkpoint":
        if not isinstance(obj, dict):
            raise ParseError("checkpoint: expected a JSON object")
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise IncompatibleCheckpointError(
                f"checkpoint format_version {version!r} is not supported (expected {FORMAT_VERSION})"
            )
        for key in ("config", "epoch", "rng_state", "params"):
            if key not in obj:
                raise ValidationError(f"checkpoint: missing key {key!r}")
        conf = dict(obj["config"])
        try:
            flags = AblationFlags(**conf.pop("ablations", {}))
            dims = Dims(**conf.pop("dims"))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"checkpoint: bad config block ({exc})") from None
        cfg = TrainConfig.from_json(conf)
        params = {}
        for name, entry in obj["params"].items():
            arr = np.array(entry["data"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape)):
                raise ValidationError(f"checkpoint: parameter {name!r} has {arr.size} values for shape {list(shape)}")
            params[name] = arr.reshape(shape)
        return cls(cfg, flags, dims, params, int(obj["epoch"]), list(obj["rng_state"]), version)


def rng_state_list(rng: np.random.Generator) -> list[int]:
    st = rng.bit_generator.state
    return [int(st["state"]["state"]), int(st["state"]["inc"]), int(st["has_uint32"]), int(st["uinteger"])]


def rng_from_state(state: Sequence[int]) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(state[0]), "inc": int(state[1])},
        "has_uint32": int(state[2]),
        "uinteger": int(state[3]),
    }
    return np.random.Generator(bg)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def snapshot(model, cfg: TrainConfig, flags: AblationFlags, epoch: int, rng) -> Checkpoint:
    params = {name: t.data.copy() for name, t in model.named_parameters()}
    return Checkpoint(copy.deepcopy(cfg), dataclasses.replace(flags), model.dims, params, epoch, rng_state_list(rng))


def model_from_checkpoint(ckpt: Checkpoint):
    model = build_model(ckpt.config, ckpt.dims, make_rng(0))
    expected = dict(model.named_parameters())
    for name, t in expected.items():
        if name not in ckpt.params:
            raise ValidationError(f"checkpoint: missing parameter {name!r}")
        arr = ckpt.params[name]
        if arr.shape != t.shape:
            raise ValidationError(f"checkpoint: parameter {name!r} has shape {list(arr.shape)}, expected {list(t.shape)}")
        t.data[...] = arr
    extra = sorted(set(ckpt.params) - set(expected))
    if extra:
        raise ValidationError(f"checkpoint: unexpected parameters {extra}")
    return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    # json writes floats with repr, which round-trips every float64 exactly
    Path(path).write_text(json.dumps(ckpt.to_json()) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: corrupt checkpoint ({exc.msg})") from None
    return Checkpoint.from_json(obj)


# ---------------------------------------------------------------------------
# evaluation and the outer loop


def predict_logits(model, graphs: Sequence[Graph], cfg: TrainConfig, flags: AblationFlags) -> np.ndarray:
    if not graphs:
        return np.zeros((0, model.dims.c))
    noise_rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, 0xE7A1])
    out = []
    for batch in make_batches(graphs, cfg.batch_size):
        if isinstance(model, ErmParams):
            logits = erm_forward(model, batch)
        else:
            _, logits = forward_full(model, batch, detach_latents=True, **_forward_kwargs(cfg, flags, noise_rng))
        out.append(logits.data)
    return np.concatenate(out, axis=0)


def score_model(model, graphs: Sequence[Graph], metric: str, cfg: TrainConfig, flags: AblationFlags) -> float:
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if metric == "roc_auc" and model.dims.c != 2:
        raise UndefinedMetricError("metric requires binary labels")
    labels = np.array([g.label for g in graphs], dtype=np.int64)
    if metric == "roc_auc" and labels.size and labels.max() > 1:
        raise UndefinedMetricError("metric requires binary labels")
    logits = predict_logits(model, graphs, cfg, flags)
    if metric == "accuracy":
        return accuracy(logits, labels)
    return roc_auc(_softmax(logits)[:, 1], labels)


def evaluate(ckpt: Checkpoint, graphs: Sequence[Graph], metric: str | None = None) -> float:
    model = model_from_checkpoint(ckpt)
    return score_model(model, graphs, metric or ckpt.config.metric, ckpt.config, ckpt.flags)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    last: Checkpoint
    history: list[dict]


def history_line(row: dict) -> str:
    return json.dumps(row) + "\n"


def train(cfg: TrainConfig, flags: AblationFlags, dataset: DatasetSplit, out_dir=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; keep the epoch with the best ood_val score.

    When ``out_dir`` is given, writes ``history.jsonl``, ``checkpoint.json``
    (selected) and ``last_checkpoint.json`` there.
    """
    cfg.validate()
    if not dataset.train:
        raise ValidationError("training split is empty")
    if cfg.variant == "erm" and flags.active():
        raise ConfigError("ablation flags apply only to the v1/v2 variants")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.jsonl").write_text("", encoding="utf-8")

    with threadpool_limits(limits=1):
        rng = make_rng(cfg.seed)
        dims = dims_for(dataset, cfg)
        model = build_model(cfg, dims, rng)
        states = {name: AdamState() for name in model.groups()}
        best = snapshot(model, cfg, flags, 0, rng)
        best_score = -math.inf
        history: list[dict] = []

        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(dataset.train))
            batches = make_batches(dataset.train, cfg.batch_size, order)
            if cfg.variant == "erm":
                e_loss, m_loss = None, erm_epoch(model, batches, cfg, states, epoch)
            else:
                e_loss, m_loss = em_epoch(model, batches, cfg, flags, rng, states, epoch)
            id_val = score_model(model, dataset.id_val, cfg.metric, cfg, flags) if dataset.id_val else None
            ood_val = score_model(model, dataset.ood_val, cfg.metric, cfg, flags) if dataset.ood_val else None
            row = {"epoch": epoch, "e_loss": e_loss, "m_loss": m_loss, "id_val": id_val, "ood_val": ood_val}
            history.append(row)
            log.info("epoch %d e_loss=%s m_loss=%.6f id_val=%s ood_val=%s", epoch, e_loss, m_loss, id_val, ood_val)
            if out is not None:
                with (out / "history.jsonl").open("a", encoding="utf-8") as fh:
                    fh.write(history_line(row))
            select = ood_val if ood_val is not None else -m_loss
            if select > best_score:
                best_score = select
                best = snapshot(model, cfg, flags, epoch, rng)

        last = snapshot(model, cfg, flags, cfg.epochs, rng)
    if out is not None:
        save_checkpoint(out / "checkpoint.json", best)
        save_checkpoint(out / "last_checkpoint.json", last)
    return TrainResult(best, last, history)
