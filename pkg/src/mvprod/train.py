"""Training loop, experiment runner, and run configuration.

One step: project raw features, compute the cross- and intra-modal
losses, fuse and encode (query + key), draw a negative batch from each
side's bank, score negative importance from category centroids, build
the cross-instance loss, backprop + Adam on query-side parameters,
momentum-blend the key encoders, and enqueue the fresh key embeddings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataio, evaluate, losses, model
from .autodiff import Tensor, backward, zero_grads
from .checkpoint import read_checkpoint, write_checkpoint
from .membank import MultiQueue, QueueEntry
from .optim import AdamState, adam_step, cosine_lr

QUEUE_MODES = ("multi", "single")
IMPORTANCE_MODES = ("scored", "unit")
MODALITY_MODES = ("all", "visual-only", "text-only")
PRECISIONS = ("f32", "f64")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model widths
    visual_dim: int = 2048
    text_dim: int = 768
    hidden_dim: int = 1024
    refined_dim: int = 512
    embed_dim: int = 512
    batchnorm: bool = True
    # loss balance
    cross_modal_weight: float = 0.1
    intra_modal_weight: float = 0.1
    cross_instance_weight: float = 0.8
    temperature: float = 0.07
    importance_strength: float = 0.1
    # key encoders and negative queues
    momentum: float = 0.999
    queue_capacity: int = 192
    queue_mode: str = "multi"
    importance_mode: str = "scored"
    modality_mode: str = "all"
    # optimization
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    total_steps: int = 1200
    eval_interval: int = 100
    # seeds / precision
    params_seed: int = 1
    shuffle_seed: int = 1
    split_seed: int = 0
    precision: str = "f32"

    def validate(self) -> None:
        for name in ("visual_dim", "text_dim", "hidden_dim", "refined_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (in-batch negatives)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.queue_mode not in QUEUE_MODES:
            raise ConfigError(f"queue_mode must be one of {QUEUE_MODES}")
        if self.importance_mode not in IMPORTANCE_MODES:
            raise ConfigError(f"importance_mode must be one of {IMPORTANCE_MODES}")
        if self.modality_mode not in MODALITY_MODES:
            raise ConfigError(f"modality_mode must be one of {MODALITY_MODES}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        try:
            self.loss_weights().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dims(self) -> model.Dims:
        return model.Dims(
            visual_in=self.visual_dim,
            text_in=self.text_dim,
            hidden=self.hidden_dim,
            refined=self.refined_dim,
            embed=self.embed_dim,
        )

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(
            cross_modal=self.cross_modal_weight,
            intra_modal=self.intra_modal_weight,
            cross_instance=self.cross_instance_weight,
            temperature=self.temperature,
            importance_strength=self.importance_strength,
        )

    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def config_hash(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class TrainState:
    config: TrainConfig
    params: dict[str, model.ParamSet]
    adam: dict[str, AdamState]
    banks: dict[str, MultiQueue]
    step: int = 0


@dataclass
class StepLog:
    step: int
    l1: float
    l2: float
    l3: float
    total: float
    lr: float
    bank_fill: dict[str, int] = field(default_factory=dict)

    def as_record(self) -> dict:
        return {
            "kind": "train",
            "step": self.step,
            "L1": self.l1,
            "L2": self.l2,
            "L3": self.l3,
            "L": self.total,
            "lr": self.lr,
            "bank_fill": self.bank_fill,
        }


def _bank_key_fn(queue_mode: str):
    if queue_mode == "single":
        return lambda entry: 0
    return lambda entry: entry.path[1]


def init_state(config: TrainConfig, ontology: dataio.Ontology) -> TrainState:
    config.validate()
    params = model.init_params(
        config.dims(), config.params_seed, batchnorm=config.batchnorm, dtype=config.dtype()
    )
    adam = {
        f"{role}/{name}": AdamState.for_param(t.data)
        for role, pset in params.items()
        for name, t in pset.trainable_items()
    }
    if config.queue_mode == "single":
        category_ids = [0]
    else:
        category_ids = ontology.level2_ids
    key_fn = _bank_key_fn(config.queue_mode)
    banks = {
        side: MultiQueue(side, category_ids, config.queue_capacity, key_fn=key_fn)
        for side in ("mv", "prod")
    }
    return TrainState(config=config, params=params, adam=adam, banks=banks)


# ---------------------------------------------------------------------------
# forward and objective assembly
# ---------------------------------------------------------------------------


@dataclass
class BatchArrays:
    ids: np.ndarray
    paths: list[tuple[int, int]]
    mv_visual: np.ndarray
    mv_text: np.ndarray
    prod_visual: np.ndarray
    prod_text: np.ndarray


def batch_from_dataset(dataset: dataio.Dataset, indices: np.ndarray, dtype) -> BatchArrays:
    return BatchArrays(
        ids=dataset.ids[indices],
        paths=[(int(l1), int(l2)) for l1, l2 in dataset.paths[indices]],
        mv_visual=dataset.mv_visual[indices].astype(dtype),
        mv_text=dataset.mv_text[indices].astype(dtype),
        prod_visual=dataset.prod_visual[indices].astype(dtype),
        prod_text=dataset.prod_text[indices].astype(dtype),
    )


@dataclass
class ForwardBundle:
    refined: dict[str, Tensor]  # mv_visual / mv_text / prod_visual / prod_text
    fused: dict[str, Tensor]  # mv / prod
    query: dict[str, Tensor]
    key: dict[str, Tensor] | None


def forward_batch(
    params: dict[str, model.ParamSet],
    config: TrainConfig,
    batch: BatchArrays,
    training: bool = True,
    compute_keys: bool = True,
) -> ForwardBundle:
    """Project, fuse, and encode one batch.

    The excluded modality under an ablation is replaced by a constant
    zero path; its projector is skipped entirely.
    """
    b = len(batch.ids)
    dt = config.dtype()
    zeros = lambda: Tensor(np.zeros((b, config.refined_dim), dtype=dt))
    refined: dict[str, Tensor] = {}
    for side in ("mv", "prod"):
        vis_raw = Tensor(getattr(batch, f"{side}_visual"))
        txt_raw = Tensor(getattr(batch, f"{side}_text"))
        if config.modality_mode == "text-only":
            refined[f"{side}_visual"] = zeros()
        else:
            refined[f"{side}_visual"] = model.project(
                vis_raw, params[f"projector-{side}-visual"], training=training
            )
        if config.modality_mode == "visual-only":
            refined[f"{side}_text"] = zeros()
        else:
            refined[f"{side}_text"] = model.project(
                txt_raw, params[f"projector-{side}-text"], training=training
            )

    fused = {
        side: model.fuse(refined[f"{side}_visual"], refined[f"{side}_text"], params[f"fusion-{side}"])
        for side in ("mv", "prod")
    }
    query = {side: model.encode(fused[side], params[f"encoder-{side}-query"]) for side in ("mv", "prod")}
    key = None
    if compute_keys:
        key = {side: model.encode(fused[side], params[f"encoder-{side}-key"]) for side in ("mv", "prod")}
    return ForwardBundle(refined=refined, fused=fused, query=query, key=key)


@dataclass
class NegativeSet:
    """A shared bank-drawn (plus warm-up top-up) negative batch."""

    embeddings: np.ndarray  # (K, embed_dim)
    paths: list[tuple[int, int]]
    instance_ids: np.ndarray
    drawn_from_bank: int  # how many came from the bank


def assemble_objective(
    bundle: ForwardBundle,
    key_mv: np.ndarray,
    key_prod: np.ndarray,
    negatives_mv: NegativeSet,
    negatives_prod: NegativeSet,
    importance_vs_prod: np.ndarray,
    importance_vs_mv: np.ndarray,
    config: TrainConfig,
):
    """The full combined training objective for one batch.

    Key embeddings, negatives, and importance weights enter as fixed
    arrays: gradients reach only query-side parameters.
    """
    weights = config.loss_weights()
    tau = config.temperature
    dt = config.dtype()
    if config.modality_mode == "all":
        l1 = losses.cross_modal_loss(
            bundle.refined["mv_visual"],
            bundle.refined["mv_text"],
            bundle.refined["prod_visual"],
            bundle.refined["prod_text"],
            tau,
        )
        modalities = ("visual", "text")
    else:
        l1 = Tensor(np.zeros((), dtype=dt))  # undefined against a zeroed modality
        modalities = ("visual",) if config.modality_mode == "visual-only" else ("text",)
    l2 = losses.intra_modal_loss(
        bundle.refined["mv_visual"],
        bundle.refined["mv_text"],
        bundle.refined["prod_visual"],
        bundle.refined["prod_text"],
        tau,
        modalities=modalities,
    )
    l3 = losses.cross_instance_loss(
        mv_query=bundle.query["mv"],
        prod_query=bundle.query["prod"],
        mv_key=Tensor(np.asarray(key_mv, dtype=dt)),
        prod_key=Tensor(np.asarray(key_prod, dtype=dt)),
        mv_negatives=Tensor(np.asarray(negatives_mv.embeddings, dtype=dt)),
        prod_negatives=Tensor(np.asarray(negatives_prod.embeddings, dtype=dt)),
        importance_vs_prod=importance_vs_prod,
        importance_vs_mv=importance_vs_mv,
        temperature=tau,
    )
    total = losses.combined_loss(l1, l2, l3, weights)
    return total, l1, l2, l3


# ---------------------------------------------------------------------------
# negatives, centroids, importance
# ---------------------------------------------------------------------------


def _draw_negative_set(
    bank: MultiQueue,
    batch: BatchArrays,
    batch_keys: np.ndarray,
    queue_mode: str,
) -> NegativeSet:
    """Bank negatives for one side, topped up with in-batch keys.

    Warm-up rule: while the bank holds fewer entries than the batch
    size, skip drawing entirely and contrast against the batch's own
    key embeddings (self pairs are masked by importance weights).
    """
    b = len(batch.ids)
    drawn: list[QueueEntry] = []
    if bank.total() >= b:
        request = [0] * b if queue_mode == "single" else [p[1] for p in batch.paths]
        drawn = bank.draw(request, anchor_ids=batch.ids)

    embeddings = [e.embedding for e in drawn]
    paths = [e.path for e in drawn]
    ids = [e.instance_id for e in drawn]
    for i in range(b - len(drawn)):  # top-up (always the full batch during warm-up)
        embeddings.append(batch_keys[i])
        paths.append(batch.paths[i])
        ids.append(int(batch.ids[i]))
    return NegativeSet(
        embeddings=np.asarray(embeddings),
        paths=paths,
        instance_ids=np.asarray(ids, dtype=np.int64),
        drawn_from_bank=len(drawn),
    )


def _centroid_pool(state: TrainState, batch: BatchArrays, key_mv: np.ndarray, key_prod: np.ndarray):
    """Key embeddings visible this step: bank residents (snapshotted
    before drawing) plus the current batch's keys from both sides."""
    vectors = [np.asarray(key_mv, dtype=np.float64), np.asarray(key_prod, dtype=np.float64)]
    paths = list(batch.paths) * 2
    for bank in state.banks.values():
        for entry in bank.entries_in_order():
            vectors.append(np.asarray(entry.embedding, dtype=np.float64)[None, :])
            paths.append(entry.path)
    return np.concatenate(vectors, axis=0), paths


def _importance_pair(
    state: TrainState,
    batch: BatchArrays,
    negatives_prod: NegativeSet,
    negatives_mv: NegativeSet,
    table,
):
    cfg = state.config
    if cfg.importance_mode == "unit":
        e_vs_prod = np.ones((len(batch.ids), len(negatives_prod.paths)))
        e_vs_mv = np.ones((len(batch.ids), len(negatives_mv.paths)))
    else:
        zeta = cfg.importance_strength
        e_vs_prod = losses.importance_matrix(batch.paths, negatives_prod.paths, table, zeta)
        e_vs_mv = losses.importance_matrix(batch.paths, negatives_mv.paths, table, zeta)
    # A negative that IS some anchor's paired instance must not count
    # against that anchor (it is the positive there).
    for e, negs in ((e_vs_prod, negatives_prod), (e_vs_mv, negatives_mv)):
        e[batch.ids[:, None] == negs.instance_ids[None, :]] = 0.0
    return e_vs_prod, e_vs_mv


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------


def train_step(state: TrainState, batch: BatchArrays) -> StepLog:
    cfg = state.config
    params = state.params

    bundle = forward_batch(params, cfg, batch, training=True, compute_keys=True)
    key_mv = bundle.key["mv"].data
    key_prod = bundle.key["prod"].data

    pool_vecs, pool_paths = _centroid_pool(state, batch, key_mv, key_prod)
    table = losses.build_centroids(pool_vecs, pool_paths)

    negatives_prod = _draw_negative_set(state.banks["prod"], batch, key_prod, cfg.queue_mode)
    negatives_mv = _draw_negative_set(state.banks["mv"], batch, key_mv, cfg.queue_mode)
    e_vs_prod, e_vs_mv = _importance_pair(state, batch, negatives_prod, negatives_mv, table)

    total, l1, l2, l3 = assemble_objective(
        bundle, key_mv, key_prod, negatives_mv, negatives_prod, e_vs_prod, e_vs_mv, cfg
    )

    trainable = [t for pset in params.values() for _, t in pset.trainable_items()]
    zero_grads(trainable)
    backward(total)

    lr = cosine_lr(state.step, cfg.total_steps, cfg.learning_rate) if cfg.total_steps else 0.0
    for role, pset in params.items():
        for name, tensor in pset.trainable_items():
            if tensor.grad is None:
                continue  # parameter not in this step's graph (ablated path)
            tensor.data = adam_step(
                tensor.data, tensor.grad, state.adam[f"{role}/{name}"], lr, cfg.weight_decay
            )

    model.momentum_update(params["encoder-mv-key"], params["encoder-mv-query"], cfg.momentum)
    model.momentum_update(params["encoder-prod-key"], params["encoder-prod-query"], cfg.momentum)

    for side, keys in (("mv", key_mv), ("prod", key_prod)):
        entries = [
            QueueEntry(
                embedding=np.asarray(keys[i], dtype=np.float32).copy(),
                instance_id=int(batch.ids[i]),
                path=batch.paths[i],
                step=state.step,
            )
            for i in range(len(batch.ids))
        ]
        state.banks[side].enqueue(entries)

    state.step += 1
    l1_f, l2_f, l3_f = float(l1.item()), float(l2.item()), float(l3.item())
    return StepLog(
        step=state.step,
        l1=l1_f,
        l2=l2_f,
        l3=l3_f,
        # logged total recombined at f64 so the log is internally consistent
        total=cfg.cross_modal_weight * l1_f + cfg.intra_modal_weight * l2_f + cfg.cross_instance_weight * l3_f,
        lr=lr,
        bank_fill={side: bank.total() for side, bank in state.banks.items()},
    )


def full_objective_gradient_check(
    batch_size: int = 4,
    refined_dim: int = 8,
    embed_dim: int = 8,
    n_negatives: int = 4,
    temperature: float = 0.07,
    seed: int = 0,
    eps: float = 1e-5,
) -> float:
    """Finite-difference check of the combined objective on a toy setup.

    Key embeddings, negatives, and importance weights are frozen at
    their initial values: they are stop-gradient inputs to the
    objective, exactly as in a training step. Returns the max relative
    error over every trainable parameter, run at float64.
    """
    from .optim import grad_check

    cfg = TrainConfig(
        visual_dim=12,
        text_dim=10,
        hidden_dim=8,
        refined_dim=refined_dim,
        embed_dim=embed_dim,
        temperature=temperature,
        batch_size=batch_size,
        queue_capacity=4,
        total_steps=1,
        precision="f64",
    )
    onto = dataio.Ontology.regular(2, 2)
    rng = np.random.default_rng(seed)
    cats = rng.integers(0, 4, size=batch_size)
    batch = BatchArrays(
        ids=np.arange(batch_size, dtype=np.int64),
        paths=[onto.path_for(int(c)) for c in cats],
        mv_visual=rng.standard_normal((batch_size, cfg.visual_dim)),
        mv_text=rng.standard_normal((batch_size, cfg.text_dim)),
        prod_visual=rng.standard_normal((batch_size, cfg.visual_dim)),
        prod_text=rng.standard_normal((batch_size, cfg.text_dim)),
    )
    params = model.init_params(cfg.dims(), seed, batchnorm=cfg.batchnorm, dtype=np.float64)

    bundle0 = forward_batch(params, cfg, batch, training=True, compute_keys=True)
    key_mv = bundle0.key["mv"].data.copy()
    key_prod = bundle0.key["prod"].data.copy()

    def negatives(id_base: int) -> NegativeSet:
        neg_cats = rng.integers(0, 4, size=n_negatives)
        return NegativeSet(
            embeddings=rng.standard_normal((n_negatives, embed_dim)),
            paths=[onto.path_for(int(c)) for c in neg_cats],
            instance_ids=np.arange(id_base, id_base + n_negatives, dtype=np.int64),
            drawn_from_bank=n_negatives,
        )

    negs_mv = negatives(1000)
    negs_prod = negatives(2000)
    pool = np.concatenate([key_mv, key_prod, negs_mv.embeddings, negs_prod.embeddings])
    pool_paths = list(batch.paths) * 2 + negs_mv.paths + negs_prod.paths
    table = losses.build_centroids(pool, pool_paths)
    e_vs_prod = losses.importance_matrix(batch.paths, negs_prod.paths, table, cfg.importance_strength)
    e_vs_mv = losses.importance_matrix(batch.paths, negs_mv.paths, table, cfg.importance_strength)

    trainable = [t for pset in params.values() for _, t in pset.trainable_items()]

    def loss_fn():
        bundle = forward_batch(params, cfg, batch, training=True, compute_keys=False)
        total, _, _, _ = assemble_objective(
            bundle, key_mv, key_prod, negs_mv, negs_prod, e_vs_prod, e_vs_mv, cfg
        )
        return total

    return grad_check(loss_fn, trainable, eps=eps)


# ---------------------------------------------------------------------------
# checkpoint glue
# ---------------------------------------------------------------------------


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for role, pset in state.params.items():
        for name, tensor in pset.tensors.items():
            arrays[f"param/{role}/{name}"] = tensor.data
        for stat, arr in pset.stats.items():
            arrays[f"bn/{role}/{stat}"] = arr
    for key, st in state.adam.items():
        arrays[f"adam/{key}/exp_avg"] = st.exp_avg
        arrays[f"adam/{key}/exp_avg_sq"] = st.exp_avg_sq
    return arrays


def save_state(path, state: TrainState) -> None:
    meta = {
        "config": asdict(state.config),
        "adam_steps": {key: st.step for key, st in state.adam.items()},
        "bank_categories": {side: bank.category_ids for side, bank in state.banks.items()},
        "bank_counters": {
            side: {
                "enqueued": bank.total_enqueued,
                "drawn": bank.total_drawn,
                "evicted": bank.total_evicted,
            }
            for side, bank in state.banks.items()
        },
    }
    write_checkpoint(
        path,
        step=state.step,
        config_hash=state.config.config_hash(),
        arrays=state_arrays(state),
        bank_entries={side: bank.entries_in_order() for side, bank in state.banks.items()},
        meta=meta,
    )


def params_from_arrays(arrays: dict[str, np.ndarray], dtype) -> dict[str, model.ParamSet]:
    by_role: dict[str, dict[str, np.ndarray]] = {}
    stats: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        kind, role, name = key.split("/", 2)
        if kind == "param":
            by_role.setdefault(role, {})[name] = arr
        elif kind == "bn":
            stats.setdefault(role, {})[name] = arr.astype(dtype)
    out = {}
    for role, tensors in by_role.items():
        trainable = not role.endswith("-key")
        out[role] = model.ParamSet(
            role=role,
            tensors={
                name: Tensor(arr.astype(dtype), requires_grad=trainable) for name, arr in tensors.items()
            },
            trainable=trainable,
            stats=stats.get(role, {}),
        )
    return out


def load_state(path) -> TrainState:
    bundle = read_checkpoint(path)
    config = TrainConfig.from_dict(bundle.meta["config"])
    dtype = config.dtype()
    params = params_from_arrays(bundle.arrays, dtype)

    adam: dict[str, AdamState] = {}
    for key, count in bundle.meta["adam_steps"].items():
        st = AdamState(
            exp_avg=bundle.arrays[f"adam/{key}/exp_avg"].astype(dtype),
            exp_avg_sq=bundle.arrays[f"adam/{key}/exp_avg_sq"].astype(dtype),
            step=int(count),
        )
        adam[key] = st

    key_fn = _bank_key_fn(config.queue_mode)
    banks = {}
    for side in ("mv", "prod"):
        cats = bundle.meta["bank_categories"][side]
        bank = MultiQueue(side, cats, config.queue_capacity, key_fn=key_fn)
        bank.enqueue(bundle.bank_entries[side])
        counters = bundle.meta["bank_counters"][side]
        bank.total_enqueued = counters["enqueued"]
        bank.total_drawn = counters["drawn"]
        bank.total_evicted = counters["evicted"]
        banks[side] = bank
    return TrainState(config=config, params=params, adam=adam, banks=banks, step=bundle.step)


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------


def _eval_records(report: evaluate.RetrievalReport, step: int, split: str):
    for direction, metrics in (("mv2prod", report.mv2prod), ("prod2mv", report.prod2mv)):
        rec = {"kind": "eval", "split": split, "step": step, "direction": direction}
        rec.update(metrics.as_record())
        rec["degenerate"] = report.degenerate
        yield rec


def run_experiment(
    config: TrainConfig,
    data_dir,
    out_dir,
    log_name: str = "metrics.jsonl",
    early_stop=None,
) -> dict:
    """Train per config, track the best validation Rsum, report test metrics.

    Writes a line-delimited metrics log, a resumable last-state
    checkpoint, and a best-validation checkpoint into `out_dir`.
    `early_stop(report, step) -> bool`, checked after each validation
    pass, ends training early (the log records how far it got).
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataio.load(data_dir)
    if dataset.visual_dim != config.visual_dim or dataset.text_dim != config.text_dim:
        raise ConfigError(
            f"config dims ({config.visual_dim}/{config.text_dim}) do not match "
            f"dataset dims ({dataset.visual_dim}/{dataset.text_dim})"
        )
    split = dataio.split_dataset(len(dataset), config.split_seed)
    state = init_state(config, dataset.ontology)

    best = {"rsum": -1.0, "step": 0, "arrays": None}
    records: list[dict] = [
        {"kind": "config", "config": asdict(config), "config_hash": config.config_hash().hex()}
    ]

    def evaluate_split(indices, step, name):
        mv_e, prod_e = evaluate.embed_instances(dataset, indices, state.params, config.modality_mode)
        report = evaluate.evaluate_embeddings(mv_e, prod_e)
        records.extend(_eval_records(report, step, name))
        return report

    def maybe_track_best(report, step):
        rsum = report.mv2prod.rsum + report.prod2mv.rsum
        if rsum > best["rsum"]:
            best.update(rsum=rsum, step=step, arrays={k: v.copy() for k, v in state_arrays(state).items()})

    maybe_track_best(evaluate_split(split.val, 0, "val"), 0)
    for step in range(config.total_steps):
        idx = dataio.batch_indices(split, step, config.batch_size, config.shuffle_seed)
        batch = batch_from_dataset(dataset, idx, config.dtype())
        log = train_step(state, batch)
        records.append(log.as_record())
        if state.step % config.eval_interval == 0 or state.step == config.total_steps:
            report = evaluate_split(split.val, state.step, "val")
            maybe_track_best(report, state.step)
            if early_stop is not None and early_stop(report, state.step):
                break

    save_state(out / "last.ckpt", state)
    best_params = state.params
    if best["arrays"] is not None:
        write_checkpoint(
            out / "best.ckpt",
            step=best["step"],
            config_hash=config.config_hash(),
            arrays=best["arrays"],
            meta={"config": asdict(config), "selected_by": "val_rsum", "val_rsum": best["rsum"]},
        )
        best_params = params_from_arrays(best["arrays"], config.dtype())

    mv_e, prod_e = evaluate.embed_instances(dataset, split.test, best_params, config.modality_mode)
    test_report = evaluate.evaluate_embeddings(mv_e, prod_e)
    records.extend(_eval_records(test_report, best["step"], "test"))

    log_path = out / log_name
    with open(log_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return {
        "best_step": best["step"],
        "best_val_rsum": best["rsum"],
        "test": {
            "mv2prod": test_report.mv2prod.as_record(),
            "prod2mv": test_report.prod2mv.as_record(),
            "degenerate": test_report.degenerate,
        },
        "log_path": str(log_path),
    }
