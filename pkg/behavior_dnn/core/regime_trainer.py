"""
The five training regimes and the leave-one-couple-out experiment matrix.

Every fold is an independent, single-threaded task seeded from (run seed, code, gender, fold),
so results do not depend on how many worker processes run them.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from behavior_dnn.core.corpus_manager import (CorpusManager, Fold, SessionRecord, TrainingPairs, label_frames,
                                              manifest_codes)
from behavior_dnn.core.errors import ConfigurationError, InternalError
from behavior_dnn.core.feature_extractor import FeatureLayout, FrameTable
from behavior_dnn.core.network import (Activation, DropoutSpec, LayerShape, NetworkParams, OptimizerState,
                                       adagrad_step, apply_input_dropout, backward, forward, init_params,
                                       mse_loss, predict)
from behavior_dnn.core.network_composer import (CompositeSpec, SubnetAssignment, build_subnet, compose_sd,
                                                densify, late_fusion_scores, partition_features, unfreeze)
from behavior_dnn.core.session_evaluator import (accuracy, classify, fit_threshold, session_scores)

logger = logging.getLogger(__name__)


class Regime(Enum):
    DENSE = "dense"
    SUBNET = "subnet"
    FUSION = "fusion"
    SD = "sd"
    SJ = "sj"
    SD_INIT = "sd_init"


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    regime: Regime = Regime.DENSE
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    epsilon: float = 1e-8
    dropout_rate: float = 0.5
    dense_hidden: Tuple[int, ...] = (15,)
    subnet_hidden: int = 15
    fusion_hidden: Tuple[int, ...] = (30, 10)
    split_mode: str = "knowledge"
    num_groups: int = 5
    dev_fraction: float = 0.0
    patience: int = 5
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigurationError(f"dev_fraction must lie in [0, 1), got {self.dev_fraction}")
        if self.subnet_hidden < 1 or any(w < 1 for w in self.dense_hidden + self.fusion_hidden):
            raise ConfigurationError("Hidden widths must be >= 1")
        DropoutSpec(self.dropout_rate)

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "TrainConfig":
        values = dict(mapping or {})
        values.update(overrides)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown training settings {sorted(unknown)}")
        try:
            if "regime" in values:
                values["regime"] = Regime(values["regime"])
            for key in ("dense_hidden", "fusion_hidden"):
                if key in values:
                    values[key] = tuple(int(w) for w in values[key])
            return cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Bad training settings: {e}") from e

    def to_dict(self) -> dict:
        document = asdict(self)
        document["regime"] = self.regime.value
        document["dense_hidden"] = list(self.dense_hidden)
        document["fusion_hidden"] = list(self.fusion_hidden)
        return document


@dataclass
class TrainingHistory:
    """losses[0] is the training loss before the first update, losses[k] after epoch k."""
    losses: List[float] = field(default_factory=list)
    dev_losses: List[float] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return max(len(self.losses) - 1, 0)


def _dev_split(pairs: TrainingPairs, fraction: float, rng: np.random.Generator):
    couples = sorted(set(pairs.couple_ids.tolist()))
    if fraction <= 0 or len(couples) < 2:
        if fraction > 0:
            logger.warning("⚠️ Early stopping needs at least two training couples; training without a dev set")
        return pairs, None
    count = min(len(couples) - 1, max(1, int(round(fraction * len(couples)))))
    dev_couples = set(rng.choice(couples, size=count, replace=False).tolist())
    is_dev = np.isin(pairs.couple_ids, list(dev_couples))
    return pairs.subset(~is_dev), pairs.subset(is_dev)


def fit_network(params: NetworkParams, pairs: TrainingPairs, config: TrainConfig, seed: int,
                dropout: Optional[DropoutSpec] = None) -> Tuple[NetworkParams, TrainingHistory]:
    """
    Mini-batch AdaGrad on the MSE objective over a private copy of ``params``.

    Batch order is reshuffled every epoch from ``seed`` unless ``config.shuffle`` is off.
    With ``config.dev_fraction`` > 0 a couple-level dev split drives early stopping and the
    best-dev parameters are returned.
    """
    if len(pairs) == 0:
        raise ConfigurationError("Cannot train on zero frames")
    params = params.copy()
    rng = np.random.default_rng(seed)
    train, dev = _dev_split(pairs, config.dev_fraction, rng)
    inputs = params.select_inputs(train.inputs)
    targets = train.targets
    dev_inputs = None if dev is None else params.select_inputs(dev.inputs)
    state = OptimizerState.for_params(params, config.learning_rate, config.epsilon)

    def loss_on(x, y) -> float:
        return mse_loss(forward(params, x)[1], y)

    history = TrainingHistory(losses=[loss_on(inputs, targets)])
    best_dev, best_params, stale = np.inf, None, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(targets)) if config.shuffle else np.arange(len(targets))
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            batch = inputs[rows]
            if dropout is not None:
                batch = apply_input_dropout(batch, dropout, rng)
            activations, _ = forward(params, batch)
            adagrad_step(params, backward(params, activations, targets[rows]), state)

        loss = loss_on(inputs, targets)
        history.losses.append(loss)
        logger.debug(f"epoch {epoch}: training loss {loss:.6f}")
        if not np.isfinite(loss):
            logger.warning(f"⚠️ Training loss became non-finite at epoch {epoch}; stopping")
            break
        if dev is not None:
            dev_loss = loss_on(dev_inputs, dev.targets)
            history.dev_losses.append(dev_loss)
            if dev_loss < best_dev:
                best_dev, best_params, stale = dev_loss, params.copy(), 0
            else:
                stale += 1
                if stale >= config.patience:
                    history.stopped_early = True
                    break
    if best_params is not None:
        params = best_params
    params.info["trained"] = True
    return params, history


def train_dense(pairs: TrainingPairs, config: TrainConfig) -> Tuple[NetworkParams, TrainingHistory]:
    """Fully connected D -> dense_hidden -> 1 with input dropout."""
    if len(pairs) == 0:
        raise ConfigurationError("Cannot train the dense regime on zero frames")
    widths = [pairs.inputs.shape[1]] + list(config.dense_hidden)
    shapes = [LayerShape(widths[k], widths[k + 1], Activation.TANH) for k in range(len(config.dense_hidden))]
    shapes.append(LayerShape(widths[-1], 1, Activation.SIGMOID))
    params = init_params(shapes, derive_seed(config.seed, 0, 0))
    params.info = {"regime": Regime.DENSE.value, "trained": False}
    dropout = DropoutSpec(config.dropout_rate) if config.dropout_rate > 0 else None
    return fit_network(params, pairs, config, derive_seed(config.seed, 0, 1), dropout)


def train_subnets(pairs: TrainingPairs, assignment: SubnetAssignment,
                  config: TrainConfig) -> List[Tuple[NetworkParams, TrainingHistory]]:
    """One small net per feature group, each reading only its own slice."""
    trained = []
    for j, group in enumerate(assignment.groups):
        spread = pairs.inputs[:, list(group.indices)].std(axis=0) if len(pairs) else np.zeros(1)
        if np.any(spread < 1e-12):
            logger.warning(f"⚠️ Subnet {group.name!r}: {int(np.sum(spread < 1e-12))} zero-variance input "
                           f"columns; training anyway")
        subnet = build_subnet(group.indices, config.subnet_hidden, derive_seed(config.seed, 1, j, 0), group.name)
        subnet, history = fit_network(subnet, pairs, config, derive_seed(config.seed, 1, j, 1))
        trained.append((subnet, history))
    return trained


def train_sd(subnets: Sequence[NetworkParams], pairs: TrainingPairs,
             config: TrainConfig) -> Tuple[CompositeSpec, TrainingHistory]:
    """Fusion layers trained on top of the frozen subnet hidden layers."""
    composite = compose_sd(subnets, config.fusion_hidden, derive_seed(config.seed, 2, 0))
    network, history = fit_network(composite.network, pairs, config, derive_seed(config.seed, 2, 1))
    network.info["regime"] = Regime.SD.value
    return replace(composite, network=network), history


def train_sj(sd_model: CompositeSpec, pairs: TrainingPairs,
             config: TrainConfig) -> Tuple[CompositeSpec, TrainingHistory]:
    """Unfreeze the SD model and train every layer from the disjoint optimum."""
    joint = unfreeze(sd_model)
    network, history = fit_network(joint.network, pairs, config, derive_seed(config.seed, 3, 1))
    return replace(joint, network=network), history


def train_dense_sdinit(sd_model: CompositeSpec, pairs: TrainingPairs,
                       config: TrainConfig) -> Tuple[NetworkParams, TrainingHistory]:
    """Fully connected net initialized from the SD weights, zero where no connection existed."""
    return fit_network(densify(sd_model), pairs, config, derive_seed(config.seed, 4, 1))


def _regime_labels(regimes: Sequence[Regime], assignment: SubnetAssignment) -> List[str]:
    labels = []
    for regime in regimes:
        if regime is Regime.SUBNET:
            labels.extend(f"subnet:{name}" for name in assignment.names)
        else:
            labels.append(regime.value)
    return labels


@dataclass
class TrainedRegimes:
    models: Dict[str, NetworkParams] = field(default_factory=dict)
    subnets: List[NetworkParams] = field(default_factory=list)
    histories: Dict[str, TrainingHistory] = field(default_factory=dict)
    epoch_passes: Dict[str, int] = field(default_factory=dict)
    labels: List[str] = field(default_factory=list)

    def scorer(self, label: str) -> Callable[[np.ndarray], np.ndarray]:
        if label == Regime.FUSION.value:
            return lambda frames: late_fusion_scores(self.subnets, frames)
        model = self.models[label]
        return lambda frames: predict(model, frames)


class RegimeTrainer:
    """Trains the requested regimes on one training set, sharing subnets and the SD model between them."""

    def __init__(self, config: TrainConfig, assignment: SubnetAssignment):
        self.config = config
        self.assignment = assignment

    def train(self, regimes: Sequence[Regime], pairs: TrainingPairs) -> TrainedRegimes:
        regimes = [Regime(r) for r in regimes]
        result = TrainedRegimes(labels=_regime_labels(regimes, self.assignment))

        if Regime.DENSE in regimes:
            model, history = train_dense(pairs, self.config)
            result.models["dense"], result.histories["dense"] = model, history
            result.epoch_passes["dense"] = history.epochs_run

        needs_subnets = {Regime.SUBNET, Regime.FUSION, Regime.SD, Regime.SJ, Regime.SD_INIT} & set(regimes)
        if not needs_subnets:
            return result
        subnet_passes = 0
        for subnet, history in train_subnets(pairs, self.assignment, self.config):
            label = f"subnet:{subnet.info['group']}"
            result.subnets.append(subnet)
            result.models[label], result.histories[label] = subnet, history
            result.epoch_passes[label] = history.epochs_run
            subnet_passes += history.epochs_run
        result.epoch_passes["fusion"] = subnet_passes

        if not {Regime.SD, Regime.SJ, Regime.SD_INIT} & set(regimes):
            return result
        sd_model, history = train_sd(result.subnets, pairs, self.config)
        result.models["sd"], result.histories["sd"] = sd_model.network, history
        result.epoch_passes["sd"] = subnet_passes + history.epochs_run

        if Regime.SJ in regimes:
            model, history = train_sj(sd_model, pairs, self.config)
            result.models["sj"], result.histories["sj"] = model.network, history
            result.epoch_passes["sj"] = result.epoch_passes["sd"] + history.epochs_run
        if Regime.SD_INIT in regimes:
            model, history = train_dense_sdinit(sd_model, pairs, self.config)
            result.models["sd_init"], result.histories["sd_init"] = model, history
            result.epoch_passes["sd_init"] = result.epoch_passes["sd"] + history.epochs_run
        return result


@dataclass
class Decision:
    session_id: str
    score: float
    prediction: int
    label: int


@dataclass
class FoldOutcome:
    held_out_couple_id: str
    threshold: float
    training_error: float
    decisions: List[Decision]
    loss_curve: List[float]
    epoch_passes: int


@dataclass
class RegimeResult:
    code: str
    gender: str
    regime: str
    accuracy: float
    sessions: int
    epoch_passes: int
    folds: List[FoldOutcome]


@dataclass
class FoldTask:
    code: str
    gender: str
    fold_index: int
    fold: Fold
    labels: Dict[str, int]
    couples: Dict[str, str]
    frames: FrameTable
    regimes: Tuple[Regime, ...]
    assignment: SubnetAssignment
    config: TrainConfig
    clamp_eps: float


@dataclass
class FoldResult:
    code: str
    gender: str
    fold_index: int
    outcomes: Dict[str, FoldOutcome] = field(default_factory=dict)
    labels: List[str] = field(default_factory=list)
    skipped: Optional[str] = None


def run_fold(task: FoldTask) -> FoldResult:
    """Train on the fold's training sessions, fit thresholds there, decide the held-out couple's sessions."""
    fold = task.fold
    result = FoldResult(task.code, task.gender, task.fold_index)
    train_frames = task.frames.for_sessions(fold.train_session_ids)
    test_frames = task.frames.for_sessions(fold.test_session_ids)
    pairs = label_frames(train_frames, {s: task.labels[s] for s in fold.train_session_ids}, task.couples)

    leaked = set(pairs.session_ids.tolist()) & set(fold.test_session_ids)
    if leaked:
        raise InternalError(f"Test sessions {sorted(leaked)} reached the training pairs of fold "
                            f"{fold.held_out_couple_id}")
    train_classes = {task.labels[s] for s in set(pairs.session_ids.tolist())}
    if len(train_classes) < 2:
        result.skipped = f"fold {fold.held_out_couple_id}: training frames hold only class(es) {sorted(train_classes)}"
        logger.warning(f"⚠️ {task.code}/{task.gender}: skipping {result.skipped}")
        return result
    if len(test_frames) == 0:
        result.skipped = f"fold {fold.held_out_couple_id}: no test frames"
        logger.warning(f"⚠️ {task.code}/{task.gender}: skipping {result.skipped}")
        return result

    trained = RegimeTrainer(task.config, task.assignment).train(task.regimes, pairs)
    result.labels = trained.labels
    for label in trained.labels:
        score = trained.scorer(label)
        train_scores = session_scores(score(train_frames.values), train_frames.session_ids,
                                      train_frames.window_starts, task.clamp_eps)
        threshold = fit_threshold([(s.aggregate, task.labels[sid]) for sid, s in sorted(train_scores.items())])
        test_scores = session_scores(score(test_frames.values), test_frames.session_ids,
                                     test_frames.window_starts, task.clamp_eps)
        decisions = [Decision(sid, s.aggregate, classify(s.aggregate, threshold), task.labels[sid])
                     for sid, s in sorted(test_scores.items())]
        history = trained.histories.get(label)
        result.outcomes[label] = FoldOutcome(
            held_out_couple_id=fold.held_out_couple_id,
            threshold=threshold.threshold,
            training_error=threshold.training_error,
            decisions=decisions,
            loss_curve=[] if history is None else list(history.losses),
            epoch_passes=trained.epoch_passes.get(label, 0),
        )
    return result


@dataclass
class CVReport:
    results: List[RegimeResult]
    skipped_folds: List[str]
    summary_log: List[str]
    assignment: SubnetAssignment
    config: TrainConfig


def run_cv(frames: FrameTable, records: Sequence[SessionRecord], codes: Sequence[str],
           regimes: Sequence, config: dict, layout: Optional[FeatureLayout] = None,
           jobs: int = 1) -> CVReport:
    """
    Leave-one-couple-out evaluation for every code x population x regime.

    Raises:
        ConfigurationError: for codes missing from the manifest or a bad configuration
    """
    available = manifest_codes(records)
    unknown = [c for c in codes if c not in available]
    if unknown:
        raise ConfigurationError(f"Unknown behavior code(s) {unknown}; available codes: {available}")
    regimes = tuple(Regime(r) for r in regimes)
    train_config = TrainConfig.from_mapping(config.get("training", {}))
    clamp_eps = float(config.get("evaluation", {}).get("clamp_eps", 1e-6))
    layout = layout or FeatureLayout.default(frames.dimension // 6)
    if layout.frame_dim != frames.dimension:
        raise ConfigurationError(f"Layout describes {layout.frame_dim} frame columns, frames have {frames.dimension}")
    assignment = partition_features(train_config.split_mode, layout, train_config.num_groups, train_config.seed,
                                    config.get("layout", {}).get("knowledge_groups"))

    summary_log: List[str] = []
    manager = CorpusManager(records, config, summary_log)
    tasks, populations = [], []
    for code_index, code in enumerate(codes):
        for gender_index, (gender, pool) in enumerate(manager.populations()):
            selection, plan = manager.plan(pool, code)
            labels = selection.labels()
            couples = {s.session_id: s.couple_id for s in selection.sessions}
            populations.append((code, gender))
            pool_frames = frames.for_sessions(labels)
            for fold_index, fold in enumerate(plan.folds):
                fold_config = replace(train_config, seed=derive_seed(train_config.seed, code_index,
                                                                     gender_index, fold_index))
                tasks.append(FoldTask(code, gender, fold_index, fold, labels, couples, pool_frames,
                                      regimes, assignment, fold_config, clamp_eps))

    logger.info(f"🚀 Running {len(tasks)} folds over {len(populations)} code/population pairs "
                f"with {max(jobs, 1)} worker(s)...")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            fold_results = list(executor.map(run_fold, tasks))
    else:
        fold_results = [run_fold(task) for task in tasks]

    results, skipped = [], []
    for code, gender in populations:
        folds = sorted((r for r in fold_results if r.code == code and r.gender == gender),
                       key=lambda r: r.fold_index)
        skipped.extend(f"{code}/{gender}: {r.skipped}" for r in folds if r.skipped)
        labels = next((r.labels for r in folds if not r.skipped), [])
        for label in labels:
            outcomes = [r.outcomes[label] for r in folds if label in r.outcomes]
            decisions = [d for o in outcomes for d in o.decisions]
            acc = accuracy([d.prediction for d in decisions], [d.label for d in decisions]) if decisions else float("nan")
            results.append(RegimeResult(code, gender, label, acc, len(decisions),
                                        sum(o.epoch_passes for o in outcomes), outcomes))
    for line in skipped:
        summary_log.append(f"Skipped {line}")
    logger.info(f"✅ Cross-validation finished: {len(results)} result cells, {len(skipped)} skipped folds")
    return CVReport(results, skipped, summary_log, assignment, train_config)


def train_for_code(frames: FrameTable, records: Sequence[SessionRecord], code: str, config: dict,
                   layout: Optional[FeatureLayout] = None,
                   base_model: Optional[NetworkParams] = None, gender: Optional[str] = None):
    """
    Train ``training.regime`` on every extreme session of ``code`` (the ``train`` command).

    Returns (models, histories): one model for most regimes, one per group for ``subnet``.

    Raises:
        ConfigurationError: for sj / sd_init without an SD base model, or an unknown code
    """
    train_config = TrainConfig.from_mapping(config.get("training", {}))
    regime = train_config.regime
    if regime in (Regime.SJ, Regime.SD_INIT):
        if base_model is None:
            raise ConfigurationError(f"Regime {regime.value} needs a trained SD model (--base-model)")
        if base_model.info.get("regime") != Regime.SD.value or not base_model.info.get("trained"):
            raise ConfigurationError(f"Base model must be a trained sd model, got {base_model.info.get('regime')!r}")
    available = manifest_codes(records)
    if code not in available:
        raise ConfigurationError(f"Unknown behavior code {code!r}; available codes: {available}")
    if regime is Regime.FUSION:
        raise ConfigurationError("The fusion regime has no model of its own; train the subnet regime instead")

    pool = [r for r in records if gender is None or r.gender.value == gender]
    manager = CorpusManager(pool, config)
    selection, _ = manager.plan(pool, code)
    labels = selection.labels()
    couples = {s.session_id: s.couple_id for s in selection.sessions}
    pairs = label_frames(frames.for_sessions(labels), labels, couples)

    if regime is Regime.DENSE:
        model, history = train_dense(pairs, train_config)
        models, histories = [model], [history]
    elif regime in (Regime.SJ, Regime.SD_INIT):
        composite = CompositeSpec.from_params(base_model)
        if regime is Regime.SJ:
            trained, history = train_sj(composite, pairs, train_config)
            models, histories = [trained.network], [history]
        else:
            model, history = train_dense_sdinit(composite, pairs, train_config)
            models, histories = [model], [history]
    else:
        layout = layout or FeatureLayout.default(frames.dimension // 6)
        assignment = partition_features(train_config.split_mode, layout, train_config.num_groups,
                                        train_config.seed, config.get("layout", {}).get("knowledge_groups"))
        trained_subnets = train_subnets(pairs, assignment, train_config)
        if regime is Regime.SUBNET:
            models = [subnet for subnet, _ in trained_subnets]
            histories = [history for _, history in trained_subnets]
        else:
            composite, history = train_sd([subnet for subnet, _ in trained_subnets], pairs, train_config)
            models, histories = [composite.network], [history]
    for model in models:
        model.info["code"] = code
    return models, histories
