"""End-to-end lifecycle: alignment, perturbation, dual training, split
central training with dual cross validation, and the final metrics.

The driver plays all three roles of the simulation but every tensor
that crosses a trust boundary travels through the hub, so transcripts
reflect exactly what each actor could have observed.  Per run:

1. both parties perturb their feature stores once (feature-level DP)
   and fit KDEs on their perturbed training partitions;
2. the co-occurring ids are found by blinded intersection and folded;
3. for up to ``max_iters`` iterations: the dual generators train over
   the co-occurrence block (they persist and keep improving), B infers
   the missing A-side features of its own-only rows to build the
   supplement block, and two fresh central models are trained, one on
   the fold-train rows alone (joint baseline) and one with the
   supplement added; iteration stops early when the supplemented model
   beats the baseline on the held-out fold by more than the threshold;
4. the report carries per-iteration validation scores, test accuracies
   for both central models, the unlabeled-routing accuracy over A-only
   rows, and the inference error of the generators against raw data.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from random import Random

import numpy as np

from .central import SplitCentralModel, central_forward_backward, \
    CentralBatch, init_split_central, party_backward, party_forward, sgd_step
from .data import GammaSplit, PartyDataset, FeatureSplit, SplitSpec, \
    blinded_intersection, kfold_split, partition_features, split_by_gamma
from .density import fit_kde
from .dual import DualModelPair, DualPartyState, dual_infer, run_dual_round
from .nn import apply_activation, dual_hidden_width, init_mlp, mlp_forward
from .paillier import keygen
from .privacy import DpConfig, OneShotPerturber
from .transport import Hub, MessageKind, ProtocolError, pack_json, \
    pack_matrix, pack_tokens, unpack_json, unpack_matrix, unpack_tokens
from .data import _hmac, _id_bytes  # alignment token primitives

SENSITIVITY_MODES = ("per_layer", "per_neuron")


@dataclass(frozen=True)
class MpdlConfig:
    """Run parameters; defaults follow the simple-dataset preset."""

    gamma: float
    epsilon: float = 0.5
    sensitivity_mode: str = "per_neuron"
    lam: float = 0.01
    lr: float = 0.1
    folds: int = 5
    threshold: float = 0.15
    max_iters: int = 2
    dual_epochs: int = 10
    central_epochs: int = 20
    batch_size: int = 32
    test_fraction: float = 0.1
    key_bits: int = 512
    cipher_scale: int = 2 ** 40
    use_encryption: bool = True
    exact_duality_grad: bool = False
    residual_clip: float = 100.0
    grad_clip: float = 1.0
    hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.folds < self.max_iters:
            raise ValueError("folds must be >= max_iters: iterations draw "
                             "validation folds without replacement")
        if not self.residual_clip > 0.0 or not self.grad_clip > 0.0:
            raise ValueError("residual_clip and grad_clip must be positive")
        if self.max_iters < 1 or self.dual_epochs < 0 or \
                self.central_epochs < 1:
            raise ValueError("iteration counts must be positive")
        if self.batch_size < 1 or not 0.0 < self.lr:
            raise ValueError("bad optimizer settings")
        if self.sensitivity_mode not in SENSITIVITY_MODES:
            raise ValueError(f"sensitivity_mode must be one of "
                             f"{SENSITIVITY_MODES}")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be positive (inf disables noise)")


@dataclass(frozen=True)
class PreparedExperiment:
    """The simulated multi-party world built from one source dataset."""

    party_a: PartyDataset
    party_b: PartyDataset
    split: GammaSplit
    feature_split: FeatureSplit
    withheld_labels: dict
    n_classes: int


def prepare_experiment(ds: PartyDataset, gamma: float, seed: int = 0,
                       test_fraction: float = 0.1,
                       assignment=None) -> PreparedExperiment:
    """Partition one labeled dataset into the three-actor world.

    B receives the labels for its own rows (co-occurrence, B-only and
    test); labels of A-only rows never enter the protocol and are kept
    aside purely for scoring the unlabeled-routing accuracy.
    """
    if ds.labels is None:
        raise ValueError("the source dataset must carry labels")
    fsplit = partition_features(ds, assignment=assignment, seed=seed)
    gsplit = split_by_gamma(ds.ids, SplitSpec(gamma, test_fraction, seed))
    rows_a = list(gsplit.co_occurrence) + list(gsplit.a_only) + \
        list(gsplit.test)
    rows_b = list(gsplit.co_occurrence) + list(gsplit.b_only) + \
        list(gsplit.test)
    party_a = PartyDataset(tuple(rows_a), fsplit.party_a.rows(rows_a))
    party_b = PartyDataset(tuple(rows_b), fsplit.party_b.rows(rows_b),
                           fsplit.party_b.labels_for(rows_b))
    withheld = {i: int(lab) for i, lab in
                zip(gsplit.a_only, ds.labels_for(gsplit.a_only))}
    return PreparedExperiment(party_a, party_b, gsplit, fsplit, withheld,
                              int(ds.labels.max()) + 1)


@dataclass
class IterationRecord:
    fold_index: int
    v_joint: float
    v_dual: float


@dataclass
class RunReport:
    gamma: float
    epsilon: float
    sensitivity_mode: str
    seed: int
    converged: bool
    iterations: list[IterationRecord]
    accuracy_joint: float
    accuracy_dual: float
    accuracy_unlabeled: float
    inference_mae: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["config"] = {k: (repr(v) if isinstance(v, float) and
                             math.isinf(v) else v)
                        for k, v in out["config"].items()}
        return out


@dataclass
class MpdlResult:
    report: RunReport
    model_joint: SplitCentralModel
    model_dual: SplitCentralModel
    pair: DualModelPair
    state_a: DualPartyState
    state_b: DualPartyState
    received_a: dict
    hub: Hub


def _rng_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(2, dtype=np.uint64)[0])


def _labels_to_c(hub: Hub, party_b: PartyDataset) -> dict:
    """B hands C the labels of its rows once, keyed by opaque repr."""
    payload = {repr(i): int(l) for i, l in zip(party_b.ids, party_b.labels)}
    hub.send("B", "C", MessageKind.Control, pack_json({"labels": payload}))
    msg = hub.recv("C", "B", MessageKind.Control)
    return unpack_json(msg.payload)["labels"]


class _FeatureSource:
    """A's feature lookup across its own store and received inferred rows."""

    def __init__(self, store: PartyDataset, received: dict):
        self.store = store
        self.received = received
        self._index = store.index

    def rows(self, ids) -> np.ndarray:
        out = []
        for i in ids:
            if i in self._index:
                out.append(self.store.features[self._index[i]])
            else:
                key = repr(i)
                if key not in self.received:
                    raise KeyError(f"party A has no features for id {i!r}")
                out.append(self.received[key])
        return np.vstack(out)


def _central_pass(hub: Hub, model: SplitCentralModel, ids, src_a, store_b,
                  labels_c: dict, lr: float, train: bool,
                  tag: int | None = None):
    """One batch through the split protocol; returns model and C-side probs."""
    x_a = src_a.rows(ids)
    x_b = store_b.rows(ids)
    hub.send("A", "C", MessageKind.PartialSum,
             pack_matrix(party_forward(model.local_a, x_a)), batch_tag=tag)
    hub.send("B", "C", MessageKind.PartialSum,
             pack_matrix(party_forward(model.local_b, x_b)), batch_tag=tag)
    z_a = unpack_matrix(hub.recv("C", "A", MessageKind.PartialSum).payload)
    z_b = unpack_matrix(hub.recv("C", "B", MessageKind.PartialSum).payload)
    if not train:
        z = z_a + z_b
        hidden = apply_activation(model.split_activation, z)
        probs, _ = mlp_forward(model.central, hidden)
        return model, probs
    labels = np.array([labels_c[repr(i)] for i in ids], dtype=np.int64)
    step = central_forward_backward(model, CentralBatch(z_a, z_b, labels))
    new_central = sgd_step(model.central, step.central_grads, lr)
    hub.send("C", "A", MessageKind.DeltaError, pack_matrix(step.delta_a),
             batch_tag=tag)
    hub.send("C", "B", MessageKind.DeltaError, pack_matrix(step.delta_b),
             batch_tag=tag)
    delta_a = unpack_matrix(hub.recv("A", "C",
                                     MessageKind.DeltaError).payload)
    delta_b = unpack_matrix(hub.recv("B", "C",
                                     MessageKind.DeltaError).payload)
    model = SplitCentralModel(
        party_backward(model.local_a, delta_a, x_a, lr),
        party_backward(model.local_b, delta_b, x_b, lr),
        new_central, model.split_activation)
    return model, None


def _central_train(hub, model, ids, src_a, store_b, labels_c, config,
                   rng) -> SplitCentralModel:
    ids = list(ids)
    for _ in range(config.central_epochs):
        order = rng.permutation(len(ids))
        for start in range(0, len(ids), config.batch_size):
            batch = [ids[i] for i in order[start:start + config.batch_size]]
            model, _ = _central_pass(hub, model, batch, src_a, store_b,
                                     labels_c, config.lr, train=True)
    return model


def _central_predict(hub, model, ids, src_a, store_b) -> np.ndarray:
    _, probs = _central_pass(hub, model, list(ids), src_a, store_b, {},
                             0.0, train=False)
    return probs.argmax(axis=1)


def _central_accuracy(hub, model, ids, src_a, store_b, labels_c) -> float:
    preds = _central_predict(hub, model, ids, src_a, store_b)
    truth = np.array([labels_c[repr(i)] for i in ids], dtype=np.int64)
    return float((preds == truth).mean())


def mpdl_train(data: PreparedExperiment, config: MpdlConfig,
               hub: Hub | None = None) -> MpdlResult:
    """Run the full multi-party lifecycle and return models plus report."""
    ss = np.random.SeedSequence(config.seed)
    (ss_keys, ss_noise_a, ss_noise_b, ss_align, ss_dual_init, ss_folds,
     ss_dual_order, ss_central, ss_protocol) = ss.spawn(9)
    if hub is None:
        hub = Hub()

    party_a, party_b = data.party_a, data.party_b
    split = data.split
    train_a = list(split.co_occurrence) + list(split.a_only)
    train_b = list(split.co_occurrence) + list(split.b_only)
    d_a = party_a.features.shape[1]
    d_b = party_b.features.shape[1]
    hidden = config.hidden or dual_hidden_width(d_a + d_b, data.n_classes)

    # one-shot feature perturbation, then KDEs over the perturbed
    # training partitions
    def perturbed_store(name, party, ss_noise, n_train):
        cfg = DpConfig(config.epsilon, hidden, n_train,
                       config.sensitivity_mode)
        perturber = OneShotPerturber(cfg, np.random.default_rng(ss_noise))
        out = perturber.perturb(name, party.features, ids=party.ids)
        return PartyDataset(party.ids, out.features, party.labels)

    store_a = perturbed_store("A", party_a, ss_noise_a, len(train_a))
    store_b = perturbed_store("B", party_b, ss_noise_b, len(train_b))

    kde_a = fit_kde(store_a.rows(train_a))
    kde_b = fit_kde(store_b.rows(train_b))

    # keys and alignment
    key_rng = Random(_rng_int(ss_keys))
    keys_a = keygen(config.key_bits, key_rng)
    keys_b = keygen(config.key_bits, key_rng)
    common = blinded_intersection(train_a, train_b,
                                  np.random.default_rng(ss_align), hub)
    if set(common) != set(split.co_occurrence):
        raise ProtocolError("alignment disagrees with the constructed split")

    dual_rng = np.random.default_rng(ss_dual_init)
    gen_hidden_ab = dual_hidden_width(d_a, d_b)
    gen_hidden_ba = dual_hidden_width(d_b, d_a)
    state_a = DualPartyState(
        "A", store_a, kde_a,
        init_mlp([d_a, gen_hidden_ab, d_b], ["relu", "identity"], dual_rng),
        keys_a, keys_b.public, config.lam, config.lr)
    state_b = DualPartyState(
        "B", store_b, kde_b,
        init_mlp([d_b, gen_hidden_ba, d_a], ["relu", "identity"], dual_rng),
        keys_b, keys_a.public, config.lam, config.lr)

    labels_c = _labels_to_c(hub, party_b)
    folds = kfold_split(common, config.folds, seed=_rng_int(ss_folds))
    fold_order = np.random.default_rng(ss_folds).permutation(config.folds)
    order_rng = np.random.default_rng(ss_dual_order)
    central_rng = np.random.default_rng(ss_central)
    protocol_rng = Random(_rng_int(ss_protocol))

    received_a: dict = {}
    src_a = _FeatureSource(store_a, received_a)
    records: list[IterationRecord] = []
    model_joint = model_dual = None
    converged = False
    round_tag = 0

    for iteration in range(config.max_iters):
        fold_idx = int(fold_order[iteration])
        d_v = list(folds[fold_idx])
        d_t = [i for i in common if i not in set(d_v)]

        # dual generators keep training across iterations
        for _ in range(config.dual_epochs):
            order = order_rng.permutation(len(common))
            for start in range(0, len(common), config.batch_size):
                batch = [common[k] for k in
                         order[start:start + config.batch_size]]
                run_dual_round(state_a, state_b, batch, hub, protocol_rng,
                               use_encryption=config.use_encryption,
                               exact_duality_grad=config.exact_duality_grad,
                               cipher_scale=config.cipher_scale,
                               round_tag=round_tag,
                               residual_clip=config.residual_clip,
                               grad_clip=config.grad_clip)
                round_tag += 1

        # B completes its own-only rows with inferred A-side features
        b_only = list(split.b_only)
        if b_only:
            inferred = dual_infer(state_b.model, store_b.rows(b_only))
            hub.send("B", "A", MessageKind.Control,
                     pack_json({"supplement_ids": [repr(i) for i in b_only]}))
            hub.send("B", "A", MessageKind.InferredBatch,
                     pack_matrix(inferred))
            got_ids = unpack_json(hub.recv("A", "B",
                                           MessageKind.Control).payload)
            got = unpack_matrix(hub.recv("A", "B",
                                         MessageKind.InferredBatch).payload)
            for key, row in zip(got_ids["supplement_ids"], got):
                received_a[key] = row

        # fresh central models each iteration, identical initial weights
        base = init_split_central(d_a, d_b, data.n_classes, central_rng,
                                  hidden=hidden)
        model_joint = _central_train(hub, base, d_t, src_a, store_b,
                                     labels_c, config, central_rng)
        model_dual = _central_train(hub, base, d_t + b_only, src_a, store_b,
                                    labels_c, config, central_rng)

        v_joint = _central_accuracy(hub, model_joint, d_v, src_a, store_b,
                                    labels_c)
        v_dual = _central_accuracy(hub, model_dual, d_v, src_a, store_b,
                                   labels_c)
        records.append(IterationRecord(fold_idx, v_joint, v_dual))
        if v_dual - v_joint > config.threshold:
            converged = True
            break

    # final metrics on the held-back test block
    test = list(split.test)
    acc_joint = _central_accuracy(hub, model_joint, test, src_a, store_b,
                                  labels_c)
    acc_dual = _central_accuracy(hub, model_dual, test, src_a, store_b,
                                 labels_c)

    result = MpdlResult(
        RunReport(config.gamma, config.epsilon, config.sensitivity_mode,
                  config.seed, converged, records, acc_joint, acc_dual,
                  0.0, 0.0, asdict(config)),
        model_joint, model_dual,
        DualModelPair(state_a.model, state_b.model),
        state_a, state_b, received_a, hub)

    a_only = list(split.a_only)
    if a_only:
        preds = predict_unlabeled(result, store_a.rows(a_only), a_only, hub)
        truth = np.array([data.withheld_labels[i] for i in a_only])
        result.report.accuracy_unlabeled = float((preds == truth).mean())
    result.report.inference_mae = inference_mae_report(data, result)
    return result


def predict_unlabeled(result: MpdlResult, x_a, ids=None,
                      hub: Hub | None = None) -> np.ndarray:
    """Label A-side rows through the routing protocol.

    A infers the missing partner features and ships them with blinded
    id tokens; B swaps in its true features for any token it holds and
    both parties send partial sums to C, which returns the labels to A.
    Unknown or absent ids always take the inferred path.
    """
    hub = hub or result.hub
    model = result.model_dual
    x_a = np.atleast_2d(np.asarray(x_a, dtype=np.float64))
    if ids is None:
        ids = [object()] * x_a.shape[0]  # fresh handles: never aligned
    ids = list(ids)
    if len(ids) != x_a.shape[0]:
        raise ValueError("one id per row required")

    # fresh blinding key so B can match tokens without seeing raw ids;
    # derived from B's public modulus to stay reproducible per run
    n = result.state_b.keys.public.n
    key = hashlib.sha256(b"routing" + n.to_bytes((n.bit_length() + 7) // 8,
                                                 "big")).digest()
    hub.send("B", "A", MessageKind.BlindedIds, pack_tokens([key]))
    key = unpack_tokens(hub.recv("A", "B",
                                 MessageKind.BlindedIds).payload)[0]
    tokens = [_hmac(key, _id_bytes(i), 32) for i in ids]
    xhat_b = dual_infer(result.state_a.model, x_a)
    hub.send("A", "B", MessageKind.BlindedIds, pack_tokens(tokens))
    hub.send("A", "B", MessageKind.InferredBatch, pack_matrix(xhat_b))
    got_tokens = unpack_tokens(hub.recv("B", "A",
                                        MessageKind.BlindedIds).payload)
    got_xhat = unpack_matrix(hub.recv("B", "A",
                                      MessageKind.InferredBatch).payload)

    # B resolves alignment hits against its own token table
    table = {_hmac(key, _id_bytes(i), 32): i for i in result.state_b.store.ids}
    x_b = np.array([result.state_b.store.rows([table[t]])[0]
                    if t in table else got_xhat[j]
                    for j, t in enumerate(got_tokens)])

    hub.send("A", "C", MessageKind.PartialSum,
             pack_matrix(party_forward(model.local_a, x_a)))
    hub.send("B", "C", MessageKind.PartialSum,
             pack_matrix(party_forward(model.local_b, x_b)))
    z_a = unpack_matrix(hub.recv("C", "A", MessageKind.PartialSum).payload)
    z_b = unpack_matrix(hub.recv("C", "B", MessageKind.PartialSum).payload)
    hidden = apply_activation(model.split_activation, z_a + z_b)
    probs, _ = mlp_forward(model.central, hidden)
    preds = probs.argmax(axis=1)
    hub.send("C", "A", MessageKind.Control,
             pack_json({"labels": [int(p) for p in preds]}))
    back = unpack_json(hub.recv("A", "C", MessageKind.Control).payload)
    return np.array(back["labels"], dtype=np.int64)


def inference_mae(raw, inferred) -> float:
    """Mean absolute entrywise deviation between two matrices."""
    a = np.asarray(raw, dtype=np.float64)
    b = np.asarray(inferred, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("matrices must share a shape")
    return float(np.abs(a - b).mean())


def inference_mae_report(data: PreparedExperiment,
                         result: MpdlResult) -> float:
    """Generator leakage proxy: inferred vs raw features on test rows,
    averaged over both directions."""
    test = list(data.split.test)
    raw_a = data.party_a.rows(test)
    raw_b = data.party_b.rows(test)
    inf_b = dual_infer(result.state_a.model,
                       result.state_a.store.rows(test))
    inf_a = dual_infer(result.state_b.model,
                       result.state_b.store.rows(test))
    return 0.5 * (inference_mae(raw_b, inf_b) + inference_mae(raw_a, inf_a))
