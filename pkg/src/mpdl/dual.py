"""The privacy-preserving dual-learning round between parties A and B.

A holds generator f: X_A -> X_B, B holds generator g: X_B -> X_A, and
both regress onto the partner's perturbed features over the
co-occurring samples.  The shared training signal couples an alignment
loss with the squared duality residual

    r_i = log P(x_i^A) - log P(xhat_i^A) + log P(xhat_i^B) - log P(x_i^B)

whose per-party pieces are exchanged so that each generator's
output-layer gradient can be assembled without either party revealing
its log-densities in plaintext: the partner's residual arrives as an
additively homomorphic ciphertext, is scaled by the local plaintext
log-density gradient, and travels back to the residual's owner for
decryption.  One minibatch round is exactly eight directed messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import paillier
from .data import PartyDataset
from .density import KdeModel, grad_log_density_batch, log_density_batch
from .nn import Mlp, backprop_from_output_grad, clip_global_norm, \
    loss_eval, mlp_forward, sgd_step
from .paillier import CipherVector, KeyPair, PublicKey
from .transport import Hub, MessageKind, ProtocolMessage, pack_ciphers, \
    pack_matrix, unpack_ciphers, unpack_matrix


@dataclass(frozen=True)
class DualModelPair:
    """The two generators; a_to_b lives at A, b_to_a lives at B."""

    a_to_b: Mlp
    b_to_a: Mlp

    def __post_init__(self):
        if self.a_to_b.in_width != self.b_to_a.out_width or \
                self.a_to_b.out_width != self.b_to_a.in_width:
            raise ValueError("generator widths are not mutually inverse")


@dataclass
class DualPartyState:
    """Everything one party brings to a round.

    ``store`` holds the party's perturbed features (the only view of
    its data that ever feeds cross-party computation), ``kde`` is
    fitted on that same perturbed partition.
    """

    name: str
    store: PartyDataset
    kde: KdeModel
    model: Mlp
    keys: KeyPair
    partner_public: PublicKey
    lam: float = 0.01
    lr: float = 0.1


@dataclass
class DualRoundTranscript:
    """Messages of one round plus, under audit, the plaintext shadow."""

    batch_ids: tuple
    messages: list[ProtocolMessage] = field(default_factory=list)
    shadow: dict[int, np.ndarray] = field(default_factory=dict)


class DualRoundResult(NamedTuple):
    pair: DualModelPair
    record: DualRoundTranscript


def dual_infer(model: Mlp, x) -> np.ndarray:
    """Run a generator on a batch of own-space features."""
    return mlp_forward(model, x)[0]


def dual_loss(logp_xa, logp_xhat_a, logp_xhat_b, logp_xb) -> float:
    """Mean squared duality residual over a batch of log-densities."""
    arrays = [np.atleast_1d(np.asarray(v, dtype=np.float64))
              for v in (logp_xa, logp_xhat_a, logp_xhat_b, logp_xb)]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("log-density vectors must share one shape")
    r = arrays[0] - arrays[1] + arrays[2] - arrays[3]
    return float((r * r).mean())


def dual_output_grad(align_grad, grad_logp_xhat, own_residual,
                     cross_residual, lam: float,
                     exact: bool = False) -> np.ndarray:
    """Total output-layer gradient for one generator.

    ``align_grad`` already carries the batch-mean factor; the duality
    term adds lam * grad log P(xhat) * (own + cross residual) / batch,
    doubled when ``exact`` asks for the true derivative of the squared
    residual rather than the halved conventional form.
    """
    g = np.asarray(align_grad, dtype=np.float64)
    glp = np.asarray(grad_logp_xhat, dtype=np.float64)
    own = np.atleast_1d(np.asarray(own_residual, dtype=np.float64))
    cross = np.atleast_1d(np.asarray(cross_residual, dtype=np.float64))
    if g.shape != glp.shape or own.shape != (g.shape[0],) or \
            cross.shape != (g.shape[0],):
        raise ValueError("gradient term shapes do not line up")
    factor = 2.0 if exact else 1.0
    return g + lam * factor * glp * (own + cross)[:, None] / g.shape[0]


def _send_matrix(hub: Hub, sender: str, receiver: str, kind: MessageKind,
                 arr, tag) -> ProtocolMessage:
    return hub.send(sender, receiver, kind, pack_matrix(arr), batch_tag=tag)


def _recv_matrix(hub: Hub, receiver: str, sender: str, kind: MessageKind,
                 record: DualRoundTranscript) -> np.ndarray:
    msg = hub.recv(receiver, sender, kind)
    record.messages.append(msg)
    return unpack_matrix(msg.payload)


def _send_ciphers(hub: Hub, sender: str, receiver: str, cv: CipherVector,
                  rows: int, cols: int, tag) -> ProtocolMessage:
    payload = pack_ciphers(cv.key_id, cv.scale, rows, cols, cv.ciphertexts)
    return hub.send(sender, receiver, MessageKind.CipherBlock, payload,
                    batch_tag=tag)


def _recv_ciphers(hub: Hub, receiver: str, sender: str,
                  record: DualRoundTranscript) -> tuple[CipherVector, int, int]:
    msg = hub.recv(receiver, sender, MessageKind.CipherBlock)
    record.messages.append(msg)
    key_id, scale, rows, cols, cts = unpack_ciphers(msg.payload)
    return CipherVector(cts, scale, key_id), rows, cols


class _RoundHalf:
    """One party's bookkeeping while a round is in flight."""

    def __init__(self, state: DualPartyState, batch: np.ndarray,
                 factor: float, residual_clip: float):
        self.state = state
        self.batch = batch
        self.factor = factor
        self.residual_clip = residual_clip
        self.out, self.cache = mlp_forward(state.model, batch)
        self.received_xhat: np.ndarray | None = None

    def local_terms(self):
        """Plaintext gradient part and own residual, both own-space.

        The plaintext part is the alignment gradient plus the
        own-residual duality term; it is safe to ship because it is an
        aggregate over the party's density model, not raw features.
        """
        s = self.state
        xhat = self.received_xhat
        _, align_grad = loss_eval("mse", xhat, self.batch)
        logp_xhat = log_density_batch(s.kde, xhat)
        logp_x = log_density_batch(s.kde, self.batch)
        grad_logp = grad_log_density_batch(s.kde, xhat)
        # Log-density differences are unbounded below once a generator
        # output leaves the support; an uncapped residual feeds back
        # into the update and diverges (and overflows the cipher
        # encoding band).  Saturating it bounds the duality term's
        # influence while preserving its sign; within the cap the
        # arithmetic is untouched.
        own_resid = np.clip(logp_xhat - logp_x, -self.residual_clip,
                            self.residual_clip)
        plain_part = align_grad + s.lam * self.factor * grad_logp * \
            own_resid[:, None] / xhat.shape[0]
        cross_mult = s.lam * self.factor * grad_logp / xhat.shape[0]
        return plain_part, own_resid, cross_mult


def run_dual_round(state_a: DualPartyState, state_b: DualPartyState,
                   batch_ids, hub: Hub, rng,
                   use_encryption: bool = True,
                   exact_duality_grad: bool = False,
                   cipher_scale: int = paillier.DEFAULT_SCALE,
                   round_tag: int | None = None,
                   residual_clip: float = 100.0,
                   grad_clip: float = 1.0) -> DualRoundResult:
    """One minibatch of joint dual training over the co-occurring ids.

    Exactly eight directed messages cross the hub, in the fixed order
    (1) A->B inferred batch, (2-4) B->A inferred batch, plaintext
    gradient part and encrypted own residual, (5-7) A->B the symmetric
    three plus the encrypted cross product for B, (8) B->A the
    encrypted cross product for A.  Both parties then decrypt their
    cross term, assemble the full output gradient, backpropagate
    locally and take one SGD step.

    With ``use_encryption`` off (test shadow mode) the same values move
    as plaintext float payloads; parameter updates then differ from the
    encrypted path only by fixed-point quantization.
    """
    if {state_a.name, state_b.name} != {"A", "B"}:
        raise ValueError("states must be named A and B")
    if state_a.name != "A":
        state_a, state_b = state_b, state_a
    batch_ids = tuple(batch_ids)
    if not batch_ids:
        raise ValueError("empty minibatch")
    factor = 2.0 if exact_duality_grad else 1.0
    if not residual_clip > 0.0 or not grad_clip > 0.0:
        raise ValueError("residual_clip and grad_clip must be positive")
    record = DualRoundTranscript(batch_ids)
    audit = hub.unsafe_audit

    half_a = _RoundHalf(state_a, state_a.store.rows(batch_ids), factor,
                        residual_clip)
    half_b = _RoundHalf(state_b, state_b.store.rows(batch_ids), factor,
                        residual_clip)
    n = len(batch_ids)
    d_a = state_a.store.features.shape[1]
    d_b = state_b.store.features.shape[1]

    # (1) A -> B: inferred partner-space batch xhat_B = f(x_A)
    _send_matrix(hub, "A", "B", MessageKind.InferredBatch, half_a.out,
                 round_tag)
    half_b.received_xhat = _recv_matrix(hub, "B", "A",
                                        MessageKind.InferredBatch, record)

    # (2) B -> A: inferred batch xhat_A = g(x_B)
    _send_matrix(hub, "B", "A", MessageKind.InferredBatch, half_b.out,
                 round_tag)
    half_a.received_xhat = _recv_matrix(hub, "A", "B",
                                        MessageKind.InferredBatch, record)

    # (3) B -> A: plaintext part of the gradient for f's output
    plain_b, own_resid_b, cross_mult_b = half_b.local_terms()
    _send_matrix(hub, "B", "A", MessageKind.GradTerm, plain_b, round_tag)
    plain_for_a = _recv_matrix(hub, "A", "B", MessageKind.GradTerm, record)

    # (4) B -> A: encrypted own residual logP(xhat_B) - logP(x_B)
    if use_encryption:
        enc_resid_b = paillier.encrypt_vector(state_b.keys.public,
                                              own_resid_b, rng, cipher_scale)
        _send_ciphers(hub, "B", "A", enc_resid_b, n, 1, round_tag)
        cv_resid_b, _, _ = _recv_ciphers(hub, "A", "B", record)
        if audit:
            record.shadow[record.messages[-1].msg_id] = own_resid_b.copy()
    else:
        _send_matrix(hub, "B", "A", MessageKind.GradTerm,
                     own_resid_b[:, None], round_tag)
        cv_resid_b = _recv_matrix(hub, "A", "B", MessageKind.GradTerm,
                                  record)[:, 0]

    # (5) A -> B: plaintext part of the gradient for g's output
    plain_a, own_resid_a, cross_mult_a = half_a.local_terms()
    _send_matrix(hub, "A", "B", MessageKind.GradTerm, plain_a, round_tag)
    plain_for_b = _recv_matrix(hub, "B", "A", MessageKind.GradTerm, record)

    # (6) A -> B: encrypted own residual logP(xhat_A) - logP(x_A)
    if use_encryption:
        enc_resid_a = paillier.encrypt_vector(state_a.keys.public,
                                              own_resid_a, rng, cipher_scale)
        _send_ciphers(hub, "A", "B", enc_resid_a, n, 1, round_tag)
        cv_resid_a, _, _ = _recv_ciphers(hub, "B", "A", record)
        if audit:
            record.shadow[record.messages[-1].msg_id] = own_resid_a.copy()
    else:
        _send_matrix(hub, "A", "B", MessageKind.GradTerm,
                     own_resid_a[:, None], round_tag)
        cv_resid_a = _recv_matrix(hub, "B", "A", MessageKind.GradTerm,
                                  record)[:, 0]

    # (7) A -> B: cross product for g, under B's key: for each sample,
    # lam_A * grad logP_A(xhat_A) times [[logP(x_B) - logP(xhat_B)]]_B
    if use_encryption:
        neg_b = paillier.negate_cipher(state_a.partner_public, cv_resid_b)
        cts = []
        for i in range(n):
            row = paillier.dual_scalar_product(
                state_a.partner_public, neg_b.ciphertexts[i], neg_b.scale,
                cross_mult_a[i], cipher_scale)
            cts.extend(row.ciphertexts)
        cross_cv = CipherVector(tuple(cts), neg_b.scale * cipher_scale,
                                state_a.partner_public.key_id)
        _send_ciphers(hub, "A", "B", cross_cv, n, d_a, round_tag)
        got_cross_b, rows, cols = _recv_ciphers(hub, "B", "A", record)
        cross_for_b = paillier.decrypt_vector(
            state_b.keys.secret, got_cross_b).reshape(rows, cols)
    else:
        cross_plain = cross_mult_a * (-cv_resid_b)[:, None]
        _send_matrix(hub, "A", "B", MessageKind.GradTerm, cross_plain,
                     round_tag)
        cross_for_b = _recv_matrix(hub, "B", "A", MessageKind.GradTerm,
                                   record)
    if audit:
        record.shadow[record.messages[-1].msg_id] = cross_for_b.copy()

    # (8) B -> A: cross product for f, under A's key
    if use_encryption:
        neg_a = paillier.negate_cipher(state_b.partner_public, cv_resid_a)
        cts = []
        for i in range(n):
            row = paillier.dual_scalar_product(
                state_b.partner_public, neg_a.ciphertexts[i], neg_a.scale,
                cross_mult_b[i], cipher_scale)
            cts.extend(row.ciphertexts)
        cross_cv = CipherVector(tuple(cts), neg_a.scale * cipher_scale,
                                state_b.partner_public.key_id)
        _send_ciphers(hub, "B", "A", cross_cv, n, d_b, round_tag)
        got_cross_a, rows, cols = _recv_ciphers(hub, "A", "B", record)
        cross_for_a = paillier.decrypt_vector(
            state_a.keys.secret, got_cross_a).reshape(rows, cols)
    else:
        cross_plain = cross_mult_b * (-cv_resid_a)[:, None]
        _send_matrix(hub, "B", "A", MessageKind.GradTerm, cross_plain,
                     round_tag)
        cross_for_a = _recv_matrix(hub, "A", "B", MessageKind.GradTerm,
                                   record)
    if audit:
        record.shadow[record.messages[-1].msg_id] = cross_for_a.copy()

    # local assembly and SGD: no further communication
    total_grad_a = plain_for_a + cross_for_a
    grads_a = clip_global_norm(backprop_from_output_grad(
        state_a.model, half_a.cache, total_grad_a).layer_grads, grad_clip)
    state_a.model = sgd_step(state_a.model, grads_a, state_a.lr)

    total_grad_b = plain_for_b + cross_for_b
    grads_b = clip_global_norm(backprop_from_output_grad(
        state_b.model, half_b.cache, total_grad_b).layer_grads, grad_clip)
    state_b.model = sgd_step(state_b.model, grads_b, state_b.lr)

    return DualRoundResult(DualModelPair(state_a.model, state_b.model),
                           record)
