"""Encrypted vertical-FL baseline with noise-masked host weights.

The guest runs a bottom network ``a = tanh(W_g x + b_g)`` and holds the
Paillier private key. The host owns the interactive layer but only ever sees
``W_tilde = W_h + eps_acc``; the guest tracks ``eps_acc``, the sum of the
weight noise it injects each step. One training step:

forward
    guest -> host  ``[a]``
    host  -> guest ``[a W_tilde^T + eps_s]``
    guest -> host  ``a W_h^T + eps_s``  (guest removes ``a eps_acc^T``)
    host           removes ``eps_s``, adds its own branch, applies the head
backward (``delta = dL/dz``)
    host  -> guest ``[delta^T a + eps_s']``
    guest -> host  ``delta^T a + eps_s' - eps_w / lr`` and ``[eps_acc]``
    host           ``W_tilde -= lr * (delta^T a - eps_w / lr)``
    host  -> guest ``[delta W_tilde - delta eps_acc] = [delta W_h]``
    guest          backpropagates ``delta W_h`` through its bottom network

After every step ``W_tilde - eps_acc`` equals the weights a plaintext run
would hold. Both parties use plain SGD, since the masking algebra relies on
the update being ``lr * gradient``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import PartyDataset
from .messages import (
    CipherBatch,
    Control,
    IdList,
    MaskedGradient,
    Matrix,
    MessageType,
    ProtocolError,
    ProtocolMessage,
    Text,
)
from .nn import (
    Activation,
    MlpModel,
    activate,
    activation_backward,
    as_column,
    bce_loss,
    build_mlp,
    dense_forward,
    derive_rng,
    minibatches,
    mlp_backward,
)
from .paillier import (
    DEFAULT_FRAC_BITS,
    EncryptedMatrix,
    PaillierPublicKey,
    RandomSource,
    decrypt_matrix,
    dump_public_key,
    encrypt_matrix,
    keygen,
    load_public_key,
)
from .transport import Channel, connect

log = logging.getLogger(__name__)

BASELINE_MESSAGE_TYPES = frozenset({
    MessageType.ACK,
    MessageType.ABORT,
    MessageType.SHUTDOWN,
    MessageType.PUBLIC_KEY,
    MessageType.LATENT_REQUEST,
    MessageType.ENC_ACTIVATIONS,
    MessageType.ENC_MASKED_LOGITS,
    MessageType.MASKED_LOGITS,
    MessageType.ENC_MASKED_WEIGHT_GRAD,
    MessageType.MASKED_WEIGHT_GRAD,
    MessageType.ENC_ACTIVATION_GRAD,
})

DEFAULT_SGD_RATE = 0.05
NOISE_SCALE = 1.0
HIDDEN_FACTOR = 5

_SEED_GUEST_INIT = 0xB6
_SEED_HOST_INIT = 0xB7
_SEED_GUEST_NOISE = 0xB8
_SEED_HOST_NOISE = 0xB9


def _to_wire(enc: EncryptedMatrix) -> CipherBatch:
    return CipherBatch(enc.to_ints(), enc.scale, enc.bound, enc.key.ciphertext_bytes)


def _from_wire(batch: CipherBatch, key: PaillierPublicKey) -> EncryptedMatrix:
    return EncryptedMatrix(batch.values, key, batch.scale, batch.bound)


def head_activation(kind: str) -> Tuple[Activation, int]:
    if kind == "sigmoid":
        return Activation.SIGMOID, 1
    if kind == "softmax":
        return Activation.SOFTMAX, 2
    raise ValueError(f"unknown output head {kind!r}")


def head_targets(labels: np.ndarray, out_dim: int) -> np.ndarray:
    y = as_column(labels)
    return y if out_dim == 1 else np.hstack([1.0 - y, y])


class BaselineGuest:
    """Guest half: bottom network, accumulated weight noise and the private key."""

    def __init__(self, data: PartyDataset, learning_rate: float = DEFAULT_SGD_RATE, key_bits: int = 512,
                 seed: int = 0, hidden: Optional[int] = None, use_bias: bool = True,
                 frac_bits: int = DEFAULT_FRAC_BITS, noise_scale: float = NOISE_SCALE,
                 party_id: int = 1):
        self.party_id = party_id
        self.data = data
        self.learning_rate = learning_rate
        self.frac_bits = frac_bits
        self.noise_scale = noise_scale
        self.use_bias = use_bias
        hidden = hidden or HIDDEN_FACTOR * data.n_features
        self.bottom = build_mlp([data.n_features, hidden], [Activation.TANH],
                                derive_rng(seed, _SEED_GUEST_INIT))
        if not use_bias:
            self.bottom.layers[0].bias[:] = 0.0
        self._crypto_rng = RandomSource(f"baseline-guest-{seed}")
        self.public_key, self._private_key = keygen(key_bits, self._crypto_rng)
        self._noise = derive_rng(seed, _SEED_GUEST_NOISE)
        self.eps_acc: Optional[np.ndarray] = None  # shaped on first use, (out, hidden)
        self._x: Optional[np.ndarray] = None
        self._a: Optional[np.ndarray] = None
        self._cache = None
        self.last_activation_grad: Optional[np.ndarray] = None

    @property
    def hidden(self) -> int:
        return self.bottom.output_dim

    def init_noise(self, out_dim: int, initial: Optional[np.ndarray] = None) -> None:
        self.eps_acc = np.zeros((out_dim, self.hidden)) if initial is None else np.array(initial, dtype=np.float64)

    def handle(self, msg: ProtocolMessage) -> ProtocolMessage:
        t = msg.type
        if t is MessageType.PUBLIC_KEY:
            return self._reply(MessageType.PUBLIC_KEY, Text(dump_public_key(self.public_key)))
        if t is MessageType.LATENT_REQUEST:
            return self._reply(MessageType.ENC_ACTIVATIONS, self._forward(msg.payload.ids))
        if t is MessageType.ENC_MASKED_LOGITS:
            return self._reply(MessageType.MASKED_LOGITS, self._unmask_logits(msg.payload))
        if t is MessageType.ENC_MASKED_WEIGHT_GRAD:
            return self._reply(MessageType.MASKED_WEIGHT_GRAD, self._remask_gradient(msg.payload))
        if t is MessageType.ENC_ACTIVATION_GRAD:
            self._backward(msg.payload)
            return self._reply(MessageType.ACK, Control())
        if t is MessageType.SHUTDOWN:
            return self._reply(MessageType.ACK, Control())
        raise ProtocolError(f"baseline guest does not accept {t.name}")

    def _reply(self, mtype: MessageType, payload) -> ProtocolMessage:
        return ProtocolMessage(self.party_id, mtype, payload)

    def _forward(self, ids: Sequence[str]) -> CipherBatch:
        self._x = self.data.rows(ids)
        self._a, self._cache = dense_forward(self.bottom, self._x)
        return _to_wire(encrypt_matrix(self.public_key, self._a, self._crypto_rng, self.frac_bits))

    def _unmask_logits(self, batch: CipherBatch) -> Matrix:
        if self._a is None or self.eps_acc is None:
            raise ProtocolError("masked logits arrived before activations were sent")
        masked = decrypt_matrix(self._private_key, _from_wire(batch, self.public_key))
        return Matrix(masked - self._a @ self.eps_acc.T)

    def _remask_gradient(self, batch: CipherBatch) -> MaskedGradient:
        if self.eps_acc is None:
            raise ProtocolError("noise state not initialized")
        grad_plus_mask = decrypt_matrix(self._private_key, _from_wire(batch, self.public_key))
        eps_w = self._noise.uniform(-self.noise_scale, self.noise_scale, size=self.eps_acc.shape)
        enc_acc = encrypt_matrix(self.public_key, self.eps_acc, self._crypto_rng, self.frac_bits)
        self.eps_acc = self.eps_acc + eps_w
        return MaskedGradient(grad_plus_mask - eps_w / self.learning_rate, _to_wire(enc_acc))

    def _backward(self, batch: CipherBatch) -> None:
        if self._cache is None:
            raise ProtocolError("activation gradient arrived without a matching forward pass")
        grad_a = decrypt_matrix(self._private_key, _from_wire(batch, self.public_key))
        self.last_activation_grad = grad_a
        grads, _ = mlp_backward(self.bottom, self._cache, grad_a)
        if not self.use_bias:
            grads[1] = np.zeros_like(grads[1])
        self.bottom.set_parameters([p - self.learning_rate * g for p, g in zip(self.bottom.parameters(), grads)])
        self._cache = None
        self._a = None


@dataclass
class RoundOutput:
    logits: np.ndarray
    predictions: np.ndarray


class BaselineHost:
    """Host half: labels, its own bottom branch and the masked interactive weights."""

    def __init__(self, data: PartyDataset, channel: Channel, guest_hidden: int,
                 learning_rate: float = DEFAULT_SGD_RATE, head: str = "sigmoid", seed: int = 0,
                 hidden: Optional[int] = None, noise_scale: float = NOISE_SCALE):
        if data.labels is None:
            raise ValueError("the host must hold labels")
        self.data = data
        self.channel = channel
        self.learning_rate = learning_rate
        self.noise_scale = noise_scale
        self.head, self.out_dim = head_activation(head)
        rng = derive_rng(seed, _SEED_HOST_INIT)
        hidden = hidden or HIDDEN_FACTOR * data.n_features
        self.bottom = build_mlp([data.n_features, hidden], [Activation.TANH], rng)
        inter = build_mlp([guest_hidden + hidden, self.out_dim], [Activation.IDENTITY], rng).layers[0]
        self.w_tilde = inter.weights[:, :guest_hidden].copy()
        self.w_own = inter.weights[:, guest_hidden:].copy()
        self.bias = inter.bias.copy()
        self._noise = derive_rng(seed, _SEED_HOST_NOISE)
        key_text = channel.request(MessageType.PUBLIC_KEY, Text("")).payload.text
        self.guest_key = load_public_key(key_text)
        self._round = None

    def forward_round(self, ids: Sequence[str]) -> RoundOutput:
        ids = list(ids)
        enc_a = _from_wire(self.channel.request(MessageType.LATENT_REQUEST, IdList(ids)).payload, self.guest_key)
        enc_z = enc_a.matmul_plain(self.w_tilde.T)
        eps_s = self._noise.uniform(-self.noise_scale, self.noise_scale, size=enc_z.shape)
        reply = self.channel.request(MessageType.ENC_MASKED_LOGITS, _to_wire(enc_z.add_plain(eps_s)))
        z_guest = reply.payload.matrix - eps_s
        a_own, own_cache = dense_forward(self.bottom, self.data.rows(ids))
        z = z_guest + a_own @ self.w_own.T + self.bias
        y_hat = activate(self.head, z)
        self._round = (ids, enc_a, a_own, own_cache, z, y_hat)
        return RoundOutput(z, y_hat)

    def backward_round(self, labels: np.ndarray) -> float:
        if self._round is None:
            raise ProtocolError("backward round without a forward round")
        z, y_hat = self._round[4], self._round[5]
        loss, g_yhat = bce_loss(y_hat, head_targets(labels, self.out_dim))
        self.apply_output_gradient(activation_backward(self.head, z, y_hat, g_yhat))
        return loss

    def apply_output_gradient(self, delta: np.ndarray) -> None:
        """Run the masked backward exchange for ``delta = dL/dz`` of the last forward round."""
        if self._round is None:
            raise ProtocolError("backward round without a forward round")
        ids, enc_a, a_own, own_cache, z, y_hat = self._round
        self._round = None
        if delta.shape != z.shape:
            raise ValueError(f"output gradient shape {delta.shape} != logits {z.shape}")
        lr = self.learning_rate

        enc_grad = enc_a.rmatmul_plain(delta.T)
        eps_s = self._noise.uniform(-self.noise_scale, self.noise_scale, size=enc_grad.shape)
        reply = self.channel.request(MessageType.ENC_MASKED_WEIGHT_GRAD, _to_wire(enc_grad.add_plain(eps_s)))
        masked: MaskedGradient = reply.payload
        grad_noisy = masked.gradient - eps_s
        enc_acc = _from_wire(masked.encrypted_noise, self.guest_key)

        # dL/da against the pre-update weights
        grad_a_noisy = delta @ self.w_tilde
        enc_grad_a = enc_acc.rmatmul_plain(delta).negate().add_plain(grad_a_noisy)
        self.w_tilde = self.w_tilde - lr * grad_noisy

        own_grad_w = delta.T @ a_own
        own_grad_b = delta.sum(axis=0)
        grad_a_own = delta @ self.w_own
        self.w_own = self.w_own - lr * own_grad_w
        self.bias = self.bias - lr * own_grad_b
        bottom_grads, _ = mlp_backward(self.bottom, own_cache, grad_a_own)
        self.bottom.set_parameters([p - lr * g for p, g in zip(self.bottom.parameters(), bottom_grads)])

        self.channel.request(MessageType.ENC_ACTIVATION_GRAD, _to_wire(enc_grad_a))

    def predict(self, ids: Sequence[str], batch_size: int = 128) -> np.ndarray:
        out = []
        ids = list(ids)
        for start in range(0, len(ids), batch_size):
            out.append(self.forward_round(ids[start:start + batch_size]).predictions)
        self._round = None
        return positive_probability(np.vstack(out))


def positive_probability(y_hat: np.ndarray) -> np.ndarray:
    return y_hat[:, :1] if y_hat.shape[1] == 1 else y_hat[:, 1:2]


@dataclass
class PlaintextReference:
    """The same model and SGD arithmetic with no encryption and no masks."""

    guest_bottom: MlpModel
    host_bottom: MlpModel
    w_h: np.ndarray
    w_own: np.ndarray
    bias: np.ndarray
    head: Activation
    learning_rate: float
    use_bias: bool = True

    @classmethod
    def mirror(cls, host: BaselineHost, guest: BaselineGuest) -> "PlaintextReference":
        """Copy the true starting weights out of a freshly built host/guest pair."""
        return cls(guest.bottom.copy(), host.bottom.copy(), host.w_tilde - guest.eps_acc,
                   host.w_own.copy(), host.bias.copy(), host.head, host.learning_rate, guest.use_bias)

    def forward(self, x_host: np.ndarray, x_guest: np.ndarray):
        a, g_cache = dense_forward(self.guest_bottom, x_guest)
        a_own, h_cache = dense_forward(self.host_bottom, x_host)
        z = a @ self.w_h.T + a_own @ self.w_own.T + self.bias
        return z, activate(self.head, z), (a, g_cache, a_own, h_cache)

    def step(self, x_host: np.ndarray, x_guest: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """One SGD step; returns the pre-update logits and dL/da delivered to the guest."""
        z, y_hat, (a, g_cache, a_own, h_cache) = self.forward(x_host, x_guest)
        target = head_targets(labels, y_hat.shape[1])
        _, g = bce_loss(y_hat, target)
        delta = activation_backward(self.head, z, y_hat, g)
        lr = self.learning_rate
        grad_a = delta @ self.w_h
        grad_a_own = delta @ self.w_own
        self.w_h = self.w_h - lr * (delta.T @ a)
        self.w_own = self.w_own - lr * (delta.T @ a_own)
        self.bias = self.bias - lr * delta.sum(axis=0)
        hg, _ = mlp_backward(self.host_bottom, h_cache, grad_a_own)
        self.host_bottom.set_parameters([p - lr * q for p, q in zip(self.host_bottom.parameters(), hg)])
        gg, _ = mlp_backward(self.guest_bottom, g_cache, grad_a)
        if not self.use_bias:
            gg[1] = np.zeros_like(gg[1])
        self.guest_bottom.set_parameters([p - lr * q for p, q in zip(self.guest_bottom.parameters(), gg)])
        return z, grad_a


@dataclass
class BaselineEpoch:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class BaselineResult:
    history: List[BaselineEpoch]
    seconds: float
    bytes_exchanged: int = 0


@dataclass
class BaselineFederation:
    """A connected host/guest pair ready for training."""

    host: BaselineHost
    guest: BaselineGuest
    channel: Channel
    server: object = None

    def close(self) -> None:
        try:
            self.channel.request(MessageType.SHUTDOWN, Control())
        except Exception:  # best effort on teardown
            pass
        self.channel.close()
        if self.server is not None:
            self.server.close()


def build_federation(host_data: PartyDataset, guest_data: PartyDataset, learning_rate: float = DEFAULT_SGD_RATE,
                     key_bits: int = 512, seed: int = 0, head: str = "sigmoid", transport: str = "in-process",
                     record: bool = False, guest_hidden: Optional[int] = None, host_hidden: Optional[int] = None,
                     use_bias: bool = True, noise_scale: float = NOISE_SCALE) -> BaselineFederation:
    guest = BaselineGuest(guest_data, learning_rate, key_bits, seed, guest_hidden, use_bias,
                          noise_scale=noise_scale)
    channel, server = connect(guest.handle, transport, BASELINE_MESSAGE_TYPES, record)
    host = BaselineHost(host_data, channel, guest.hidden, learning_rate, head, seed, host_hidden, noise_scale)
    guest.init_noise(host.out_dim)
    return BaselineFederation(host, guest, channel, server)


def baseline_forward_round(fed: BaselineFederation, ids: Sequence[str]) -> RoundOutput:
    return fed.host.forward_round(ids)


def baseline_backward_round(fed: BaselineFederation, labels: np.ndarray) -> float:
    return fed.host.backward_round(labels)


def baseline_train(fed: BaselineFederation, train_ids: Sequence[str], epochs: int, batch_size: int = 128,
                   seed: int = 0) -> BaselineResult:
    """Mini-batch training with encryption on; wall-clock covers the whole loop."""
    train_ids = list(train_ids)
    host = fed.host
    y_all = host.data.labels[host.data.row_indices(train_ids)]
    history = []
    start = time.perf_counter()
    for epoch in range(epochs):
        loss_sum, correct = 0.0, 0
        for idx in minibatches(len(train_ids), batch_size, seed, epoch):
            ids = [train_ids[i] for i in idx]
            out = host.forward_round(ids)
            yb = y_all[idx]
            loss_sum += host.backward_round(yb) * len(idx)
            correct += int(np.sum((positive_probability(out.predictions)[:, 0] >= 0.5) == (yb == 1)))
        history.append(BaselineEpoch(epoch + 1, loss_sum / len(train_ids), correct / len(train_ids)))
        log.debug("baseline epoch %d loss %.5f", epoch + 1, history[-1].loss)
    seconds = time.perf_counter() - start
    return BaselineResult(history, seconds, fed.channel.bytes_sent + fed.channel.bytes_received)
