"""Self-taught federated learning: frozen guest encoders, host-trained master model.

Guests pre-train a VAE on rows the host never sees, freeze it, and from then
on only ever answer latent requests. The host aligns IDs by PSI, pulls latent
batches for the rows it trains on, and fits its classifier on
``[x_host, a_1, ..., a_K]``. No gradient ever travels back to a guest.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .data import FeatureNoveltyError, IdOverlapError, PartyDataset
from .messages import (
    Control,
    IdList,
    MessageType,
    ProtocolError,
    ProtocolMessage,
    RowBatch,
    Schema,
    STFL_MESSAGE_TYPES,
)
from .nn import (
    Activation,
    AdamState,
    MlpModel,
    TrainConfig,
    as_column,
    build_mlp,
    classifier_step,
    dense_forward,
    derive_rng,
    minibatches,
)
from .paillier import RandomSource
from .psi import MODP_2048, EmptyIntersectionError, PrimeOrderGroup, PsiGuestSession, run_psi
from .transport import Channel, TcpPartyServer, connect
from .vae import VaeModel, VaeSizing, encode, train_vae

log = logging.getLogger(__name__)

HIDDEN_FACTOR = 5
_SEED_MASTER = 0x4D415354
_SEED_LATENT_NOISE = 0x4C4E


def build_master_model(input_width: int, seed: int, hidden_factor: int = HIDDEN_FACTOR) -> MlpModel:
    """One Tanh hidden layer of ``hidden_factor * input_width`` units and a sigmoid output."""
    rng = derive_rng(seed, _SEED_MASTER)
    return build_mlp([input_width, hidden_factor * input_width, 1],
                     [Activation.TANH, Activation.SIGMOID], rng)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


def fit_classifier(model: MlpModel, fetch: Callable[[np.ndarray], np.ndarray],
                   labels: np.ndarray, config: TrainConfig) -> List["EpochMetrics"]:
    """Mini-batch Adam on BCE; ``fetch`` maps row indices to an input batch."""
    y_all = as_column(labels)
    n = y_all.shape[0]
    state = AdamState.zeros_like(model.parameters())
    history = []
    for epoch in range(config.epochs):
        loss_sum, correct = 0.0, 0
        for idx in minibatches(n, config.batch_size, config.rng_seed, epoch):
            yb = y_all[idx]
            loss, out, _ = classifier_step(model, state, fetch(idx), yb, config.learning_rate)
            correct += int(np.sum((out >= 0.5) == (yb == 1)))
            loss_sum += loss * len(idx)
        history.append(EpochMetrics(epoch + 1, loss_sum / n, correct / n))
        log.debug("epoch %d loss %.5f", epoch + 1, history[-1].loss)
    return history


@dataclass
class TrainResult:
    model: MlpModel
    history: List[EpochMetrics]
    seconds: float


class GuestParty:
    """A feature-holding party.

    ``self_taught`` holds rows whose IDs never enter joint training; ``data``
    holds the rows that may be aligned with the host.
    """

    def __init__(self, party_id: int, data: PartyDataset, self_taught: Optional[PartyDataset] = None,
                 vae: Optional[VaeModel] = None, latent_mode: str = "mean",
                 psi_mode: str = "blinded", psi_group: PrimeOrderGroup = MODP_2048,
                 seed: int = 0):
        if party_id <= 0:
            raise ValueError("party id 0 is reserved for the host")
        if latent_mode not in ("mean", "sample"):
            raise ValueError("latent_mode must be 'mean' or 'sample'")
        self.party_id = party_id
        self.data = data
        self.self_taught = self_taught
        self.vae = vae
        self.latent_mode = latent_mode
        self.psi_mode = psi_mode
        self.psi_group = psi_group
        self.seed = seed
        self.frozen_fingerprint: Optional[str] = None
        self.intersection: Optional[List[str]] = None
        self._psi: Optional[PsiGuestSession] = None
        self._noise_rng = derive_rng(seed, _SEED_LATENT_NOISE, party_id)
        if self_taught is not None:
            overlap = set(self_taught.ids) & set(data.ids)
            if overlap:
                raise ValueError(f"self-taught rows overlap the joint rows (e.g. {next(iter(overlap))!r})")

    @property
    def latent_width(self) -> int:
        if self.vae is None:
            raise RuntimeError(f"guest {self.party_id} has no encoder yet")
        return self.vae.n_z

    def fingerprint(self) -> str:
        if self.vae is None:
            raise RuntimeError(f"guest {self.party_id} has no encoder yet")
        return self.vae.fingerprint()

    def freeze(self) -> str:
        self.frozen_fingerprint = self.fingerprint()
        return self.frozen_fingerprint

    def assert_frozen(self) -> None:
        if self.frozen_fingerprint is None:
            raise RuntimeError("encoder was never frozen")
        if self.fingerprint() != self.frozen_fingerprint:
            raise AssertionError(f"guest {self.party_id} encoder changed after freezing")

    def encode_batch(self, ids: Sequence[str]) -> np.ndarray:
        if self.vae is None:
            raise RuntimeError(f"guest {self.party_id} has no encoder yet")
        for i in ids:
            if not self.data.has(i):
                raise ProtocolError(f"guest {self.party_id} has no row for id {i!r}")
        mu, logvar = encode(self.vae, self.data.rows(ids))
        if self.latent_mode == "mean":
            return mu
        return mu + np.exp(0.5 * logvar) * self._noise_rng.standard_normal(mu.shape)

    def handle(self, msg: ProtocolMessage) -> ProtocolMessage:
        t = msg.type
        if t is MessageType.SCHEMA_REQUEST:
            if self.frozen_fingerprint is None:
                self.freeze()
            return self._reply(MessageType.SCHEMA, Schema(list(self.data.feature_names), self.latent_width))
        if t in (MessageType.PSI_BLINDED, MessageType.PSI_REQUEST, MessageType.INTERSECTION):
            if t is MessageType.PSI_BLINDED or self._psi is None:
                self._psi = PsiGuestSession(self.data.ids, self.psi_mode, self.psi_group,
                                            RandomSource(f"guest-psi-{self.seed}-{self.party_id}"))
            reply = self._psi.handle(msg, self.party_id)
            if t is MessageType.INTERSECTION:
                self.intersection = self._psi.intersection
            return reply
        if t is MessageType.LATENT_REQUEST:
            ids = msg.payload.ids
            if self.intersection is not None:
                allowed = set(self.intersection)
                stray = [i for i in ids if i not in allowed]
                if stray:
                    raise ProtocolError(f"id {stray[0]!r} is outside the agreed intersection")
            return self._reply(MessageType.LATENT_BATCH, RowBatch(list(ids), self.encode_batch(ids)))
        if t in (MessageType.PREDICTIONS, MessageType.SHUTDOWN):
            return self._reply(MessageType.ACK, Control())
        raise ProtocolError(f"guest {self.party_id} does not accept {t.name}")

    def _reply(self, mtype: MessageType, payload) -> ProtocolMessage:
        return ProtocolMessage(self.party_id, mtype, payload)


def guest_selftrain(guest: GuestParty, config: TrainConfig, sizing: Optional[VaeSizing] = None) -> VaeModel:
    """Train the guest's VAE on its self-taught rows and freeze it."""
    if guest.self_taught is None or len(guest.self_taught) == 0:
        raise ValueError(f"guest {guest.party_id} has an empty self-taught set")
    sizing = sizing or VaeSizing(guest.self_taught.n_features)
    guest.vae = train_vae(guest.self_taught.features, sizing, config)
    guest.freeze()
    return guest.vae


def guest_encode_batch(guest: GuestParty, ids: Sequence[str]) -> np.ndarray:
    return guest.encode_batch(ids)


@dataclass
class GuestLink:
    party_id: int
    channel: Channel
    server: Optional[TcpPartyServer] = None
    schema: Optional[Schema] = None

    def close(self) -> None:
        self.channel.close()
        if self.server is not None:
            self.server.close()


@dataclass
class HostParty:
    data: PartyDataset
    links: List[GuestLink] = field(default_factory=list)
    model: Optional[MlpModel] = None
    aligned_ids: Optional[List[str]] = None
    psi_mode: str = "blinded"
    psi_group: PrimeOrderGroup = MODP_2048
    seed: int = 0

    def __post_init__(self) -> None:
        if self.data.labels is None:
            raise ValueError("the host must hold labels")
        if not np.all((self.data.labels == 0) | (self.data.labels == 1)):
            raise ValueError("host labels must be 0/1")

    def connect(self, guests: Sequence[GuestParty], transport: str = "in-process", record: bool = False) -> None:
        for g in guests:
            channel, server = connect(g.handle, transport, STFL_MESSAGE_TYPES, record)
            self.links.append(GuestLink(g.party_id, channel, server))

    def close(self) -> None:
        for link in self.links:
            try:
                link.channel.request(MessageType.SHUTDOWN, Control())
            except Exception:  # best effort on teardown
                pass
            link.close()
        self.links = []

    @property
    def input_width(self) -> int:
        return self.data.n_features + sum(l.schema.latent_width for l in self.links)

    def gather(self, ids: Sequence[str]) -> np.ndarray:
        """Host features and guest latents for ``ids``, concatenated in guest order."""
        ids = list(ids)

        def pull(link: GuestLink) -> np.ndarray:
            reply = link.channel.request(MessageType.LATENT_REQUEST, IdList(ids))
            if reply.type is not MessageType.LATENT_BATCH:
                raise ProtocolError(f"expected LATENT_BATCH from guest {link.party_id}, got {reply.type.name}")
            batch: RowBatch = reply.payload
            if batch.ids != ids:
                raise ProtocolError(f"guest {link.party_id} returned rows out of order")
            if batch.matrix.shape[1] != link.schema.latent_width:
                raise ProtocolError(f"guest {link.party_id} latent width changed")
            return batch.matrix

        if len(self.links) > 1:
            with ThreadPoolExecutor(len(self.links)) as pool:
                latents = list(pool.map(pull, self.links))
        else:
            latents = [pull(l) for l in self.links]
        return np.hstack([self.data.rows(ids), *latents])


@dataclass
class SetupResult:
    aligned_ids: List[str]
    input_width: int
    schemas: List[Schema]


def stfl_setup(host: HostParty, seed: Optional[int] = None) -> SetupResult:
    """Exchange schemas, check feature novelty, align IDs and size the master model."""
    if not host.links:
        raise ValueError("host has no connected guests")
    seed = host.seed if seed is None else seed
    host_names = set(host.data.feature_names)
    for link in host.links:
        link.schema = link.channel.request(MessageType.SCHEMA_REQUEST, Control()).payload
        if not set(link.schema.feature_names) - host_names:
            raise FeatureNoveltyError(
                f"guest {link.party_id} contributes no feature outside the host's feature space"
            )
    aligned = set(host.data.ids)
    for link in host.links:
        try:
            common = run_psi(link.channel, host.data.ids, host.psi_mode, host.psi_group,
                             RandomSource(f"host-psi-{seed}-{link.party_id}"))
        except EmptyIntersectionError as exc:
            raise IdOverlapError(f"host and guest {link.party_id} share no IDs") from exc
        aligned &= set(common)
    if not aligned:
        raise IdOverlapError("no ID is shared by the host and every guest")
    host.aligned_ids = sorted(aligned)
    host.model = build_master_model(host.input_width, seed)
    return SetupResult(host.aligned_ids, host.input_width, [l.schema for l in host.links])


def joint_train(host: HostParty, train_ids: Sequence[str], config: TrainConfig,
                guests: Sequence[GuestParty] = ()) -> TrainResult:
    """Fit the master model with Adam; guests only ever serve latents.

    When local guest objects are passed their frozen fingerprints are checked
    once training ends.
    """
    if host.model is None or host.aligned_ids is None:
        raise RuntimeError("run stfl_setup first")
    allowed = set(host.aligned_ids)
    stray = [i for i in train_ids if i not in allowed]
    if stray:
        raise ValueError(f"training id {stray[0]!r} is not in the aligned set")
    train_ids = list(train_ids)
    y = host.data.labels[host.data.row_indices(train_ids)]
    start = time.perf_counter()
    history = fit_classifier(host.model, lambda idx: host.gather([train_ids[i] for i in idx]),
                             y, config)
    seconds = time.perf_counter() - start
    for g in guests:
        g.assert_frozen()
    return TrainResult(host.model, history, seconds)


def predict(host: HostParty, ids: Sequence[str], share: bool = False) -> np.ndarray:
    """Master-model probabilities for ``ids``.

    With ``share=True`` the predictions are also sent to every guest.
    """
    if host.model is None:
        raise RuntimeError("no trained master model")
    ids = list(ids)
    out = dense_forward(host.model, host.gather(ids))[0]
    if share:
        for link in host.links:
            link.channel.request(MessageType.PREDICTIONS, RowBatch(ids, out))
    return out
