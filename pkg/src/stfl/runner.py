"""Experiment harness: STFL, the encrypted baseline and two plaintext comparators.

Every run goes through the same preparation: load, vertical split, seeded
partition, standardization. Each method then returns a :class:`RunReport`,
and :func:`report` turns a list of reports into accuracy, confusion-matrix
and timing tables plus one JSON record per report.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baseline import DEFAULT_SGD_RATE, build_federation
from .data import (
    PartitionSpec,
    PartyDataset,
    VerticalSplitSpec,
    compute_stats,
    load_csv,
    load_named,
    partition,
    schema_from_header,
    standardize,
    vertical_split,
)
from .nn import (
    AdamState,
    TrainConfig,
    adam_step,
    as_column,
    classifier_step,
    dense_forward,
    derive_rng,
    minibatches,
    mlp_backward,
)
from .psi import GROUPS, psi_intersect
from .paillier import RandomSource
from .stfl import (
    GuestParty,
    HostParty,
    build_master_model,
    fit_classifier,
    guest_selftrain,
    joint_train,
    predict,
    stfl_setup,
)
from .vae import VaeModel, VaeSizing

log = logging.getLogger(__name__)

METHODS = ("stfl", "baseline", "centralized", "hierarchical")
TRANSPORTS = ("in-process", "tcp")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
_SEED_HIER = 0x41E2


@dataclass
class ExperimentConfig:
    method: str = "stfl"
    dataset: str = "cancer"
    data_dir: Optional[str] = None
    id_column: str = "id"
    label_column: str = "y"
    subsample: Optional[int] = None
    host_features: Optional[List[str]] = None
    guest_features: Optional[List[List[str]]] = None
    n_guests: int = 1
    fractions: Tuple[float, float, float] = (0.4, 0.4, 0.2)
    seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    epochs: int = 100
    vae_epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.001
    baseline_learning_rate: float = DEFAULT_SGD_RATE
    key_bits: int = 512
    all_data: bool = False
    transport: str = "in-process"
    psi_mode: str = "blinded"
    psi_group: str = "modp2048"
    latent_mode: str = "mean"
    output_dir: Optional[str] = None

    def __post_init__(self) -> None:
        self.fractions = tuple(self.fractions)
        self.seeds = list(self.seeds)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if self.all_data and self.method == "stfl":
            raise ValueError("all_data does not apply to stfl: the self-taught split trains the guest encoders")
        if self.psi_group not in GROUPS:
            raise ValueError(f"unknown PSI group {self.psi_group!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if (self.host_features is None) != (self.guest_features is None):
            raise ValueError("give both host_features and guest_features, or neither")

    @property
    def label(self) -> str:
        return f"{self.method} (all data)" if self.all_data else self.method

    def train_config(self, seed: int, epochs: Optional[int] = None) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, epochs or self.epochs, seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path, overrides: Optional[dict] = None) -> "ExperimentConfig":
        """Flags in ``overrides`` are applied first; the file wins on conflicts."""
        merged = dict(overrides or {})
        merged.update(json.loads(Path(path).read_text()))
        return cls.from_dict(merged)


# -- metrics ---------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    confusion: List[List[int]]  # rows = true class 0/1, columns = predicted 0/1


def compute_metrics(predictions, labels, threshold: float = 0.5) -> Metrics:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    hat = (p >= threshold).astype(int)
    truth = (y == 1).astype(int)
    cm = np.zeros((2, 2), dtype=int)
    np.add.at(cm, (truth, hat), 1)
    total = int(cm.sum())
    acc = (cm[0, 0] + cm[1, 1]) / total if total else float("nan")
    return Metrics(float(acc), cm.tolist())


def confusion_accuracy(confusion: Sequence[Sequence[int]]) -> float:
    tn, fp = confusion[0]
    fn, tp = confusion[1]
    return (tn + tp) / (tn + fp + fn + tp)


@dataclass
class RunReport:
    method: str
    dataset: str
    seed: int
    accuracy: float
    confusion: List[List[int]]
    train_seconds: float
    pretrain_seconds: float = 0.0
    loss_curve: List[float] = field(default_factory=list)
    extras: Dict[str, object] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunReport":
        return cls(**json.loads(line))

    def comparable(self) -> dict:
        """Everything except wall-clock fields."""
        d = dataclasses.asdict(self)
        d.pop("train_seconds")
        d.pop("pretrain_seconds")
        return d


# -- data preparation ------------------------------------------------------------

@dataclass
class PreparedData:
    host: PartyDataset
    guests: List[PartyDataset]
    self_taught: List[PartyDataset]
    self_taught_ids: List[str]
    train_ids: List[str]
    test_ids: List[str]


def load_dataset(config: ExperimentConfig, seed: int = 0) -> PartyDataset:
    if config.dataset.endswith(".csv"):
        schema = schema_from_header(config.dataset, config.id_column, config.label_column)
        ds = load_csv(config.dataset, schema)
        if config.subsample is not None and config.subsample < len(ds):
            pick = np.sort(np.random.default_rng(seed).choice(len(ds), config.subsample, replace=False))
            ds = ds.subset([ds.ids[i] for i in pick])
        return ds
    # the subsample is fixed across seeds so that seeds only vary the partition
    return load_named(config.dataset, config.data_dir, config.subsample, 0)


def split_spec(config: ExperimentConfig, dataset: PartyDataset) -> VerticalSplitSpec:
    if config.host_features is not None:
        return VerticalSplitSpec(list(config.host_features), [list(g) for g in config.guest_features])
    return VerticalSplitSpec.default(dataset.feature_names, config.n_guests)


def prepare(config: ExperimentConfig, seed: int, dataset: Optional[PartyDataset] = None) -> PreparedData:
    """Split, partition and standardize.

    Host columns use training-split statistics. For STFL the guests standardize
    with their self-taught statistics, the only rows they learn from; the other
    methods treat guest columns like host columns. With ``all_data`` the
    self-taught rows join the training split.
    """
    ds = dataset if dataset is not None else load_dataset(config, seed)
    host_all, guests_all = vertical_split(ds, split_spec(config, ds))
    st, tr, te = partition(ds.ids, PartitionSpec(*config.fractions, seed=seed))
    if config.all_data:
        tr, st = st + tr, []
    joint = tr + te
    host = standardize(host_all.subset(joint), compute_stats(host_all.subset(tr)))
    guests, taught = [], []
    for g in guests_all:
        if config.method == "stfl":
            stats = compute_stats(g.subset(st))
            taught.append(standardize(g.subset(st), stats))
        else:
            stats = compute_stats(g.subset(tr))
        guests.append(standardize(g.subset(joint), stats))
    return PreparedData(host, guests, taught, st, tr, te)


def _finish(config: ExperimentConfig, seed: int, prep: PreparedData, probs: np.ndarray,
            train_seconds: float, curve: List[float], pretrain: float = 0.0, **extras) -> RunReport:
    labels = prep.host.labels[prep.host.row_indices(prep.test_ids)]
    m = compute_metrics(probs, labels)
    return RunReport(config.label, config.dataset, seed, m.accuracy, m.confusion, train_seconds,
                     pretrain, [float(v) for v in curve], dict(extras), config.to_dict())


# -- methods ---------------------------------------------------------------------

def run_centralized(config: ExperimentConfig, seed: int, prep: Optional[PreparedData] = None) -> RunReport:
    """All features pooled in one place; same master network as STFL."""
    prep = prep or prepare(config, seed)
    parties = [prep.host, *prep.guests]

    def features(ids):
        return np.hstack([p.rows(ids) for p in parties])

    x_train = features(prep.train_ids)
    y = prep.host.labels[prep.host.row_indices(prep.train_ids)]
    model = build_master_model(x_train.shape[1], seed)
    start = time.perf_counter()
    history = fit_classifier(model, lambda idx: x_train[idx], y, config.train_config(seed))
    seconds = time.perf_counter() - start
    probs = dense_forward(model, features(prep.test_ids))[0]
    return _finish(config, seed, prep, probs, seconds, [h.loss for h in history])


def run_hierarchical(config: ExperimentConfig, seed: int, prep: Optional[PreparedData] = None) -> RunReport:
    """Guest encoders of the STFL shape, randomly initialized and trained end-to-end.

    The host sends plaintext gradients for the latent mean back across the
    concatenation boundary; the log-variance head receives none.
    """
    prep = prep or prepare(config, seed)
    encoders = [VaeModel.initialize(VaeSizing(g.n_features), derive_rng(seed, _SEED_HIER, k)).encoder
                for k, g in enumerate(prep.guests)]
    widths = [e.output_dim // 2 for e in encoders]
    before = [e.fingerprint() for e in encoders]
    tr = prep.train_ids
    x_host = prep.host.rows(tr)
    x_guest = [g.rows(tr) for g in prep.guests]
    y_all = as_column(prep.host.labels[prep.host.row_indices(tr)])
    master = build_master_model(prep.host.n_features + sum(widths), seed)
    cfg = config.train_config(seed)
    m_state = AdamState.zeros_like(master.parameters())
    e_states = [AdamState.zeros_like(e.parameters()) for e in encoders]
    curve = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        for idx in minibatches(len(tr), cfg.batch_size, cfg.rng_seed, epoch):
            fwd = [dense_forward(e, xg[idx]) for e, xg in zip(encoders, x_guest)]
            mus = [out[:, :w] for (out, _), w in zip(fwd, widths)]
            loss, _, gin = classifier_step(master, m_state, np.hstack([x_host[idx], *mus]), y_all[idx],
                                           cfg.learning_rate)
            loss_sum += loss * len(idx)
            offset = prep.host.n_features
            for k, (enc, (out, cache), w) in enumerate(zip(encoders, fwd, widths)):
                g_out = np.zeros_like(out)
                g_out[:, :w] = gin[:, offset:offset + w]
                offset += w
                grads, _ = mlp_backward(enc, cache, g_out)
                params, e_states[k] = adam_step(enc.parameters(), grads, e_states[k], cfg.learning_rate)
                enc.set_parameters(params)
        curve.append(loss_sum / len(tr))
    seconds = time.perf_counter() - start
    te = prep.test_ids
    mus = [dense_forward(e, g.rows(te))[0][:, :w] for e, g, w in zip(encoders, prep.guests, widths)]
    probs = dense_forward(master, np.hstack([prep.host.rows(te), *mus]))[0]
    after = [e.fingerprint() for e in encoders]
    return _finish(config, seed, prep, probs, seconds, curve,
                   guest_fingerprints_before=before, guest_fingerprints_after=after)


def run_stfl(config: ExperimentConfig, seed: int, prep: Optional[PreparedData] = None) -> RunReport:
    """Self-train and freeze guest VAEs, align IDs by PSI, then train the master model.

    ``train_seconds`` covers joint training only; VAE training is reported as
    ``pretrain_seconds``.
    """
    prep = prep or prepare(config, seed)
    group = GROUPS[config.psi_group]
    guests = [GuestParty(k + 1, g, st, latent_mode=config.latent_mode, psi_mode=config.psi_mode,
                         psi_group=group, seed=seed)
              for k, (g, st) in enumerate(zip(prep.guests, prep.self_taught))]
    start = time.perf_counter()
    for g in guests:
        guest_selftrain(g, config.train_config(seed, config.vae_epochs))
    pretrain = time.perf_counter() - start
    before = [g.fingerprint() for g in guests]
    host = HostParty(prep.host, psi_mode=config.psi_mode, psi_group=group, seed=seed)
    host.connect(guests, config.transport, record=True)
    try:
        setup = stfl_setup(host)
        result = joint_train(host, prep.train_ids, config.train_config(seed), guests)
        probs = predict(host, prep.test_ids, share=True)
        sent = sum(l.channel.bytes_sent + l.channel.bytes_received for l in host.links)
    finally:
        host.close()
    after = [g.fingerprint() for g in guests]
    return _finish(config, seed, prep, probs, result.seconds, [h.loss for h in result.history], pretrain,
                   guest_fingerprints_before=before, guest_fingerprints_after=after,
                   aligned=len(setup.aligned_ids), bytes_exchanged=sent,
                   vae_loss_curve=[s.total for s in guests[0].vae.training_log])


def run_baseline(config: ExperimentConfig, seed: int, prep: Optional[PreparedData] = None) -> RunReport:
    """The Paillier-masked protocol with a single guest."""
    from .baseline import baseline_train

    prep = prep or prepare(config, seed)
    if len(prep.guests) != 1:
        raise ValueError("the encrypted baseline supports exactly one guest")
    guest_data = prep.guests[0]
    aligned = psi_intersect(prep.host.ids, guest_data.ids, config.psi_mode, GROUPS[config.psi_group],
                            RandomSource(f"baseline-psi-{seed}"))
    keep = set(aligned)
    train_ids = [i for i in prep.train_ids if i in keep]
    fed = build_federation(prep.host, guest_data, config.baseline_learning_rate, config.key_bits, seed,
                           transport=config.transport)
    try:
        result = baseline_train(fed, train_ids, config.epochs, config.batch_size, seed)
        probs = fed.host.predict(prep.test_ids, config.batch_size)
    finally:
        fed.close()
    return _finish(config, seed, prep, probs, result.seconds, [h.loss for h in result.history],
                   bytes_exchanged=result.bytes_exchanged, key_bits=config.key_bits)


RUNNERS = {
    "stfl": run_stfl,
    "baseline": run_baseline,
    "centralized": run_centralized,
    "hierarchical": run_hierarchical,
}


def run_experiment(config: ExperimentConfig) -> List[RunReport]:
    """One report per configured seed; the dataset is loaded once."""
    dataset = load_dataset(config)
    reports = []
    for seed in config.seeds:
        prep = prepare(config, seed, dataset)
        r = RUNNERS[config.method](config, seed, prep)
        log.info("%s %s seed %d accuracy %.4f", r.method, r.dataset, seed, r.accuracy)
        reports.append(r)
    if config.output_dir:
        write_reports(reports, config.output_dir)
    return reports


# -- reporting -------------------------------------------------------------------

def _ordered(values) -> list:
    out = []
    for v in values:
        if v not in out:
            out.append(v)
    return out


def _mean_std(xs: Sequence[float]) -> Tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def summarize(reports: Sequence[RunReport]) -> List[dict]:
    rows = []
    for method in _ordered(r.method for r in reports):
        for dataset in _ordered(r.dataset for r in reports):
            group = [r for r in reports if r.method == method and r.dataset == dataset]
            if not group:
                continue
            acc, acc_sd = _mean_std([r.accuracy for r in group])
            cm = np.sum([r.confusion for r in group], axis=0).tolist()
            rows.append({
                "method": method, "dataset": dataset, "seeds": [r.seed for r in group],
                "accuracy": acc, "accuracy_std": acc_sd, "confusion": cm,
                "train_seconds": _mean_std([r.train_seconds for r in group])[0],
                "pretrain_seconds": _mean_std([r.pretrain_seconds for r in group])[0],
            })
    return rows


def report(reports: Sequence[RunReport]) -> Tuple[str, str]:
    """Human-readable tables and line-delimited JSON (one record per report)."""
    if not reports:
        raise ValueError("nothing to report")
    rows = summarize(reports)
    methods = _ordered(r["method"] for r in rows)
    datasets = _ordered(r["dataset"] for r in rows)
    cell = {(r["method"], r["dataset"]): r for r in rows}
    width = max(14, *(len(m) + 2 for m in methods))

    lines = ["Accuracy (%, mean ± std over seeds)", "method".ljust(width) + "".join(d.rjust(18) for d in datasets)]
    for m in methods:
        line = m.ljust(width)
        for d in datasets:
            r = cell.get((m, d))
            line += (f"{100 * r['accuracy']:.2f} ± {100 * r['accuracy_std']:.2f}" if r else "-").rjust(18)
        lines.append(line)

    lines += ["", "Confusion matrices (rows: true 0/1, columns: predicted 0/1; summed over seeds)"]
    for r in rows:
        (tn, fp), (fn, tp) = r["confusion"]
        lines.append(f"{r['method']} / {r['dataset']} ({len(r['seeds'])} seeds)")
        lines.append(f"  {tn:>7d} {fp:>7d}")
        lines.append(f"  {fn:>7d} {tp:>7d}")

    lines += ["", "Training time (s, mean over seeds)",
              "method".ljust(width) + "dataset".rjust(12) + "joint".rjust(12) + "pretrain".rjust(12)]
    for r in rows:
        lines.append(r["method"].ljust(width) + r["dataset"].rjust(12)
                     + f"{r['train_seconds']:.2f}".rjust(12) + f"{r['pretrain_seconds']:.2f}".rjust(12))
    text = "\n".join(lines) + "\n"
    records = "".join(r.to_json() + "\n" for r in reports)
    return text, records


def parse_records(text: str) -> List[RunReport]:
    return [RunReport.from_json(line) for line in text.splitlines() if line.strip()]


def write_reports(reports: Sequence[RunReport], output_dir) -> Tuple[Path, Path]:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, records = report(reports)
    jsonl = out / "reports.jsonl"
    with jsonl.open("a") as fh:
        fh.write(records)
    txt = out / "report.txt"
    txt.write_text(report(parse_records(jsonl.read_text()))[0])
    return txt, jsonl
