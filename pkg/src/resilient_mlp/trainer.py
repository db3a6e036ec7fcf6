"""Training regimes: plain backprop, sensitivity-regularized, hardware-aware.

``train_combined`` chains the sensitivity-regularized phase ("act") with a
short hardware-aware fine-tuning phase ("pas").

Every run derives two independent streams from its seed: one for epoch
shuffling and one for hardware noise.  Act and bp runs therefore see the
same batch order, so an act run whose gamma never leaves zero reproduces
the bp run bit for bit.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .fixedpoint import HardwareModel
from .linalg import Rng
from .network import Mlp, accuracy, backward, forward, loss, predicted_labels, sgd_step
from .sensitivity import SensitivityState, sensitivity_gradient, sensitivity_value, update_gamma

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    eta: float = 0.5
    epochs_act: int = 100  # also the epoch budget of plain bp
    epochs_pas: int = 10
    batch_size: int = 16
    seed: int = 0
    accuracy_bound: float = 0.0
    delta_gamma: float | None = None  # None: auto-scaled from the initial loss
    delta_gamma_scale: float = 1e-4
    hw: HardwareModel | None = None
    shuffle: bool = True
    eta_pas: float | None = None  # None: eta / 10
    converge_tol: float = 1e-4
    converge_window: int = 5  # 0 disables early stopping of the act phase
    monitor_samples: int = 512  # train rows used for per-epoch S(w)

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_act < 0 or self.epochs_pas < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float | None
    test_accuracy_noisy: float | None
    sensitivity: float
    gamma: float

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class _Streams:
    shuffle: Rng
    noise: Rng


def _streams(seed: int) -> _Streams:
    shuffle, noise = np.random.SeedSequence(seed).spawn(2)
    return _Streams(Rng(shuffle), Rng(noise))


def _batches(n: int, batch_size: int, rng: Rng, shuffle: bool):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _monitor(data: Dataset, cfg: TrainConfig) -> np.ndarray:
    return data.features[: min(cfg.monitor_samples, len(data))]


def _guard(net: Mlp, value: float, phase: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value) or not net.all_finite():
        raise TrainingDiverged(f"{phase} phase diverged at epoch {epoch}, batch {batch} (loss={value})")


@contextmanager
def _divergence_guard(net: Mlp, phase: str, epoch: int):
    """Turn overflow anywhere in an epoch into TrainingDiverged."""
    try:
        yield
    except (FloatingPointError, ValueError) as err:
        if isinstance(err, TrainingDiverged):
            raise
        # Shape errors with finite weights are bugs, not divergence.
        if not isinstance(err, FloatingPointError) and net.all_finite():
            raise
        raise TrainingDiverged(f"{phase} phase diverged at epoch {epoch}: {err}") from err


def _eval_test(net: Mlp, test: Dataset | None, hw: HardwareModel | None, rng: Rng | None):
    if test is None:
        return None
    return accuracy(forward(net, test.features, hw, rng).outputs, test.labels)


def _run_epochs(
    net: Mlp,
    data: Dataset,
    cfg: TrainConfig,
    phase: str,
    epochs: int,
    test: Dataset | None,
    state: SensitivityState | None = None,
    records: list[EpochRecord] | None = None,
    start_epoch: int = 0,
) -> tuple[Mlp, list[EpochRecord], SensitivityState | None]:
    streams = _streams(cfg.seed)
    records = [] if records is None else records
    hw = cfg.hw if phase == "pas" else None
    eta = cfg.eta if phase != "pas" else (cfg.eta_pas if cfg.eta_pas is not None else cfg.eta / 10)
    monitor = _monitor(data, cfg)
    targets_all = data.targets(width=net.topology[-1])
    history_s: list[float] = []
    history_e: list[float] = []

    for epoch in range(start_epoch, start_epoch + epochs):
        gamma = state.gamma if (phase == "act" and state is not None) else 0.0
        losses, hits, seen = [], 0, 0
        with _divergence_guard(net, phase, epoch):
            for bi, idx in enumerate(_batches(len(data), cfg.batch_size, streams.shuffle, cfg.shuffle)):
                x, t = data.features[idx], targets_all[idx]
                trace = forward(net, x, hw, streams.noise if hw is not None else None)
                batch_loss = loss(trace.outputs, t)
                _guard(net, batch_loss, phase, epoch, bi)
                grads = backward(net, trace, t)
                if gamma > 0.0:
                    grads = grads + sensitivity_gradient(net, x).scaled(gamma)
                if not grads.all_finite():
                    raise TrainingDiverged(f"{phase} phase: non-finite gradient at epoch {epoch}, batch {bi}")
                sgd_step(net, grads, eta)
                _guard(net, batch_loss, phase, epoch, bi)
                losses.append(batch_loss * len(idx))
                hits += int(np.sum(predicted_labels(trace.outputs) == data.labels[idx]))
                seen += len(idx)

            train_loss = float(np.sum(losses) / seen)
            train_acc = hits / seen
            s_val = sensitivity_value(net, monitor)
            if phase == "act" and state is not None:
                state = update_gamma(state, 1.0 - train_acc)
            rec = EpochRecord(
                phase=phase,
                epoch=epoch,
                train_loss=train_loss,
                train_accuracy=train_acc,
                test_accuracy=_eval_test(net, test, None, None),
                test_accuracy_noisy=_eval_test(net, test, hw, streams.noise) if hw is not None else None,
                sensitivity=s_val,
                gamma=state.gamma if state is not None else 0.0,
            )
        records.append(rec)
        log.debug("%s epoch %d loss %.5f acc %.4f S %.4f gamma %.3g", phase, epoch, train_loss, train_acc, s_val, rec.gamma)

        if phase == "act" and cfg.converge_window > 0:
            history_e.append(train_loss)
            history_s.append(s_val)
            if _converged(history_e, cfg) and _converged(history_s, cfg):
                log.info("act phase converged after %d epochs", epoch + 1)
                break
    return net, records, state


def _converged(history: list[float], cfg: TrainConfig) -> bool:
    w = cfg.converge_window
    if len(history) <= w:
        return False
    recent = np.asarray(history[-(w + 1) :])
    rel = np.abs(np.diff(recent)) / np.maximum(np.abs(recent[:-1]), 1e-300)
    return bool(np.all(rel < cfg.converge_tol))


def initial_state(net: Mlp, data: Dataset, cfg: TrainConfig) -> SensitivityState:
    """Start at gamma = 0 with a step scaled to the initial loss."""
    if cfg.delta_gamma is not None:
        step = cfg.delta_gamma
    else:
        x = _monitor(data, cfg)
        e0 = loss(forward(net, x).outputs, data.targets(slice(0, len(x)), net.topology[-1]))
        step = cfg.delta_gamma_scale * e0
    return SensitivityState(gamma=0.0, delta_gamma=step, accuracy_bound=cfg.accuracy_bound)


def train_bp(net: Mlp, data: Dataset, cfg: TrainConfig, test: Dataset | None = None):
    if len(data) == 0:
        raise ValueError("empty training set")
    net, records, _ = _run_epochs(net, data, cfg, "bp", cfg.epochs_act, test)
    return net, records


def train_act(net: Mlp, data: Dataset, cfg: TrainConfig, test: Dataset | None = None):
    if len(data) == 0:
        raise ValueError("empty training set")
    state = initial_state(net, data, cfg)
    net, records, _ = _run_epochs(net, data, cfg, "act", cfg.epochs_act, test, state)
    return net, records


def train_pas(net: Mlp, data: Dataset, cfg: TrainConfig, test: Dataset | None = None, records=None, start_epoch=0):
    if len(data) == 0:
        raise ValueError("empty training set")
    if cfg.hw is None:
        raise ValueError("the pas phase needs a hardware model")
    net, records, _ = _run_epochs(net, data, cfg, "pas", cfg.epochs_pas, test, records=records, start_epoch=start_epoch)
    return net, records


def train_combined(net: Mlp, data: Dataset, cfg: TrainConfig, test: Dataset | None = None):
    """Act phase to convergence (or its budget), then the pas fine-tune."""
    net, records = train_act(net, data, cfg, test)
    if cfg.epochs_pas == 0:
        return net, records
    return train_pas(net, data, cfg, test, records=records, start_epoch=len(records))


REGIMES = {
    "bp": train_bp,
    "act": train_act,
    "pas": train_pas,
    "combined": train_combined,
}
