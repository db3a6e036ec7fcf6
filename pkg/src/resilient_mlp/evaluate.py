"""Accuracy and loss of trained nets under hardware sweeps, plus cost ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .fixedpoint import DEFAULT_MODE_K, HardwareModel
from .linalg import Rng
from .network import Mlp, accuracy, forward, loss


@dataclass
class HwResult:
    regime: str
    hw: HardwareModel
    runs: int
    mean_accuracy: float
    std_accuracy: float
    mean_loss: float
    std_loss: float
    baseline_loss: float = float("nan")  # same net, exact hardware
    normalized_error: float = float("nan")

    @property
    def label(self) -> str:
        return self.hw.label


def exact_reference(hw: HardwareModel) -> HardwareModel:
    """Exact multiplier and reliable storage with ``hw``'s number formats."""
    return HardwareModel(
        weight_bits=hw.weight_bits,
        activation_bits=hw.activation_bits,
        weight_frac_bits=hw.weight_frac_bits,
        activation_frac_bits=hw.activation_frac_bits,
    )


def evaluate_hw(net: Mlp, data: Dataset, hw: HardwareModel, runs: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Per-run test accuracy and loss; noise-free models get a single pass."""
    n = runs if hw.stochastic else 1
    targets = data.targets(width=net.topology[-1])
    streams = rng.split(n)
    accs, losses = np.empty(n), np.empty(n)
    for i, stream in enumerate(streams):
        out = forward(net, data.features, hw, stream).outputs
        accs[i] = accuracy(out, data.labels)
        losses[i] = loss(out, targets)
    return accs, losses


def evaluate_sweep(
    net: Mlp,
    data: Dataset,
    sweep: list[HardwareModel],
    runs: int = 50,
    seed: int = 0,
    regime: str = "",
) -> list[HwResult]:
    """Evaluate every model in ``sweep``; normalized error is relative to the
    same net on exact hardware with matching number formats."""
    streams = Rng(seed).split(len(sweep))
    baselines: dict[HardwareModel, float] = {}
    results = []
    for hw, stream in zip(sweep, streams):
        accs, losses = evaluate_hw(net, data, hw, runs, stream)
        ref = exact_reference(hw)
        if ref not in baselines:
            if ref == hw:
                baselines[ref] = float(losses.mean())
            else:
                baselines[ref] = float(evaluate_hw(net, data, ref, 1, Rng(seed))[1][0])
        base = baselines[ref]
        mean_loss = float(losses.mean())
        results.append(
            HwResult(
                regime=regime,
                hw=hw,
                runs=len(accs),
                mean_accuracy=float(accs.mean()),
                std_accuracy=float(accs.std()),
                mean_loss=mean_loss,
                std_loss=float(losses.std()),
                baseline_loss=base,
                normalized_error=mean_loss / base if base > 0 else float("inf"),
            )
        )
    return results


# -- cost ranking ----------------------------------------------------------


@dataclass
class CostTable:
    multiply: dict[str, float]  # "exact" and mode labels -> relative cost
    storage: dict[str, float]  # "reliable" and voltage labels -> relative cost

    def __post_init__(self):
        for table in (self.multiply, self.storage):
            for key, value in table.items():
                if not value > 0:
                    raise ValueError(f"cost for {key!r} must be positive")
        if "exact" not in self.multiply or "reliable" not in self.storage:
            raise ValueError("cost table needs 'exact' and 'reliable' baselines")

    def relative_cost(self, multiplier_label: str, storage_label: str) -> float:
        try:
            mul = self.multiply[multiplier_label]
            mem = self.storage[storage_label]
        except KeyError as err:
            raise ValueError(f"no cost entry for {err.args[0]!r}") from None
        return (mul + mem) / (self.multiply["exact"] + self.storage["reliable"])


def _mode_rank(label: str) -> int:
    # More aggressive first: K1 < K2 < ... < exact.
    order = list(DEFAULT_MODE_K)
    return order.index(label) if label in order else len(order)


@dataclass
class CostRow:
    regime: str
    hw_label: str
    mean_accuracy: float
    admissible: bool
    relative_cost: float
    cheapest: bool


def rank_costs(
    rows: list[dict],
    costs: CostTable,
    max_degradation: float = 0.02,
    min_accuracy: float = 0.0,
) -> list[CostRow]:
    """Mark admissible models per regime and flag the cheapest one.

    ``rows`` are report rows with keys regime, multiplier, storage,
    flip_prob, mean_accuracy.  A model is admissible when its accuracy is
    within ``max_degradation`` of the regime's exact/reliable row and at
    least ``min_accuracy``.  Ties on cost go to the more aggressive model.
    """
    out: list[CostRow] = []
    regimes = list(dict.fromkeys(r["regime"] for r in rows))
    for regime in regimes:
        mine = [r for r in rows if r["regime"] == regime]
        exact = [r for r in mine if r["multiplier"] == "exact" and r["storage"] == "reliable"]
        ref_acc = float(exact[0]["mean_accuracy"]) if exact else max(float(r["mean_accuracy"]) for r in mine)
        floor = max(ref_acc - max_degradation, min_accuracy)
        ranked = []
        for r in mine:
            acc = float(r["mean_accuracy"])
            cost = costs.relative_cost(r["multiplier"], r["storage"])
            ok = acc >= floor - 1e-12
            ranked.append((r, acc, cost, ok))
        admissible = [t for t in ranked if t[3]]
        best = None
        if admissible:
            best = min(
                admissible,
                key=lambda t: (t[2], _mode_rank(t[0]["multiplier"]), -float(t[0]["flip_prob"])),
            )[0]
        for r, acc, cost, ok in ranked:
            out.append(CostRow(regime, f"{r['multiplier']}/{r['storage']}", acc, ok, cost, r is best))
        if best is None:
            out.append(CostRow(regime, "none admissible", float("nan"), False, float("nan"), False))
    return out
