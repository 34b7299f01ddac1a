"""Spectral and robustness reporting.

Each report row exposes, per layer, the singular spectrum of the
coefficient object being conditioned (the r x r block for linear layers,
the transposed output-mode unfolding of the core for convolutions), its
condition number, the conditioning penalty, the exponential bound on the
condition number, and the parameter count; network totals add the
compression rate against the dense baseline and the product of layer
condition numbers that governs worst-case input sensitivity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import linalg, regularizer
from .layers import FactorizedLinear, Network

CSV_HEADER = "layer,rank,sigma_max,sigma_min,kappa,reg_value,kappa_bound,params"


def format_value(value) -> str:
    """17-significant-digit formatting: round-trips every double."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


@dataclass
class LayerSpectralRow:
    layer: int
    rank: int
    singular_values: np.ndarray
    kappa: float
    reg_value: float
    kappa_bound: float
    params: int

    @property
    def sigma_max(self) -> float:
        return float(self.singular_values[0])

    @property
    def sigma_min(self) -> float:
        return float(self.singular_values[-1])


@dataclass
class SpectralReport:
    rows: list[LayerSpectralRow]
    compression_rate: float
    kappa_product: float

    def to_csv_text(self) -> str:
        lines = [CSV_HEADER]
        for row in self.rows:
            lines.append(
                ",".join(
                    [
                        str(row.layer),
                        str(row.rank),
                        format_value(row.sigma_max),
                        format_value(row.sigma_min),
                        format_value(row.kappa),
                        format_value(row.reg_value),
                        format_value(row.kappa_bound),
                        str(row.params),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "compression_rate": self.compression_rate,
            "kappa_product": self.kappa_product,
            "layers": [
                {
                    "layer": row.layer,
                    "rank": row.rank,
                    "singular_values": [float(s) for s in row.singular_values],
                    "kappa": row.kappa,
                    "reg_value": row.reg_value,
                    "kappa_bound": row.kappa_bound,
                    "params": row.params,
                }
                for row in self.rows
            ],
        }


def compression_rate(lowrank_params: int, baseline_params: int) -> float:
    """Percentage of baseline parameters removed by the factorization."""
    if baseline_params <= 0:
        raise ValueError("baseline parameter count must be positive")
    return (1.0 - lowrank_params / baseline_params) * 100.0


def layer_spectral_matrix(layer) -> np.ndarray:
    """The matrix whose conditioning the layer's report describes: the
    coefficient block for linear layers, the transposed output-mode
    unfolding of the core for convolutions (so report and penalty agree
    on the object measured)."""
    if isinstance(layer, FactorizedLinear):
        return layer.s
    return linalg.unfold_output_mode(layer.core).T


def _safe_kappa_bound(matrix: np.ndarray, sv: np.ndarray, reg: float) -> float:
    smallest = float(sv[-1])
    if smallest <= 0.0:
        return math.inf
    with np.errstate(over="ignore"):
        return float(np.exp(reg / (regularizer.SQRT2 * smallest**2)))


def spectral_report(network: Network) -> SpectralReport:
    rows = []
    lowrank_total = 0
    baseline_total = 0
    kappa_product = 1.0
    for index, layer in enumerate(network.layers):
        matrix = layer_spectral_matrix(layer)
        sv = linalg.svd(matrix).singular_values
        reg = regularizer.reg_value(matrix).value
        kappa = linalg.condition_number(matrix)
        rows.append(
            LayerSpectralRow(
                layer=index,
                rank=matrix.shape[1],
                singular_values=sv,
                kappa=kappa,
                reg_value=reg,
                kappa_bound=_safe_kappa_bound(matrix, sv, reg),
                params=layer.param_count(),
            )
        )
        lowrank_total += layer.param_count()
        baseline_total += layer.baseline_param_count()
        kappa_product *= kappa
    return SpectralReport(
        rows=rows,
        compression_rate=compression_rate(lowrank_total, baseline_total),
        kappa_product=kappa_product,
    )


def network_param_counts(network: Network) -> tuple[int, int]:
    lowrank = sum(layer.param_count() for layer in network.layers)
    baseline = sum(layer.baseline_param_count() for layer in network.layers)
    return lowrank, baseline


def sensitivity_bound(network: Network, activation_kappas=None) -> float:
    """Product of per-layer condition numbers times the supplied
    activation condition constants (1 each when omitted, making the
    result a weights-only bound)."""
    if activation_kappas is None:
        activation_kappas = [1.0] * len(network.layers)
    if len(activation_kappas) != len(network.layers):
        raise ValueError("need one activation constant per layer")
    bound = 1.0
    for index, layer in enumerate(network.layers):
        kappa = linalg.condition_number(layer_spectral_matrix(layer))
        if math.isinf(kappa):
            raise ValueError(f"layer {index} is singular; sensitivity bound undefined")
        bound *= kappa * activation_kappas[index]
    return bound


def measured_sensitivity(network: Network, x: np.ndarray, delta: np.ndarray) -> float:
    """Relative output change per relative input change, in the Euclidean
    norm.  For bias-free identity-activation networks of nonsingular
    square layers this never exceeds :func:`sensitivity_bound`."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if x.shape != delta.shape:
        raise ValueError("perturbation shape must match the input shape")
    fx = network.forward(x)
    fx_norm = float(np.linalg.norm(fx))
    delta_norm = float(np.linalg.norm(delta))
    if fx_norm == 0.0:
        raise ValueError("network output vanishes on the input; sensitivity undefined")
    if delta_norm == 0.0:
        raise ValueError("perturbation is zero; sensitivity undefined")
    diff = float(np.linalg.norm(network.forward(x + delta) - fx))
    return (diff / fx_norm) * (float(np.linalg.norm(x)) / delta_norm)


def write_spectral_csv(report: SpectralReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_csv_text())


def write_spectral_json(report: SpectralReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")
