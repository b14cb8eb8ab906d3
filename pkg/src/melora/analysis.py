"""Parameter audits over model shapes, singular-value rank profiles of adapter
updates, and the serial-stacking versus block-diagonal rank demonstration."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Iterator

import numpy as np
import yaml

from .adapters import Adapter, MeloraAdapter, count_params, delta_weight, equivalent_rank
from .errors import DivisibilityError
from .matrix import block_diag, rank, svd

FIGURE_THRESHOLD = 0.1
MODES = ("lora", "melora")


@dataclass(frozen=True)
class ModelShape:
    name: str
    hidden_dim: int
    num_layers: int
    matrices: dict[str, tuple[int, int]]  # per-layer adapted projections -> (d_in, d_out)
    full_params: int | None = None
    description: str = ""

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_layers < 1:
            raise ValueError("hidden_dim and num_layers must be positive")
        if not self.matrices:
            raise ValueError("a model shape needs at least one adapted matrix")
        for key, (d_in, d_out) in self.matrices.items():
            if d_in < 1 or d_out < 1:
                raise ValueError(f"matrix {key} has non-positive dims ({d_in}, {d_out})")

    @classmethod
    def square(cls, d: int, layers: int, names: Iterable[str] = ("Q", "V")) -> "ModelShape":
        return cls(f"custom-d{d}-l{layers}", d, layers, {k: (d, d) for k in names})

    def adapted(self) -> Iterator[tuple[str, int, int]]:
        for layer in range(self.num_layers):
            for key, (d_in, d_out) in self.matrices.items():
                yield f"layer{layer}.{key}", d_in, d_out


def load_presets() -> dict[str, ModelShape]:
    text = resources.files("melora").joinpath("presets.yaml").read_text()
    out = {}
    for name, spec in yaml.safe_load(text).items():
        out[name] = ModelShape(
            name=name,
            hidden_dim=int(spec["hidden_dim"]),
            num_layers=int(spec["num_layers"]),
            matrices={k: (int(v[0]), int(v[1])) for k, v in spec["matrices"].items()},
            full_params=spec.get("full_params"),
            description=spec.get("description", ""),
        )
    return out


def get_preset(name: str) -> ModelShape:
    presets = load_presets()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


def _check_mode(mode: str, n: int) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "lora" and n != 1:
        raise ValueError(f"plain LoRA has n=1, got n={n}")


def audit_params(shape: ModelShape, mode: str, n: int, r_mini: int) -> int:
    """Total trainable adapter parameters over every adapted matrix of ``shape``."""
    _check_mode(mode, n)
    total = 0
    for name, d_in, d_out in shape.adapted():
        try:
            total += count_params(d_in, d_out, n, r_mini)
        except DivisibilityError as exc:
            raise DivisibilityError(f"{shape.name} matrix {name}: {exc}") from None
    return total


def humanize_count(count: int) -> str:
    """Three significant figures with a k/M/B suffix, e.g. 294912 -> '295k'."""
    for div, suffix in ((1e9, "B"), (1e6, "M"), (1e3, "k")):
        if count >= div:
            return f"{count / div:.3g}{suffix}"
    return str(count)


@dataclass
class RankProfile:
    matrix_name: str
    mode: str
    n: int
    r_mini: int
    params: int
    equivalent_rank: int
    threshold: float
    singular_values: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.singular_values > self.threshold))

    def row(self) -> list:
        return [self.matrix_name, self.mode, self.n, self.r_mini, self.params,
                self.equivalent_rank, self.count]


PROFILE_COLUMNS = ["matrix_name", "mode", "n", "r_mini", "params", "equivalent_rank",
                   "sv_count_above_threshold"]


def rank_profile(adapter: Adapter, threshold: float = FIGURE_THRESHOLD, scaled: bool = True,
                 name: str = "W") -> RankProfile:
    """Singular values of the effective update and how many exceed ``threshold``.

    ``scaled`` selects whether the ``alpha/r`` factor is folded in before the SVD.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    sv = svd(delta_weight(adapter, scaled=scaled)).singular_values
    if isinstance(adapter, MeloraAdapter):
        mode, n, r = "melora", adapter.n, adapter.r_mini
    else:
        mode, n, r = "lora", 1, adapter.rank
    return RankProfile(name, mode, n, r, adapter.num_params, equivalent_rank(n, r), threshold, sv)


def profiles_csv(profiles: Iterable[RankProfile]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PROFILE_COLUMNS)
    for p in profiles:
        writer.writerow(p.row())
    return buf.getvalue()


def serial_stack_rank_demo(num_stacked: int, r: int, d: int, overlap: float, seed: int = 0) -> int:
    """Rank of ``sum_j B_j A_j`` when consecutive ``B_j`` share column space.

    The first ``ceil(overlap * r)`` columns of ``B_j`` are copied from ``B_{j-1}``;
    the rest, and every ``A_j``, are fresh Gaussian draws. All draws happen up
    front, so for a fixed seed only the copying depends on ``overlap``.
    """
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must be in [0, 1], got {overlap}")
    if num_stacked < 1 or r < 1 or num_stacked * r > d:
        raise ValueError(f"need num_stacked * r <= d, got {num_stacked} * {r} > {d}")
    rng = np.random.default_rng(seed)
    fresh_b = rng.normal(size=(num_stacked, d, r))
    a = rng.normal(size=(num_stacked, r, d))
    shared = math.ceil(overlap * r)
    total = np.zeros((d, d))
    prev = None
    for j in range(num_stacked):
        b = fresh_b[j].copy()
        if prev is not None and shared:
            b[:, :shared] = prev[:, :shared]
        total += b @ a[j]
        prev = b
    return rank(total, 1e-8)


def block_diag_stack_rank(num_stacked: int, r: int, d: int, seed: int = 0) -> int:
    """Rank of the block-diagonal arrangement with the same number of rank-``r`` pieces."""
    if d % num_stacked:
        raise DivisibilityError(f"d={d} is not divisible by num_stacked={num_stacked}")
    block = d // num_stacked
    if r > block:
        raise ValueError(f"r={r} exceeds block size {block}")
    rng = np.random.default_rng(seed)
    bs = [rng.normal(size=(block, r)) for _ in range(num_stacked)]
    as_ = [rng.normal(size=(r, block)) for _ in range(num_stacked)]
    return rank(block_diag(bs) @ block_diag(as_), 1e-8)
