"""Packing-LP and generalized-assignment instances.

An instance is a set of capacitated resources plus online requests. Each
request carries a list of options; an option has a profit and a sparse
consumption vector over the resources. GAP instances (items placed into
capacitated bins with bin-dependent profit/size) embed into packing
instances with column sparsity 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InstanceFormatError(ValueError):
    """Raised when an instance file cannot be parsed into an instance."""


class UndefinedCapacityRatioError(ValueError):
    """Raised when no resource has any positive consumption."""


@dataclass(frozen=True)
class Option:
    """One selectable column of a request: a profit and what it consumes.

    ``consumption`` maps resource index -> amount; zero entries are absent.
    """

    profit: float
    consumption: dict[int, float]


@dataclass(frozen=True)
class Request:
    """An online request: choose at most one of its options."""

    options: tuple[Option, ...]


@dataclass(frozen=True)
class PackingInstance:
    name: str
    capacities: tuple[float, ...]
    requests: tuple[Request, ...]

    @property
    def num_resources(self) -> int:
        return len(self.capacities)

    @property
    def num_requests(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class BinOption:
    """Profit and size of placing one item into one bin."""

    profit: float
    size: float


@dataclass(frozen=True)
class GapInstance:
    name: str
    bin_capacities: tuple[float, ...]
    items: tuple[dict[int, BinOption], ...]

    @property
    def num_bins(self) -> int:
        return len(self.bin_capacities)

    @property
    def num_items(self) -> int:
        return len(self.items)


@dataclass
class ValidationReport:
    """Collected invariant violations; empty iff the instance is well-formed."""

    issues: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, issue: str) -> None:
        self.issues.append(issue)


def validate(instance: PackingInstance) -> ValidationReport:
    """Check every instance invariant; report (not raise) each violation."""
    report = ValidationReport()
    m = instance.num_resources
    if m < 1:
        report.add("instance has no resources (m must be >= 1)")
    for i, b in enumerate(instance.capacities):
        if not math.isfinite(b) or b < 0:
            report.add(f"capacity < 0 or non-finite: capacities[{i}] = {b}")
    for j, req in enumerate(instance.requests):
        for k, opt in enumerate(req.options):
            if not math.isfinite(opt.profit) or opt.profit < 0:
                report.add(f"profit < 0 or non-finite: requests[{j}].options[{k}]")
            for i, a in opt.consumption.items():
                if not isinstance(i, int) or i < 0 or i >= m:
                    report.add(
                        f"resource index out of range: requests[{j}].options[{k}] "
                        f"touches resource {i} (m = {m})"
                    )
                if not math.isfinite(a) or a <= 0:
                    report.add(
                        f"consumption entry not strictly positive: "
                        f"requests[{j}].options[{k}][{i}] = {a}"
                    )
    return report


def column_sparsity(instance: PackingInstance) -> int:
    """Maximum number of resources any single option consumes."""
    d = 0
    for req in instance.requests:
        for opt in req.options:
            d = max(d, len(opt.consumption))
    return d


def _row_maxima(instance: PackingInstance) -> list[float]:
    """Largest single demand per resource; 0.0 for untouched resources."""
    maxima = [0.0] * instance.num_resources
    for req in instance.requests:
        for opt in req.options:
            for i, a in opt.consumption.items():
                if a > maxima[i]:
                    maxima[i] = a
    return maxima


def capacity_ratio(instance: PackingInstance) -> float:
    """min_i b_i / (largest demand on i), over resources with any demand.

    Resources no option touches never constrain and are excluded from the
    minimum. Raises if every resource is untouched.
    """
    maxima = _row_maxima(instance)
    ratios = [
        b / a for b, a in zip(instance.capacities, maxima) if a > 0.0
    ]
    if not ratios:
        raise UndefinedCapacityRatioError(
            "capacity ratio undefined: no resource has a positive consumption"
        )
    return min(ratios)


def normalize_rows(instance: PackingInstance) -> PackingInstance:
    """Rescale each resource row so its largest demand is 1.

    Row i (all consumptions on i, and b_i) is divided by the row maximum;
    rows with no positive entry are left untouched. The set of feasible
    integral allocations is unchanged.
    """
    maxima = _row_maxima(instance)
    if all(a == 1.0 or a == 0.0 for a in maxima):
        return instance
    capacities = tuple(
        b / a if a > 0.0 else b for b, a in zip(instance.capacities, maxima)
    )
    requests = tuple(
        Request(
            options=tuple(
                Option(
                    profit=opt.profit,
                    consumption={i: a / maxima[i] for i, a in opt.consumption.items()},
                )
                for opt in req.options
            )
        )
        for req in instance.requests
    )
    return PackingInstance(instance.name, capacities, requests)


def gap_to_packing(gap: GapInstance) -> PackingInstance:
    """Embed a GAP instance as a packing instance with column sparsity <= 1.

    Item j becomes a request with one option per eligible bin i; that option
    has profit p_ij and a single consumption entry w_ij on resource i. The
    option order follows ascending bin index so the embedding is canonical.
    """
    requests = tuple(
        Request(
            options=tuple(
                Option(profit=item[i].profit, consumption={i: item[i].size} if item[i].size > 0 else {})
                for i in sorted(item)
            )
        )
        for item in gap.items
    )
    return PackingInstance(gap.name, gap.bin_capacities, requests)


def option_bins(item: dict[int, BinOption]) -> list[int]:
    """Bin indices of an item in the canonical (ascending) embedding order."""
    return sorted(item)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _parse_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InstanceFormatError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _parse_resource_key(key: str, where: str) -> int:
    try:
        return int(key)
    except (TypeError, ValueError):
        raise InstanceFormatError(f"{where}: key {key!r} is not an integer index") from None


def save_json(instance: PackingInstance | GapInstance, path: str | Path) -> None:
    if isinstance(instance, GapInstance):
        doc = gap_to_dict(instance)
    else:
        doc = packing_to_dict(instance)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def packing_to_dict(instance: PackingInstance) -> dict:
    return {
        "name": instance.name,
        "capacities": list(instance.capacities),
        "requests": [
            {
                "options": [
                    {
                        "profit": opt.profit,
                        "consumption": {str(i): a for i, a in sorted(opt.consumption.items())},
                    }
                    for opt in req.options
                ]
            }
            for req in instance.requests
        ],
    }


def gap_to_dict(gap: GapInstance) -> dict:
    return {
        "name": gap.name,
        "bin_capacities": list(gap.bin_capacities),
        "items": [
            {str(i): {"profit": o.profit, "size": o.size} for i, o in sorted(item.items())}
            for item in gap.items
        ],
    }


def packing_from_dict(doc: dict) -> PackingInstance:
    if not isinstance(doc, dict) or "capacities" not in doc or "requests" not in doc:
        raise InstanceFormatError("not a packing instance: missing 'capacities'/'requests'")
    name = doc.get("name", "")
    capacities = tuple(
        _parse_number(b, f"capacities[{i}]") for i, b in enumerate(doc["capacities"])
    )
    requests = []
    for j, rdoc in enumerate(doc["requests"]):
        if "options" not in rdoc:
            raise InstanceFormatError(f"requests[{j}]: missing 'options'")
        options = []
        for k, odoc in enumerate(rdoc["options"]):
            where = f"requests[{j}].options[{k}]"
            profit = _parse_number(odoc.get("profit"), f"{where}.profit")
            consumption = {
                _parse_resource_key(key, f"{where}.consumption"): _parse_number(
                    a, f"{where}.consumption[{key}]"
                )
                for key, a in odoc.get("consumption", {}).items()
            }
            options.append(Option(profit, consumption))
        requests.append(Request(tuple(options)))
    return PackingInstance(name, capacities, tuple(requests))


def gap_from_dict(doc: dict) -> GapInstance:
    if not isinstance(doc, dict) or "bin_capacities" not in doc or "items" not in doc:
        raise InstanceFormatError("not a GAP instance: missing 'bin_capacities'/'items'")
    name = doc.get("name", "")
    capacities = tuple(
        _parse_number(b, f"bin_capacities[{i}]") for i, b in enumerate(doc["bin_capacities"])
    )
    items = []
    for j, idoc in enumerate(doc["items"]):
        item = {}
        for key, odoc in idoc.items():
            where = f"items[{j}][{key}]"
            i = _parse_resource_key(key, f"items[{j}]")
            item[i] = BinOption(
                profit=_parse_number(odoc.get("profit"), f"{where}.profit"),
                size=_parse_number(odoc.get("size"), f"{where}.size"),
            )
        items.append(item)
    return GapInstance(name, capacities, tuple(items))


def load_json(path: str | Path) -> PackingInstance:
    doc = _load_doc(path)
    return packing_from_dict(doc)


def load_gap_json(path: str | Path) -> GapInstance:
    doc = _load_doc(path)
    return gap_from_dict(doc)


def _load_doc(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _uniform_open_closed(rng: np.random.Generator, size=None):
    """Uniform draws in (0, 1]."""
    return 1.0 - rng.random(size)


def generate_random(
    m: int,
    n: int,
    K: int,
    B_target: float,
    d_target: int,
    seed: int,
) -> PackingInstance:
    """Random normalized packing instance with pinned sparsity and capacity ratio.

    Every option touches exactly ``d_target`` distinct resources with
    consumptions uniform in (0, 1]; rows are rescaled so each row maximum is
    1 and capacities are set to ``B_target``, so the capacity ratio equals
    ``B_target`` exactly. Deterministic in ``seed``.
    """
    if m < 1 or n < 1 or K < 1:
        raise ValueError(f"m, n, K must all be >= 1 (got {m}, {n}, {K})")
    if d_target < 1 or d_target > m:
        raise ValueError(f"d_target must be in [1, m] (got {d_target}, m = {m})")
    if B_target < 1:
        raise ValueError(f"B_target must be >= 1 (got {B_target})")
    rng = np.random.default_rng(seed)
    raw: list[list[tuple[float, dict[int, float]]]] = []
    row_max = [0.0] * m
    for _ in range(n):
        options = []
        for _ in range(K):
            resources = rng.choice(m, size=d_target, replace=False)
            amounts = _uniform_open_closed(rng, d_target)
            consumption = {}
            for i, a in zip(resources.tolist(), amounts.tolist()):
                consumption[i] = a
                if a > row_max[i]:
                    row_max[i] = a
            options.append((float(_uniform_open_closed(rng)), consumption))
        raw.append(options)
    requests = tuple(
        Request(
            options=tuple(
                Option(profit, {i: a / row_max[i] for i, a in cons.items()})
                for profit, cons in options
            )
        )
        for options in raw
    )
    name = f"rand-m{m}-n{n}-K{K}-B{B_target:g}-d{d_target}-s{seed}"
    return PackingInstance(name, tuple(float(B_target) for _ in range(m)), requests)


GAP_FAMILIES = ("knapsack", "matching", "adwords", "general")


def generate_gap(m: int, n: int, family: str, seed: int) -> GapInstance:
    """Random GAP instance from one of the named families.

    knapsack: single bin (requires m = 1); matching: w = 1, b = 1 on all
    pairs; adwords: profit equals size everywhere; general: mixed sizes with
    a random subset of eligible bins per item.
    """
    if family not in GAP_FAMILIES:
        raise ValueError(f"unknown GAP family {family!r}; pick one of {GAP_FAMILIES}")
    if m < 1 or n < 1:
        raise ValueError(f"m, n must be >= 1 (got {m}, {n})")
    if family == "knapsack" and m != 1:
        raise ValueError("knapsack family requires m = 1")
    rng = np.random.default_rng(seed)
    items: list[dict[int, BinOption]] = []
    if family == "matching":
        capacities = tuple(1.0 for _ in range(m))
        for _ in range(n):
            profits = _uniform_open_closed(rng, m)
            items.append({i: BinOption(float(profits[i]), 1.0) for i in range(m)})
    elif family == "knapsack":
        capacities = (float(1.0 + 1.5 * rng.random()),)
        for _ in range(n):
            items.append(
                {0: BinOption(float(_uniform_open_closed(rng)), float(_uniform_open_closed(rng)))}
            )
    elif family == "adwords":
        capacities = tuple(float(0.5 + 1.5 * rng.random()) for _ in range(m))
        for _ in range(n):
            bins = rng.choice(m, size=min(m, 3), replace=False)
            sizes = _uniform_open_closed(rng, len(bins))
            items.append(
                {int(i): BinOption(float(w), float(w)) for i, w in zip(bins, sizes)}
            )
    else:  # general
        capacities = tuple(float(0.5 + 2.5 * rng.random()) for _ in range(m))
        for _ in range(n):
            n_bins = int(rng.integers(1, min(m, 3) + 1))
            bins = rng.choice(m, size=n_bins, replace=False)
            item = {}
            for i in bins.tolist():
                item[i] = BinOption(
                    float(_uniform_open_closed(rng)), float(_uniform_open_closed(rng))
                )
            items.append(item)
    name = f"gap-{family}-m{m}-n{n}-s{seed}"
    return GapInstance(name, capacities, tuple(items))
