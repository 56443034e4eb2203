"""Central-difference verification of every analytic gradient.

For seeded random coordinates of each parameter section, the derivative of
the regularization-free pairwise loss is estimated as
(f(theta+h) - f(theta-h)) / 2h and compared against the analytic value. The
loss is piecewise smooth: relu kinks make the two-sided estimate meaningless
for coordinates whose perturbation moves a pre-activation across or near
zero, so such coordinates are skipped and counted rather than silently
passed. Only units actually affected by the perturbed coordinate are
consulted, which keeps an unrelated near-zero unit from masking the whole
section.

Regularization is deliberately excluded: quadratic penalties would dominate
the difference and hide adjoint bugs in the interesting terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from convncf.embeddings import EmbeddingTables, Variant, item_embedding, user_embedding
from convncf.model import ModelSpec, head_forward, merge, section_arrays
from convncf.training import TripleGrads, bpr_loss, compute_triple_gradients


@dataclass
class SectionReport:
    name: str
    checked: int
    skipped: int
    max_rel_err: float
    max_abs_err: float
    failures: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class GradReport:
    sections: list[SectionReport]
    step: float
    tol: float
    abs_floor: float

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.sections)


def format_report(report: GradReport) -> str:
    lines = [
        f"{'section':<16} {'checked':>8} {'skipped':>8} {'max rel':>12} {'max abs':>12}  status",
    ]
    for s in report.sections:
        status = "ok" if s.passed else "FAIL"
        lines.append(
            f"{s.name:<16} {s.checked:>8} {s.skipped:>8} {s.max_rel_err:>12.3e} {s.max_abs_err:>12.3e}  {status}"
        )
        for flat, analytic, numeric in s.failures[:5]:
            lines.append(f"    coordinate {flat}: analytic {analytic!r} vs numeric {numeric!r}")
    verdict = "PASS" if report.passed else "FAIL"
    lines.append(
        f"{verdict} (step={report.step:g}, tol={report.tol:g}, abs_floor={report.abs_floor:g})"
    )
    return "\n".join(lines)


def _loss_and_pres(
    spec: ModelSpec, tables: EmbeddingTables, u: int, i: int, j: int, history: list[int]
) -> tuple[float, list[np.ndarray]]:
    pres: list[np.ndarray] = []
    ys = []
    for target in (i, j):
        fU = user_embedding(tables, spec.variant, u, target, history, norm=spec.fism_norm)
        fI = item_embedding(tables, target)
        cache, y = head_forward(spec, merge(spec.merge, fU, fI))
        ys.append(y)
        if cache is not None and hasattr(cache, "pres"):
            pres.extend(cache.pres)
    return bpr_loss(ys[0], ys[1]), pres


def _candidate_indices(
    name: str,
    arr: np.ndarray,
    spec: ModelSpec,
    u: int,
    i: int,
    j: int,
    history: list[int],
) -> np.ndarray:
    """Flat coordinates the triple can actually reach. Derived from the
    model structure, never from the analytic gradients under test, so a
    scatter rule that drops a row is caught instead of skipped."""
    K = arr.shape[1] if arr.ndim == 2 else 0
    if name == "P":
        rows = [u] if spec.variant in (Variant.MF, Variant.SVDPP) else []
    elif name == "Q":
        rows = [i, j]
    elif name == "Qp":
        rows = sorted(set(history))
    else:
        return np.arange(arr.size)
    return np.concatenate([np.arange(r * K, (r + 1) * K) for r in rows]) if rows else np.arange(0)


def _analytic_entry(grads: TripleGrads, name: str, flat: int, arr: np.ndarray) -> float:
    if name in ("P", "Q", "Qp"):
        K = arr.shape[1]
        row = getattr(grads.tables, name).get(flat // K)
        return float(row[flat % K]) if row is not None else 0.0
    return float(grads.head[name].flat[flat])


def _kink_risk(
    base: list[np.ndarray], plus: list[np.ndarray], minus: list[np.ndarray], threshold: float
) -> bool:
    for pb, pp, pm in zip(base, plus, minus):
        affected = pp != pm
        if not affected.any():
            continue
        if ((pp > 0) != (pm > 0))[affected].any():
            return True
        magnitude = np.minimum(np.minimum(np.abs(pb), np.abs(pp)), np.abs(pm))
        if (magnitude[affected] < threshold).any():
            return True
    return False


GradFn = Callable[[ModelSpec, EmbeddingTables, int, int, int, list], TripleGrads]


def finite_diff_check(
    spec: ModelSpec,
    tables: EmbeddingTables,
    triple: tuple[int, int, int],
    history: Iterable[int] = (),
    step: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-8,
    sample: int = 200,
    seed: int = 0,
    grad_fn: Optional[GradFn] = None,
) -> GradReport:
    """Check up to ``sample`` seeded coordinates of every parameter section.

    A coordinate passes when |analytic - numeric| <= abs_floor or the
    relative error against max(|analytic|, |numeric|) is <= tol. A non-finite
    loss at a perturbed point is reported as a failure at that coordinate.
    ``grad_fn`` defaults to the real gradient computation; tests can inject a
    corrupted one to prove the check has teeth.
    """
    u, i, j = triple
    history = list(history)
    if grad_fn is None:
        grad_fn = compute_triple_gradients
    grads = grad_fn(spec, tables, u, i, j, history)
    _, base_pres = _loss_and_pres(spec, tables, u, i, j, history)
    rng = np.random.default_rng(seed)
    threshold = 10.0 * step

    sections = []
    for name, arr in section_arrays(spec, tables).items():
        candidates = _candidate_indices(name, arr, spec, u, i, j, history)
        if candidates.size > sample:
            candidates = rng.choice(candidates, size=sample, replace=False)
        candidates = np.sort(candidates)
        checked = skipped = 0
        max_rel = max_abs = 0.0
        failures: list[tuple[int, float, float]] = []
        for flat in candidates.tolist():
            orig = arr.flat[flat]
            arr.flat[flat] = orig + step
            loss_p, pres_p = _loss_and_pres(spec, tables, u, i, j, history)
            arr.flat[flat] = orig - step
            loss_m, pres_m = _loss_and_pres(spec, tables, u, i, j, history)
            arr.flat[flat] = orig
            if not (math.isfinite(loss_p) and math.isfinite(loss_m)):
                failures.append((flat, _analytic_entry(grads, name, flat, arr), float("nan")))
                continue
            if _kink_risk(base_pres, pres_p, pres_m, threshold):
                skipped += 1
                continue
            numeric = (loss_p - loss_m) / (2.0 * step)
            analytic = _analytic_entry(grads, name, flat, arr)
            abs_err = abs(analytic - numeric)
            denom = max(abs(analytic), abs(numeric))
            rel_err = abs_err / denom if denom > 0 else 0.0
            checked += 1
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            if abs_err > abs_floor and rel_err > tol:
                failures.append((flat, analytic, numeric))
        sections.append(
            SectionReport(
                name=name,
                checked=checked,
                skipped=skipped,
                max_rel_err=max_rel,
                max_abs_err=max_abs,
                failures=failures,
            )
        )
    return GradReport(sections=sections, step=step, tol=tol, abs_floor=abs_floor)
