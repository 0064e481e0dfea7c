"""Rank importance, group-aware sort-and-truncate, and byte-budget targeting.

A component's importance is the mean absolute rank weight over channels
times the product of its three factor magnitudes (L2 norm for vectors,
Frobenius norm for matrices). Truncation keeps whole groups below the
target and fills the partially covered group with its highest-importance
components, so components of fully covered groups survive verbatim.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .decomposition import DecomposedField, truncate
from .model import FieldPair


@dataclass(frozen=True)
class ImportanceReport:
    """Per-component importance scores, split by kind, with group ids."""

    vec_scores: np.ndarray
    mat_scores: np.ndarray
    vec_group: np.ndarray
    mat_group: np.ndarray

    def order_within_group(self, kind: str, group: int) -> np.ndarray:
        """Component indices of `group`, highest importance first."""
        scores = self.vec_scores if kind == "vec" else self.mat_scores
        groups = self.vec_group if kind == "vec" else self.mat_group
        members = np.nonzero(groups == group)[0]
        # stable sort on negated scores keeps index order among ties
        return members[np.argsort(-scores[members], kind="stable")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("kind,index,group,score\n")
        for i, (s, g) in enumerate(zip(self.vec_scores, self.vec_group)):
            buf.write(f"vec,{i},{int(g)},{s:.9g}\n")
        for i, (s, g) in enumerate(zip(self.mat_scores, self.mat_group)):
            buf.write(f"mat,{i},{int(g)},{s:.9g}\n")
        return buf.getvalue()


def rank_importance(field: DecomposedField) -> ImportanceReport:
    V = field.layout.n_vec
    s_mag = np.abs(field.S.astype(np.float64)).mean(axis=0)
    vec = s_mag[:V]
    if V:
        vec = (
            vec
            * np.linalg.norm(field.Ux.astype(np.float64), axis=0)
            * np.linalg.norm(field.Uy.astype(np.float64), axis=0)
            * np.linalg.norm(field.Uz.astype(np.float64), axis=0)
        )
    mat = s_mag[V:]
    if field.layout.n_mat:
        frob = lambda a: np.linalg.norm(a.astype(np.float64).reshape(-1, a.shape[-1]), axis=0)
        mat = mat * frob(field.Uxy) * frob(field.Uyz) * frob(field.Uxz)
    return ImportanceReport(
        vec_scores=vec,
        mat_scores=mat,
        vec_group=field.layout.group_of_vec(),
        mat_group=field.layout.group_of_mat(),
    )


def _kept_indices(prefixes: np.ndarray, target: int, report: ImportanceReport, kind: str):
    """Whole groups below `target` plus top-importance fill of the partial group."""
    kept = []
    taken = 0
    for g, bound in enumerate(prefixes):
        group_members = np.nonzero(
            (report.vec_group if kind == "vec" else report.mat_group) == g
        )[0]
        if bound <= target:
            kept.extend(group_members.tolist())
            taken = bound
        else:
            deficit = target - taken
            if deficit > 0:
                kept.extend(report.order_within_group(kind, g)[:deficit].tolist())
            break
    return sorted(kept)


def sort_and_truncate(field: DecomposedField, target: tuple) -> DecomposedField:
    """Truncate to (vec_target, mat_target) components using importance order."""
    tv, tm = int(target[0]), int(target[1])
    if tv < 0 or tm < 0 or tv + tm == 0:
        raise ValueError("truncation target must keep at least one component")
    if tv > field.layout.n_vec or tm > field.layout.n_mat:
        raise ValueError(
            f"target {target} exceeds layout ({field.layout.n_vec},{field.layout.n_mat})"
        )
    report = rank_importance(field)
    kept_vec = _kept_indices(field.layout.vec_prefixes(), tv, report, "vec")
    kept_mat = _kept_indices(field.layout.mat_prefixes(), tm, report, "mat")
    return truncate(field, (kept_vec, kept_mat))


def rank_sweep_targets(field: DecomposedField):
    """(vec, mat) targets for total kept rank 1..R, following stored group order.

    Within each group, components are counted in importance order, so the
    k-th target keeps the k most valuable components compatible with the
    prefix rule.
    """
    report = rank_importance(field)
    targets = []
    v = m = 0
    for g in range(field.layout.n_groups):
        members = [("vec", i, report.vec_scores[i])
                   for i in report.order_within_group("vec", g)]
        members += [("mat", i, report.mat_scores[i])
                    for i in report.order_within_group("mat", g)]
        members.sort(key=lambda km: -km[2])
        for kind, _, _ in members:
            if kind == "vec":
                v += 1
            else:
                m += 1
            targets.append((v, m))
    return targets


def truncate_color(pair: FieldPair, target: tuple) -> FieldPair:
    """Sort-and-truncate the color field only; density is never compressed."""
    return replace(pair, color=sort_and_truncate(pair.color, target))


def compress_to_budget(pair: FieldPair, budget_bytes: int) -> FieldPair:
    """Largest color truncation (scanning stored rank order) fitting the budget."""
    from .formats import model_file_size  # local: formats depends on model only

    targets = rank_sweep_targets(pair.color)
    minimum = model_file_size(replace(pair, color=sort_and_truncate(pair.color, targets[0])))
    if budget_bytes < minimum:
        raise ValueError(
            f"budget {budget_bytes} B is below the minimum model size {minimum} B "
            "(density field plus one color rank)"
        )
    if model_file_size(pair) <= budget_bytes:
        return pair
    best = None
    for target in targets:
        candidate = truncate_color(pair, target)
        if model_file_size(candidate) <= budget_bytes:
            best = candidate
        else:
            break
    assert best is not None  # guarded by the minimum check
    return best
