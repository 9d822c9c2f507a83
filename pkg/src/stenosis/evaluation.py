"""Accuracy and repeatability metrics over evaluated sequences."""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .core import PipelineError, StenosisReport

FIELDS = ("psa", "psd")


class EvalError(PipelineError):
    module = "evaluation"
    exit_code = 2


@dataclass(frozen=True)
class EvalCase:
    sequence_id: str
    estimate: StenosisReport
    gt_psa: float | None = None
    gt_psd: float | None = None
    gt_keyframe_interval: tuple[int, int] | None = None
    group: str | None = None  # cases of the same patient and condition

    def __post_init__(self):
        if self.gt_psa is None and self.gt_psd is None and self.gt_keyframe_interval is None:
            raise EvalError(f"case {self.sequence_id!r} has no ground truth")
        if self.gt_keyframe_interval is not None:
            first, last = self.gt_keyframe_interval
            if first > last:
                raise EvalError(f"case {self.sequence_id!r}: keyframe interval ({first}, {last}) is reversed")
            object.__setattr__(self, "gt_keyframe_interval", (int(first), int(last)))

    def truth(self, field: str) -> float | None:
        return {"psa": self.gt_psa, "psd": self.gt_psd}[_check_field(field)]

    def absolute_error(self, field: str) -> float | None:
        gt = self.truth(field)
        return None if gt is None else abs(gt - getattr(self.estimate, field))

    @property
    def keyframe_correct(self) -> bool | None:
        if self.gt_keyframe_interval is None:
            return None
        first, last = self.gt_keyframe_interval
        return first <= self.estimate.keyframe_index <= last


def _check_field(field: str) -> str:
    if field not in FIELDS:
        raise ValueError(f"field must be one of {FIELDS}, got {field!r}")
    return field


def mae(cases: Iterable[EvalCase], field: str) -> float:
    """Mean absolute error over the cases that have ``field`` ground truth."""
    errors = [e for e in (c.absolute_error(field) for c in cases) if e is not None]
    if not errors:
        raise EvalError(f"no case has ground-truth {field.upper()}")
    return math.fsum(errors) / len(errors)


def correct_keyframe_rate(cases: Iterable[EvalCase]) -> float:
    flags = [c.keyframe_correct for c in cases if c.keyframe_correct is not None]
    if not flags:
        raise EvalError("no case has a ground-truth keyframe interval")
    return 100.0 * sum(flags) / len(flags)


def consistency(a: StenosisReport, b: StenosisReport, field: str) -> tuple[tuple[float, float], float]:
    """((min, max), |a - b|) of ``field`` over two reports of the same condition."""
    va, vb = getattr(a, _check_field(field)), getattr(b, field)
    return (min(va, vb), max(va, vb)), abs(va - vb)


@dataclass(frozen=True)
class PairedTest:
    n: int
    t: float
    p: float


def paired_t(cases: Iterable[EvalCase], field: str) -> PairedTest | None:
    """Paired t-test of estimates against ground truth; descriptive only."""
    pairs = [(c.truth(field), getattr(c.estimate, field)) for c in cases if c.truth(field) is not None]
    if len(pairs) < 2:
        return None
    gt, est = np.array(pairs).T
    if np.allclose(gt - est, (gt - est)[0]):
        return None  # zero variance: t is undefined
    res = stats.ttest_rel(gt, est)
    return PairedTest(len(pairs), float(res.statistic), float(res.pvalue))


def _parse_interval(text: str) -> tuple[int, int]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise EvalError(f"keyframe interval must be 'first, last', got {text!r}")
    return int(parts[0]), int(parts[1])


def load_manifest(path: Path) -> list[EvalCase]:
    """Read an INI manifest, one section per sequence.

    Keys: ``report`` (required), ``truth`` (phantom truth sidecar), ``gt_psa``,
    ``gt_psd``, ``gt_keyframe_interval`` ("first, last"), ``group`` and
    ``sequence`` (informational). Relative paths are taken from the manifest
    directory; explicit ``gt_*`` keys override the sidecar.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise EvalError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    known = {"report", "truth", "gt_psa", "gt_psd", "gt_keyframe_interval", "group", "sequence"}
    cases = []
    for name in parser.sections():
        sec = parser[name]
        unknown = set(sec) - known
        if unknown:
            raise EvalError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
        if "report" not in sec:
            raise EvalError(f"[{name}] is missing 'report'")
        try:
            report = StenosisReport.from_json((base / sec["report"]).read_text(encoding="utf-8"))
        except (OSError, ValueError, TypeError) as exc:
            raise EvalError(f"[{name}] cannot load report: {exc}") from exc
        truth: dict = {}
        if "truth" in sec:
            try:
                side = json.loads((base / sec["truth"]).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise EvalError(f"[{name}] cannot load truth: {exc}") from exc
            truth = {
                "gt_psa": side.get("psa_true"),
                "gt_psd": side.get("psd_true"),
                "gt_keyframe_interval": tuple(side["keyframe_interval"]) if side.get("keyframe_interval") else None,
            }
        try:
            for key in ("gt_psa", "gt_psd"):
                if key in sec:
                    truth[key] = float(sec[key])
        except ValueError as exc:
            raise EvalError(f"[{name}] {exc}") from exc
        if "gt_keyframe_interval" in sec:
            truth["gt_keyframe_interval"] = _parse_interval(sec["gt_keyframe_interval"])
        cases.append(EvalCase(sequence_id=name, estimate=report, group=sec.get("group"), **truth))
    if not cases:
        raise EvalError(f"manifest {path} lists no cases")
    return cases


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def _mae_or_none(cases: Sequence[EvalCase], field: str) -> float | None:
    try:
        return mae(cases, field)
    except EvalError:
        return None


def summarize(cases: Sequence[EvalCase]) -> str:
    """Accuracy table, per-case errors and same-group consistency as text."""
    lines = []
    has_kf = any(c.keyframe_correct is not None for c in cases)
    correct = [c for c in cases if c.keyframe_correct]
    rate = correct_keyframe_rate(cases) if has_kf else None
    lines.append("Accuracy")
    lines.append(f"  {'cases':<22}{len(cases)}")
    lines.append(f"  {'correct keyframes (%)':<22}{_fmt(rate)}")
    for field in FIELDS:
        all_mae = _mae_or_none(cases, field)
        kf_mae = _mae_or_none(correct, field) if has_kf else None
        lines.append(f"  {field.upper() + ' MAE (%)':<22}all {_fmt(all_mae)}  correct KF only {_fmt(kf_mae)}")
    for field in FIELDS:
        test = paired_t(cases, field)
        if test is not None:
            lines.append(f"  {field.upper() + ' paired t':<22}t = {test.t:.4f}, p = {test.p:.4f} (n = {test.n})")
    lines.append("")
    lines.append("Per sequence")
    lines.append(f"  {'sequence':<16}{'keyframe':>9}{'in KF':>7}{'PSA':>8}{'AE':>7}{'PSD':>8}{'AE':>7}")
    for c in cases:
        inside = {None: "-", True: "yes", False: "no"}[c.keyframe_correct]
        lines.append(
            f"  {c.sequence_id:<16}{c.estimate.keyframe_index:>9}{inside:>7}"
            f"{c.estimate.psa:>8.2f}{_fmt(c.absolute_error('psa')):>7}"
            f"{c.estimate.psd:>8.2f}{_fmt(c.absolute_error('psd')):>7}"
        )
    groups: dict[str, list[EvalCase]] = {}
    for c in cases:
        if c.group:
            groups.setdefault(c.group, []).append(c)
    pairs = {g: cs for g, cs in groups.items() if len(cs) >= 2}
    if pairs:
        lines.append("")
        lines.append("Consistency")
        lines.append(f"  {'group':<16}{'PSA range (diff)':<24}{'PSD range (diff)':<24}")
        diffs: dict[str, list[float]] = {f: [] for f in FIELDS}
        for g, cs in pairs.items():
            cells = []
            for field in FIELDS:
                values = [getattr(c.estimate, field) for c in cs]
                lo, hi = min(values), max(values)
                diffs[field].append(hi - lo)  # equals |a - b| for a pair
                cells.append(f"{lo:.2f}-{hi:.2f} ({hi - lo:.2f})")
            lines.append(f"  {g:<16}{cells[0]:<24}{cells[1]:<24}")
        lines.append(
            f"  {'mean diff':<16}{_fmt(float(np.mean(diffs['psa']))):<24}{_fmt(float(np.mean(diffs['psd']))):<24}"
        )
    return "\n".join(lines) + "\n"

