"""Classification metrics over partial labels, trajectory voting and a flat SVM baseline."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import PartialLabel, default_gamma, train_biased_svm


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    trajectory_id: str
    true_species: str
    label: PartialLabel

    @property
    def complete(self) -> bool:
        return self.label.complete

    @property
    def predicted(self) -> str | None:
        return self.label.species


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    classes: list[str]
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    ap: float
    ar: float
    ac: float
    pd: float
    n_total: int
    n_complete: int
    confusion: np.ndarray               # rows true class, columns predicted class
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "AP": self.ap,
            "AR": self.ar,
            "AC": self.ac,
            "PD": self.pd,
            "n_total": self.n_total,
            "n_complete": self.n_complete,
            "confusion": self.confusion.tolist(),
            "undefined": self.undefined,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        width = max([len(c) for c in self.classes] + [7])
        lines = [f"{'class':<{width}}  precision  recall     F1"]
        for c in self.classes:
            flag = " *" if any(u.startswith(c + ":") for u in self.undefined) else ""
            lines.append(f"{c:<{width}}  {self.precision[c]:9.4f}  {self.recall[c]:6.4f}  "
                         f"{self.f1[c]:6.4f}{flag}")
        lines.append("")
        lines.append(f"AP {self.ap:.4f}  AR {self.ar:.4f}  AC {self.ac:.4f}  PD {self.pd:.4f}  "
                     f"({self.n_complete}/{self.n_total} complete)")
        if self.undefined:
            lines.append("* undefined rate reported as 0: " + ", ".join(self.undefined))
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["true\\predicted"] + self.classes)
        for c, row in zip(self.classes, self.confusion):
            wr.writerow([c] + [int(v) for v in row])
        return buf.getvalue()


def compute_metrics(records, classes=None) -> MetricsReport:
    """Per-class and averaged rates computed over complete predictions only."""
    records = list(records)
    if not records:
        raise ValueError("no prediction records")
    if classes is None:
        seen = {r.true_species for r in records}
        seen |= {r.predicted for r in records if r.complete}
        classes = sorted(seen)
    idx = {c: k for k, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    complete = [r for r in records if r.complete]
    for r in complete:
        conf[idx[r.true_species], idx[r.predicted]] += 1
    prec, rec, f1 = {}, {}, {}
    undefined = []
    for c in classes:
        k = idx[c]
        tp = conf[k, k]
        pred_n = conf[:, k].sum()
        true_n = conf[k, :].sum()
        if pred_n == 0:
            prec[c] = 0.0
            undefined.append(f"{c}:precision")
        else:
            prec[c] = float(tp / pred_n)
        if true_n == 0:
            rec[c] = 0.0
            undefined.append(f"{c}:recall")
        else:
            rec[c] = float(tp / true_n)
        f1[c] = f1_score(prec[c], rec[c])
    n_total = len(records)
    n_complete = len(complete)
    if n_complete:
        ac = float(np.trace(conf) / n_complete)
    else:
        ac = 0.0
        undefined.append("AC")
    return MetricsReport(list(classes), prec, rec, f1,
                         float(np.mean(list(prec.values()))), float(np.mean(list(rec.values()))),
                         ac, (n_total - n_complete) / n_total, n_total, n_complete, conf, undefined)


def trajectory_vote(records, paths: dict | None = None) -> list[PredictionRecord]:
    """Replace complete labels in each trajectory by its unique most frequent complete label.

    ``paths`` optionally maps species to their decision sequence so the
    revised labels stay consistent with the tree.  Ties leave a trajectory as is.
    """
    records = list(records)
    groups = defaultdict(list)
    for k, r in enumerate(records):
        if r.complete:
            groups[r.trajectory_id].append(k)
    out = list(records)
    for members in groups.values():
        counts = Counter(records[k].predicted for k in members).most_common()
        if len(counts) > 1 and counts[0][1] == counts[1][1]:
            continue
        winner = counts[0][0]
        for k in members:
            if records[k].predicted != winner:
                dec = tuple(paths[winner]) if paths else records[k].label.decisions
                out[k] = replace(records[k], label=PartialLabel(dec, True, winner))
    return out


def flat_svm_baseline(train_x, train_y, test_x, c: float = 1.0, gamma: float | None = None):
    """One-vs-rest biased SVMs; the class with the largest decision value wins."""
    train_x = np.asarray(train_x, dtype=float)
    test_x = np.atleast_2d(np.asarray(test_x, dtype=float))
    train_y = np.asarray(train_y).astype(str)
    classes = sorted(set(train_y.tolist()))
    if len(classes) == 1:
        return [classes[0]] * len(test_x)
    gamma = default_gamma(train_x) if gamma is None else gamma
    scores = np.empty((len(test_x), len(classes)))
    for k, c_name in enumerate(classes):
        y = np.where(train_y == c_name, 1, -1)
        scores[:, k] = train_biased_svm(train_x, y, c, gamma).decision(test_x)
    # argmax returns the first (lowest index) maximum on ties
    return [classes[k] for k in np.argmax(scores, axis=1)]


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"sample_id", "trajectory_id", "true_species", "label_sequence", "complete"}
        if not need <= set(reader.fieldnames or ()):
            raise ValueError(f"{path}: predictions header must contain {sorted(need)}")
        for row in reader:
            complete = row["complete"].strip().lower() in ("1", "true", "yes")
            seq = [s for s in row["label_sequence"].split("/") if s]
            if complete:
                label = PartialLabel(tuple(seq[:-1]), True, seq[-1])
            else:
                label = PartialLabel(tuple(seq), False, None)
            out.append(PredictionRecord(row["sample_id"], row["trajectory_id"],
                                        row["true_species"], label))
    return out


def write_predictions(path, records) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sample_id", "trajectory_id", "true_species", "label_sequence", "complete"])
        for r in records:
            wr.writerow([r.sample_id, r.trajectory_id, r.true_species, r.label.sequence(),
                         int(r.complete)])
