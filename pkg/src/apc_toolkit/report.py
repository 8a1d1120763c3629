"""Markdown/CSV robustness tables and clean/adversarial/purified triptych plots."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import ATTACK_LABELS, EvalReport, ordered_attacks
from .geometry import as_tensor
from .victims import predict

FORMATS = ("markdown", "csv", "plots")
CSV_FIELDS = ("defense", "victim", "attack", "accuracy", "average", "clean_accuracy")


@dataclass
class Triptych:
    """One clean / adversarial / purified example with the victim's predictions."""

    example_id: str
    attack_name: str
    label: int
    clean: np.ndarray
    adversarial: np.ndarray
    purified: np.ndarray
    predictions: tuple[int, int, int]

    @property
    def verified(self) -> bool:
        """Adversarial fools the victim and purification restores the label."""
        _, adv, pur = self.predictions
        return adv != self.label and pur == self.label


def make_triptych(victim, purifier, record) -> Triptych:
    purified = as_tensor(purifier(record.adversarial)).detach().numpy()
    preds = tuple(predict(victim, c) for c in (record.clean, record.adversarial, purified))
    return Triptych(record.example_id, record.attack_name, int(record.label), np.asarray(record.clean),
                    np.asarray(record.adversarial), purified, preds)


def find_triptychs(victim, purifier, records, per_attack: int = 1) -> list[Triptych]:
    """First ``per_attack`` verified examples for each attack, in store order."""
    found: dict[str, list[Triptych]] = {}
    for r in records:
        if r.attack_name == "clean" or len(found.get(r.attack_name, [])) >= per_attack:
            continue
        if predict(victim, r.adversarial) == r.label:
            continue
        t = make_triptych(victim, purifier, r)
        if t.verified:
            found.setdefault(r.attack_name, []).append(t)
    return [t for a in ordered_attacks(found) for t in found[a]]


def _fmt(v: float) -> str:
    return f"{v:.1f}"


def _attacks(reports) -> list[str]:
    names = set()
    for r in reports:
        names |= set(r.per_attack_accuracy)
    return ordered_attacks(names)


def markdown_table(reports: list[EvalReport]) -> str:
    attacks = _attacks(reports)
    header = ["Victim", "Defense", *[ATTACK_LABELS.get(a, a) for a in attacks], "Avg.", "Clean"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in reports:
        cells = [r.victim_name, r.defense_name]
        cells += [_fmt(r.per_attack_accuracy[a]) if a in r.per_attack_accuracy else "-" for a in attacks]
        cells += [_fmt(r.average), _fmt(r.clean_accuracy)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def csv_rows(reports: list[EvalReport]) -> list[dict]:
    rows = []
    for r in reports:
        for a in ordered_attacks(r.per_attack_accuracy):
            rows.append({"defense": r.defense_name, "victim": r.victim_name, "attack": a,
                         "accuracy": _fmt(r.per_attack_accuracy[a]), "average": _fmt(r.average),
                         "clean_accuracy": _fmt(r.clean_accuracy)})
    return rows


def _class_name(label: int, class_names) -> str:
    if class_names is not None and 0 <= label < len(class_names):
        return class_names[label]
    return str(label)


def plot_triptych(t: Triptych, path: Path, class_names=None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(9, 3.2))
    panels = (("clean", t.clean), ("adversarial", t.adversarial), ("purified", t.purified))
    for i, ((title, pts), pred) in enumerate(zip(panels, t.predictions)):
        ax = fig.add_subplot(1, 3, i + 1, projection="3d")
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=2, c=pts[:, 2], cmap="viridis")
        ax.set_axis_off()
        mark = "ok" if pred == t.label else "wrong"
        ax.set_title(f"{title}\npred: {_class_name(pred, class_names)} ({mark})", fontsize=9)
    fig.suptitle(f"{t.example_id} / {t.attack_name} / true: {_class_name(t.label, class_names)}", fontsize=10)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def render_report(reports: list[EvalReport], out_dir, formats=FORMATS, triptychs=(), class_names=None,
                  extra_tables: dict[str, str] | None = None) -> dict:
    """Write the requested formats into ``out_dir``; returns the file manifest.

    File names are fixed (``robustness.md``, ``robustness.csv``,
    ``triptych-<attack>-<example>.png``) so reruns overwrite in place.
    """
    formats = tuple(formats)
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report format(s) {sorted(unknown)}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    files: list[str] = []
    if "markdown" in formats:
        text = "# Robustness\n\nTop-1 accuracy (%) on defended adversarial examples.\n\n" + markdown_table(reports)
        for title, table in (extra_tables or {}).items():
            text += f"\n## {title}\n\n{table}"
        for t in triptychs:
            text += f"\n![{t.attack_name}](triptych-{t.attack_name}-{t.example_id}.png)\n"
        (out / "robustness.md").write_text(text)
        files.append("robustness.md")
    if "csv" in formats:
        with open(out / "robustness.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            writer.writerows(csv_rows(reports))
        files.append("robustness.csv")
    if "plots" in formats:
        for t in triptychs:
            name = f"triptych-{t.attack_name}-{t.example_id}.png"
            plot_triptych(t, out / name, class_names)
            files.append(name)
    manifest = {"files": sorted(files), "formats": list(formats),
                "reports": [{"defense": r.defense_name, "victim": r.victim_name} for r in reports]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def table_markdown(columns, rows) -> str:
    """Generic markdown table for ablation-style row dicts."""
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c, "")
            cells.append(_fmt(v) if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
