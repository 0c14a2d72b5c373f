"""Result emission: metrics reports, loss traces, manifests and optional SVG plots."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import fmt
from .distill.metrics import KGE_VARIANT, SkillMetrics
from .errors import IoError


def _skill_from(doc: dict) -> SkillMetrics:
    # undefined scores are stored as null
    return SkillMetrics(**{k: (float("nan") if v is None else v) for k, v in doc.items()})


@dataclass
class MetricsReport:
    mode: str
    seed: int
    config_digest: str
    metrics: dict = field(default_factory=dict)          # variable -> SkillMetrics
    per_node: dict = field(default_factory=dict)         # variable -> {node: SkillMetrics}
    kge_variant: str = KGE_VARIANT
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "kge_variant": self.kge_variant,
            "metrics": {k: (m.to_dict() if m is not None else None) for k, m in self.metrics.items()},
        }
        if self.per_node:
            doc["per_node"] = {v: {str(n): m.to_dict() for n, m in rows.items()}
                               for v, rows in self.per_node.items()}
        doc.update(self.extra)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        known = {"mode", "seed", "config_digest", "kge_variant", "metrics", "per_node"}
        metrics = {k: (_skill_from(m) if m is not None else None) for k, m in doc["metrics"].items()}
        per_node = {v: {int(n): _skill_from(m) for n, m in rows.items()}
                    for v, rows in doc.get("per_node", {}).items()}
        return cls(doc["mode"], doc["seed"], doc["config_digest"], metrics, per_node,
                   doc.get("kge_variant", KGE_VARIANT), {k: v for k, v in doc.items() if k not in known})

    def write(self, path) -> Path:
        return write_json(self.to_dict(), path)


def write_json(doc, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def write_loss_trace(trace, path) -> Path:
    path = Path(path)
    lines = ["iter,loss"] + [f"{i},{fmt(v)}" for i, v in enumerate(trace)]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def write_manifest(out_dir, config_digest: str, command: str, files) -> Path:
    out_dir = Path(out_dir)
    names = sorted(str(Path(f).relative_to(out_dir)) for f in files)
    return write_json({"command": command, "config_digest": config_digest, "files": names},
                      out_dir / "manifest.json")


def plot_lines(series: dict, path, title: str = "", xlabel: str = "step", ylabel: str = "") -> Path:
    """Line plot to SVG. Needs matplotlib; output is byte-stable for equal input."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ecodistill"
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for label, ys in series.items():
        ys = np.asarray(ys, dtype=np.float64)
        ax.plot(np.arange(len(ys)), ys, label=label, linewidth=1.0)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path
