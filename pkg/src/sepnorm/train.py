"""Pretraining runs, post-hoc analysis and probing for one configuration."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .analysis import AnalysisReport, analyze_embeddings, linear_probe
from .data import Dataset, dataset_digest, load_dataset
from .encoder import Encoder, EncoderConfig
from .objectives import Decoder, ObjectiveConfig, sample_mask, u_mae_loss

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("scheme", "cls_norm", "token_norm", "lambda", "target", "seed", "steps", "l_mae_final",
                  "cls_uniformity", "token_uniformity", "cls_effrank", "token_effrank", "probe_acc")
LOG_COLUMNS = ("step", "l_mae", "l_u", "total")
MATRIX_MAGIC = b"SNMX"
L_MAE_TAIL = 50


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    steps: int = 2000
    batch_size: int = 32
    weight_decay: float = 0.0


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; ``seed`` also seeds the encoder init."""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0

    def __post_init__(self):
        if self.encoder.seed != self.seed:
            object.__setattr__(self, "encoder", replace(self.encoder, seed=self.seed))

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "objective": self.objective.to_dict(),
                "optim": asdict(self.optim), "probe": asdict(self.probe), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return cls(EncoderConfig.from_dict(d["encoder"]), ObjectiveConfig(**d["objective"]),
                   OptimConfig(**d["optim"]), ProbeConfig(**d["probe"]), d["seed"])

    def key(self, data_digest: str = "") -> str:
        """Content hash identifying this run on a given dataset."""
        blob = json.dumps({"run": self.to_dict(), "data": data_digest}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- optimizer

class SGD:
    """Heavy-ball SGD: v <- momentum*v + g + wd*p ; p <- p - lr*v."""

    def __init__(self, params: dict, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        c = self.cfg
        for k, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad + c.weight_decay * t.data if c.weight_decay else t.grad
            v = self.velocity[k]
            v *= c.momentum
            v += g
            t.data = t.data - c.lr * v

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    encoder: Encoder
    decoder: Decoder
    steps_run: int
    l_mae_history: list[float]
    checkpoint_path: Path | None = None


def build_models(cfg: RunConfig) -> tuple[Encoder, Decoder]:
    return Encoder(cfg.encoder), Decoder(cfg.encoder, cfg.objective, seed=cfg.seed)


def pretrain(cfg: RunConfig, train: Dataset, out_dir: str | Path | None = None) -> PretrainResult:
    """Train encoder+decoder on the configured objective.

    With ``out_dir`` set, writes ``train_log.csv`` (one row per step) and
    ``checkpoint.bin``. A non-finite loss restores the last finite parameters,
    saves them and raises :class:`TrainingDiverged`.
    """
    encoder, decoder = build_models(cfg)
    if train.images.shape[1:] != (cfg.encoder.image_side,) * 2:
        raise ValueError(f"dataset images {train.images.shape[1:]} do not match image_side {cfg.encoder.image_side}")
    rng = np.random.default_rng(cfg.seed)
    images = train.floats()
    params = {**encoder.named_parameters(), **{f"decoder.{k}": v for k, v in decoder.named_parameters().items()}}
    opt = SGD(params, cfg.optim)
    B = min(cfg.optim.batch_size, len(images))
    L = cfg.encoder.num_patches
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    history: list[float] = []
    order = np.empty(0, dtype=np.int64)
    encoder.train()
    decoder.train()
    try:
        for step in range(1, cfg.optim.steps + 1):
            if len(order) < B:
                order = np.concatenate([order, rng.permutation(len(images))])
            idx, order = order[:B], order[B:]
            plan = sample_mask(L, cfg.objective.mask_ratio, rng, B)
            snapshot = ckpt.model_tensors(encoder, decoder)
            total, l_mae, l_u = u_mae_loss(images[idx], encoder, decoder, cfg.objective, plan)
            problem = None
            if not np.isfinite(total.item()):
                problem = f"non-finite loss (l_mae={l_mae.item()}, l_u={l_u.item()})"
            else:
                opt.zero_grad()
                total.backward()
                opt.step()
                bad = [k for k, v in ckpt.model_tensors(encoder, decoder).items() if not np.isfinite(v).all()]
                if bad:
                    problem = f"non-finite parameters or BN statistics ({', '.join(bad[:3])})"
            if problem is not None:
                # the snapshot holds the parameters this step started from
                ckpt.load_into(snapshot, encoder, decoder)
                if out is not None:
                    ckpt.save(out / "checkpoint.bin", encoder, decoder, cfg.objective, step - 1,
                              rng.bit_generator.state)
                raise TrainingDiverged(f"training diverged at step {step}: {problem}")
            history.append(l_mae.item())
            if writer is not None:
                writer.writerow((step, repr(l_mae.item()), repr(l_u.item()), repr(total.item())))
    finally:
        if writer is not None:
            log_file.close()
    path = None
    if out is not None:
        path = out / "checkpoint.bin"
        ckpt.save(path, encoder, decoder, cfg.objective, cfg.optim.steps, rng.bit_generator.state)
    return PretrainResult(encoder, decoder, cfg.optim.steps, history, path)


# ---------------------------------------------------------------- analysis

def write_matrix(path: str | Path, m: np.ndarray) -> None:
    """SNMX: b"SNMX", u32 rows, u32 cols, rows*cols little-endian float64."""
    m = np.asarray(m, dtype="<f8")
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC + struct.pack("<2I", *m.shape))
        f.write(np.ascontiguousarray(m).tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MATRIX_MAGIC:
        raise ValueError(f"{path}: not an SNMX matrix")
    rows, cols = struct.unpack_from("<2I", raw, 4)
    return np.frombuffer(raw, dtype="<f8", offset=12, count=rows * cols).reshape(rows, cols).astype(np.float64)


def check_compatible(encoder: Encoder, ds: Dataset) -> None:
    side = encoder.cfg.image_side
    if ds.images.shape[1:] != (side, side):
        raise ValueError(f"dataset images {ds.images.shape[1:]} do not match encoder image_side {side}")


def embed_split(encoder: Encoder, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    check_compatible(encoder, ds)
    return encoder.encode_numpy(ds.floats())


def probe_accuracy(encoder: Encoder, splits: dict[str, Dataset], cfg: ProbeConfig, seed: int) -> float:
    """Linear probe on frozen [CLS] embeddings; token outputs are never read."""
    train_cls, _ = embed_split(encoder, splits["train"])
    test_cls, _ = embed_split(encoder, splits["test"])
    return linear_probe(train_cls, splits["train"].labels, test_cls, splits["test"].labels,
                        epochs=cfg.epochs, lr=cfg.lr, seed=seed)


def report_row(cfg: RunConfig, report: AnalysisReport, l_mae_final: float | None) -> dict:
    s = cfg.encoder.norm_scheme
    return {
        "scheme": s.label, "cls_norm": s.cls_kind.upper(), "token_norm": s.token_kind.upper(),
        "lambda": repr(float(cfg.objective.lam)), "target": cfg.objective.uniformity_target,
        "seed": cfg.seed, "steps": cfg.optim.steps,
        "l_mae_final": "" if l_mae_final is None else repr(float(l_mae_final)),
        "cls_uniformity": repr(report.cls_uniformity), "token_uniformity": repr(report.token_uniformity),
        "cls_effrank": repr(report.cls_effective_rank), "token_effrank": repr(report.token_effective_rank),
        "probe_acc": "" if report.probe_accuracy is None else repr(report.probe_accuracy),
    }


def write_report(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_plot_data(out: Path, report: AnalysisReport) -> None:
    with open(out / "per_dim_stats.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("dim", "cls_mean", "cls_std", "token_mean", "token_std"))
        for i, row in enumerate(zip(*report.cls_stats, *report.token_stats)):
            w.writerow((i, *map(repr, map(float, row))))
    with open(out / "spectrum.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("index", "cls_sv", "cls_sv_normalized", "token_sv", "token_sv_normalized"))
        c, t = report.cls_singular_values, report.token_singular_values
        cmax, tmax = c[0] or 1.0, t[0] or 1.0
        for i in range(max(len(c), len(t))):
            vals = [c[i] if i < len(c) else "", c[i] / cmax if i < len(c) else "",
                    t[i] if i < len(t) else "", t[i] / tmax if i < len(t) else ""]
            w.writerow((i, *(repr(float(v)) if v != "" else "" for v in vals)))


def l_mae_tail(history: list[float]) -> float | None:
    if not history:
        return None
    return float(np.mean(history[-L_MAE_TAIL:]))


def read_log_history(path: str | Path) -> list[float]:
    with open(path, newline="") as f:
        return [float(r["l_mae"]) for r in csv.DictReader(f)]


def analyze(encoder: Encoder, splits: dict[str, Dataset], cfg: RunConfig, out_dir: str | Path | None = None,
            with_probe: bool = True, l_mae_final: float | None = None) -> tuple[AnalysisReport, dict]:
    """Embed the test split without masking, run every diagnostic, optionally probe.

    With ``out_dir`` set, dumps ``cls_embeddings.snmx``/``token_embeddings.snmx``
    and writes ``report.csv`` plus plot data.
    """
    cls_emb, tok_emb = embed_split(encoder, splits["test"])
    report = analyze_embeddings(cls_emb, tok_emb)
    if with_probe:
        report.probe_accuracy = probe_accuracy(encoder, splits, cfg.probe, cfg.seed)
    row = report_row(cfg, report, l_mae_final)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_matrix(out / "cls_embeddings.snmx", cls_emb)
        write_matrix(out / "token_embeddings.snmx", tok_emb.reshape(-1, tok_emb.shape[-1]))
        write_report(out / "report.csv", [row])
        write_plot_data(out, report)
    return report, row


def run_config_from_checkpoint(ck: ckpt.Checkpoint, probe: ProbeConfig | None = None,
                               optim: OptimConfig | None = None) -> RunConfig:
    enc = EncoderConfig.from_dict(ck.encoder_config)
    return RunConfig(enc, ObjectiveConfig(**ck.objective_config),
                     replace(optim or OptimConfig(), steps=ck.step), probe or ProbeConfig(), enc.seed)


def run_cell(cfg: RunConfig, data_dir: str | Path, out_dir: str | Path) -> dict:
    """pretrain followed by analyze (with probe); returns the report row."""
    splits = load_dataset(data_dir)
    res = pretrain(cfg, splits["train"], out_dir)
    _, row = analyze(res.encoder, splits, cfg, out_dir, with_probe=True, l_mae_final=l_mae_tail(res.l_mae_history))
    return row


def data_key(data_dir: str | Path) -> str:
    return dataset_digest(data_dir)
