"""Run configuration, training loop and evaluation drivers used by the CLI."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import load_corpus, make_batch, write_recipes
from .dsp import StftConfig, read_wav, write_wav
from .metrics import EvalItem, EvalReport, evaluate_items
from .model import (
    LossBreakdown,
    LossWeights,
    ModelConfig,
    SupervisedLoss,
    SupervisedModel,
    TrainState,
    UdtModel,
    separate,
    supervised_step,
    train_step,
)
from .tensor import SeededRng

log = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "ConfigError",
    "run_training",
    "make_testset",
    "load_manifest",
    "evaluate_manifest",
]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a training run needs. Unknown keys in a JSON config are rejected."""

    corpus: str = ""
    mode: str = "udt"
    seed: int | None = None
    steps: int = 1000
    batch_size: int = 8
    crop_frames: int | None = 256
    clip_seconds: float = 2.0
    # STFT
    window_size: int = 2048
    hop: int = 16
    fft_size: int = 2048
    kept_bins: int = 1024
    # model
    width: int = 1024
    n_blocks: int = 3
    kernel_width: int = 5
    dropout: float = 0.3
    dtype: str = "float32"
    # loss and optimizer
    w_rec: float = 1.0
    w_cc: float = 1.0
    w_l2: float = 1e-3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # outputs
    checkpoint: str = "model.udtw"
    loss_log: str = "loss.csv"
    recipe_log: str | None = None
    checkpoint_every: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            data = json.load(f)
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def validate(self) -> None:
        if self.mode not in ("udt", "supervised"):
            raise ConfigError(f"mode must be 'udt' or 'supervised', got {self.mode!r}")
        if self.seed is None:
            raise ConfigError("a seed is required for training")
        if not self.corpus or not Path(self.corpus).is_dir():
            raise ConfigError(f"corpus directory {self.corpus!r} does not exist")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        try:
            self.stft_config()
            self.model_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def stft_config(self) -> StftConfig:
        return StftConfig(self.window_size, self.hop, self.fft_size, self.kept_bins)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_bins=self.kept_bins, width=self.width, n_blocks=self.n_blocks,
                           kernel_width=self.kernel_width, dropout=self.dropout, dtype=self.dtype)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_rec, self.w_cc, self.w_l2)

    def to_dict(self) -> dict:
        return asdict(self)


def _atomic_text(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _fmt(v: float) -> str:
    return repr(float(v))


def run_training(cfg: RunConfig, resume: str | None = None, progress=None):
    """Train for ``cfg.steps`` further steps; returns ``(model, state, rows)``.

    Writes the checkpoint and the per-step loss CSV. When resuming, step
    numbering continues from the checkpoint and new rows are appended.
    """
    cfg.validate()
    pool, clean = load_corpus(cfg.corpus)
    stft_cfg = cfg.stft_config()
    batch_mode = "unpaired" if cfg.mode == "udt" else "paired"
    if batch_mode == "paired" and not pool.has_stems:
        raise ConfigError("supervised mode needs paired data (mixture-stems/target and "
                          "mixture-stems/interferer); the corpus only has unpaired mixtures")
    if batch_mode == "unpaired" and clean is None:
        raise ConfigError("udt mode needs a clean-target directory in the corpus")

    if resume:
        model, state, header = load_checkpoint(resume)
        if model.kind != cfg.mode:
            raise ConfigError(f"checkpoint holds a {model.kind} model, config asks for {cfg.mode}")
        if state is None:
            raise ConfigError("checkpoint has no training state to resume from")
        data_rng = SeededRng(0)
        data_rng.set_state(header["extra"]["data_rng"])
    else:
        cls = UdtModel if cfg.mode == "udt" else SupervisedModel
        model = cls(cfg.model_config(), seed=cfg.seed)
        state = TrainState.create(model, cfg.seed + 1, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        data_rng = SeededRng(cfg.seed + 2)

    weights = cfg.loss_weights()
    terms = LossBreakdown.TERMS if cfg.mode == "udt" else SupervisedLoss.TERMS
    rows: list[list[float]] = []
    log_path = Path(cfg.loss_log)
    new_log = not (resume and log_path.exists())
    lines = [] if not new_log else [",".join(("step",) + terms)]

    def flush_log():
        text = "\n".join(lines) + "\n" if lines else ""
        if new_log:
            _atomic_text(log_path, text)
        else:
            prior = log_path.read_text()
            _atomic_text(log_path, prior + text)

    def save():
        extra = {"data_rng": data_rng.get_state(), "stft": stft_cfg.to_dict(), "run": cfg.to_dict()}
        save_checkpoint(cfg.checkpoint, model, state, extra)

    try:
        for _ in range(cfg.steps):
            batch = make_batch(pool, clean, cfg.batch_size, batch_mode, data_rng, stft_cfg,
                               cfg.clip_seconds, cfg.crop_frames, dtype=model.config.np_dtype)
            if cfg.recipe_log:
                write_recipes(cfg.recipe_log, batch.recipes)
            if cfg.mode == "udt":
                loss = train_step(model, state, batch, weights)
            else:
                loss = supervised_step(model, state, batch, weights)
            row = loss.as_row()
            rows.append(row)
            lines.append(",".join([str(state.step)] + [_fmt(v) for v in row]))
            if progress is not None:
                progress(state.step, loss)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save()
    finally:
        # keep the rows logged so far even if a step blew up
        flush_log()
    save()
    return model, state, rows


# test sets and evaluation ----------------------------------------------------

def make_testset(corpus: str, out_dir: str, n: int, seed: int, clip_seconds: float = 2.0) -> Path:
    """Write ``n`` 0 dB test mixtures with their stems plus a JSONL manifest."""
    pool, _ = load_corpus(corpus)
    if not pool.has_stems:
        raise ConfigError("test sets need mixture stems")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(seed)
    # STFT settings do not matter here; only the waveforms are kept
    batch = make_batch(pool, None, n, "paired", rng, StftConfig(256, 64, 256, 128), clip_seconds)
    lines = []
    for i in range(n):
        item = f"item{i:04d}"
        paths = {}
        for role, clip in (("mixture", batch.mixture_wave[i]), ("target", batch.target_wave[i]),
                           ("interferer", batch.interferer_wave[i])):
            p = out / f"{item}.{role}.wav"
            write_wav(p, clip)
            paths[role] = p.name
        lines.append(json.dumps({"id": item, **paths}, sort_keys=True))
    manifest = out / "manifest.jsonl"
    _atomic_text(manifest, "\n".join(lines) + "\n")
    return manifest


def load_manifest(path) -> list[dict]:
    """JSONL manifest; each line has ``id``, ``target``, ``interferer`` and
    ``estimate`` and/or ``mixture``. Relative paths resolve against the
    manifest's directory.

    A directory may be given instead: ``<dir>/manifest.jsonl`` is used if
    present, otherwise items are formed from files named
    ``<id>.{estimate,mixture,target,interferer}.wav``.
    """
    path = Path(path)
    if path.is_dir() and not (path / "manifest.jsonl").exists():
        return _scan_triples(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise ConfigError(f"manifest {path} does not exist")
    base = path.parent
    items = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("target", "interferer", "estimate", "mixture"):
            if key in rec and not os.path.isabs(rec[key]):
                rec[key] = str(base / rec[key])
        items.append(rec)
    if not items:
        raise ConfigError(f"manifest {path} lists no items")
    return items


def _scan_triples(root: Path) -> list[dict]:
    groups: dict[str, dict] = {}
    for f in sorted(root.glob("*.wav")):
        stem, _, role = f.stem.rpartition(".")
        if role in ("estimate", "mixture", "target", "interferer") and stem:
            groups.setdefault(stem, {"id": stem})[role] = str(f)
    items = [g for g in groups.values() if "target" in g and "interferer" in g
             and ("estimate" in g or "mixture" in g)]
    if not items:
        raise ConfigError(f"no evaluation triples found in {root}")
    return items


def evaluate_manifest(items: list[dict], model=None, stft_cfg: StftConfig | None = None,
                      estimate_dir=None) -> EvalReport:
    """Score each item; estimates are produced with ``model`` when given.

    Items whose signals differ in length are skipped with a warning and
    recorded in ``report.skipped``.
    """
    scored: list[EvalItem] = []
    skipped: list[str] = []
    for rec in items:
        target = read_wav(rec["target"]).samples
        interf = read_wav(rec["interferer"]).samples
        if model is not None:
            mix = read_wav(rec["mixture"])
            est_clip = separate(model, mix, stft_cfg)
            if estimate_dir is not None:
                write_wav(Path(estimate_dir) / f"{rec['id']}.estimate.wav", est_clip)
            est = est_clip.samples
        else:
            key = "estimate" if "estimate" in rec else "mixture"
            est = read_wav(rec[key]).samples
        if not (len(target) == len(interf) == len(est)):
            log.warning("skipping %s: length mismatch (%d, %d, %d)", rec["id"], len(target), len(interf), len(est))
            skipped.append(rec["id"])
            continue
        scored.append(EvalItem(rec["id"], target, interf, est))
    report = evaluate_items(scored)
    report.skipped = skipped
    if not report.ids:
        raise ConfigError("no item could be evaluated")
    return report
