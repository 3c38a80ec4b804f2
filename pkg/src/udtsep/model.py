"""Cycle-consistent dual VAE for unsupervised domain translation.

Two encoder/decoder pairs, one for the mixture domain (``s``) and one for the
clean-source domain (``t``). The last encoder block and the first decoder
block are single objects referenced by both domains, so their parameters are
literally the same arrays. Separation runs the mixture encoder followed by
the clean decoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import layers as L
from .dsp import MagSpectrogram, StftConfig, WaveClip, compress, reconstruct_waveform, stft
from .tensor import SeededRng, Tensor, backward, gaussian_sample, l2_sq, mse

__all__ = [
    "ModelConfig",
    "ConvBlock",
    "TConvBlock",
    "EncoderStack",
    "DecoderStack",
    "UdtModel",
    "SupervisedModel",
    "LossWeights",
    "LossBreakdown",
    "SupervisedLoss",
    "Adam",
    "TrainState",
    "NonFiniteLossError",
    "reparameterize",
    "forward_paths",
    "compute_loss",
    "supervised_loss",
    "train_step",
    "supervised_step",
    "separate",
    "separate_spectrogram",
]


@dataclass
class ModelConfig:
    n_bins: int = 1024
    width: int = 1024
    n_blocks: int = 3
    kernel_width: int = 5
    dropout: float = 0.3
    activation: str = "softplus"
    batch_norm: bool = True
    latent_noise: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_blocks < 2:
            raise ValueError("need at least two blocks (one shared, one domain-specific)")
        if self.activation not in ("softplus", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _act(x: Tensor, kind: str) -> Tensor:
    return L.softplus(x) if kind == "softplus" else x


class ConvBlock:
    """conv -> activation -> batch norm -> dropout."""

    def __init__(self, c_in, c_out, cfg: ModelConfig, rng: SeededRng):
        dt = cfg.np_dtype
        self.conv = L.Conv1d(c_in, c_out, cfg.kernel_width, rng=rng, dtype=dt)
        self.bn = L.BatchNorm1d(c_out, dtype=dt) if cfg.batch_norm else None
        self.drop = L.Dropout(cfg.dropout)
        self.activation = cfg.activation

    def __call__(self, x: Tensor, rng: SeededRng | None) -> Tensor:
        h = _act(self.conv(x), self.activation)
        if self.bn is not None:
            h = self.bn(h)
        return self.drop(h, rng)

    def set_training(self, flag: bool) -> None:
        if self.bn is not None:
            self.bn.training = flag
        self.drop.training = flag

    def parameters(self) -> dict[str, Tensor]:
        p = {f"conv.{k}": v for k, v in self.conv.parameters().items()}
        if self.bn is not None:
            p.update({f"bn.{k}": v for k, v in self.bn.parameters().items()})
        return p

    def buffers(self) -> dict[str, np.ndarray]:
        return {} if self.bn is None else {f"bn.{k}": v for k, v in self.bn.buffers().items()}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self.bn, name.split(".", 1)[1], value)


class TConvBlock(ConvBlock):
    """Transposed-conv block; the output block keeps only the activation."""

    def __init__(self, c_in, c_out, cfg: ModelConfig, rng: SeededRng, output: bool = False):
        dt = cfg.np_dtype
        self.conv = L.TransposedConv1d(c_in, c_out, cfg.kernel_width, rng=rng, dtype=dt)
        self.bn = L.BatchNorm1d(c_out, dtype=dt) if cfg.batch_norm and not output else None
        self.drop = L.Dropout(0.0 if output else cfg.dropout)
        self.activation = cfg.activation


class _Stack:
    blocks: list

    def __call__(self, x: Tensor, rng: SeededRng | None = None) -> Tensor:
        for b in self.blocks:
            x = b(x, rng)
        return x

    def set_training(self, flag: bool) -> None:
        for b in self.blocks:
            b.set_training(flag)


class EncoderStack(_Stack):
    def __init__(self, cfg: ModelConfig, rng: SeededRng, shared: ConvBlock):
        self.blocks = [ConvBlock(cfg.n_bins, cfg.width, cfg, rng)]
        self.blocks += [ConvBlock(cfg.width, cfg.width, cfg, rng) for _ in range(cfg.n_blocks - 2)]
        self.blocks.append(shared)


class DecoderStack(_Stack):
    def __init__(self, cfg: ModelConfig, rng: SeededRng, shared: TConvBlock):
        self.blocks = [shared]
        self.blocks += [TConvBlock(cfg.width, cfg.width, cfg, rng) for _ in range(cfg.n_blocks - 2)]
        self.blocks.append(TConvBlock(cfg.width, cfg.n_bins, cfg, rng, output=True))


class _Model:
    kind = ""
    config: ModelConfig

    def named_blocks(self) -> dict[str, ConvBlock]:
        """Unique blocks by canonical name (shared blocks listed once)."""
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for bname, block in self.named_blocks().items():
            for pname, p in block.parameters().items():
                out[f"{bname}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for bname, block in self.named_blocks().items():
            for k, v in block.buffers().items():
                out[f"{bname}.{k}"] = v
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        bname, rest = name.rsplit(".", 2)[0], ".".join(name.rsplit(".", 2)[1:])
        self.named_blocks()[bname].set_buffer(rest, value)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for b in self.named_blocks().values():
            b.set_training(flag)

    def train(self):
        self.set_training(True)
        return self

    def eval(self):
        self.set_training(False)
        return self

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.config.np_dtype))

    def _check(self, x: Tensor, what: str) -> None:
        want = self.config.n_bins if what == "input" else self.config.width
        if x.ndim != 3 or x.shape[1] != want:
            raise ValueError(f"expected {what} of shape (B, {want}, T), got {x.shape}")


class UdtModel(_Model):
    """Dual VAE with shared final-encoder and first-decoder blocks."""

    kind = "udt"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = cfg or ModelConfig()
        rng = SeededRng(seed)
        enc_shared = ConvBlock(cfg.width, cfg.width, cfg, rng)
        dec_shared = TConvBlock(cfg.width, cfg.width, cfg, rng)
        self.E_s = EncoderStack(cfg, rng, enc_shared)
        self.E_t = EncoderStack(cfg, rng, enc_shared)
        self.D_s = DecoderStack(cfg, rng, dec_shared)
        self.D_t = DecoderStack(cfg, rng, dec_shared)
        self.training = True

    @classmethod
    def linear_bypass(cls, n_bins: int, n_blocks: int = 3, dtype: str = "float64") -> "UdtModel":
        """Test configuration in which every pathway is exactly the identity.

        Delta kernels, zero biases, no normalization, dropout or latent
        noise, identity activations.
        """
        cfg = ModelConfig(n_bins=n_bins, width=n_bins, n_blocks=n_blocks, dropout=0.0,
                          activation="identity", batch_norm=False, latent_noise=False, dtype=dtype)
        model = cls(cfg)
        for block in model.named_blocks().values():
            w = np.zeros_like(block.conv.weight.data)
            c = cfg.kernel_width // 2
            for i in range(n_bins):
                w[i, i, c] = 1.0
            block.conv.weight.data = w
        return model

    def named_blocks(self) -> dict[str, ConvBlock]:
        out = {}
        n = self.config.n_blocks
        for i in range(n - 1):
            out[f"E_s.{i}"] = self.E_s.blocks[i]
            out[f"E_t.{i}"] = self.E_t.blocks[i]
        out["shared.enc"] = self.E_s.blocks[-1]
        out["shared.dec"] = self.D_s.blocks[0]
        for i in range(1, n):
            out[f"D_s.{i}"] = self.D_s.blocks[i]
            out[f"D_t.{i}"] = self.D_t.blocks[i]
        return out

    def encoder(self, domain: str) -> EncoderStack:
        if domain not in ("s", "t"):
            raise ValueError(f"domain must be 's' or 't', got {domain!r}")
        return self.E_s if domain == "s" else self.E_t

    def decoder(self, domain: str) -> DecoderStack:
        if domain not in ("s", "t"):
            raise ValueError(f"domain must be 's' or 't', got {domain!r}")
        return self.D_s if domain == "s" else self.D_t

    def encode(self, domain: str, x, rng: SeededRng | None = None) -> Tensor:
        x = self._as_input(x)
        self._check(x, "input")
        return self.encoder(domain)(x, rng)

    def decode(self, domain: str, z, rng: SeededRng | None = None) -> Tensor:
        z = self._as_input(z)
        self._check(z, "latent")
        return self.decoder(domain)(z, rng)

    def shared_blocks_identical(self) -> bool:
        """True when both domains reference one block object with equal arrays."""
        pairs = ((self.E_s.blocks[-1], self.E_t.blocks[-1]), (self.D_s.blocks[0], self.D_t.blocks[0]))
        for a, b in pairs:
            if a is not b:
                return False
            for (ka, pa), (kb, pb) in zip(a.parameters().items(), b.parameters().items()):
                if ka != kb or pa.data.tobytes() != pb.data.tobytes():
                    return False
        return True


class SupervisedModel(_Model):
    """One encoder and one decoder: the paired denoising-VAE baseline."""

    kind = "supervised"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = cfg or ModelConfig()
        rng = SeededRng(seed)
        self.E = EncoderStack(cfg, rng, ConvBlock(cfg.width, cfg.width, cfg, rng))
        self.D = DecoderStack(cfg, rng, TConvBlock(cfg.width, cfg.width, cfg, rng))
        self.training = True

    def named_blocks(self) -> dict[str, ConvBlock]:
        out = {f"E.{i}": b for i, b in enumerate(self.E.blocks)}
        out.update({f"D.{i}": b for i, b in enumerate(self.D.blocks)})
        return out

    def encode(self, x, rng: SeededRng | None = None) -> Tensor:
        x = self._as_input(x)
        self._check(x, "input")
        return self.E(x, rng)

    def decode(self, z, rng: SeededRng | None = None) -> Tensor:
        z = self._as_input(z)
        self._check(z, "latent")
        return self.D(z, rng)


def reparameterize(mu: Tensor, rng: SeededRng | None, training: bool, enabled: bool = True) -> Tensor:
    """``mu + eps`` with unit-variance Gaussian ``eps`` in training mode, else ``mu``."""
    if not training or not enabled:
        return mu
    if rng is None:
        raise ValueError("training-mode reparameterization needs an rng")
    return mu + gaussian_sample(mu.shape, rng, dtype=mu.dtype)


@dataclass
class LossWeights:
    rec: float = 1.0
    cc: float = 1.0
    l2: float = 1e-3

    def __post_init__(self):
        if min(self.rec, self.cc, self.l2) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    rec_s: float
    rec_t: float
    straight_s: float
    straight_t: float
    cross_s: float
    cross_t: float
    l2_s: float
    l2_t: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    TERMS = ("rec_s", "rec_t", "straight_s", "straight_t", "cross_s", "cross_t", "l2_s", "l2_t", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in self.TERMS]


@dataclass
class SupervisedLoss:
    rec: float
    l2: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    TERMS = ("rec", "l2", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in self.TERMS]


def forward_paths(model: UdtModel, M, C, rng: SeededRng | None = None) -> dict[str, Tensor]:
    """The four mapping pathways plus the two deterministic latents.

    Keys: ``M_hat`` (E_s->D_s), ``C_from_M`` (E_s->D_t), ``C_hat``
    (E_t->D_t), ``M_from_C`` (E_t->D_s), ``mu_s``, ``mu_t``, ``z_s``, ``z_t``.
    """
    M, C = model._as_input(M), model._as_input(C)
    if M.shape != C.shape:
        raise ValueError(f"mixture and clean batches differ in shape: {M.shape} vs {C.shape}")
    noise = model.config.latent_noise
    mu_s = model.encode("s", M, rng)
    mu_t = model.encode("t", C, rng)
    z_s = reparameterize(mu_s, rng, model.training, noise)
    z_t = reparameterize(mu_t, rng, model.training, noise)
    return {
        "M_hat": model.decode("s", z_s, rng),
        "C_from_M": model.decode("t", z_s, rng),
        "C_hat": model.decode("t", z_t, rng),
        "M_from_C": model.decode("s", z_t, rng),
        "mu_s": mu_s,
        "mu_t": mu_t,
        "z_s": z_s,
        "z_t": z_t,
    }


def compute_loss(model: UdtModel, M, C, weights: LossWeights | None = None,
                 rng: SeededRng | None = None) -> LossBreakdown:
    """Reconstruction, straight/cross cycle-consistency and l2 terms.

    Consistency targets are the deterministic encoder outputs; noise enters
    only through the first encoding.
    """
    w = weights or LossWeights()
    M, C = model._as_input(M), model._as_input(C)
    out = forward_paths(model, M, C, rng)
    mu_s, mu_t = out["mu_s"], out["mu_t"]
    terms = {
        "rec_s": mse(M, out["M_hat"]),
        "rec_t": mse(C, out["C_hat"]),
        "straight_s": mse(mu_s, model.encode("s", out["M_hat"], rng)),
        "straight_t": mse(mu_t, model.encode("t", out["C_hat"], rng)),
        "cross_s": mse(mu_s, model.encode("t", out["C_from_M"], rng)),
        "cross_t": mse(mu_t, model.encode("s", out["M_from_C"], rng)),
        "l2_s": l2_sq(mu_s),
        "l2_t": l2_sq(mu_t),
    }
    total = ((terms["rec_s"] + terms["rec_t"]) * w.rec
             + (terms["straight_s"] + terms["straight_t"] + terms["cross_s"] + terms["cross_t"]) * w.cc
             + (terms["l2_s"] + terms["l2_t"]) * w.l2)
    vals = {k: float(v.data) for k, v in terms.items()}
    return LossBreakdown(**vals, total=float(total.data), total_tensor=total)


def supervised_loss(model: SupervisedModel, M, C, weights: LossWeights | None = None,
                    rng: SeededRng | None = None) -> SupervisedLoss:
    w = weights or LossWeights()
    M, C = model._as_input(M), model._as_input(C)
    if M.shape != C.shape:
        raise ValueError(f"mixture and clean batches differ in shape: {M.shape} vs {C.shape}")
    mu = model.encode(M, rng)
    z = reparameterize(mu, rng, model.training, model.config.latent_noise)
    rec = mse(C, model.decode(z, rng))
    l2 = l2_sq(mu)
    total = rec * w.rec + l2 * w.l2
    return SupervisedLoss(float(rec.data), float(l2.data), float(total.data), total)


# optimization -------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


@dataclass
class TrainState:
    optimizer: Adam
    rng: SeededRng
    step: int = 0

    @classmethod
    def create(cls, model: _Model, seed: int, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        return cls(Adam(model.parameters(), lr, betas[0], betas[1], eps), SeededRng(seed))


class NonFiniteLossError(FloatingPointError):
    pass


def _apply(model, state: TrainState, loss) -> None:
    if not math.isfinite(loss.total):
        raise NonFiniteLossError(f"non-finite loss {loss.total} at step {state.step}")
    backward(loss.total_tensor)
    state.optimizer.step()
    state.step += 1
    loss.total_tensor = None


def train_step(model: UdtModel, state: TrainState, batch, weights: LossWeights | None = None) -> LossBreakdown:
    """One Adam update on an unpaired batch."""
    model.train()
    model.zero_grad()
    loss = compute_loss(model, batch.mixture, batch.clean, weights, state.rng)
    _apply(model, state, loss)
    return loss


def supervised_step(model: SupervisedModel, state: TrainState, batch,
                    weights: LossWeights | None = None) -> SupervisedLoss:
    """One Adam update of the denoising baseline on a paired batch."""
    if not batch.paired:
        raise ValueError("supervised training needs a paired batch")
    model.train()
    model.zero_grad()
    loss = supervised_loss(model, batch.mixture, batch.clean, weights, state.rng)
    _apply(model, state, loss)
    return loss


# inference ------------------------------------------------------------------

def separate_spectrogram(model: _Model, mix_mag: np.ndarray) -> np.ndarray:
    """Compressed mixture magnitudes ``(bins, T)`` -> estimated clean magnitudes."""
    was_training = model.training
    model.eval()
    try:
        x = model._as_input(mix_mag[None])
        if isinstance(model, UdtModel):
            est = model.decode("t", model.encode("s", x))
        else:
            est = model.decode(model.encode(x))
    finally:
        model.set_training(was_training)
    return np.maximum(est.data[0].astype(np.float64), 0.0)


def separate(model: _Model, mixture: WaveClip, cfg: StftConfig | None = None) -> WaveClip:
    """Mixture waveform -> estimated target waveform (same length)."""
    cfg = cfg or StftConfig()
    mag, phase = stft(mixture, cfg)
    est = separate_spectrogram(model, compress(mag).values.T)
    est_mag = MagSpectrogram(est.T, True, cfg)
    return reconstruct_waveform(est_mag, phase, len(mixture), mixture.sample_rate)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
