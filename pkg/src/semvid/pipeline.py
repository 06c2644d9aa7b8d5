"""End-to-end GoP orchestration, losses, three-stage training and evaluation.

A GoP is transmitted as one I frame plus per-P-frame residuals over a single
shared channel realization.  The receiver regenerates each P frame with the
decoupled diffusion compensation, runs the receiver-side motion coder, adds
the received residual back and decodes to pixels.

Training uses a single-step x0 estimate of the compensation chain inside the
reconstruction loss (the full m-step chain is used at evaluation time); the
diffusion loss follows the stop-gradient split between base and residual
noise predictors.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import nnkit as nk
from .channel import (
    ChannelRealization,
    make_realization,
    sample_rayleigh,
    snr_to_sigma2,
)
from .ddmfc import CompensationParams, ddmfc_sample, run_base_chain
from .diffusion import NoiseSchedule, build_schedule, find_start_step
from .metrics import ms_ssim, psnr
from .models import (
    MotionCoder,
    NetNoisePredictor,
    ResidualPredictor,
    SemanticCodec,
    UNetLite,
)
from .nnkit import ParamStore, Tensor

__all__ = [
    "ExperimentConfig",
    "SystemModels",
    "GopBundle",
    "OracleNoisePredictor",
    "MissingPrerequisiteError",
    "PipelineError",
    "cbr_of",
    "transmit_gop",
    "loss_reconstruction",
    "loss_diffusion",
    "train_stage",
    "evaluate",
]


class MissingPrerequisiteError(ValueError):
    """A training stage was requested before its prerequisite stages ran."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA = {
    "channel": {"snr_db": 12.0, "seed": 0},
    "diffusion": {"total_steps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "model": {
        "height": 32, "width": 32, "keep": 48,
        "unet_width1": 16, "unet_width2": 32,
        "motion_channels": 8, "mfa_d_tok": 4, "mfa_gamma": 0.1,
        "mfa_crossed": 0, "mfa_window": 3,
    },
    "train": {
        "gop_size": 10, "mu": 1e-4, "steps": 300,
        "lr_start": 1e-4, "lr_end": 2e-5, "lr_stages": 4,
        "weight_decay": 0.01, "seed": 0,
        "lambda_i": 0.7, "k": 0.3, "m": 10, "sigma_t": 0.0,
    },
    "eval": {"snr_list": "0,6,12,18", "seeds": "0,1,2", "gops": 3},
}


@dataclass
class ExperimentConfig:
    """Typed view of the [channel]/[diffusion]/[model]/[train]/[eval] sections."""

    channel: dict = field(default_factory=lambda: dict(_CONFIG_SCHEMA["channel"]))
    diffusion: dict = field(default_factory=lambda: dict(_CONFIG_SCHEMA["diffusion"]))
    model: dict = field(default_factory=lambda: dict(_CONFIG_SCHEMA["model"]))
    train: dict = field(default_factory=lambda: dict(_CONFIG_SCHEMA["train"]))
    eval: dict = field(default_factory=lambda: dict(_CONFIG_SCHEMA["eval"]))

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValueError(f"cannot read config file {path}")
        cfg = cls()
        for section in parser.sections():
            if section not in _CONFIG_SCHEMA:
                raise ValueError(f"unknown config section [{section}]")
            target = getattr(cfg, section)
            for key, raw in parser.items(section):
                if key not in _CONFIG_SCHEMA[section]:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                default = _CONFIG_SCHEMA[section][key]
                if isinstance(default, int):
                    target[key] = int(raw)
                elif isinstance(default, float):
                    target[key] = float(raw)
                else:
                    target[key] = raw
        return cfg

    def schedule(self) -> NoiseSchedule:
        d = self.diffusion
        return build_schedule(d["total_steps"], d["beta_start"], d["beta_end"])

    def compensation(self) -> CompensationParams:
        t = self.train
        k = float(t["k"])
        return CompensationParams(
            lambda_i=float(t["lambda_i"]), k_of_t=lambda _t: k,
            sigma_t=float(t["sigma_t"]), start_step=int(t["m"]),
        )


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

class SystemModels:
    """All trainable components, grouped into stores by freezing boundary.

    enc:  semantic encoder projection + transmitter motion coder
    dec:  semantic decoder projection + receiver motion coder
    base: base (reference-frame) noise predictor
    res:  residual noise predictor with MFA
    """

    def __init__(self, cfg: ExperimentConfig, seed: int = 0, dtype=None):
        m = cfg.model
        self.cfg = cfg
        self.enc = ParamStore(dtype=dtype)
        self.dec = ParamStore(dtype=dtype)
        self.base = ParamStore(dtype=dtype)
        self.res = ParamStore(dtype=dtype)

        self.codec = _CodecPair(
            int(m["height"]), int(m["width"]), int(m["keep"]),
            self.enc, self.dec, seed=seed,
        )
        L = self.codec.length
        self.motion_tx = MotionCoder(L, self.enc, prefix="motion_tx",
                                     channels=int(m["motion_channels"]), seed=seed + 1)
        self.motion_rx = MotionCoder(L, self.dec, prefix="motion_rx",
                                     channels=int(m["motion_channels"]), seed=seed + 2)
        widths = (int(m["unet_width1"]), int(m["unet_width2"]))
        self.base_net = UNetLite(L, self.base, prefix="base", widths=widths,
                                 seed=seed + 3)
        self.res_net = ResidualPredictor(
            L, self.res, prefix="residual", widths=widths,
            d_tok=int(m["mfa_d_tok"]), gamma=float(m["mfa_gamma"]),
            crossed=bool(int(m["mfa_crossed"])), seed=seed + 4,
        )
        self.mfa_window = int(m["mfa_window"])
        self.completed_stages: set[int] = set()

    @property
    def length(self) -> int:
        return self.codec.length

    def stores(self) -> dict[str, ParamStore]:
        return {"enc": self.enc, "dec": self.dec, "base": self.base, "res": self.res}

    def save(self, path: str):
        nk.save_params(self.stores(), path)
        # record training progress alongside the weight manifest
        with open(path + ".json") as fh:
            manifest = json.load(fh)
        manifest["trained_stages"] = sorted(self.completed_stages)
        with open(path + ".json", "w") as fh:
            json.dump(manifest, fh, indent=1)

    def load(self, path: str):
        nk.load_params(self.stores(), path)
        with open(path + ".json") as fh:
            manifest = json.load(fh)
        self.completed_stages = set(manifest.get("trained_stages", []))

    def base_predictor(self) -> NetNoisePredictor:
        return NetNoisePredictor(self.base_net)

    def residual_predictor(self) -> NetNoisePredictor:
        return NetNoisePredictor(self.res_net, window=self.mfa_window)


class _CodecPair(SemanticCodec):
    """SemanticCodec whose encoder/decoder projections live in separate stores."""

    def __init__(self, height, width, keep, enc_store, dec_store, seed=0):
        # route w_enc to the encoder store and w_dec to the decoder store
        self._enc_store = enc_store
        self._dec_store = dec_store
        super().__init__(height, width, keep, store=_SplitStore(enc_store, dec_store),
                         seed=seed)


class _SplitStore:
    """Routes codec parameters to the right freezing group by name."""

    def __init__(self, enc_store: ParamStore, dec_store: ParamStore):
        self.enc_store = enc_store
        self.dec_store = dec_store
        self.dtype = enc_store.dtype

    def add(self, name: str, value):
        if name.endswith("w_enc"):
            return self.enc_store.add(name, value)
        return self.dec_store.add(name, value)


# ---------------------------------------------------------------------------
# transmission
# ---------------------------------------------------------------------------

@dataclass
class GopBundle:
    """Everything produced while transmitting one GoP (frame 1 = I frame)."""

    frames: np.ndarray                        # (I, 3, H, W) uint8
    chan: ChannelRealization
    semantic: list = field(default_factory=list)      # f^i
    predicted: list = field(default_factory=list)     # f_bar^i (P frames)
    residuals: list = field(default_factory=list)     # r^i (P frames)
    received_ref: Optional[np.ndarray] = None         # f_hat^ref
    received_residuals: list = field(default_factory=list)  # r_hat^i
    compensated: list = field(default_factory=list)   # f_tilde^i
    predicted_rx: list = field(default_factory=list)  # f_check^i
    reconstructed_semantic: list = field(default_factory=list)  # f_hat^i (all frames)
    reconstructed: list = field(default_factory=list)  # x_hat^i (all frames)
    traces: list = field(default_factory=list)

    @property
    def gop_size(self) -> int:
        return self.frames.shape[0]


class OracleNoisePredictor:
    """Test-only predictor returning a fixed noise vector at every step."""

    def __init__(self, eps: np.ndarray):
        self.eps = np.asarray(eps, dtype=np.float64)
        self.calls = 0

    def predict(self, z, t, context=None):
        self.calls += 1
        return self.eps


def cbr_of(length: int, height: int, width: int) -> float:
    """Channel bandwidth ratio: complex symbols per source dimension."""
    return (length / 2.0) / (height * width * 3.0)


def _replay_ref_only(
    f_ref_rx: np.ndarray,
    base_cache: dict,
    lambda_i: float,
    sigma2: float,
    sched: NoiseSchedule,
    chan: ChannelRealization,
) -> np.ndarray:
    """Chain output for a composite containing only the reference component.

    Deterministic replay of the P-frame update with the cached base noises
    scaled by sqrt(lambda), starting from the reference share of the start
    point.  Subtracting it from the real chain output isolates the residual
    share (the decomposition applied at the receiver).
    """
    z = np.sqrt(lambda_i) / np.sqrt(1.0 + sigma2) * np.asarray(f_ref_rx, dtype=float)
    for t in sorted(base_cache, reverse=True):
        ab_t, ab_prev = sched.abar(t), sched.abar(t - 1)
        scaled = chan.hn * (np.sqrt(lambda_i) * base_cache[t])
        x0 = (z - np.sqrt(1.0 - ab_t) * scaled) / np.sqrt(ab_t)
        z = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * scaled
    return z


def extract_residual(
    f_tilde: np.ndarray,
    f_tilde_ref: np.ndarray,
    r_rx: np.ndarray,
    lambda_i: float,
    m: int,
    sigma2: float,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Denoised received residual recovered from the compensated composite.

    The chain is linear in its start point and noise inputs, so the
    difference between the real chain output and the reference-only replay
    carries exactly the sqrt(1-lambda)-weighted residual share:

        r_dn = (f_tilde - f_tilde_ref) sqrt(abar_m (1+sigma^2)) / sqrt(1-lambda)

    At m = 0 this reduces exactly to the received residual; at lambda = 1 the
    composite carries no residual information and the received residual is
    returned unchanged.
    """
    if lambda_i >= 1.0 - 1e-9:
        return np.array(r_rx, dtype=float)
    ab = sched.abar(m)
    s = np.sqrt(ab * (1.0 + sigma2))
    return s * (np.asarray(f_tilde) - np.asarray(f_tilde_ref)) \
        / np.sqrt(1.0 - lambda_i)


class PipelineError(RuntimeError):
    """A pipeline stage failed; .stage names the failing step."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def transmit_gop(
    gop: np.ndarray,
    models: SystemModels,
    params: CompensationParams,
    sigma2: float,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    oracle: bool = False,
    chan: Optional[ChannelRealization] = None,
    record_trace: bool = False,
) -> GopBundle:
    """Send one GoP end to end and reconstruct every frame at the receiver.

    Frame 1 is the reference (I) frame; the remaining frames travel as
    residuals and are regenerated through the decoupled diffusion chain.
    With oracle=True the noise predictors return the exact injected channel
    noise (normalized), independent of any training.
    """
    gop = np.asarray(gop)
    if gop.ndim != 4 or gop.shape[0] < 1:
        raise PipelineError("input", f"expected (I, 3, H, W) frames, got {gop.shape}")
    L = models.length
    if chan is None:
        chan = make_realization(sample_rayleigh(rng, L // 2), sigma2)

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, str(exc)) from exc

    bundle = GopBundle(frames=gop, chan=chan)

    # --- I frame path ---
    f_ref = stage("semantic_encode", models.codec.encode, gop[0])
    bundle.semantic.append(f_ref)
    noise_ref = rng.normal(0.0, 1.0, L) * np.sqrt(sigma2)
    f_ref_rx = chan.hs * f_ref + chan.hn * noise_ref
    bundle.received_ref = f_ref_rx
    x_ref_hat = stage("semantic_decode", models.codec.decode, f_ref_rx)
    bundle.reconstructed_semantic.append(f_ref_rx)
    bundle.reconstructed.append(x_ref_hat)

    n_p = gop.shape[0] - 1
    if n_p == 0:
        return bundle

    # --- base chain (once per GoP) ---
    eff_m = params.start_step if sigma2 > 0 else 0
    eff_params = CompensationParams(
        lambda_i=params.lambda_i, k_of_t=params.k_of_t,
        sigma_t=params.sigma_t, start_step=eff_m,
    )
    if oracle:
        base_pred = OracleNoisePredictor(
            noise_ref / np.sqrt(sigma2) if sigma2 > 0 else np.zeros(L))
    else:
        base_pred = models.base_predictor()
    base_cache = None
    f_tilde_ref = np.sqrt(params.lambda_i) * f_ref_rx
    if eff_m > 0:
        base_cache = stage(
            "base_chain", run_base_chain,
            f_ref_rx, base_pred, eff_params, sched, chan, rng,
        )
        f_tilde_ref = _replay_ref_only(
            f_ref_rx, base_cache, params.lambda_i, sigma2, sched, chan)

    previous = [f_ref_rx]
    for i in range(1, gop.shape[0]):
        f_i = stage("semantic_encode", models.codec.encode, gop[i])
        bundle.semantic.append(f_i)
        f_bar = stage(
            "motion_encode",
            lambda: models.motion_tx.predict(f_i, f_ref).data.astype(np.float64),
        )
        bundle.predicted.append(f_bar)
        r_i = f_i - f_bar
        bundle.residuals.append(r_i)
        noise_r = rng.normal(0.0, 1.0, L) * np.sqrt(sigma2)
        r_rx = chan.hs * r_i + chan.hn * noise_r
        bundle.received_residuals.append(r_rx)

        if oracle:
            res_pred = OracleNoisePredictor(
                noise_r / np.sqrt(sigma2) if sigma2 > 0 else np.zeros(L))
        else:
            res_pred = models.residual_predictor()
        f_tilde, trace = stage(
            "ddmfc_sample", ddmfc_sample,
            f_ref_rx, r_rx, previous, base_pred, res_pred,
            eff_params, sched, chan, rng=rng, base_cache=base_cache,
            record_trace=record_trace,
        )
        bundle.compensated.append(f_tilde)
        bundle.traces.append(trace)

        # the receiver-side coder combines a learned prediction with the
        # denoised residual pulled out of the compensated composite; adding
        # the received residual back then yields f_hat = prediction + r_dn
        r_dn = extract_residual(f_tilde, f_tilde_ref, r_rx, eff_params.lambda_i,
                                eff_m, sigma2, sched)
        f_check = stage(
            "motion_decode",
            lambda: models.motion_rx.predict(f_tilde, f_ref_rx).data.astype(np.float64)
            + r_dn - r_rx,
        )
        bundle.predicted_rx.append(f_check)
        f_hat = f_check + r_rx
        bundle.reconstructed_semantic.append(f_hat)
        x_hat = stage("semantic_decode", models.codec.decode, f_hat)
        bundle.reconstructed.append(x_hat)
        previous.append(f_hat)
    return bundle


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_reconstruction(bundles: Sequence[GopBundle]) -> float:
    """Mean per-frame MSE over all GoPs and frames (Eq. 28 shape)."""
    if len(bundles) == 0:
        raise ValueError("empty batch")
    total = 0.0
    count = 0
    for b in bundles:
        for x, x_hat in zip(b.frames, b.reconstructed):
            total += float(np.mean((np.asarray(x, dtype=np.float64) - x_hat) ** 2))
            count += 1
    return total / count


def loss_diffusion(
    sem_frames: Sequence[np.ndarray],
    chan: ChannelRealization,
    base_fn: Callable,
    res_fn: Callable,
    lambda_i: float,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    context: Optional[Sequence[np.ndarray]] = None,
) -> Tensor:
    """Diffusion training loss over one GoP's semantic frames.

    base_fn(z_tensor, t) and res_fn(z_tensor, t, context) return noise
    Tensors.  The i = 1 term trains the base predictor; the i != 1 terms
    train the residual predictor with the base contribution stop-gradded.
    Timesteps are drawn uniformly from {1..T} per frame.
    """
    if len(sem_frames) == 0:
        raise ValueError("empty GoP")
    f_ref = np.asarray(sem_frames[0], dtype=np.float64)
    hs, hn = chan.hs, chan.hn
    terms = []
    ctx = list(context) if context else [hs * f_ref]
    for i, f in enumerate(sem_frames):
        t = int(rng.integers(1, sched.total_steps + 1))
        eps = rng.normal(0.0, 1.0, f_ref.shape[0])
        ab = sched.abar(t)
        z_ref = np.sqrt(ab) * (hs * f_ref) + np.sqrt(1 - ab) * (hn * eps)
        eps_t = Tensor(eps)
        if i == 0:
            pred = base_fn(Tensor(z_ref), t)
            terms.append(nk.mse(eps_t, pred))
        else:
            r = np.asarray(f, dtype=np.float64)  # caller passes residuals for P frames
            f_p = np.sqrt(lambda_i) * f_ref + np.sqrt(1 - lambda_i) * r
            z_t = np.sqrt(ab) * (hs * f_p) + np.sqrt(1 - ab) * (hn * eps)
            eps_ref = nk.stop_gradient(base_fn(Tensor(z_ref), t))
            z_prime = nk.sub(
                Tensor(z_t),
                nk.mul(Tensor(np.sqrt(lambda_i) * np.sqrt(1 - ab) * hn), eps_ref),
            )
            phi = res_fn(z_prime, t, ctx)
            combined = nk.add(
                nk.mul(Tensor(np.asarray(np.sqrt(lambda_i), dtype=eps_ref.dtype)), eps_ref),
                nk.mul(Tensor(np.asarray(np.sqrt(1 - lambda_i), dtype=eps_ref.dtype)), phi),
            )
            terms.append(nk.mse(eps_t, combined))
    acc = terms[0]
    for t_ in terms[1:]:
        acc = nk.add(acc, t_)
    return nk.mul(acc, Tensor(np.asarray(1.0 / len(terms), dtype=acc.dtype)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _lr_at(step: int, total: int, lr_start: float, lr_end: float, stages: int) -> float:
    """Stepped decay from lr_start to lr_end over `stages` equal blocks."""
    if total <= 1 or stages <= 1:
        return lr_start
    block = min(int(stages * step / total), stages - 1)
    ratio = (lr_end / lr_start) ** (block / (stages - 1))
    return lr_start * ratio


def _training_losses(models: SystemModels, gop: np.ndarray, sigma2: float,
                     sched: NoiseSchedule, params: CompensationParams,
                     mu: float, rng: np.random.Generator,
                     need_rec: bool, need_diff: bool):
    """Tape losses (L_R, L_D) for one GoP; either may be None if not needed."""
    codec = models.codec
    L = models.length
    chan = make_realization(sample_rayleigh(rng, L // 2), sigma2)
    hs_t = Tensor(chan.hs.astype(models.enc.dtype))
    lam = params.lambda_i

    x01 = [np.asarray(f, dtype=np.float64) / 255.0 for f in gop]
    f_list = [codec.encode_t(x) for x in x01]
    f_ref = f_list[0]

    def send(f_t):
        noise = rng.normal(0.0, 1.0, L) * np.sqrt(sigma2)
        return nk.add(nk.mul(hs_t, f_t),
                      Tensor((chan.hn * noise).astype(f_t.dtype)))

    f_ref_rx = send(f_ref)

    rec_terms = []
    residuals = []
    if need_rec:
        target = Tensor(codec.to_blocks(x01[0]).astype(f_ref.dtype))
        rec_terms.append(nk.mse(codec.decode_blocks_t(f_ref_rx), target))

    m_eff = params.start_step if sigma2 > 0 else 0
    ab_m = sched.abar(m_eff)
    ctx = [f_ref_rx.data.astype(np.float64)]

    for i in range(1, len(f_list)):
        f_i = f_list[i]
        f_bar = models.motion_tx.predict(f_i, f_ref)
        r_i = nk.sub(f_i, f_bar)
        residuals.append(r_i.data.astype(np.float64))
        if not need_rec:
            continue
        r_rx = send(r_i)
        f_p_rx = nk.mul(
            nk.add(nk.mul(Tensor(np.asarray(np.sqrt(lam), dtype=f_i.dtype)), f_ref_rx),
                   nk.mul(Tensor(np.asarray(np.sqrt(1 - lam), dtype=f_i.dtype)), r_rx)),
            Tensor(np.asarray(1.0 / np.sqrt(1 + sigma2), dtype=f_i.dtype)),
        )
        if m_eff > 0:
            # single-step x0 estimates of both chains (full m-step chains
            # are used at evaluation time)
            eps_ref = models.base_net.forward(f_ref_rx, m_eff)
            z_prime = nk.sub(
                f_p_rx,
                nk.mul(Tensor((np.sqrt(lam) * np.sqrt(1 - ab_m) * chan.hn
                               ).astype(f_i.dtype)), eps_ref),
            )
            phi = models.res_net.forward(z_prime, m_eff, ctx)
            eps_tot = nk.add(
                nk.mul(Tensor(np.asarray(np.sqrt(lam), dtype=f_i.dtype)), eps_ref),
                nk.mul(Tensor(np.asarray(np.sqrt(1 - lam), dtype=f_i.dtype)), phi),
            )
            f_tilde = nk.mul(
                nk.sub(f_p_rx, nk.mul(Tensor((np.sqrt(1 - ab_m) * chan.hn
                                              ).astype(f_i.dtype)), eps_tot)),
                Tensor(np.asarray(1.0 / np.sqrt(ab_m), dtype=f_i.dtype)),
            )
            # reference-only replay of the same single-step update
            z_ro = nk.mul(Tensor(np.asarray(np.sqrt(lam) / np.sqrt(1 + sigma2),
                                            dtype=f_i.dtype)), f_ref_rx)
            f_tilde_ref = nk.mul(
                nk.sub(z_ro, nk.mul(Tensor((np.sqrt(lam) * np.sqrt(1 - ab_m)
                                            * chan.hn).astype(f_i.dtype)), eps_ref)),
                Tensor(np.asarray(1.0 / np.sqrt(ab_m), dtype=f_i.dtype)),
            )
        else:
            f_tilde = f_p_rx
            f_tilde_ref = nk.mul(
                Tensor(np.asarray(np.sqrt(lam) / np.sqrt(1 + sigma2),
                                  dtype=f_i.dtype)), f_ref_rx)
        if lam >= 1.0 - 1e-9:
            r_dn = r_rx
        else:
            s = np.sqrt(ab_m * (1.0 + sigma2)) / np.sqrt(1 - lam)
            r_dn = nk.mul(Tensor(np.asarray(s, dtype=f_i.dtype)),
                          nk.sub(f_tilde, f_tilde_ref))
        f_check = models.motion_rx.predict(f_tilde, f_ref_rx)
        f_hat = nk.add(f_check, r_dn)
        target = Tensor(codec.to_blocks(x01[i]).astype(f_i.dtype))
        rec_terms.append(nk.mse(codec.decode_blocks_t(f_hat), target))

    loss_rec = None
    if need_rec:
        acc = rec_terms[0]
        for t_ in rec_terms[1:]:
            acc = nk.add(acc, t_)
        loss_rec = nk.mul(acc, Tensor(np.asarray(1.0 / len(rec_terms),
                                                 dtype=acc.dtype)))

    loss_diff = None
    if need_diff:
        sem = [f_ref.data.astype(np.float64)] + residuals
        loss_diff = loss_diffusion(
            sem, chan,
            base_fn=models.base_net.forward,
            res_fn=models.res_net.forward,
            lambda_i=lam, sched=sched, rng=rng, context=ctx,
        )
    return loss_rec, loss_diff


STAGE_STORES = {1: ("enc", "dec", "base", "res"), 2: ("base", "res"), 3: ("dec",)}


def train_stage(
    stage: int,
    clip_frames: np.ndarray,
    models: SystemModels,
    cfg: ExperimentConfig,
    steps: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    snapshot_hook: Optional[Callable] = None,
) -> list[float]:
    """Run one training stage and return the per-step loss curve.

    Stage 1 trains everything on L_R + mu L_D; stage 2 trains only the
    compensation predictors on L_D; stage 3 trains only the receiver-side
    decoder on L_R.  Frozen stores are never touched by the optimizer.
    """
    if stage not in STAGE_STORES:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    needed = set(range(1, stage))
    missing = needed - models.completed_stages
    if missing:
        raise MissingPrerequisiteError(
            f"stage {stage} requires completed stage(s) {sorted(missing)}; "
            f"train them first or load weights that include them"
        )
    t = cfg.train
    sched = cfg.schedule()
    params = cfg.compensation()
    mu = float(t["mu"])
    n_steps = int(steps if steps is not None else t["steps"])
    gop_size = int(t["gop_size"])
    if rng is None:
        rng = np.random.default_rng(int(t["seed"]))
    clip_frames = np.asarray(clip_frames)
    n_frames = clip_frames.shape[0]
    if n_frames < gop_size:
        raise ValueError(f"clip has {n_frames} frames, need >= gop_size {gop_size}")
    stores = [getattr(models, name) for name in STAGE_STORES[stage]]
    all_stores = models.stores().values()
    snr_pool = [float(s) for s in str(cfg.eval["snr_list"]).split(",")]

    need_rec = stage in (1, 3)
    need_diff = stage in (1, 2)
    curve = []
    for step in range(n_steps):
        start = int(rng.integers(0, n_frames - gop_size + 1))
        gop = clip_frames[start:start + gop_size]
        sigma2 = snr_to_sigma2(snr_pool[int(rng.integers(0, len(snr_pool)))])
        loss_rec, loss_diff = _training_losses(
            models, gop, sigma2, sched, params, mu, rng, need_rec, need_diff,
        )
        if stage == 1:
            loss = nk.add(loss_rec, nk.mul(
                loss_diff, Tensor(np.asarray(mu, dtype=loss_diff.dtype))))
        elif stage == 2:
            loss = loss_diff
        else:
            loss = loss_rec
        for s in all_stores:
            s.zero_grad()
        loss.backward()
        lr = _lr_at(step, n_steps, float(t["lr_start"]), float(t["lr_end"]),
                    int(t["lr_stages"]))
        for s in stores:
            nk.adamw_step(s, lr=lr, weight_decay=float(t["weight_decay"]))
        curve.append(float(loss.data))
        if snapshot_hook is not None:
            snapshot_hook(step, curve)
    models.completed_stages.add(stage)
    return curve


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(
    clip_frames: np.ndarray,
    models: SystemModels,
    snr_db_list: Sequence[float],
    params: CompensationParams,
    sched: NoiseSchedule,
    seeds: Sequence[int],
    gop_size: int,
    oracle: bool = False,
) -> list[dict]:
    """Per-(SNR, seed, gop, frame) metric rows; deterministic given seeds."""
    clip_frames = np.asarray(clip_frames)
    n_gops = clip_frames.shape[0] // gop_size
    if n_gops == 0:
        raise ValueError(f"clip too short for gop_size {gop_size}")
    rows = []
    for snr_db in snr_db_list:
        sigma2 = snr_to_sigma2(snr_db)
        for seed in seeds:
            for g in range(n_gops):
                rng = np.random.default_rng(
                    np.random.SeedSequence((int(seed), g)))
                gop = clip_frames[g * gop_size:(g + 1) * gop_size]
                bundle = transmit_gop(
                    gop, models, params, sigma2, sched, rng, oracle=oracle)
                for i, (x, x_hat) in enumerate(zip(bundle.frames,
                                                   bundle.reconstructed)):
                    rows.append({
                        "snr_db": snr_db, "seed": int(seed), "gop": g,
                        "frame": i, "role": "I" if i == 0 else "P",
                        "psnr_db": psnr(np.asarray(x, dtype=np.float64), x_hat),
                        "ms_ssim": ms_ssim(np.asarray(x, dtype=np.float64), x_hat),
                    })
    return rows


def mean_psnr_by(rows: list[dict], key: str) -> dict:
    """Mean PSNR grouped by one row key (e.g. 'snr_db')."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r["psnr_db"])
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}
