"""Causal music conditioning: c_t = [f_vq ; f_pae] at 30 Hz.

Pipeline per tick: a sliding sample buffer yields a 2.0 s window, the
window is framed into 30 Hz base features (8 log band energies + spectral
flux onset), a dilated causal conv encoder maps them to D_f channels, the
newest frame is quantized by a residual vector quantizer (f_vq), and an
FFT over the window's encoded channels yields sinusoidal alignment
parameters whose dominant-channel summary is f_pae.

Everything is strictly causal: features at tick t are bit-identical
whether or not audio after tick t exists.  The batched track-level path
(`conditions_for_track`) materializes the exact per-tick windows, so
training conditions match streaming conditions up to float32 conv
rounding; the per-tick streaming path is the canonical one wherever
bit-identity is contracted.

The 2.0 s window gives 0.5 Hz FFT bins, putting 60/90/120/150 BPM tempi
exactly on-bin.

Phase convention: reconstruction is r(t) = A*sin(2*pi*F*t - phi) + B with
phi in radians (so phi + 2*pi*n is an identical parameterization), t in
seconds from the window start, newest frame at (T-1)/fps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F_t

from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .config import AudioConfig

_E_REF = 1e-4  # band-energy reference for log scaling; silence maps to exactly 0


# ---------------------------------------------------------------------------
# sample buffer


class AudioRingBuffer:
    """FIFO mono sample window, zero-padded before stream start.

    `window()` always returns exactly window_s*rate samples.  One extra
    frame of history is kept internally so the onset (flux) feature of the
    window's oldest frame sees its predecessor, matching the track-level
    batched computation.
    """

    def __init__(self, sample_rate: int, window_s: float, fps: int):
        self.sample_rate = int(sample_rate)
        self.hop = int(round(sample_rate / fps))
        if abs(sample_rate / fps - self.hop) > 1e-9:
            raise ValueError(f"sample_rate {sample_rate} not divisible by fps {fps}")
        self.capacity = int(round(window_s * sample_rate))
        if self.capacity % self.hop != 0:
            raise ValueError("window must hold an integer number of frames")
        self._store = np.zeros(self.capacity + self.hop)
        self.n_pushed = 0

    def push_samples(self, chunk: np.ndarray, rate: int):
        if int(rate) != self.sample_rate:
            raise ValueError(f"sample rate mismatch: buffer {self.sample_rate}, chunk {rate}")
        chunk = np.asarray(chunk, dtype=np.float64).reshape(-1)
        n = len(self._store)
        if chunk.size >= n:
            self._store = chunk[-n:].copy()
        elif chunk.size:
            self._store = np.concatenate([self._store[chunk.size:], chunk])
        self.n_pushed += chunk.size

    def window(self) -> np.ndarray:
        return self._store[self.hop:].copy()

    def window_with_prev(self) -> np.ndarray:
        return self._store.copy()


# ---------------------------------------------------------------------------
# base features: 8 log band energies + spectral-flux onset per 30 Hz frame


def band_edges(cfg: AudioConfig) -> np.ndarray:
    return np.geomspace(50.0, min(12_000.0, cfg.sample_rate / 2), cfg.n_bands + 1)


def band_energies(samples: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """(..., n_frames*hop) samples -> (..., n_frames, n_bands) log energies."""
    samples = np.asarray(samples, dtype=np.float64)
    hop = cfg.sample_rate // cfg.fps
    if samples.shape[-1] % hop != 0:
        raise ValueError(f"sample count {samples.shape[-1]} not a multiple of hop {hop}")
    frames = samples.reshape(*samples.shape[:-1], -1, hop)
    spec = np.fft.rfft(frames, axis=-1)
    power = (spec.real**2 + spec.imag**2) / hop**2
    freqs = np.fft.rfftfreq(hop, d=1.0 / cfg.sample_rate)
    edges = band_edges(cfg)
    out = np.empty(frames.shape[:-1] + (cfg.n_bands,))
    for b in range(cfg.n_bands):
        sel = (freqs >= edges[b]) & (freqs < edges[b + 1])
        out[..., b] = power[..., sel].sum(axis=-1)
    return np.log1p(out / _E_REF)


def base_features(samples: np.ndarray, cfg: AudioConfig, prev_energies: np.ndarray | None = None) -> np.ndarray:
    """Samples -> (n_frames, n_bands + 1) features: band energies + onset.

    The onset channel is the positive spectral flux of the log energies;
    the frame before the first is taken as silence unless prev_energies
    (an (n_bands,) row) is given.
    """
    e = band_energies(samples, cfg)
    prev = np.zeros(cfg.n_bands) if prev_energies is None else np.asarray(prev_energies)
    shifted = np.vstack([prev[None, :], e[:-1]])
    flux = np.maximum(e - shifted, 0.0).sum(axis=-1, keepdims=True) / cfg.n_bands
    return np.concatenate([e, flux], axis=-1)


def track_base_features(samples: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Whole-track base features, trimming a trailing partial frame."""
    hop = cfg.sample_rate // cfg.fps
    n = (len(samples) // hop) * hop
    return base_features(np.asarray(samples, dtype=np.float64)[:n], cfg)


def feature_windows(feats: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """(N, D_in) track features -> (N, T, D_in) per-tick windows.

    Window t holds frames [t-T+1, t], zero-padded before the track start,
    exactly what the streaming buffer yields at tick t.
    """
    T = int(round(cfg.window_s * cfg.fps))
    N, D = feats.shape
    padded = np.vstack([np.zeros((T - 1, D)), feats])
    view = np.lib.stride_tricks.sliding_window_view(padded, T, axis=0)
    return np.ascontiguousarray(view.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# dilated causal conv encoder + linear heads


class VqpaeNet(nn.Module):
    """Causal feature encoder plus quantizer-input and reconstruction heads.

    The encoder is a stack of dilated causal 1-D convolutions (left-padded,
    dilations per config, receptive field 1 + (kernel-1)*sum(dilations) =
    31 frames at defaults).  ffn_vq maps encoder output to the quantizer
    space; the linear decoder reconstructs input features from
    [quantized ; periodic summary] and exists only as a training signal.
    """

    def __init__(self, cfg: AudioConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d_in = cfg.n_bands + 1
        ch = cfg.conv_channels
        dil = cfg.dilations
        convs = []
        prev = d_in
        for d in dil:
            convs.append(nn.Conv1d(prev, ch, cfg.kernel_size, dilation=d))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Conv1d(ch, cfg.d_vq, 1)
        self.ffn_vq = nn.Linear(cfg.d_vq, cfg.d_vq)
        self.decoder = nn.Linear(cfg.d_vq + cfg.d_pae, d_in)
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                with torch.no_grad():
                    p.normal_(0.0, 0.2, generator=gen)
            else:
                nn.init.zeros_(p)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, d_in) -> (B, T, d_vq), causal in T."""
        h = x.transpose(1, 2)
        for conv, d in zip(self.convs, self.cfg.dilations):
            h = F_t.pad(h, (d * (self.cfg.kernel_size - 1), 0))
            h = torch.relu(conv(h))
        return self.proj(h).transpose(1, 2)


# ---------------------------------------------------------------------------
# residual vector quantization


@dataclass(frozen=True)
class RvqCodebooks:
    """Stage-wise codebooks, shape (Q, C, D)."""

    codebooks: np.ndarray

    def __post_init__(self):
        cb = np.asarray(self.codebooks, dtype=np.float64)
        object.__setattr__(self, "codebooks", cb)
        if cb.ndim != 3:
            raise ValueError(f"codebooks must be (Q, C, D), got {cb.shape}")
        if not np.all(np.isfinite(cb)):
            raise ValueError("non-finite codewords")
        for q in range(cb.shape[0]):
            d = np.linalg.norm(cb[q][:, None, :] - cb[q][None, :, :], axis=-1)
            d[np.diag_indices_from(d)] = np.inf
            if d.min() < 1e-9:
                raise ValueError(f"duplicate codewords in stage {q}")

    @property
    def n_stages(self) -> int:
        return self.codebooks.shape[0]


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50) -> tuple[np.ndarray, float]:
    """Plain Lloyd's with distance-squared seeding; returns (centers, inertia)."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = x[rng.choice(n, p=p)]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    assign = None
    for _ in range(iters):
        dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            if np.any(sel):
                centers[j] = x[sel].mean(axis=0)
            else:  # reseed empty cluster at the worst-served point
                centers[j] = x[dist.min(axis=1).argmax()]
    dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    # nudge duplicate centers apart so codebooks stay injective
    for j in range(k):
        for m in range(j + 1, k):
            if np.linalg.norm(centers[j] - centers[m]) < 1e-9:
                centers[m] = centers[m] + rng.normal(scale=1e-6, size=centers.shape[1])
    return centers, float(dist.min(axis=1).mean())


def rvq_fit(features: np.ndarray, n_stages: int, codebook_size: int, rng: np.random.Generator) -> RvqCodebooks:
    """Stage-wise k-means on successive residuals.

    Total quantization error on the fit data is non-increasing in the
    stage count by construction (each stage's centers include the residual
    mean as a competitor).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (N, D), got {x.shape}")
    if x.shape[0] < codebook_size:
        raise ValueError(f"need at least {codebook_size} samples, got {x.shape[0]}")
    books = []
    resid = x.copy()
    for _ in range(n_stages):
        centers, _ = _kmeans(resid, codebook_size, rng)
        books.append(centers)
        idx = np.sum((resid[:, None, :] - centers[None, :, :]) ** 2, axis=2).argmin(axis=1)
        resid = resid - centers[idx]
    return RvqCodebooks(np.stack(books))


def rvq_quantize(f: np.ndarray, books: RvqCodebooks, n_stages: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy per-stage nearest codeword; returns (codes, reconstruction)."""
    f = np.asarray(f, dtype=np.float64)
    Q = books.n_stages if n_stages is None else n_stages
    if Q < 1 or Q > books.n_stages:
        raise ValueError(f"n_stages {Q} out of range 1..{books.n_stages}")
    single = f.ndim == 1
    x = f[None] if single else f.reshape(-1, f.shape[-1])
    resid = x.copy()
    recon = np.zeros_like(x)
    codes = np.empty((x.shape[0], Q), dtype=np.int64)
    for q in range(Q):
        cb = books.codebooks[q]
        idx = np.sum((resid[:, None, :] - cb[None, :, :]) ** 2, axis=2).argmin(axis=1)
        codes[:, q] = idx
        recon += cb[idx]
        resid = x - recon
    if single:
        return codes[0], recon[0]
    return codes.reshape(*f.shape[:-1], Q), recon.reshape(f.shape)


# ---------------------------------------------------------------------------
# periodic parameter extraction (analytic FFT phase)


@dataclass(frozen=True)
class PaeParams:
    """Per-channel sinusoid fit: r(t) = A*sin(2*pi*F*t - phi) + B."""

    amplitude: np.ndarray  # (..., D) >= 0
    frequency: np.ndarray  # (..., D) Hz in [0, fps/2]
    offset: np.ndarray  # (..., D)
    phase: np.ndarray  # (..., D) radians in (-pi, pi]
    fps: float

    def __post_init__(self):
        if np.any(self.amplitude < 0):
            raise ValueError("negative amplitude")
        if np.any(self.frequency < 0) or np.any(self.frequency > self.fps / 2):
            raise ValueError("frequency outside [0, fps/2]")


def _wrap_phase(phi: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]."""
    out = np.mod(-phi + np.pi, 2 * np.pi)
    return -(out - np.pi)


def pae_extract(f_causal: np.ndarray, fps: float) -> PaeParams:
    """Dominant-bin sinusoid parameters per channel of a (..., T, D) window.

    B is the mean, F the frequency of the largest non-DC rfft bin
    (Nyquist excluded), A its sinusoid amplitude, and phi the phase making
    r(t) = A*sin(2*pi*F*t - phi) + B match the window with t in seconds
    from the window start.  All-zero channels yield A=F=phi=0.
    """
    x = np.asarray(f_causal, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 2:
        raise ValueError("need a (..., T>=2, D) window")
    T = x.shape[-2]
    mean = x.mean(axis=-2)
    spec = np.fft.rfft(x - mean[..., None, :], axis=-2)
    n_bins = spec.shape[-2]
    hi = n_bins - 1 if T % 2 == 0 else n_bins  # drop Nyquist bin when present
    usable = spec[..., 1:hi, :]
    mag = np.abs(usable)
    k = mag.argmax(axis=-2) + 1  # back to absolute bin index
    dom = np.take_along_axis(spec, k[..., None, :], axis=-2)[..., 0, :]
    amp = 2.0 * np.abs(dom) / T
    freq = k * (fps / T)
    phase = _wrap_phase(-np.angle(dom) - np.pi / 2)
    silent = amp < 1e-12
    amp = np.where(silent, 0.0, amp)
    freq = np.where(silent, 0.0, freq)
    phase = np.where(silent, 0.0, phase)
    return PaeParams(amplitude=amp, frequency=freq, offset=mean, phase=phase, fps=float(fps))


def pae_reconstruct(params: PaeParams, t) -> np.ndarray:
    """Evaluate r(t) = A*sin(2*pi*F*t - phi) + B at time(s) t in seconds.

    Scalar t gives (..., D); a (T,) time grid gives (..., T, D).
    """
    t = np.asarray(t, dtype=np.float64)
    A, F, B, phi = params.amplitude, params.frequency, params.offset, params.phase
    if t.ndim == 0:
        return A * np.sin(2 * np.pi * F * t - phi) + B
    if t.ndim != 1:
        raise ValueError("t must be a scalar or 1-D time grid")
    tt = t[:, None]
    return A[..., None, :] * np.sin(2 * np.pi * F[..., None, :] * tt - phi[..., None, :]) + B[..., None, :]


def pae_window_times(n_frames: int, fps: float) -> np.ndarray:
    return np.arange(n_frames) / fps


def pae_summary(params: PaeParams, cfg: AudioConfig) -> np.ndarray:
    """Dominant-channel summary: (..., 6) = [recon@newest, A, enc(F), enc(phi)].

    F is angle-encoded as 2*pi*F/fps (injective on [0, fps/2]); phi by its
    own sin/cos.
    """
    A = params.amplitude
    dom = A.argmax(axis=-1)

    def pick(arr):
        return np.take_along_axis(arr, dom[..., None], axis=-1)[..., 0]

    a, f, b, phi = pick(A), pick(params.frequency), pick(params.offset), pick(params.phase)
    T = int(round(cfg.window_s * cfg.fps))
    t_new = (T - 1) / cfg.fps
    recon = a * np.sin(2 * np.pi * f * t_new - phi) + b
    th = 2 * np.pi * f / cfg.fps
    return np.stack([recon, a, np.sin(th), np.cos(th), np.sin(phi), np.cos(phi)], axis=-1)


# ---------------------------------------------------------------------------
# condition assembly


@dataclass(frozen=True)
class MusicCondition:
    f_vq: np.ndarray
    f_pae: np.ndarray
    tick: int

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.f_vq, self.f_pae])


class AudioFeatureExtractor:
    """Bundles the encoder net, codebooks, and config into one conditioner."""

    def __init__(self, cfg: AudioConfig, net: VqpaeNet, codebooks: RvqCodebooks):
        self.cfg = cfg
        self.net = net
        self.net.eval()
        self.codebooks = codebooks
        self.d_cond = cfg.d_vq + cfg.d_pae

    @classmethod
    def init_random(cls, cfg: AudioConfig, seed: int = 0) -> "AudioFeatureExtractor":
        net = VqpaeNet(cfg, seed=seed)
        rng = np.random.default_rng(seed)
        books = RvqCodebooks(rng.normal(size=(cfg.n_stages, cfg.codebook_size, cfg.d_vq)))
        return cls(cfg, net, books)

    def causal_encode(self, windows: np.ndarray) -> np.ndarray:
        """(T, d_in) or (N, T, d_in) base-feature windows -> f_causal."""
        x = np.asarray(windows, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        with torch.no_grad():
            out = self.net.encode(torch.as_tensor(x, dtype=torch.float32)).double().numpy()
        return out[0] if single else out

    def _conditions_from_windows(self, wins: np.ndarray, first_tick: int) -> np.ndarray:
        f_causal = self.causal_encode(wins)  # (N, T, d_vq)
        with torch.no_grad():
            g = self.net.ffn_vq(torch.as_tensor(f_causal[:, -1, :], dtype=torch.float32)).double().numpy()
        _, f_vq = rvq_quantize(g, self.codebooks)
        pae = pae_summary(pae_extract(f_causal, self.cfg.fps), self.cfg)
        return np.concatenate([f_vq, pae], axis=-1)

    def condition_from_buffer(self, buf: AudioRingBuffer, tick: int) -> MusicCondition:
        feats = base_features(buf.window_with_prev(), self.cfg)[1:]  # drop the flux-seed frame
        c = self._conditions_from_windows(feats[None], tick)[0]
        return MusicCondition(f_vq=c[: self.cfg.d_vq], f_pae=c[self.cfg.d_vq:], tick=tick)

    def conditions_for_track(self, samples: np.ndarray, chunk: int = 512) -> np.ndarray:
        """(n_samples,) -> (n_frames, d_cond), one condition per 30 Hz tick.

        Materializes the exact per-tick windows the streaming buffer would
        produce.  Row t is bit-invariant to audio after tick t (windows are
        processed in fixed-size zero-padded batches, so batch blocking
        never depends on the track length) and matches the live per-tick
        condition within float32 conv rounding (~1e-5); the streaming path
        is the canonical one for bit-identity contracts.
        """
        feats = track_base_features(samples, self.cfg)
        wins = feature_windows(feats, self.cfg)
        n = wins.shape[0]
        out = np.empty((n, self.d_cond))
        for i in range(0, n, chunk):
            block = wins[i : i + chunk]
            got = block.shape[0]
            if got < chunk:  # pad so conv batch blocking is length-independent
                block = np.concatenate([block, np.zeros((chunk - got, *block.shape[1:]))])
            out[i : i + got] = self._conditions_from_windows(block, i)[:got]
        return out

    # ---- persistence ----

    def save(self, path):
        tensors = {f"net.{k}": v for k, v in module_tensors(self.net).items()}
        tensors["codebooks"] = self.codebooks.codebooks
        from dataclasses import asdict

        save_checkpoint(path, tensors, {"kind": "audio-conditioner", "audio": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> "AudioFeatureExtractor":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "audio-conditioner":
            raise ValueError(f"{path}: not an audio conditioner checkpoint")
        audio_meta = dict(meta["audio"])
        audio_meta["dilations"] = tuple(audio_meta["dilations"])
        cfg = AudioConfig(**audio_meta)
        net = VqpaeNet(cfg)
        load_module_tensors(net, {k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
        return cls(cfg, net, RvqCodebooks(tensors["codebooks"]))


def music_condition(buf: AudioRingBuffer, extractor: AudioFeatureExtractor, tick: int) -> MusicCondition:
    return extractor.condition_from_buffer(buf, tick)


# ---------------------------------------------------------------------------
# autoencoder training


def vqpae_train(
    windows: np.ndarray,
    epochs: int,
    cfg: AudioConfig,
    seed: int = 0,
) -> tuple[AudioFeatureExtractor, dict]:
    """Fit the conditioner on (N, T, d_in) base-feature windows.

    Each epoch refits the RVQ codebooks on current quantizer inputs
    (newest-frame features), then takes gradient steps on encoder + heads
    with straight-through quantization: reconstruct the input window from
    [quantized ; periodic summary] per frame, plus a codebook commitment
    term.  Returns the extractor and a report with per-epoch held-out MSE.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ValueError(f"need a nonempty (N, T, d_in) window stack, got {windows.shape}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    n = windows.shape[0]
    perm = rng.permutation(n)
    n_hold = max(1, n // 10)
    hold, train = windows[perm[:n_hold]], windows[perm[n_hold:]]
    if train.shape[0] < cfg.codebook_size:
        raise ValueError(f"too few training windows ({train.shape[0]}) for codebook size {cfg.codebook_size}")

    net = VqpaeNet(cfg, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    xt_train = torch.as_tensor(train, dtype=torch.float32)
    xt_hold = torch.as_tensor(hold, dtype=torch.float32)

    def quantizer_inputs(xt: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            g = net.ffn_vq(net.encode(xt)[:, -1, :])
        return g.double().numpy()

    def fit_books() -> RvqCodebooks:
        return rvq_fit(quantizer_inputs(xt_train), cfg.n_stages, cfg.codebook_size, np.random.default_rng(seed))

    def holdout_mse(books: RvqCodebooks) -> float:
        with torch.no_grad():
            fc = net.encode(xt_hold)
            g = net.ffn_vq(fc)
            _, q = rvq_quantize(g.double().numpy(), books)
            pae = pae_summary(pae_extract(fc.double().numpy(), cfg.fps), cfg)
            pae_b = np.broadcast_to(pae[:, None, :], (fc.shape[0], fc.shape[1], cfg.d_pae))
            dec_in = torch.as_tensor(np.concatenate([q, pae_b], axis=-1), dtype=torch.float32)
            rec = net.decoder(dec_in)
            return float(((rec - xt_hold) ** 2).mean())

    books = fit_books()
    history = [holdout_mse(books)]
    if epochs == 0:
        return AudioFeatureExtractor(cfg, net, books), {"holdout_mse": history}

    for _ in range(epochs):
        books = fit_books()
        cb = torch.as_tensor(books.codebooks, dtype=torch.float32)
        order = rng.permutation(train.shape[0])
        for i in range(0, len(order), cfg.batch_size):
            xb = xt_train[order[i : i + cfg.batch_size]]
            fc = net.encode(xb)
            g = net.ffn_vq(fc)
            # straight-through residual quantization against fixed codebooks
            resid = g
            q = torch.zeros_like(g)
            for s in range(cfg.n_stages):
                d = torch.cdist(resid.reshape(-1, cfg.d_vq), cb[s]).argmin(dim=1)
                q = q + cb[s][d].reshape(g.shape)
                resid = g - q
            q_st = g + (q - g).detach()
            with torch.no_grad():
                pae = pae_summary(pae_extract(fc.double().numpy(), cfg.fps), cfg)
            pae_b = torch.as_tensor(pae, dtype=torch.float32)[:, None, :].expand(-1, g.shape[1], -1)
            rec = net.decoder(torch.cat([q_st, pae_b], dim=-1))
            loss = ((rec - xb) ** 2).mean() + 0.25 * ((g - q.detach()) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(holdout_mse(books))

    books = fit_books()
    return AudioFeatureExtractor(cfg, net, books), {"holdout_mse": history}


# ---------------------------------------------------------------------------
# WAV files


def save_wav(path, samples: np.ndarray, rate: int):
    from scipy.io import wavfile

    wavfile.write(path, rate, np.asarray(samples, dtype=np.float32))


def load_wav(path) -> tuple[np.ndarray, int]:
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2**31
    return data.astype(np.float64), int(rate)
