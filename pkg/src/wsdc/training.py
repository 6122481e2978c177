"""End-to-end training of encoder, codebook and task head through a QAM/AWGN link.

One step follows the loop: encode, quantize, map indices to symbols, pass
them through AWGN, demodulate, look the received indices up in the codebook,
classify. The discrete path is crossed with a straight-through estimator;
codewords and their logits are trained only by the hybrid Wasserstein term
(and the optional commitment term pulls the encoder toward its codewords).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import container, nn
from .channel import SUPPORTED_ORDERS, ChannelConfig, build_constellation, demodulate, modulate, awgn
from .codebook import Codebook, activation_pmf, new_codebook, perplexity, quantize
from .data import Dataset, augment
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .metrics import MetricsRecord, delta_mi, index_error_rate, symbol_ws_diagnostic
from .objective import (WsConfig, build_hybrid_target, composite_loss, frozen_ws_value,
                        ws_regularizer)

# independent RNG streams, keyed alongside (seed, counter)
_INIT, _CHANNEL, _GAUSS, _SHUFFLE, _AUGMENT, _EVAL = range(6)


def _rng(seed, *keys):
    return np.random.default_rng([int(seed), *keys])


@dataclass
class TrainConfig:
    K: int
    D: int
    Q: int
    alpha: float = 0.5
    lam: float = 1.0
    eps: float | None = None
    snr_train_db: float = 12.0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    dataset: str = "gmm"
    channel_in_loop: bool = True
    enc_hidden: tuple = (128, 128)
    head_hidden: tuple = (128, 128)
    activation: str = "relu"
    commitment: float = 0.0
    gaussian_std: float = 1.0
    n_gauss: int | None = None
    per_q: bool = False
    codebook_init: str = "gaussian"
    sinkhorn_max_iter: int = 2000
    sinkhorn_tol: float = 1e-6
    augment: bool = False

    def __post_init__(self):
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.activation not in nn.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {nn.ACTIVATIONS}")
        if self.channel_in_loop and self.K not in SUPPORTED_ORDERS:
            raise ConfigError(f"K={self.K} has no square QAM mapping; supported: {SUPPORTED_ORDERS}")

    def ws_config(self) -> WsConfig:
        return WsConfig(lam=self.lam, eps=self.eps, per_q=self.per_q,
                        max_iter=self.sinkhorn_max_iter, tol=self.sinkhorn_tol)

    def to_dict(self):
        d = asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ModelState:
    params: dict
    cfg: TrainConfig
    input_dim: int
    n_classes: int
    optimizer: nn.Adam
    step: int = 0
    _constellation: object = field(default=None, repr=False)

    @property
    def codebook(self) -> Codebook:
        # shares storage with params, so optimizer updates are visible here
        return Codebook(self.params["codebook"], self.params["logits"], self.cfg.Q, self.cfg.per_q)

    @property
    def constellation(self):
        if self._constellation is None:
            self._constellation = build_constellation(self.cfg.K)
        return self._constellation

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_state(cfg: TrainConfig, input_dim: int, n_classes: int, sample=None) -> ModelState:
    rng = _rng(cfg.seed, _INIT)
    params = {}
    params.update(nn.init_mlp([input_dim, *cfg.enc_hidden, cfg.Q * cfg.D], rng, "enc"))
    params.update(nn.init_mlp([cfg.Q * cfg.D, *cfg.head_hidden, n_classes], rng, "head"))
    latent_sample = None
    if cfg.codebook_init == "kmeans-on-sample":
        if sample is None:
            raise ConfigError("kmeans-on-sample initialization needs input samples")
        z, _ = nn.mlp_forward(params, "enc", np.asarray(sample, dtype=np.float64), cfg.activation)
        latent_sample = z.reshape(-1, cfg.D)
    cb = new_codebook(cfg.K, cfg.D, cfg.Q, cfg.codebook_init, seed=int(rng.integers(2**31)),
                      per_q=cfg.per_q, sample=latent_sample)
    params["codebook"] = cb.codewords
    params["logits"] = cb.logits
    return ModelState(params, cfg, int(input_dim), int(n_classes), nn.Adam(lr=cfg.lr))


@dataclass
class Intermediates:
    z_e: np.ndarray
    indices: np.ndarray
    z_c: np.ndarray
    distortion: float
    sent: np.ndarray | None
    received: np.ndarray | None
    rx_indices: np.ndarray
    z_d: np.ndarray
    logits: np.ndarray
    enc_cache: list | None = None
    head_cache: list | None = None


def straight_through(z_e, z_d):
    """Forward value ``z_d``; the backward pass copies gradients to ``z_e`` unchanged."""
    z_e, z_d = np.asarray(z_e), np.asarray(z_d)
    if z_e.shape != z_d.shape:
        raise ContractError(f"shape mismatch {z_e.shape} vs {z_d.shape}")
    return z_d.copy()


def straight_through_grad(upstream):
    """Gradients ``(d z_e, d z_d)`` of the straight-through node."""
    return upstream, np.zeros_like(upstream)


def forward_pass(state: ModelState, x, ch: ChannelConfig | None = None, mode="train", rng=None,
                 frozen_rx=None) -> Intermediates:
    """Encoder -> VQ -> QAM/AWGN -> codeword lookup -> head.

    ``ch=None`` (or an infinite SNR) leaves the indices untouched.
    ``frozen_rx`` forces the received indices, bypassing the channel.
    """
    cfg = state.cfg
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if x.shape[1] != state.input_dim:
        raise ContractError(f"input dim {x.shape[1]} does not match encoder input {state.input_dim}")
    keep = mode == "train"
    z_flat, enc_cache = nn.mlp_forward(state.params, "enc", x, cfg.activation)
    B = x.shape[0]
    z_e = z_flat.reshape(B, cfg.Q, cfg.D)
    cb = state.codebook
    indices, z_c, distortion = quantize(cb, z_e)
    sent = received = None
    if frozen_rx is not None:
        rx = np.asarray(frozen_rx)
    elif ch is not None and ch.noise_var > 0:
        sent = modulate(indices, state.constellation)
        received = awgn(sent, ch, rng)
        rx = demodulate(received, state.constellation)
    else:
        rx = indices
    z_d = cb.codewords[rx]
    z_st = straight_through(z_e, z_d)
    logits, head_cache = nn.mlp_forward(state.params, "head", z_st.reshape(B, -1), cfg.activation)
    return Intermediates(z_e, indices, z_c, distortion, sent, received, rx, z_d, logits,
                         enc_cache if keep else None, head_cache if keep else None)


def task_loss(logits, labels):
    """Softmax cross-entropy in nats (batch mean) and its logit gradient."""
    labels = np.asarray(labels)
    logits = np.asarray(logits)
    if labels.shape != (logits.shape[0],) or labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError("labels must be a batch vector of class ids")
    return nn.softmax_xent(logits, labels)


def _ws_targets(z_e, cfg: TrainConfig, rng):
    B, Q, D = z_e.shape
    if cfg.per_q:
        return [build_hybrid_target(z_e[:, q, :], cfg.alpha, cfg.gaussian_std, cfg.n_gauss, rng)
                for q in range(Q)]
    return [build_hybrid_target(z_e.reshape(B * Q, D), cfg.alpha, cfg.gaussian_std, cfg.n_gauss, rng)]


def _latent_grad(ws, z_shape, per_q):
    B, Q, D = z_shape
    if per_q:
        g = np.zeros(z_shape)
        for q, gl in enumerate(ws.grad_latents):
            if gl.size:
                g[:, q, :] = gl
        return g
    gl = ws.grad_latents[0]
    return gl.reshape(z_shape) if gl.size else np.zeros(z_shape)


def loss_and_grads(state: ModelState, x, y, step=None):
    """Composite loss at the current parameters plus every gradient block.

    Returns ``(total, grads, info)``; ``info`` carries the intermediates and
    the frozen pieces (received indices, targets, plans) needed to rebuild
    the same loss surface in :func:`grad_check`.
    """
    cfg = state.cfg
    step = state.step if step is None else step
    ch = ChannelConfig(cfg.snr_train_db) if cfg.channel_in_loop else None
    fw = forward_pass(state, x, ch, "train", rng=_rng(cfg.seed, _CHANNEL, step))
    B = fw.z_e.shape[0]

    t_loss, dlogits = task_loss(fw.logits, y)
    head_grads, dz = nn.mlp_backward(state.params, "head", fw.head_cache, dlogits, cfg.activation)
    dz_e, _ = straight_through_grad(dz.reshape(fw.z_e.shape))
    task_grads = dict(head_grads, z_e=dz_e)

    ws_value, ws_grads, ws, targets = 0.0, {}, None, None
    if cfg.lam > 0:
        targets = _ws_targets(fw.z_e, cfg, _rng(cfg.seed, _GAUSS, step))
        ws = ws_regularizer(targets, state.codebook, cfg.ws_config())
        ws_value = ws.value
        ws_grads = {"z_e": _latent_grad(ws, fw.z_e.shape, cfg.per_q),
                    "codebook": ws.grad_codewords, "logits": ws.grad_logits}
    total, grads = composite_loss(t_loss, task_grads, ws_value, ws_grads, cfg.lam)

    commit = 0.0
    if cfg.commitment > 0:
        diff = fw.z_e - fw.z_c
        n = diff.shape[0] * diff.shape[1]
        commit = cfg.commitment * float(np.sum(diff * diff)) / n
        grads["z_e"] = grads["z_e"] + cfg.commitment * 2.0 * diff / n
        total += commit

    enc_grads, _ = nn.mlp_backward(state.params, "enc", fw.enc_cache, grads.pop("z_e").reshape(B, -1),
                                   cfg.activation)
    grads.update(enc_grads)
    for k in ("codebook", "logits"):
        grads.setdefault(k, np.zeros_like(state.params[k]))
    info = dict(fw=fw, task_loss=t_loss, ws=ws, ws_value=ws_value, targets=targets, commit=commit)
    return total, grads, info


def train_step(state: ModelState, x, y):
    """One optimizer step on a minibatch; returns ``(state, metrics)``.

    Raises:
        NumericalError: the loss or a gradient became non-finite.
    """
    total, grads, info = loss_and_grads(state, x, y)
    fw = info["fw"]
    if not math.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalError(
            f"non-finite loss at step {state.step}",
            snapshot=dict(step=state.step, task_loss=info["task_loss"], ws_value=info["ws_value"],
                          distortion=fw.distortion),
        )
    state.optimizer.lr = state.cfg.lr
    state.optimizer.step(state.params, grads)
    state.step += 1
    ws = info["ws"]
    metrics = dict(
        loss=total,
        task_loss=info["task_loss"],
        ws_value=ws.value if ws else math.nan,
        ot_cost=ws.transport_cost if ws else math.nan,
        distortion=fw.distortion,
        perplexity=perplexity(activation_pmf(fw.indices, state.cfg.K)),
        correct=int(np.sum(np.argmax(fw.logits, axis=1) == np.asarray(y))),
        n=len(y),
        index_errors=int(np.sum(fw.rx_indices != fw.indices)),
        n_indices=fw.indices.size,
        indices=fw.indices,
    )
    return state, metrics


def train(cfg: TrainConfig, dataset: Dataset, callback=None):
    """Run ``cfg.epochs`` passes of seeded minibatch training.

    Returns the final state and one :class:`MetricsRecord` per epoch.
    """
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    sample = dataset.inputs[: min(len(dataset), 1024)].reshape(-1, dataset.dim) \
        if cfg.codebook_init == "kmeans-on-sample" else None
    state = init_state(cfg, dataset.dim, dataset.n_classes, sample)
    history = []
    N, B = len(dataset), cfg.batch_size
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = _rng(cfg.seed, _SHUFFLE, epoch).permutation(N)
        sums = dict(task_loss=0.0, ot_cost=0.0, distortion=0.0, correct=0, n=0, index_errors=0, n_indices=0)
        counts = np.zeros(cfg.K)
        n_steps = 0
        for start in range(0, N, B):
            idx = order[start:start + B]
            x = dataset.inputs[idx]
            if cfg.augment:
                x = augment(x, seed=[cfg.seed, _AUGMENT, state.step])
            _, m = train_step(state, x.reshape(len(idx), -1), dataset.labels[idx])
            n_steps += 1
            for k in sums:
                sums[k] += m[k]
            counts += np.bincount(m["indices"].ravel(), minlength=cfg.K)
        rec = MetricsRecord(
            K=cfg.K, D=cfg.D, Q=cfg.Q, alpha=cfg.alpha, lam=cfg.lam, snr_db=cfg.snr_train_db
            if cfg.channel_in_loop else math.inf, seed=cfg.seed, epoch=epoch,
            task_loss=sums["task_loss"] / n_steps,
            accuracy=sums["correct"] / sums["n"],
            ot_cost=sums["ot_cost"] / n_steps if cfg.lam > 0 else math.nan,
            perplexity=perplexity(counts / counts.sum()),
            index_error_rate=sums["index_errors"] / sums["n_indices"],
            distortion=sums["distortion"] / n_steps,
            wall_time_s=time.perf_counter() - t0,
        )
        history.append(rec)
        if callback is not None:
            callback(state, rec)
    return state, history


def predict(state: ModelState, x, ch=None, rng=None):
    return np.argmax(forward_pass(state, x, ch, "eval", rng).logits, axis=1)


def evaluate(state: ModelState, dataset: Dataset, snr_db=math.inf, seed=0, ot_samples=512) -> MetricsRecord:
    """Test-set metrics at one SNR.

    Channel noise is drawn from a stream that depends only on ``seed``, so
    sweeps over SNR reuse the same normalized noise (common random numbers).
    ``ot_cost`` is the transport cost between the codebook measure and the
    hybrid target built from the first ``ot_samples`` test latents.
    """
    cfg = state.cfg
    ch = ChannelConfig(snr_db, seed)
    x = dataset.inputs.reshape(len(dataset), -1)
    fw = forward_pass(state, x, ch, "eval", rng=_rng(seed, _EVAL))
    pmf = activation_pmf(fw.indices, cfg.K)
    n_ot = min(len(dataset), ot_samples)
    targets = _ws_targets(fw.z_e[:n_ot], cfg, _rng(seed, _GAUSS))
    ws = ws_regularizer(targets, state.codebook, cfg.ws_config())
    sym_ws = symbol_ws_diagnostic(pmf, state.constellation) if cfg.K in SUPPORTED_ORDERS else math.nan
    return MetricsRecord(
        K=cfg.K, D=cfg.D, Q=cfg.Q, alpha=cfg.alpha, lam=cfg.lam, snr_db=float(snr_db), seed=cfg.seed,
        accuracy=float(np.mean(np.argmax(fw.logits, axis=1) == dataset.labels)),
        ot_cost=ws.transport_cost,
        perplexity=perplexity(pmf),
        delta_mi_bits=delta_mi(fw.indices, fw.rx_indices, dataset.labels),
        index_error_rate=index_error_rate(fw.indices, fw.rx_indices),
        symbol_ws=sym_ws,
        distortion=fw.distortion,
    )


def _frozen_loss(state: ModelState, x, y, info, step):
    """The composite loss with every discrete decision pinned to ``info``.

    The straight-through node becomes ``z_e + const`` (const = z_d - z_e at
    the reference point), channel outputs and transport plans are reused, and
    the Gaussian target atoms are reused. Everything left is smooth.
    """
    cfg = state.cfg
    fw0 = info["fw"]
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    z_flat, _ = nn.mlp_forward(state.params, "enc", x, cfg.activation)
    z_e = z_flat.reshape(fw0.z_e.shape)
    z_st = z_e + (fw0.z_d - fw0.z_e)
    logits, _ = nn.mlp_forward(state.params, "head", z_st.reshape(len(x), -1), cfg.activation)
    total, _ = nn.softmax_xent(logits, y)
    if cfg.lam > 0:
        targets = []
        for q, t in enumerate(info["targets"]):
            pts = t.measure.points.copy()
            if t.n_batch:
                lat = z_e[:, q, :] if cfg.per_q else z_e.reshape(-1, cfg.D)
                pts[: t.n_batch] = lat
            targets.append(type(t)(t.alpha, t.gaussian_std, t.n_batch, t.n_gauss,
                                   type(t.measure)(pts, t.measure.weights)))
        total += cfg.lam * frozen_ws_value(info["ws"].plans, targets, state.codebook)
    if cfg.commitment > 0:
        diff = z_e - fw0.z_c
        total += cfg.commitment * float(np.sum(diff * diff)) / (diff.shape[0] * diff.shape[1])
    return total


def grad_check(state: ModelState, x, y, n_samples=200, h=1e-5, seed=0, floor=1e-4, keys=None):
    """Max relative error between engine gradients and central differences.

    Discrete paths (quantization indices, channel outputs, transport plans,
    Gaussian target atoms) are frozen at the current parameters. Relative
    error per coordinate is ``|g - fd| / max(|g|, |fd|, floor)``; the floor
    keeps round-off in near-zero partials from dominating. ``keys`` limits
    the check to some parameter blocks.
    """
    _, grads, info = loss_and_grads(state, x, y)
    keys = sorted(grads) if keys is None else sorted(keys)
    coords = [(k, i) for k in keys for i in range(grads[k].size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for k, i in coords:
        p = state.params[k].reshape(-1)
        old = p[i]
        p[i] = old + h
        up = _frozen_loss(state, x, y, info, state.step)
        p[i] = old - h
        down = _frozen_loss(state, x, y, info, state.step)
        p[i] = old
        fd = (up - down) / (2 * h)
        g = grads[k].reshape(-1)[i]
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), floor))
    return worst


def _param_shapes(cfg, input_dim, n_classes):
    shapes = {}
    for prefix, sizes in (("enc", [input_dim, *cfg.enc_hidden, cfg.Q * cfg.D]),
                          ("head", [cfg.Q * cfg.D, *cfg.head_hidden, n_classes])):
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"{prefix}.{i}.W"] = (a, b)
            shapes[f"{prefix}.{i}.b"] = (b,)
    shapes["codebook"] = (cfg.K, cfg.D)
    shapes["logits"] = (cfg.Q, cfg.K) if cfg.per_q else (cfg.K,)
    return shapes


def save_model(state: ModelState, path, extra=None):
    """Write parameters and config to a model container; ``extra`` lands in the metadata."""
    meta = dict(config=state.cfg.to_dict(), input_dim=state.input_dim, n_classes=state.n_classes,
                step=state.step, extra=extra or {})
    container.save(path, state.params, meta)


def load_model(path):
    """Rebuild a :class:`ModelState` (fresh optimizer) from a container. Returns ``(state, extra)``."""
    params, meta = container.load(path)
    try:
        cfg = TrainConfig(**meta["config"])
        state = ModelState(params, cfg, int(meta["input_dim"]), int(meta["n_classes"]), nn.Adam(lr=cfg.lr),
                           int(meta["step"]))
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"container metadata does not describe a model: {exc}") from None
    if _param_shapes(cfg, state.input_dim, state.n_classes) != {k: v.shape for k, v in params.items()}:
        raise FormatError("container parameter blocks do not match the stored config")
    return state, meta.get("extra", {})
