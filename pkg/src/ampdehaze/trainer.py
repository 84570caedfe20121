"""Two-stage training, inference, configuration and checkpoints."""

import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion
from .diffusion import DenoiserNet, build_schedule, draw_chain_noise, forward_diffuse, reverse_chain, reverse_chain_backward
from .metrics import psnr, ssim
from .freqdehaze import DehazeNet, NetworkConfig, batch_amplitude_residual
from .hazedata import sample_unpaired_batch, write_text_atomic
from .objectives import Discriminator, NceConfig, PatchNCE, lsgan_d_loss, stage1_loss, stage2_loss
from .spectral import dft2
from .tensorcore import Adam, NonFiniteGradientError, ShapeError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MissingDenoiserError(CheckpointError):
    pass


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient; ``last_good`` holds the previous epoch's checkpoint."""

    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 200
    batch: int = 8
    patch: int = 256
    lr: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_gan: float = 1.0
    lambda_nce: float = 1.0
    lambda_diff: float = 1.0
    T: int = 8
    beta_start: float = 0.1
    beta_end: float = 0.8
    base_channels: int = 64
    blocks_per_scale: tuple = (4, 4, 6, 10)
    dec_blocks: int = 1
    pcm_kernel: int = 1
    per_channel_stats: bool = False
    denoiser_hidden: int = 32
    denoiser_blocks: int = 5
    emb_dim: int = 16
    disc_channels: int = 64
    nce_temperature: float = 0.07
    nce_patches: int = 256
    nce_proj_dim: int = 256
    data_root: str = ""
    seed: int = 0
    toy: bool = False
    oracle_residual: bool = False   # ablation: stage 2 feeds the true residual, skipping the sampler

    def network(self):
        return NetworkConfig(self.base_channels, tuple(self.blocks_per_scale), self.dec_blocks,
                             self.pcm_kernel, self.per_channel_stats)

    def nce(self):
        return NceConfig(self.nce_temperature, self.nce_patches, self.nce_proj_dim)

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        for key in ("epochs", "batch", "patch", "T", "base_channels", "denoiser_hidden",
                    "denoiser_blocks", "emb_dim", "disc_channels", "nce_proj_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        for key in ("lambda_gan", "lambda_nce", "lambda_diff"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        try:
            self.network().validate()
            self.nce().validate()
            build_schedule(self.T, self.beta_start, self.beta_end)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        mult = 2 ** (len(self.blocks_per_scale) - 1)
        if self.patch % mult:
            raise ConfigError(f"patch {self.patch} must be a multiple of {mult} for "
                              f"{len(self.blocks_per_scale)} scales")
        if self.patch < 8:
            raise ConfigError("patch must be at least 8 for the patch discriminator")
        if self.nce_patches > self.patch * self.patch:
            raise ConfigError(f"nce_patches {self.nce_patches} exceeds patch area {self.patch ** 2}")
        return self

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


TOY_OVERRIDES = dict(
    epochs=20, batch=4, patch=32, lr=1e-3, lr_d=1e-3, base_channels=8, blocks_per_scale=(2, 1, 1, 1),
    denoiser_hidden=16, denoiser_blocks=2, emb_dim=8, disc_channels=8, nce_patches=64, nce_proj_dim=32,
)


def toy_config(**overrides):
    cfg = TrainConfig(toy=True, **TOY_OVERRIDES)
    return dataclasses.replace(cfg, **overrides).validate()


def _parse_value(field_type, raw, key):
    try:
        if field_type is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        if field_type is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_config(text):
    """Parse ``key = value`` lines; ``toy = true`` starts from the toy preset."""
    types = {f.name: (type(f.default) if f.name != "blocks_per_scale" else tuple)
             for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(types[key], raw, key)
    if values.get("toy"):
        return toy_config(**values)
    return dataclasses.replace(TrainConfig(), **values).validate()


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FRDF"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
META_KEY = "__meta__"


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict = field(default_factory=dict)

    @property
    def stage(self):
        return self.meta.get("stage")

    def to_bytes(self):
        items = dict(self.tensors)
        items[META_KEY] = np.frombuffer(json.dumps(self.meta, sort_keys=True).encode("utf-8"), np.uint8)
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items.items():
            arr = np.asarray(arr)
            if arr.dtype.kind == "f":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            code = DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BB", code, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 12 or data[:4] != MAGIC:
            raise BadMagicError("not a checkpoint file (bad magic bytes)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise VersionError(f"checkpoint version {version}, expected {VERSION}")
        pos = 12
        tensors = {}
        meta = {}
        for i in range(count):
            name = f"#{i}"
            try:
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                if pos + nlen > len(data):
                    raise struct.error
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                code, ndim = struct.unpack_from("<BB", data, pos)
                pos += 2
                shape = struct.unpack_from(f"<{ndim}I", data, pos)
                pos += 4 * ndim
            except struct.error:
                raise TruncatedCheckpointError(f"truncated header for tensor {name!r}") from None
            if code not in CODE_DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise TruncatedCheckpointError(f"truncated data for tensor {name!r}")
            arr = np.frombuffer(data, dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode("utf-8"))
            else:
                tensors[name] = arr
        return cls(tensors, meta)


def _write_atomic_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt, path):
    _write_atomic_bytes(path, ckpt.to_bytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        head = fh.read(12)
        # reject foreign files before reading any tensor data
        if len(head) < 12 or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint file (bad magic bytes)")
        return Checkpoint.from_bytes(head + fh.read())


# ---------------------------------------------------------------- model bundle

def _rng(seed, stream):
    return np.random.default_rng([seed, stream])


STREAM_INIT, STREAM_DATA, STREAM_NCE, STREAM_DIFF, STREAM_DENOISER_INIT, STREAM_CROP = range(6)


class Models:
    """All networks and optimizers for one run."""

    def __init__(self, cfg, with_denoiser):
        self.cfg = cfg
        init = _rng(cfg.seed, STREAM_INIT)
        self.net = DehazeNet(cfg.network(), init)
        self.disc = Discriminator(cfg.disc_channels, init)
        self.nce = PatchNCE([cfg.base_channels, cfg.base_channels], cfg.nce(), init)
        self.denoiser = None
        if with_denoiser:
            self.denoiser = DenoiserNet(cfg.base_channels, cfg.denoiser_hidden, cfg.denoiser_blocks,
                                        cfg.T, cfg.emb_dim, _rng(cfg.seed, STREAM_DENOISER_INIT))
        self.schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.reset_optimizers()

    def reset_optimizers(self):
        cfg = self.cfg
        self.opt_g = Adam(self.generator_params(), cfg.lr, cfg.beta1, cfg.beta2)
        self.opt_d = Adam(list(self.disc.named_params("disc.")), cfg.lr_d, cfg.beta1, cfg.beta2)

    def generator_params(self):
        named = list(self.net.named_params("net.")) + list(self.nce.named_params("nce."))
        if self.denoiser is not None:
            named += list(self.denoiser.named_params("den."))
        return named

    def all_named_params(self):
        return self.generator_params() + list(self.disc.named_params("disc."))

    def state_dict(self):
        out = {name: p.value for name, p in self.all_named_params()}
        out.update(self.opt_g.state_dict("adam_g"))
        out.update(self.opt_d.state_dict("adam_d"))
        return out

    def load_weights(self, tensors, prefixes=("net.", "disc.", "nce.", "den.")):
        mine = dict(self.all_named_params())
        wanted = {k: p for k, p in mine.items() if k.startswith(prefixes)}
        missing = sorted(k for k in wanted if k not in tensors)
        bad = [(k, p.value.shape, tensors[k].shape) for k, p in wanted.items()
               if k in tensors and tensors[k].shape != p.value.shape]
        if missing or bad:
            diff = "; ".join([f"missing {k}" for k in missing] + [f"{k}: model {a} vs checkpoint {b}" for k, a, b in bad])
            raise ShapeError(f"incompatible checkpoint: {diff}")
        for k, p in wanted.items():
            p.value = np.array(tensors[k], dtype=p.value.dtype)
            p.grad = np.zeros_like(p.value)

    def load_optimizers(self, tensors):
        self.opt_g.load_state_dict(tensors, "adam_g")
        self.opt_d.load_state_dict(tensors, "adam_d")

    def checkpoint(self, stage, extra=None):
        meta = {"format": "FRDF", "stage": stage, "config": self.cfg.to_text()}
        meta.update(extra or {})
        return Checkpoint({k: np.array(v, copy=True) for k, v in self.state_dict().items()}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt, require_denoiser=False):
        cfg = parse_config(ckpt.meta["config"])
        has_den = any(k.startswith("den.") for k in ckpt.tensors)
        if require_denoiser and not has_den:
            raise MissingDenoiserError("checkpoint has no denoiser (stage-1 only); run stage 2 first")
        models = cls(cfg, with_denoiser=has_den)
        models.load_weights(ckpt.tensors)
        return models


# ---------------------------------------------------------------- training

def residual_scale(h, w):
    """Diffusion works on residuals scaled to orthonormal-DFT units."""
    return 1.0 / math.sqrt(h * w)


def condition(amp, scale):
    return np.log1p(amp * scale).astype(np.float32)


def _epoch_batches(n, batch, rng):
    order = rng.permutation(n)
    nb = max(1, n // batch)
    return [order[i * batch:(i + 1) * batch] for i in range(nb)]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list               # rows (epoch, step, l_gan, l_nce, l_diff, total)
    epoch_means: list       # per-epoch mean StageLosses-like dicts

    def write_log(self, path):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "l_gan", "l_nce", "l_diff", "total"])
        for row in self.log:
            w.writerow([row[0], row[1]] + [f"{v:.6g}" for v in row[2:]])
        write_text_atomic(path, buf.getvalue())


def _train_step(models, hazy, clear, cfg, rng_nce, rng_diff, stage):
    net, disc = models.net, models.disc
    models.opt_g.zero_grad()
    enc_h = net.encode(hazy)
    (_, f1_h), _ = enc_h
    (_, f1_c), _ = net.encode(clear)
    amp_h = np.abs(dft2(f1_h))
    z = batch_amplitude_residual(amp_h, np.abs(dft2(f1_c)), cfg.per_channel_stats).astype(np.float32)
    chain = None
    if stage == 2 and not cfg.oracle_residual:
        s = residual_scale(*z.shape[-2:])
        cond = condition(amp_h, s)
        eps0, steps = draw_chain_noise(rng_diff, z.shape, models.schedule)
        z_T = forward_diffuse(z * s, models.schedule, eps0).astype(np.float32)
        z_hat_n, caches = reverse_chain(z_T, cond, models.schedule, models.denoiser, steps)
        chain = (s, z_hat_n, caches)
        z_feed = (z_hat_n / s).astype(np.float32)
    else:
        z_feed = z
    i_out, cache = net.forward(hazy, z_feed, encoded=enc_h)

    # discriminator update on detached output
    models.opt_d.zero_grad()
    real, rc = disc.forward(clear)
    fake, fc = disc.forward(i_out)
    l_d, g_real, g_fake = lsgan_d_loss(real, fake)
    disc.backward(g_real.astype(np.float32), rc)
    disc.backward(g_fake.astype(np.float32), fc)
    models.opt_d.step()

    losses, g_out = stage1_loss(i_out, enc_h[0], net, disc, models.nce,
                                cfg.lambda_gan, cfg.lambda_nce, rng_nce)
    if chain is not None:
        s, z_hat_n, caches = chain
        losses, g_z_hat = stage2_loss(losses, z * s, z_hat_n, cfg.lambda_diff)
    _, g_z = net.backward(g_out.astype(np.float32), cache)
    if chain is not None:
        g_chain = g_z_hat + (g_z / s).astype(np.float32)
        reverse_chain_backward(g_chain, caches, models.schedule, models.denoiser)
    if not math.isfinite(losses.total):
        raise FloatingPointError("non-finite generator loss")
    models.opt_g.step()
    return losses, l_d


def train(cfg, dataset, init=None, progress=None):
    """Run one training stage; stage 2 requires a stage-1 ``init`` checkpoint."""
    cfg.validate()
    stage = cfg.stage
    if stage == 2 and init is None:
        raise CheckpointError("stage 2 requires a stage-1 checkpoint (--init)")
    if not dataset.hazy_paths or not dataset.clear_paths:
        raise ValueError("dataset needs non-empty hazy and clear sets")
    models = Models(cfg, with_denoiser=(stage == 2))
    if init is not None:
        prefixes = ("net.", "disc.", "nce.") if stage == 2 else ("net.", "disc.", "nce.", "den.")
        models.load_weights(init.tensors, prefixes)
        if stage == 1 and init.stage == 1:
            models.load_optimizers(init.tensors)
    rng_data = _rng(cfg.seed, STREAM_DATA + 10 * stage)
    rng_nce = _rng(cfg.seed, STREAM_NCE + 10 * stage)
    rng_diff = _rng(cfg.seed, STREAM_DIFF + 10 * stage)
    sample_state = _rng(cfg.seed, STREAM_CROP + 10 * stage).bit_generator.state
    rows, means = [], []
    last_good = models.checkpoint(stage, {"epoch": 0})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        acc = []
        for ids in _epoch_batches(len(dataset.hazy_paths), cfg.batch, rng_data):
            hazy, clear, sample_state = sample_unpaired_batch(dataset, len(ids), cfg.patch, sample_state, hazy_ids=ids)
            try:
                with np.errstate(over="raise", invalid="raise"):
                    losses, l_d = _train_step(models, hazy, clear, cfg, rng_nce, rng_diff, stage)
            except (FloatingPointError, NonFiniteGradientError) as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", last_good) from exc
            step += 1
            row = (epoch, step, losses.l_gan, losses.l_nce, losses.l_diff, losses.total)
            rows.append(row)
            acc.append(row[2:] + (l_d,))
        m = np.mean(np.array(acc), axis=0)
        means.append(dict(l_gan=m[0], l_nce=m[1], l_diff=m[2], total=m[3], l_d=m[4]))
        log.info("stage %d epoch %d: gan %.4f nce %.4f diff %.4f total %.4f d %.4f",
                 stage, epoch, *m)
        if progress:
            progress(epoch, means[-1], models)
        last_good = models.checkpoint(stage, {"epoch": epoch, "rng_state": {
            "data": rng_data.bit_generator.state, "crop": sample_state,
            "nce": rng_nce.bit_generator.state, "diffusion": rng_diff.bit_generator.state}})
    return TrainResult(last_good, rows, means)


def train_stage1(cfg, dataset, init=None, progress=None):
    return train(dataclasses.replace(cfg, stage=1), dataset, init, progress)


def train_stage2(cfg, dataset, stage1_ckpt, progress=None):
    if stage1_ckpt is None:
        raise CheckpointError("stage 2 requires a stage-1 checkpoint")
    return train(dataclasses.replace(cfg, stage=2), dataset, stage1_ckpt, progress)


# ---------------------------------------------------------------- inference

def _pad_to(x, mult):
    h, w = x.shape[-2:]
    ph, pw = (-h) % mult, (-w) % mult
    if not ph and not pw:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def infer(hazy, models, seed, sample_index=0):
    """Dehaze one (3, H, W) image: sample a residual, then run the network with it."""
    if isinstance(models, Checkpoint):
        models = Models.from_checkpoint(models, require_denoiser=True)
    if models.denoiser is None:
        raise MissingDenoiserError("checkpoint has no denoiser (stage-1 only); run stage 2 first")
    x, (h, w) = _pad_to(np.asarray(hazy, np.float32), models.net.multiple)
    x = x[None]
    enc = models.net.encode(x)
    (_, f1), _ = enc
    amp = np.abs(dft2(f1))
    s = residual_scale(*amp.shape[-2:])
    rng = np.random.default_rng([seed, sample_index])
    z_hat = diffusion.sample(condition(amp, s), models.schedule, models.denoiser, rng)
    out, _ = models.net.forward(x, (z_hat / s).astype(np.float32), encoded=enc)
    return out[0, :, :h, :w]


def infer_with_residual(hazy, models, z=None):
    """Stage-1 style forward with an explicit residual (zero when omitted)."""
    x, (h, w) = _pad_to(np.asarray(hazy, np.float32), models.net.multiple)
    x = x[None]
    enc = models.net.encode(x)
    f1 = enc[0][1]
    if z is None:
        z = np.zeros_like(f1)
    out, _ = models.net.forward(x, z, encoded=enc)
    return out[0, :, :h, :w]


def evaluate_pairs(models, pairs, seed=0):
    """Mean PSNR/SSIM of :func:`infer` outputs over ``(hazy, clear)`` tensor pairs."""
    ps, ss = [], []
    for i, (h, c) in enumerate(pairs):
        out = infer(h, models, seed, i)
        ps.append(psnr(out, c))
        ss.append(ssim(out, c))
    return dict(psnr=float(np.mean(ps)), ssim=float(np.mean(ss)))


# ---------------------------------------------------------------- lambda sweep

def lambda_sweep(cfg, dataset, values=(0.1, 1.0, 10.0), evaluate=None, baseline=None):
    """Train both stages for each single-lambda variation (others held at 1).

    Identical configurations are trained once.  ``evaluate(models)`` may
    return a score dict added to each row.  ``baseline`` is an optional
    stage-2 :class:`TrainResult` already trained with all weights at 1.
    """
    rows, done = [], {}
    if baseline is not None:
        done[(("lambda_diff", 1.0), ("lambda_gan", 1.0), ("lambda_nce", 1.0))] = _sweep_row(baseline, evaluate)
    for key in ("lambda_gan", "lambda_nce", "lambda_diff"):
        for v in values:
            lam = dict(lambda_gan=1.0, lambda_nce=1.0, lambda_diff=1.0)
            lam[key] = v
            sig = tuple(sorted(lam.items()))
            if sig not in done:
                run_cfg = dataclasses.replace(cfg, **lam)
                s1 = train_stage1(run_cfg, dataset)
                done[sig] = _sweep_row(train_stage2(run_cfg, dataset, s1.checkpoint), evaluate)
            rows.append(dict(param=key, value=v, **done[sig]))
    return rows


def _sweep_row(s2, evaluate):
    row = dict(final_total=s2.epoch_means[-1]["total"], final_diff=s2.epoch_means[-1]["l_diff"])
    if evaluate is not None:
        row.update(evaluate(Models.from_checkpoint(s2.checkpoint)))
    return row


def sweep_orderings(rows, metric=None):
    """One line per swept weight listing its values from best to worst (lower loss / higher score first)."""
    if metric is None:
        metric = "psnr" if "psnr" in rows[0] else "final_total"
    sign = -1 if metric in ("psnr", "ssim") else 1
    lines = []
    for key in dict.fromkeys(r["param"] for r in rows):
        sub = sorted((r for r in rows if r["param"] == key), key=lambda r: sign * r[metric])
        lines.append(f"{key} by {metric}: " + " > ".join(f"{r['value']:g} ({r[metric]:.4f})" for r in sub))
    return lines
