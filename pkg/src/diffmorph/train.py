"""Joint end-to-end training: config parsing, the Adam optimizer, the
epoch loop with deterministic per-epoch randomness, checkpoint files,
and the classical field-optimization baseline.

Determinism contract: every random draw in a run derives from
(config.seed, epoch), so a run resumed from an epoch-boundary checkpoint
produces the same loss sequence as an uninterrupted one.
"""

import dataclasses
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import losses as losses_mod
from . import nets as nets_mod
from . import schedule as sched_mod
from .tensor import Tensor


class NonFiniteLoss(RuntimeError):
    """A loss component left the finite range; the step was aborted."""


@dataclass
class TrainingConfig:
    data: str = ""
    out: str = "run"
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 2e-4
    lam: float = 2.0
    lambda_phi: float = 1.0
    ncc_window: int = 9
    t_train: int = 2000
    beta_start: float = 1e-6
    beta_end: float = 1e-2
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    checkpoint_interval: int = 10
    score_ladder: tuple = (16, 32, 64, 128)
    deform_ladder: tuple = (16, 32, 32, 32)
    emb_dim: int = 64

    def validate(self):
        positive = ("batch_size", "learning_rate", "lam", "t_train",
                    "beta_start", "beta_end", "emb_dim")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError("config: %s must be positive" % name)
        for name in ("epochs", "lambda_phi", "seed", "checkpoint_interval"):
            if getattr(self, name) < 0:
                raise ValueError("config: %s must be >= 0" % name)
        if len(self.score_ladder) != 4 or len(self.deform_ladder) != 4:
            raise ValueError("config: channel ladders need 4 entries")
        return self


# `lambda` is a keyword, so the config file key maps onto the lam field
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {"lam": "lambda"}


def _field_kind(field):
    kind = TrainingConfig.__dataclass_fields__[field].type
    return kind if isinstance(kind, str) else kind.__name__


def _coerce(field, raw, where):
    kind = _field_kind(field)
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ValueError("%s: bad value %r for key %r" % (where, raw, field))


def parse_config(text, source="<config>"):
    """Flat `key = value` lines with # comments; unknown keys error."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError("%s:%d: expected key = value, got %r"
                             % (source, lineno, line))
        key, _, raw = stripped.partition("=")
        key = key.strip()
        field = _KEY_TO_FIELD.get(key, key)
        if field not in TrainingConfig.__dataclass_fields__:
            raise ValueError("%s:%d: unknown key %r" % (source, lineno, key))
        values[field] = _coerce(field, raw.strip(),
                                "%s:%d" % (source, lineno))
    return TrainingConfig(**values).validate()


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=path)


def serialize_config(config):
    lines = []
    for f in dataclasses.fields(TrainingConfig):
        val = getattr(config, f.name)
        kind = _field_kind(f.name)
        if kind == "tuple":
            val = ",".join(str(v) for v in val)
        elif kind == "bool":
            val = "true" if val else "false"
        elif kind == "float":
            val = repr(val)
        lines.append("%s = %s" % (_FIELD_TO_KEY.get(f.name, f.name), val))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = (self.beta1 * self.m[k]
                             + (1.0 - self.beta1) * g).astype(p.data.dtype)
            v = self.v[k] = (self.beta2 * self.v[k]
                             + (1.0 - self.beta2) * g * g).astype(p.data.dtype)
            update = (self.lr * (m / c1)
                      / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            p.data = p.data - update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class ModelParams:
    """Both networks plus optimizer state, addressable by name."""

    def __init__(self, G, M, learning_rate):
        self.G = G
        self.M = M
        self.epoch = 0
        named = {}
        for prefix, net in (("G.", G), ("M.", M)):
            for k, p in net.params.items():
                named[prefix + k] = p
        self.opt = Adam(named, lr=learning_rate)

    @property
    def named_params(self):
        return self.opt.params


def build_model(config):
    G = nets_mod.ScoreNet(ladder=config.score_ladder,
                          emb_dim=config.emb_dim, seed=config.seed)
    M = nets_mod.DeformNet(ladder=config.deform_ladder,
                           seed=config.seed + 1)
    return ModelParams(G, M, config.learning_rate)


# ------------------------------------------------------------ training step

def train_step(model, batch, sched, w, rng):
    """One joint update on a batch of PairSamples.

    Draws one timestep per pair plus per-pixel noise, forms each x_t
    from that pair's fixed image, evaluates the joint objective, and
    applies one Adam update. Returns the loss components as floats.
    """
    if not batch:
        raise ValueError("train_step: empty batch")
    ts = [int(v) for v in rng.integers(1, sched.T + 1, size=len(batch))]
    m = Tensor(np.concatenate([s.m.data for s in batch]))
    f = Tensor(np.concatenate([s.f.data for s in batch]))
    eps = Tensor(rng.standard_normal(m.shape).astype(m.dtype))
    x_t = Tensor(np.concatenate(
        [sched_mod.forward_sample(f.data[i:i + 1], t, eps.data[i:i + 1],
                                  sched)
         for i, t in enumerate(ts)]))

    def check(name, node):
        val = float(node.data)
        if not np.isfinite(val):
            raise NonFiniteLoss("train_step: non-finite %s (%r) at t=%s"
                                % (name, val, ts))
        return val

    # each component is checked as soon as it exists so the error names
    # the first stage that went bad
    eps_hat = model.G((m, f), x_t, ts)
    l_diff = losses_mod.diffusion_loss(eps_hat, eps)
    ld = check("L_diffusion", l_diff)
    field = model.M(m, eps_hat)
    l_reg = losses_mod.registration_loss(m, f, field, w)
    lr = check("L_regist", l_reg)
    total = l_diff + w.lam * l_reg
    lt = check("total", total)

    model.opt.zero_grad()
    total.backward()
    model.opt.step()
    return ld, lr, lt


def train(config, resume=None):
    """Run the epoch loop; returns the final checkpoint path.

    With `resume`, continues from an epoch-boundary checkpoint and
    appends to the existing loss log.
    """
    samples = data_mod.load_dataset(config.data)
    if not samples:
        raise ValueError("train: dataset %s lists no pairs" % config.data)
    sched = sched_mod.make_schedule(config.t_train, config.beta_start,
                                    config.beta_end)
    if resume is not None:
        model, meta = load_checkpoint(resume)
        start_epoch = model.epoch
    else:
        model = build_model(config)
        start_epoch = 0
    os.makedirs(config.out, exist_ok=True)
    log_path = os.path.join(config.out, "loss_log.csv")
    flags = data_mod.AugmentFlags(config.hflip, config.vflip, config.rot90)
    w = losses_mod.LossWeights(lam=config.lam, lambda_phi=config.lambda_phi,
                               ncc_window=config.ncc_window)
    step = model.opt.step_count
    with open(log_path, "a" if resume is not None else "w") as log:
        if resume is None:
            log.write("step,epoch,l_diffusion,l_regist,total\n")
        for epoch in range(start_epoch + 1, config.epochs + 1):
            erng = np.random.default_rng([config.seed, epoch])
            order = erng.permutation(len(samples))
            shuffled = [data_mod.augment(samples[i], erng, flags)
                        for i in order]
            for lo in range(0, len(shuffled), config.batch_size):
                batch = shuffled[lo:lo + config.batch_size]
                ld, lr, lt = train_step(model, batch, sched, w, erng)
                step += 1
                log.write("%d,%d,%.9g,%.9g,%.9g\n"
                          % (step, epoch, ld, lr, lt))
            model.epoch = epoch
            if (config.checkpoint_interval > 0
                    and epoch % config.checkpoint_interval == 0
                    and epoch < config.epochs):
                save_checkpoint(model, sched, config, os.path.join(
                    config.out, "ckpt_%04d.dmck" % epoch))
    final = os.path.join(config.out, "checkpoint.dmck")
    save_checkpoint(model, sched, config, final)
    return final


# -------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"DMCK"
_CKPT_VERSION = 1


def save_checkpoint(model, sched, config, path):
    """Write parameters, Adam state, and the config header."""
    blob = serialize_config(config)
    blob += "epoch = %d\nadam_step = %d\n" % (model.epoch,
                                              model.opt.step_count)
    tensors = []
    for k, p in model.named_params.items():
        tensors.append((k, p.data))
    for k in model.named_params:
        tensors.append(("adam.m." + k, model.opt.m[k]))
    for k in model.named_params:
        tensors.append(("adam.v." + k, model.opt.v[k]))
    enc = blob.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            fh.write(arr.tobytes())
    return path


def _read_exact(fh, n, path, what):
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("%s: truncated checkpoint (%s)" % (path, what))
    return raw


def load_checkpoint(path):
    """Rebuild ModelParams and the schedule from a checkpoint file.

    Returns (model, metadata) where metadata carries the parsed config
    and the restored schedule. Every stored tensor must match the shape
    the header's architecture implies.
    """
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError("%s: not a DMCK checkpoint" % path)
        version = struct.unpack("<I", _read_exact(fh, 4, path, "version"))[0]
        if version != _CKPT_VERSION:
            raise ValueError("%s: unsupported checkpoint version %d"
                             % (path, version))
        blob_len = struct.unpack("<I", _read_exact(fh, 4, path, "header"))[0]
        blob = _read_exact(fh, blob_len, path, "config").decode("utf-8")
        state = {}
        config_lines = []
        for line in blob.splitlines():
            key = line.split("=")[0].strip()
            if key in ("epoch", "adam_step"):
                state[key] = int(line.split("=")[1])
            else:
                config_lines.append(line)
        config = parse_config("\n".join(config_lines), source=path)
        count = struct.unpack("<I", _read_exact(fh, 4, path, "count"))[0]
        loaded = {}
        for _ in range(count):
            nlen = struct.unpack("<H", _read_exact(fh, 2, path, "name"))[0]
            name = _read_exact(fh, nlen, path, "name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4, path, "rank"))[0]
            shape = struct.unpack(
                "<%dI" % rank, _read_exact(fh, 4 * rank, path, "extents"))
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * n, path, "payload")
            loaded[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    model = build_model(config)
    model.epoch = state.get("epoch", 0)
    model.opt.step_count = state.get("adam_step", 0)
    for k, p in model.named_params.items():
        for store, key in ((None, k), (model.opt.m, "adam.m." + k),
                           (model.opt.v, "adam.v." + k)):
            if key not in loaded:
                raise ValueError("%s: missing tensor %r" % (path, key))
            arr = loaded.pop(key)
            if arr.shape != p.data.shape:
                raise ValueError(
                    "%s: tensor %r has shape %s but the header architecture "
                    "implies %s" % (path, key, arr.shape, p.data.shape))
            if store is None:
                p.data = arr
            else:
                store[k] = arr
    if loaded:
        raise ValueError("%s: unexpected tensors %s"
                         % (path, sorted(loaded)))
    sched = sched_mod.make_schedule(config.t_train, config.beta_start,
                                    config.beta_end)
    return model, {"config": config, "schedule": sched,
                   "epoch": model.epoch, "step": model.opt.step_count}


# ----------------------------------------------------------------- baseline

def classical_register(m, f, w, iters=300, step_size=50.0, trace=None):
    """Direct gradient descent on the displacement field.

    Minimizes the registration objective over the field variable with no
    networks involved. Keeps the best-so-far field; stops early if the
    loss fails to improve for 50 consecutive iterations or the field
    leaves the finite range. Passing a list as `trace` collects the
    best-so-far objective per iteration.
    """
    if m.shape != f.shape:
        raise ValueError("classical_register: shapes %s and %s differ"
                         % (tuple(m.shape), tuple(f.shape)))
    u = np.zeros((m.shape[0], 2) + tuple(m.shape[2:]), dtype=m.dtype)
    best_u = u.copy()
    best_loss = np.inf
    streak = 0
    for _ in range(iters):
        ut = Tensor(u, requires_grad=True)
        loss = losses_mod.registration_loss(m, f, ut, w)
        val = float(loss.data)
        if val < best_loss:
            best_loss = val
            best_u = u.copy()
            streak = 0
        else:
            streak += 1
            if streak >= 50:
                break
        if trace is not None:
            trace.append(best_loss)
        loss.backward()
        u = u - step_size * ut.grad
        if not np.isfinite(u).all():
            break
    return Tensor(best_u)
