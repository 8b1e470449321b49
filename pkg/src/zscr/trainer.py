"""Alternating-phase training schedule and its support machinery.

One outer iteration runs a GAN phase (several critic updates per generator
update, critic weights clipped after every step) and then a mapper phase
(the common-space mapper trained against frozen generator outputs). The
inner loops grow with the outer iteration index; an optional cap bounds
them. All randomness flows through one seeded generator, so runs are
bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backend import kernels as K
from .data import EmbeddingDataset, validate_split
from .errors import (
    ConfigInvalid,
    EmptyDataset,
    FormatError,
    SingleClassDataset,
    VersionMismatch,
)
from .losses import (
    LossBatch,
    LossBreakdown,
    clip_weights,
    discriminator_loss,
    generator_loss,
    triplet_loss,
)
from .model import BLOCKS, Dims, Model, init_params, sample_latent

CKPT_MAGIC = b"ZSCK"
CKPT_VERSION = 1

WRONG_CLASS_MODES = ("random", "most_similar", "kmeans")
DIVERGENCE_MODES = ("kl_closed_form", "js_monte_carlo")

KMEANS_ITERS = 50


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training schedule, recorded in checkpoints."""

    dims: Dims
    alpha: float = 0.5
    beta: float = 2.0
    lam: float = 2.0
    lr: float = 5e-5
    clip_k: float = 0.01
    n_outer: int = 10
    d_steps: int = 5
    inner_cap: Optional[int] = None
    batch_size: int = 64
    divergence_mode: str = "kl_closed_form"
    js_samples: int = 64
    leaky_slope: float = 0.2
    seed: int = 0
    wrong_class_mode: str = "random"
    no_wrong_class: bool = False
    no_triplet: bool = False
    no_reg: bool = False
    no_gan: bool = False
    joint_mode: bool = False
    rho: float = 0.9
    eps: float = 1e-8

    def validate(self):
        self.dims.validate()
        for name in ("alpha", "beta", "lam", "lr", "clip_k"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_outer < 1:
            raise ConfigInvalid(f"n_outer must be >= 1, got {self.n_outer}")
        if self.d_steps < 1:
            raise ConfigInvalid(f"d_steps must be >= 1, got {self.d_steps}")
        if self.inner_cap is not None and self.inner_cap < 1:
            raise ConfigInvalid(f"inner_cap must be >= 1, got {self.inner_cap}")
        if self.batch_size < 1:
            raise ConfigInvalid(f"batch_size must be >= 1, got {self.batch_size}")
        if self.wrong_class_mode not in WRONG_CLASS_MODES:
            raise ConfigInvalid(f"wrong_class_mode must be one of {WRONG_CLASS_MODES}")
        if self.divergence_mode not in DIVERGENCE_MODES:
            raise ConfigInvalid(f"divergence_mode must be one of {DIVERGENCE_MODES}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigInvalid(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    def inner_reps(self, it: int) -> int:
        return min(it, self.inner_cap) if self.inner_cap else it


@dataclass
class LogRow:
    """One optimizer update: phase 'd', 'g' or 'm' plus its loss components."""

    outer_it: int
    phase: str
    step: int
    l_d: float = 0.0
    l_g_adv: float = 0.0
    div_r: float = 0.0
    div_w: float = 0.0
    reg: float = 0.0
    l_t: float = 0.0


LOG_HEADER = "outer_it,phase,step,l_d,l_g_adv,div_r,div_w,reg,l_t"


def log_csv(rows: list[LogRow]) -> str:
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(
            f"{r.outer_it},{r.phase},{r.step},{r.l_d:.6g},{r.l_g_adv:.6g},"
            f"{r.div_r:.6g},{r.div_w:.6g},{r.reg:.6g},{r.l_t:.6g}"
        )
    return "\n".join(lines) + "\n"


class RmsProp:
    """Root-mean-square propagation with one accumulator per parameter."""

    def __init__(self, rho: float = 0.9, eps: float = 1e-8):
        self.rho = rho
        self.eps = eps
        self.state: dict[str, np.ndarray] = {}

    def update(self, name: str, w: Tensor, g: Tensor, lr: float) -> Tensor:
        s = self.state.get(name)
        if s is None:
            s = np.zeros_like(w.data)
        w2, s2 = K.rmsprop_step(w.data, g.data, s, lr, self.rho, self.eps)
        self.state[name] = s2
        return ad.tensor(w2)


@dataclass
class Batch:
    """Matched right-class rows and deliberately mismatched wrong-class rows."""

    i_r: np.ndarray
    phi_tr: np.ndarray
    y: np.ndarray
    i_w: np.ndarray
    phi_tw: np.ndarray
    y_wrong: np.ndarray

    def as_loss_batch(self) -> LossBatch:
        return LossBatch(
            i_r=ad.tensor(self.i_r),
            phi_tr=ad.tensor(self.phi_tr),
            i_w=ad.tensor(self.i_w),
            phi_tw=ad.tensor(self.phi_tw),
        )


class WrongClassTables:
    """Precomputed wrong-class lookup for the non-random selection modes."""

    def __init__(self, most_similar=None, kmeans=None):
        self.most_similar = most_similar or {}
        self.kmeans = kmeans or {}


def build_wrong_tables(ds: EmbeddingDataset, mode: str, seed: int) -> WrongClassTables:
    if mode == "most_similar":
        return WrongClassTables(most_similar=_most_similar_table(ds))
    if mode == "kmeans":
        return WrongClassTables(kmeans=_kmeans_table(ds, seed))
    return WrongClassTables()


def _most_similar_table(ds: EmbeddingDataset) -> dict[int, int]:
    classes = list(ds.seen)
    embs = []
    for c in classes:
        idx = ds.items_of(c)
        embs.append(ds.texts[idx].mean(axis=0, dtype=np.float64))
    embs = np.stack(embs)
    norms = np.linalg.norm(embs, axis=1)
    norms[norms == 0] = 1.0
    unit = embs / norms[:, None]
    sims = unit @ unit.T
    table = {}
    for a, ca in enumerate(classes):
        best, best_sim = None, -np.inf
        for b, cb in enumerate(classes):
            if cb == ca:
                continue
            if sims[a, b] > best_sim or (sims[a, b] == best_sim and cb < best):
                best, best_sim = cb, sims[a, b]
        table[ca] = best
    return table


def _kmeans_table(ds: EmbeddingDataset, seed: int) -> dict[int, int]:
    """Lloyd's algorithm over seen-class image embeddings, then the wrong
    class of y is the class whose items share clusters with y's items most
    often (ties to the smallest class id)."""
    classes = list(ds.seen)
    pool = np.nonzero(np.isin(ds.labels, np.asarray(classes, dtype=np.uint32)))[0]
    points = ds.images[pool].astype(np.float64)
    labels = ds.labels[pool]
    k = len(classes)
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(len(points), size=k, replace=False)].copy()
    assign = np.zeros(len(points), dtype=np.int64)
    for _ in range(KMEANS_ITERS):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for c in range(k):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    # per-cluster class histograms -> pairwise co-occurrence counts
    counts = np.zeros((k, len(classes)), dtype=np.int64)
    class_pos = {c: p for p, c in enumerate(classes)}
    for cluster, lab in zip(assign, labels):
        counts[cluster, class_pos[int(lab)]] += 1
    co = counts.T @ counts
    table = {}
    for p, c in enumerate(classes):
        best, best_count = None, -1
        for q, other in enumerate(classes):
            if other == c:
                continue
            if co[p, q] > best_count or (co[p, q] == best_count and other < best):
                best, best_count = other, co[p, q]
        table[c] = best
    return table


def select_wrong_class(
    ds: EmbeddingDataset,
    y: int,
    mode: str,
    rng: np.random.Generator,
    tables: WrongClassTables,
) -> int:
    """Pick the mismatched class paired with class y for one sample."""
    if len(ds.seen) < 2:
        raise SingleClassDataset("need at least two seen classes")
    if mode == "random":
        others = [c for c in ds.seen if c != y]
        return others[int(rng.integers(len(others)))]
    if mode == "most_similar":
        return tables.most_similar[y]
    if mode == "kmeans":
        return tables.kmeans[y]
    raise ConfigInvalid(f"unknown wrong_class_mode {mode!r}")


def sample_batch(
    ds: EmbeddingDataset,
    config: TrainConfig,
    rng: np.random.Generator,
    tables: WrongClassTables,
    seen_index: Optional[dict[int, np.ndarray]] = None,
) -> Batch:
    """Uniform rows (with replacement) from seen items; each row gets a
    wrong-class partner item drawn uniformly from its selected wrong class."""
    if seen_index is None:
        seen_index = build_seen_index(ds)
    all_seen = seen_index["__all__"]
    if all_seen.size == 0:
        raise EmptyDataset("no seen-class items to sample")
    b = config.batch_size
    rows = all_seen[rng.integers(all_seen.size, size=b)]
    y = ds.labels[rows].astype(np.int64)
    wrong_rows = np.empty(b, dtype=np.int64)
    y_wrong = np.empty(b, dtype=np.int64)
    for j in range(b):
        wc = select_wrong_class(ds, int(y[j]), config.wrong_class_mode, rng, tables)
        pool = seen_index[wc]
        wrong_rows[j] = pool[int(rng.integers(pool.size))]
        y_wrong[j] = wc
    return Batch(
        i_r=ds.images[rows],
        phi_tr=ds.texts[rows],
        y=y,
        i_w=ds.images[wrong_rows],
        phi_tw=ds.texts[wrong_rows],
        y_wrong=y_wrong,
    )


def build_seen_index(ds: EmbeddingDataset) -> dict:
    index = {c: ds.items_of(c) for c in ds.seen}
    index["__all__"] = np.nonzero(np.isin(ds.labels, np.asarray(ds.seen, dtype=np.uint32)))[0]
    return index


def rmsprop_update(opt: RmsProp, model: Model, grads: dict[str, Tensor], lr: float) -> None:
    for name, g in grads.items():
        model.tensors[name] = opt.update(name, model.tensors[name], g, lr)


def _step(
    model: Model,
    blocks: tuple[str, ...],
    loss_fn: Callable[[dict[str, Tensor]], tuple[Tensor, LossBreakdown]],
    opt: RmsProp,
    lr: float,
) -> LossBreakdown:
    """Watch the given blocks, evaluate the loss, backpropagate, update."""
    tape = ad.Tape()
    watched = model.watched(tape, *blocks)
    loss, bd = loss_fn(watched)
    ad.backward(loss)
    grads = {name: tape.grad(watched[name]) for name in model.names(*blocks)}
    rmsprop_update(opt, model, grads, lr)
    return bd


def e_step(
    model: Model,
    ds: EmbeddingDataset,
    config: TrainConfig,
    it: int,
    rng: np.random.Generator,
    opt: RmsProp,
    tables: WrongClassTables,
    seen_index: dict,
    log: list[LogRow],
) -> None:
    """GAN phase: d_steps critic updates (each followed by the weight clip),
    then one generator/text-encoder update, repeated inner_reps(it) times.
    The mapper is untouched unless joint_mode folds its loss into the
    generator update."""
    gen_blocks = ("gen", "te", "csem") if config.joint_mode else ("gen", "te")
    d_count = 0
    g_count = 0
    for _ in range(config.inner_reps(it)):
        for _ in range(config.d_steps):
            batch = sample_batch(ds, config, rng, tables, seen_index).as_loss_batch()
            bd = _step(
                model,
                ("disc",),
                lambda w: discriminator_loss(
                    model, batch, rng, w, no_wrong_class=config.no_wrong_class
                ),
                opt,
                config.lr,
            )
            clip_weights(model, config.clip_k)
            d_count += 1
            log.append(LogRow(it, "d", d_count, l_d=bd.l_d))
        batch = sample_batch(ds, config, rng, tables, seen_index).as_loss_batch()
        bd = _step(
            model,
            gen_blocks,
            lambda w: generator_loss(
                model,
                batch,
                rng,
                config.alpha,
                config.beta,
                config.lam,
                w,
                divergence_mode=config.divergence_mode,
                js_samples=config.js_samples,
                no_wrong_class=config.no_wrong_class,
                no_reg=config.no_reg,
                with_triplet=config.joint_mode and not config.no_triplet,
            ),
            opt,
            config.lr,
        )
        g_count += 1
        log.append(
            LogRow(
                it, "g", g_count,
                l_g_adv=bd.l_g_adv, div_r=bd.div_r, div_w=bd.div_w, reg=bd.reg, l_t=bd.l_t,
            )
        )


def m_step(
    model: Model,
    ds: EmbeddingDataset,
    config: TrainConfig,
    it: int,
    rng: np.random.Generator,
    opt: RmsProp,
    tables: WrongClassTables,
    seen_index: dict,
    log: list[LogRow],
) -> None:
    """Mapper phase: latent codes and generated embeddings are computed with
    frozen upstream networks and enter the triplet loss as constants.

    Without the GAN stage the raw image embeddings stand in for the
    generated representatives."""
    m_count = 0
    for _ in range(config.inner_reps(it)):
        batch = sample_batch(ds, config, rng, tables, seen_index)
        phi_tr = ad.tensor(batch.phi_tr)
        phi_tw = ad.tensor(batch.phi_tw)
        c_tr = sample_latent(model.text_encode(phi_tr), rng).detach()
        if config.no_gan:
            i_r = ad.tensor(batch.i_r)
            i_w = None if config.no_wrong_class else ad.tensor(batch.i_w)
        else:
            c_tw = sample_latent(model.text_encode(phi_tw), rng).detach()
            z = ad.tensor(rng.standard_normal((config.batch_size, model.dims.d_z)).astype(np.float32))
            i_r = model.generate(z, c_tr).detach()
            i_w = None if config.no_wrong_class else model.generate(z, c_tw).detach()
        bd = _step(
            model,
            ("csem",),
            lambda w: triplet_loss(model, i_r, i_w, c_tr, w),
            opt,
            config.lr,
        )
        m_count += 1
        log.append(LogRow(it, "m", m_count, l_t=bd.l_t))


def train(
    ds: EmbeddingDataset,
    config: TrainConfig,
    eval_hook: Optional[Callable[[int, Model], None]] = None,
) -> tuple[Model, list[LogRow], "TrainState"]:
    """Run the full schedule and return the trained model, the per-update
    log, and the final optimizer/rng state (for checkpointing)."""
    config.validate()
    validate_split(ds)
    if ds.d_t != config.dims.d_t or ds.d_i != config.dims.d_i:
        raise ConfigInvalid(
            f"config dims (d_t={config.dims.d_t}, d_i={config.dims.d_i}) do not match "
            f"dataset (d_t={ds.d_t}, d_i={ds.d_i})"
        )
    rng = np.random.default_rng(config.seed)
    tables = build_wrong_tables(ds, config.wrong_class_mode, config.seed)
    seen_index = build_seen_index(ds)
    model = init_params(config.dims, rng, config.leaky_slope)
    opt = RmsProp(config.rho, config.eps)
    log: list[LogRow] = []
    for it in range(1, config.n_outer + 1):
        if not config.no_gan:
            e_step(model, ds, config, it, rng, opt, tables, seen_index, log)
        if not (config.no_triplet or (config.joint_mode and not config.no_gan)):
            m_step(model, ds, config, it, rng, opt, tables, seen_index, log)
        if eval_hook is not None:
            eval_hook(it, model)
    return model, log, TrainState(opt=opt, rng=rng, completed_outer=config.n_outer)


@dataclass
class TrainState:
    opt: RmsProp
    rng: np.random.Generator
    completed_outer: int


# --- checkpoint serialization ---


@dataclass
class Checkpoint:
    version: int
    dims: Dims
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]
    rng_state: dict
    completed_outer: int

    def to_model(self) -> Model:
        return Model(
            dims=self.dims,
            leaky_slope=self.config.leaky_slope,
            tensors={n: ad.tensor(v) for n, v in self.tensors.items()},
        )


def _config_lines(config: TrainConfig, rng_state: dict, completed_outer: int) -> str:
    pairs = []
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        if f.name == "dims":
            for df in fields(Dims):
                pairs.append(f"dims.{df.name}={getattr(v, df.name)}")
        elif v is None:
            pairs.append(f"{f.name}=")
        elif isinstance(v, bool):
            pairs.append(f"{f.name}={'true' if v else 'false'}")
        elif isinstance(v, float):
            pairs.append(f"{f.name}={v!r}")
        else:
            pairs.append(f"{f.name}={v}")
    pairs.append(f"completed_outer={completed_outer}")
    pairs.append(f"rng_state={json.dumps(rng_state)}")
    return "\n".join(pairs)


def _parse_config_lines(text: str) -> tuple[TrainConfig, dict, int]:
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    dims = Dims(**{f.name: int(kv.pop(f"dims.{f.name}")) for f in fields(Dims)})
    rng_state = json.loads(kv.pop("rng_state"))
    completed_outer = int(kv.pop("completed_outer"))
    args = {"dims": dims}
    for f in fields(TrainConfig):
        if f.name == "dims":
            continue
        raw = kv.pop(f.name)
        if raw == "":
            args[f.name] = None
        elif f.type in ("float",):
            args[f.name] = float(raw)
        elif f.type in ("bool",):
            args[f.name] = raw == "true"
        elif f.name == "inner_cap":
            args[f.name] = int(raw)
        elif f.type in ("int",):
            args[f.name] = int(raw)
        else:
            args[f.name] = raw
    if kv:
        raise FormatError(f"unknown checkpoint config keys: {sorted(kv)}")
    return TrainConfig(**args), rng_state, completed_outer


def save_checkpoint(path, model: Model, config: TrainConfig, state: TrainState) -> None:
    rng_state = state.rng.bit_generator.state
    meta = _config_lines(config, rng_state, state.completed_outer).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        records = [(name, model.tensors[name].data) for name in model.names()]
        records += [(f"opt.{name}", arr) for name, arr in sorted(state.opt.state.items())]
        for name, arr in records:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError(f"{path}: truncated file")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CKPT_VERSION}")
    (meta_len,) = take("<I")
    if off + meta_len > len(raw):
        raise FormatError(f"{path}: truncated metadata")
    meta = raw[off : off + meta_len].decode("utf-8")
    off += meta_len
    config, rng_state, completed_outer = _parse_config_lines(meta)
    tensors: dict[str, np.ndarray] = {}
    opt_state: dict[str, np.ndarray] = {}
    while off < len(raw):
        (name_len,) = take("<I")
        if off + name_len > len(raw):
            raise FormatError(f"{path}: truncated tensor name")
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += nbytes
        if name.startswith("opt."):
            opt_state[name[4:]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(
        version=version,
        dims=config.dims,
        config=config,
        tensors=tensors,
        opt_state=opt_state,
        rng_state=rng_state,
        completed_outer=completed_outer,
    )
