"""Command-line entry point.

Subcommands: synth, train, eval, retrieve, gradcheck, ablate. Option
precedence is built-in defaults < config file (key=value lines, #
comments) < command-line overrides; every run echoes the fully resolved
configuration. Exit codes: 0 success, 1 validation/config error,
2 runtime or I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import errors as err
from .data import (
    SyntheticSpec,
    load_dataset,
    per_class_text_embedding,
    save_dataset,
    synth_generate,
)
from .losses import (
    LossBatch,
    discriminator_loss,
    generator_loss,
    margin_regularizer,
    triplet_loss,
)
from .model import Dims, GaussianCode, init_params, latent_divergence, sample_latent
from .retrieval import evaluate, metrics_csv, retrieve
from .trainer import (
    TrainConfig,
    load_checkpoint,
    log_csv,
    save_checkpoint,
    train,
)

VALIDATION_ERRORS = (
    err.ConfigInvalid,
    err.SpecInvalid,
    err.UnknownClass,
    err.DimsMismatch,
    err.SingleClassDataset,
    err.EmptyUnseenSplit,
    err.EmptyDataset,
)

# keys accepted in config files and --set overrides, with their parsers
_CONFIG_KEYS = {
    "alpha": float,
    "beta": float,
    "lambda": float,
    "lr": float,
    "clip_k": float,
    "n_outer": int,
    "d_steps": int,
    "inner_cap": int,
    "batch_size": int,
    "divergence_mode": str,
    "js_samples": int,
    "leaky_slope": float,
    "seed": int,
    "wrong_class_mode": str,
    "rho": float,
    "eps": float,
    "d_c": int,
    "d_z": int,
    "g_hidden1": int,
    "g_hidden2": int,
    "disc_hidden": int,
}
_ABLATION_FLAGS = ("no_wrong_class", "no_triplet", "no_reg", "no_gan")


def _read_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise err.ConfigInvalid(f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key] = value
    return values


def _parse_kv(values: dict) -> dict:
    parsed = {}
    for key, value in values.items():
        if key in _CONFIG_KEYS:
            try:
                parsed[key] = _CONFIG_KEYS[key](value)
            except ValueError:
                raise err.ConfigInvalid(f"config key {key}: cannot parse {value!r}")
        elif key in _ABLATION_FLAGS or key in ("joint_mode",):
            if value not in ("true", "false"):
                raise err.ConfigInvalid(f"config key {key}: expected true/false, got {value!r}")
            parsed[key] = value == "true"
        else:
            raise err.ConfigInvalid(f"unknown config key {key!r}")
    return parsed


def _resolve_train_config(args, ds) -> TrainConfig:
    """defaults < config file < CLI flags; dims come from the dataset."""
    values: dict = {}
    if args.config:
        values.update(_parse_kv(_read_config_file(args.config)))
    for key in list(_CONFIG_KEYS) + ["joint_mode"]:
        flag = getattr(args, key.replace(".", "_"), None)
        if flag is not None and flag is not False:
            values[key] = flag
    for name in args.ablate or []:
        if name not in _ABLATION_FLAGS:
            raise err.ConfigInvalid(f"unknown ablation flag {name!r}")
        values[name] = True
    dims = Dims(
        d_t=ds.d_t,
        d_i=ds.d_i,
        d_c=values.pop("d_c", 1024),
        d_z=values.pop("d_z", 100),
        g_hidden1=values.pop("g_hidden1", 2048),
        g_hidden2=values.pop("g_hidden2", 4096),
        disc_hidden=values.pop("disc_hidden", 1024),
    )
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    cfg = TrainConfig(dims=dims, **values)
    cfg.validate()
    return cfg


def _echo_config(cfg: TrainConfig) -> None:
    print("resolved config:")
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "dims":
            for df in fields(Dims):
                print(f"  dims.{df.name}={getattr(v, df.name)}")
        else:
            print(f"  {f.name}={v}")


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        n_seen=args.seen,
        items_per_class=args.items,
        d_i=args.di,
        d_t=args.dt,
        image_noise_std=args.image_noise,
        text_noise_std=args.text_noise,
        seed=args.seed,
    )
    print(f"synth spec: {spec}")
    ds = synth_generate(spec)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {ds.item_count} items, {len(ds.seen)} seen / {len(ds.unseen)} unseen classes")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = _resolve_train_config(args, ds)
    _echo_config(cfg)
    model, log, state = train(ds, cfg)
    save_checkpoint(args.out, model, cfg, state)
    print(f"wrote checkpoint {args.out} ({len(log)} update steps)")
    if args.log:
        Path(args.log).write_text(log_csv(log), encoding="utf-8")
        print(f"wrote training log {args.log}")
    return 0


def _load_model(ckpt_path, ds):
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.dims.d_t != ds.d_t or ckpt.dims.d_i != ds.d_i:
        raise err.DimsMismatch(
            f"checkpoint dims (d_t={ckpt.dims.d_t}, d_i={ckpt.dims.d_i}) "
            f"do not match dataset (d_t={ds.d_t}, d_i={ds.d_i})"
        )
    return ckpt, ckpt.to_model()


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    ckpt, model = _load_model(args.checkpoint, ds)
    report = evaluate(model, ds, k=args.k, seed=args.seed, skip_generator=ckpt.config.no_gan)
    print("Q,prec50,map50,top1")
    print(f"{report.q},{report.prec50:.6f},{report.map50:.6f},{report.top1:.6f}")
    if args.out:
        Path(args.out).write_text(metrics_csv(report), encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    ds = load_dataset(args.dataset)
    ckpt, model = _load_model(args.checkpoint, ds)
    if args.class_id not in ds.unseen:
        raise err.UnknownClass(f"class {args.class_id} is not in the unseen split {ds.unseen}")
    pool = np.nonzero(np.isin(ds.labels, np.asarray(ds.unseen, dtype=np.uint32)))[0]
    query = per_class_text_embedding(ds, args.class_id)
    ranked = retrieve(
        model, query, ds.images[pool], pool, args.k, args.seed,
        skip_generator=ckpt.config.no_gan,
    )
    print("rank,image_index,sim,label,hit")
    for rank, (sim, idx) in enumerate(ranked.entries, start=1):
        label = int(ds.labels[idx])
        print(f"{rank},{idx},{sim:.6f},{label},{int(label == args.class_id)}")
    return 0


def _gradcheck_cases(seed: int):
    """Loss-by-loss gradient checks on a toy model with frozen randomness."""
    dims = Dims(d_t=3, d_i=4, d_c=3, d_z=2, g_hidden1=5, g_hidden2=5, disc_hidden=4)
    rng = np.random.default_rng(seed)
    model = init_params(dims, rng)
    # healthy activations for finite differencing: larger weights, positive biases
    for name in model.names():
        arr = rng.normal(0.0, 0.5, size=model.tensors[name].shape).astype(np.float32)
        if name.split(".")[-1].startswith("b"):
            arr = np.abs(arr) * 0.5 + 0.1
        model.tensors[name] = ad.tensor(arr)
    b = 2
    batch = LossBatch(
        i_r=ad.tensor(np.abs(rng.normal(size=(b, dims.d_i))).astype(np.float32)),
        phi_tr=ad.tensor(rng.normal(size=(b, dims.d_t)).astype(np.float32)),
        i_w=ad.tensor(np.abs(rng.normal(size=(b, dims.d_i))).astype(np.float32)),
        phi_tw=ad.tensor(rng.normal(size=(b, dims.d_t)).astype(np.float32)),
    )

    class Frozen:
        """Replays a fixed stream of normal draws so f is deterministic."""

        def __init__(self, seed):
            self.draws = {}
            self.base = np.random.default_rng(seed)
            self.i = 0

        def standard_normal(self, shape=None):
            key = (self.i, tuple(np.atleast_1d(shape)) if shape is not None else ())
            if key not in self.draws:
                self.draws[key] = self.base.standard_normal(shape)
            self.i += 1
            return self.draws[key]

        def reset(self):
            self.i = 0

    cases = []

    frozen_d = Frozen(seed + 1)
    def f_disc(params):
        frozen_d.reset()
        t = dict(model.tensors)
        t.update(zip(model.names("disc"), params))
        loss, _ = discriminator_loss(model, batch, frozen_d, t)
        return loss
    cases.append(("discriminator_loss", f_disc, [model.tensors[n] for n in model.names("disc")]))

    frozen_g = Frozen(seed + 2)
    def f_gen(params):
        frozen_g.reset()
        t = dict(model.tensors)
        t.update(zip(model.names("gen") + model.names("te"), params))
        loss, _ = generator_loss(model, batch, frozen_g, 0.5, 2.0, 2.0, t)
        return loss
    cases.append(
        ("generator_loss", f_gen, [model.tensors[n] for n in model.names("gen") + model.names("te")])
    )

    frozen_t = Frozen(seed + 3)
    frozen_t_inputs = {}
    def f_trip(params):
        frozen_t.reset()
        if "i" not in frozen_t_inputs:
            code = model.text_encode(batch.phi_tr)
            c_tr = sample_latent(code, frozen_t)
            z = ad.tensor(frozen_t.standard_normal((b, dims.d_z)).astype(np.float32))
            c_tw = sample_latent(model.text_encode(batch.phi_tw), frozen_t)
            frozen_t_inputs["i"] = model.generate(z, c_tr).detach()
            frozen_t_inputs["i_w"] = model.generate(z, c_tw).detach()
            frozen_t_inputs["c"] = c_tr.detach()
        t = dict(model.tensors)
        t.update(zip(model.names("csem"), params))
        loss, _ = triplet_loss(model, frozen_t_inputs["i"], frozen_t_inputs["i_w"], frozen_t_inputs["c"], t)
        return loss
    cases.append(("triplet_loss", f_trip, [model.tensors[n] for n in model.names("csem")]))

    def f_div(params):
        return latent_divergence(GaussianCode(params[0], params[1]))
    cases.append(
        ("latent_divergence", f_div, [ad.tensor(rng.normal(size=3).astype(np.float32)),
                                      ad.tensor(rng.normal(scale=0.3, size=3).astype(np.float32))])
    )

    def f_margin(params):
        reg, _, _ = margin_regularizer(params[0], batch.i_r, batch.i_w, 2.0)
        return reg
    cases.append(("margin_regularizer", f_margin, [ad.tensor(np.abs(rng.normal(size=(b, dims.d_i))).astype(np.float32))]))

    return cases


def cmd_gradcheck(args) -> int:
    worst_overall = 0.0
    failed = False
    for name, f, params in _gradcheck_cases(args.seed):
        rel = ad.grad_check(f, params, eps=args.eps)
        status = "ok" if rel < args.threshold else "FAIL"
        if rel >= args.threshold:
            failed = True
        worst_overall = max(worst_overall, rel)
        print(f"{name}: max rel err {rel:.3e} [{status}]")
    print(f"worst: {worst_overall:.3e} (threshold {args.threshold:g})")
    return 1 if failed else 0


ABLATION_VARIANTS = [
    ("full", {}),
    ("no_wrong_class", {"no_wrong_class": True}),
    ("no_reg_no_triplet", {"no_reg": True, "no_triplet": True}),
    ("no_triplet", {"no_triplet": True}),
    ("no_reg", {"no_reg": True}),
    ("no_gan", {"no_gan": True}),
    ("joint", {"joint_mode": True}),
    ("wc_most_similar", {"wrong_class_mode": "most_similar"}),
    ("wc_kmeans", {"wrong_class_mode": "kmeans"}),
]


def cmd_ablate(args) -> int:
    from dataclasses import replace

    ds = load_dataset(args.dataset)
    base = _resolve_train_config(args, ds)
    _echo_config(base)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        cfg = replace(base, **overrides)
        curve = []

        def hook(it, model, _cfg=cfg):
            if it % args.eval_every == 0 or it == _cfg.n_outer:
                rep = evaluate(model, ds, k=args.k, seed=args.seed, skip_generator=_cfg.no_gan)
                curve.append((it, rep.prec50))

        model, _, _ = train(ds, cfg, eval_hook=hook)
        report = evaluate(model, ds, k=args.k, seed=args.seed, skip_generator=cfg.no_gan)
        rows.append((name, report.prec50, report.map50, report.top1))
        curve_path = out_dir / f"curve_{name}.csv"
        curve_path.write_text(
            "outer_it,prec50\n" + "".join(f"{it},{p:.6f}\n" for it, p in curve),
            encoding="utf-8",
        )
        print(f"{name}: prec50={report.prec50:.4f} map50={report.map50:.4f} top1={report.top1:.4f}")
    summary = out_dir / "ablation.csv"
    summary.write_text(
        "variant,prec50,map50,top1\n"
        + "".join(f"{n},{p:.6f},{m:.6f},{t:.6f}\n" for n, p, m, t in rows),
        encoding="utf-8",
    )
    print(f"wrote {summary}")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lambda", dest="lambda", type=float, default=None, help="margin width")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--clip-k", dest="clip_k", type=float, default=None)
    p.add_argument("--n-outer", dest="n_outer", type=int, default=None)
    p.add_argument("--d-steps", dest="d_steps", type=int, default=None)
    p.add_argument("--inner-cap", dest="inner_cap", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--divergence-mode", dest="divergence_mode", default=None,
                   choices=("kl_closed_form", "js_monte_carlo"))
    p.add_argument("--js-samples", dest="js_samples", type=int, default=None)
    p.add_argument("--leaky-slope", dest="leaky_slope", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--wrong-class-mode", dest="wrong_class_mode", default=None,
                   choices=("random", "most_similar", "kmeans"))
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--d-c", dest="d_c", type=int, default=None)
    p.add_argument("--d-z", dest="d_z", type=int, default=None)
    p.add_argument("--g-hidden1", dest="g_hidden1", type=int, default=None)
    p.add_argument("--g-hidden2", dest="g_hidden2", type=int, default=None)
    p.add_argument("--disc-hidden", dest="disc_hidden", type=int, default=None)
    p.add_argument("--ablate", action="append", default=None, metavar="FLAG",
                   help="ablation flag (repeatable): " + ", ".join(_ABLATION_FLAGS))
    p.add_argument("--joint", dest="joint_mode", action="store_true", default=False,
                   help="train the mapper jointly with the generator instead of alternating")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zscr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seen", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--di", type=int, required=True)
    p.add_argument("--dt", type=int, required=True)
    p.add_argument("--image-noise", type=float, default=0.05)
    p.add_argument("--text-noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("dataset")
    _add_train_flags(p)
    p.add_argument("-o", "--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the unseen split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", help="per-class metrics CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("retrieve", help="rank unseen images for one query class")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--class-id", dest="class_id", type=int, required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("gradcheck", help="compare loss gradients against central differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-2)
    p.add_argument("--eps", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate the full model plus ablation variants")
    p.add_argument("dataset")
    _add_train_flags(p)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=5)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on malformed flags; map to the validation code
        return 1 if e.code == 2 else (e.code or 0)
    try:
        return args.fn(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (err.ZscrError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
