"""Command-line surface: gen-data, train, sample, eval, gradcheck, ablate."""

import hashlib
import os
import sys
import time


def _apply_thread_cap():
    cap = os.environ.get("AW_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()  # must run before numpy loads its thread pools

import argparse  # noqa: E402

import numpy as np  # noqa: E402

from . import synthdata as sd  # noqa: E402
from .configio import config_from_text, config_to_text  # noqa: E402
from .evaluation import StyleCentroids, evaluate_model, reference_set_for  # noqa: E402
from .gradcheck import fd_check  # noqa: E402
from .losses import total_loss  # noqa: E402
from .model import ModelConfig  # noqa: E402
from .trainer import TrainConfig, Trainer, build_batch, load_checkpoint, save_checkpoint  # noqa: E402

VARIANTS = ("full", "wo_gram", "wo_negemb", "wo_da", "wo_onlyup", "wo_lstyle", "wo_ldisen")

SMALLEST = dict(image_size=16, n_style_tokens=4, msd_depth=1, channels=24)


def load_config(path, seed=None):
    if path:
        with open(path) as fh:
            cfg = config_from_text(fh.read(), TrainConfig)
    else:
        cfg = TrainConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def variant_config(cfg, variant):
    """Shared-seed ablation wiring for one named variant."""
    import copy

    cfg = copy.deepcopy(cfg)
    if variant == "full":
        pass
    elif variant == "wo_gram":
        cfg.model.no_gram_film = True
    elif variant == "wo_negemb":
        cfg.model.no_neg_branch = True
    elif variant == "wo_da":
        cfg.model.no_dynamic_weights = True
        cfg.model.no_adain = True
    elif variant == "wo_onlyup":
        cfg.model.adapter_placement = "all"
    elif variant == "wo_lstyle":
        cfg.use_style_loss = False
    elif variant == "wo_ldisen":
        cfg.use_disen_loss = False
    else:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return cfg


class Manifest:
    """Every artifact a command writes, plus the config echo."""

    def __init__(self, command, config, seed):
        self.command = command
        self.config_text = config_to_text(config) if config else ""
        self.seed = seed
        self.artifacts = []
        digest = hashlib.sha256(f"{command}|{seed}|{self.config_text}".encode()).hexdigest()
        self.run_id = digest[:12]

    def add(self, path):
        self.artifacts.append(str(path))
        return path

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "run_manifest.txt")
        with open(path, "w") as fh:
            fh.write(f"run_id = {self.run_id}\n")
            fh.write(f"command = {self.command}\n")
            fh.write(f"seed = {self.seed}\n")
            for a in self.artifacts:
                fh.write(f"artifact = {a}\n")
            fh.write("[config echo]\n")
            fh.write(self.config_text)
        return path


def write_ppm(path, image):
    """8-bit P6 pixmap from a (3, H, W) float image in [0, 1]."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    h, w = img.shape[1], img.shape[2]
    data = (img.transpose(1, 2, 0) * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())
    return path


def write_image_tensor(path, image):
    with open(path, "wb") as fh:
        fh.write(np.asarray(image, dtype="<f8").tobytes())
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = load_config(args.config, args.seed)
    manifest = Manifest("gen-data", cfg, cfg.seed)
    samples = sd.build_corpus(
        cfg.n_per_family, seed=cfg.seed, size=cfg.model.image_size, families=cfg.families
    )
    data_path, list_path = sd.write_dataset(samples, args.out)
    manifest.add(data_path)
    manifest.add(list_path)
    print(f"wrote {len(samples)} samples across {len(cfg.families)} families to {args.out}")
    manifest.write(args.out)
    return 0


def _log_line(step, bd, wall_ms):
    return (
        f"step={step} noise={bd.noise:.6f} disen={bd.disen:.6f} "
        f"style={bd.style:.6f} total={bd.total:.6f} wall_ms={wall_ms:.1f}"
    )


def cmd_train(args):
    cfg = load_config(args.config, args.seed)
    if args.freeze_host:
        cfg.freeze_host = True
    manifest = Manifest("train", cfg, cfg.seed)
    samples = sd.read_dataset(args.data) if args.data else None
    if args.checkpoint:
        trainer = load_checkpoint(args.checkpoint, samples=samples)
        if args.steps:
            trainer.config.steps = args.steps
    else:
        if args.steps:
            cfg.steps = args.steps
        trainer = Trainer(cfg, samples=samples)
    os.makedirs(args.out, exist_ok=True)
    log_path = manifest.add(os.path.join(args.out, "train.log"))
    mode = "a" if args.checkpoint else "w"
    with open(log_path, mode) as log:
        last = time.perf_counter()

        def on_step(step, bd):
            nonlocal last
            now = time.perf_counter()
            line = _log_line(step, bd, (now - last) * 1000)
            last = now
            log.write(line + "\n")
            print(line)

        trainer.run(on_step)
    ckpt = manifest.add(os.path.join(args.out, "model.ckpt"))
    save_checkpoint(trainer, ckpt)
    manifest.write(args.out)
    print(f"trained to step {trainer.step}; checkpoint at {ckpt}")
    return 0


def cmd_sample(args):
    trainer = load_checkpoint(args.checkpoint)
    model = trainer.model
    before = _weights_digest(model)
    if args.style not in sd.FAMILIES:
        print(f"error: unknown style {args.style!r}; choose from {sd.FAMILIES}", file=sys.stderr)
        return 2
    manifest = Manifest("sample", trainer.config, args.seed)
    refs = reference_set_for(args.style, args.seed, size=model.config.image_size, n_refs=args.shots)
    content = sd.ContentSpec(args.shape, (0.5, 0.5), 0.42)
    prompts = np.tile(sd.prompt_for(content), (args.n, 1))
    images = model.sample(prompts, refs.images, refs.caption_tokens, seed=args.seed, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    for i, img in enumerate(images):
        stem = os.path.join(args.out, f"sample_{args.style}_{args.shape}_{i:03d}")
        manifest.add(write_image_tensor(stem + ".f64", img))
        manifest.add(write_ppm(stem + ".ppm", img))
    assert _weights_digest(model) == before, "sampling must not update weights"
    manifest.write(args.out)
    print(f"wrote {args.n} samples ({args.shots}-shot {args.style}/{args.shape}) to {args.out}")
    return 0


def _weights_digest(model):
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters().items()):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def cmd_eval(args):
    trainer = load_checkpoint(args.checkpoint)
    manifest = Manifest("eval", trainer.config, args.seed)
    report = evaluate_model(
        trainer.model, n_per_style=args.n, seed=args.seed, sampler_steps=args.steps, n_refs=args.shots
    )
    os.makedirs(args.out, exist_ok=True)
    path = manifest.add(os.path.join(args.out, "eval.txt"))
    with open(path, "w") as fh:
        for line in report.lines():
            fh.write(line + "\n")
            print(line)
    manifest.write(args.out)
    return 0


def cmd_gradcheck(args):
    cfg = TrainConfig(
        model=ModelConfig(**SMALLEST),
        batch_size=2,
        n_per_family=2,
        n_refs_min=2,
        n_refs_max=2,
        seed=args.seed if args.seed is not None else 11,
    )
    trainer = Trainer(cfg)
    batch = build_batch(trainer.ensure_data(), cfg, step=0)
    params = trainer.model.trainable_set()

    def f():
        total, _ = total_loss(trainer.model, batch)
        return total

    t0 = time.perf_counter()
    worst, report = fd_check(f, params, h=args.h, max_entries_per_param=args.probes, seed=0)
    wall = time.perf_counter() - t0
    by_module = {}
    for name, err in report.items():
        module = ".".join(name.split(".")[:2])
        by_module[module] = max(by_module.get(module, 0.0), err)
    print(f"{'module':40s} max_rel_err")
    for module in sorted(by_module):
        print(f"{module:40s} {by_module[module]:.3e}")
    print(f"parameters checked: {len(report)} tensors, {args.probes} entries each (seeded subset)")
    print(f"max relative error: {worst:.3e}  (threshold {args.threshold:.1e}, wall {wall:.1f}s)")
    status = worst < args.threshold
    print("gradcheck:", "PASS" if status else "FAIL")
    return 0 if status else 1


def cmd_ablate(args):
    base = load_config(args.config, args.seed)
    variants = args.variant or ["full"]
    manifest = Manifest("ablate", base, base.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for variant in variants:
        cfg = variant_config(base, variant)
        trainer = Trainer(cfg)
        trainer.run()
        report = evaluate_model(
            trainer.model, n_per_style=args.n, seed=base.seed, sampler_steps=args.steps, n_refs=args.shots
        )
        rows.append((variant, report))
        line = f"variant={variant} style_score={report.style_score:.4f} semantic_score={report.semantic_score:.4f}"
        print(line)
    path = manifest.add(os.path.join(args.out, "ablate.txt"))
    with open(path, "w") as fh:
        for variant, report in rows:
            fh.write(
                f"variant={variant} style_score={report.style_score:.4f} "
                f"semantic_score={report.semantic_score:.4f} n={report.n_samples}\n"
            )
    manifest.write(args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stylediff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", default=None, help="config file (key = value with [sections])")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="out", help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", default=None, help="dataset directory from gen-data")
    sp.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    sp.add_argument("--freeze-host", action="store_true")
    sp.add_argument("--steps", type=int, default=None, help="override total step count")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="generate stylized images")
    common(sp, checkpoint=True)
    sp.add_argument("--style", required=True, help=f"style family: {', '.join(sd.FAMILIES)}")
    sp.add_argument("--shape", default="circle", choices=sd.SHAPES)
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--shots", type=int, default=3, help="reference images (1=one-shot)")
    sp.add_argument("--steps", type=int, default=25, help="sampler steps")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="style/semantic oracle scores")
    common(sp, checkpoint=True)
    sp.add_argument("--n", type=int, default=50, help="samples per style")
    sp.add_argument("--shots", type=int, default=3)
    sp.add_argument("--steps", type=int, default=25)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    common(sp)
    sp.add_argument("--h", type=float, default=1e-4)
    sp.add_argument("--probes", type=int, default=3, help="entries checked per tensor")
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train and score model variants")
    common(sp)
    sp.add_argument("--variant", action="append", choices=VARIANTS, help="repeatable")
    sp.add_argument("--n", type=int, default=12, help="eval samples per style")
    sp.add_argument("--shots", type=int, default=3)
    sp.add_argument("--steps", type=int, default=25)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command in ("sample", "eval"):
        args.seed = 0
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
