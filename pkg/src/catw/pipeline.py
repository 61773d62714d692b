"""Staged, memoized experiment pipeline with an append-only manifest.

Stages run in a fixed order; each one owns ``<out>/stages/<name>/`` and is
skipped when its key (relevant config keys, seed and upstream keys) and its
recorded output digests are unchanged.  The adversary-side stages (``cat``
and ``customize``) may only read from an allow-list of artifact roots, so the
clean splits never reach them.
"""
from __future__ import annotations

import json
import logging
import os
import platform
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from catw import attacks as atk
from catw import metrics as M
from catw._kernels import numba_enabled
from catw.autoencoder import AutoencoderConfig, decode_np, encode_np, train_autoencoder
from catw.cat import AdapterPlacement, CatHParams, attach_adapters, cat_loss, gaussian_purify, train_cat
from catw.config import ExperimentConfig
from catw.corpus import Corpus, CorpusSpec, ingest_folder, load_corpus, save_corpus, synth_corpus
from catw.diffusion import (
    DenoiserConfig,
    FinetuneHParams,
    build_denoiser,
    finetune,
    make_linear_schedule,
    mean_denoise_loss,
    sample,
)
from catw.nn.checkpoint import load_checkpoint, save_checkpoint
from catw.report import build_report, make_report
from catw.seeding import derive_seed, digest_arrays, digest_file, digest_json, rng_for

log = logging.getLogger(__name__)

STAGES = ("corpus", "train-ae", "train-ldm", "attack", "diagnose", "cat", "customize", "report")

# artifact roots the adversary-side stages may read
ALLOWED_READS = {
    "cat": ("stages/train-ae", "stages/attack"),
    "customize": ("stages/train-ae", "stages/train-ldm", "stages/attack", "stages/cat"),
}

UPSTREAM = {
    "corpus": (),
    "train-ae": ("corpus",),
    "train-ldm": ("corpus", "train-ae"),
    "attack": ("corpus", "train-ae", "train-ldm"),
    "diagnose": ("corpus", "train-ae", "train-ldm", "attack"),
    "cat": ("train-ae", "attack"),
    "customize": ("train-ae", "train-ldm", "attack", "cat"),
    "report": ("corpus", "train-ae", "train-ldm", "attack", "diagnose", "cat", "customize"),
}

# acceptance thresholds fixed by pilot runs; copied into every manifest
THRESHOLDS = {
    "ae_train_mse": 0.005,
    "ae_train_psnr_db": 25.0,
    "cat_gap_reduction": 0.25,
    "learnability_widen": 0.5,
}


def thresholds(cfg: ExperimentConfig) -> dict:
    return {
        **THRESHOLDS,
        "encoder_ratio": cfg.attack.encoder_ratio_threshold,
        "memorize_s_c": cfg.diffusion.memorize_threshold,
    }

SPLIT_DIRS = ("reference", "protect_target", "extra_reference")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ThreatModelViolation(PermissionError):
    pass


def stage_config(cfg: ExperimentConfig, stage: str) -> dict:
    """The config keys a stage consumes; editing any other key leaves it cached."""
    d, a, c = cfg.section_dict("diffusion"), cfg.section_dict("attack"), cfg.section_dict("cat")
    pick = lambda src, keys: {k: src[k] for k in keys}  # noqa: E731
    if stage == "corpus":
        return cfg.section_dict("corpus")
    if stage == "train-ae":
        return cfg.section_dict("ae")
    if stage == "train-ldm":
        return pick(d, ("T", "beta_start", "beta_end", "channels", "temb_dim", "concept_vocab", "pretrain_steps", "lr", "batch"))
    if stage == "attack":
        return a
    if stage == "diagnose":
        keys = ("memorize_steps", "memorize_lr", "memorize_samples", "adapter_rank", "learnability", "learnability_modes", "batch")
        return pick(d, keys)
    if stage == "cat":
        return c
    if stage == "customize":
        keys = ("customize", "customize_steps", "customize_seeds", "customize_samples", "lr", "batch", "memorize_steps", "memorize_lr", "memorize_samples")
        return {**pick(d, keys), "cat_settings": c["settings"], "purify": c["purify"]}
    if stage == "report":
        return {**cfg.section_dict("report"), "stages": list(cfg.stages), "name": cfg.name, "thresholds": thresholds(cfg)}
    raise KeyError(stage)


@dataclass
class StageContext:
    name: str
    root: Path
    seed: int
    cfg: ExperimentConfig
    reads: dict[str, str] = field(default_factory=dict)
    outputs: list[Path] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def dir(self) -> Path:
        return self.root / "stages" / self.name

    def rel(self, p: Path) -> str:
        return Path(p).resolve().relative_to(self.root.resolve()).as_posix()

    def check_read(self, p: Path) -> Path:
        rel = self.rel(p)
        allowed = ALLOWED_READS.get(self.name)
        if allowed is not None and not any(rel == a or rel.startswith(a + "/") for a in allowed):
            raise ThreatModelViolation(f"stage {self.name!r} may not read {rel}")
        return Path(p)

    def read_file(self, p: Path) -> Path:
        p = self.check_read(p)
        self.reads[self.rel(p)] = digest_file(p)
        return p

    def read_corpus(self, d: Path) -> Corpus:
        self.check_read(d)
        for f in ("index.json", "pixels.npy"):
            self.read_file(Path(d) / f)
        return load_corpus(d)

    def load_model(self, p: Path):
        return load_checkpoint(self.read_file(p))

    def load_npz(self, p: Path) -> dict:
        with np.load(self.read_file(p)) as f:
            return {k: f[k] for k in f.files}

    def load_json(self, p: Path):
        return json.loads(self.read_file(p).read_text())

    def out(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def save_npz(self, rel: str, **arrays) -> Path:
        p = self.out(rel)
        tmp = p.with_name(p.stem + ".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, p)
        self.outputs.append(p)
        return p

    def save_json(self, rel: str, obj) -> Path:
        p = self.out(rel)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, p)
        self.outputs.append(p)
        return p

    def save_model(self, rel: str, graph, adapters_only: bool = False) -> Path:
        p = self.out(rel)
        save_checkpoint(graph, p, adapters_only=adapters_only)
        self.outputs.append(p)
        return p

    def save_corpus(self, rel: str, corpus: Corpus, sidecar: dict | None = None) -> Path:
        d = self.out(rel)
        save_corpus(corpus, d, sidecar)
        self.outputs.extend([d / "index.json", d / "pixels.npy"])
        return d

    def rng(self, label: str) -> np.random.Generator:
        return rng_for(self.seed, f"{self.name}/{label}")

    def subseed(self, label: str) -> int:
        return derive_seed(self.seed, f"{self.name}/{label}")


# ------------------------------------------------------------------ shared helpers


def _paths(root: Path) -> dict[str, Path]:
    s = root / "stages"
    return {
        "eval": s / "corpus" / "eval",
        "pretrain": s / "corpus" / "pretrain",
        "ae": s / "train-ae" / "ae.catw",
        "ldm": s / "train-ldm" / "ldm.catw",
        "attack": s / "attack",
        "diagnose": s / "diagnose",
        "cat": s / "cat",
        "customize": s / "customize",
    }


def _schedule(cfg: ExperimentConfig):
    d = cfg.diffusion
    return make_linear_schedule(d.T, d.beta_start, d.beta_end)


def _sks(cfg: ExperimentConfig) -> int:
    """The concept token reserved for customization; never used in pretraining."""
    return cfg.diffusion.concept_vocab - 1


def _memorize(ctx: StageContext, base, z: np.ndarray, mode: str, label: str) -> tuple[np.ndarray, float]:
    """Overfit ``base`` on one latent and draw samples; seeds are shared across latents."""
    cfg = ctx.cfg
    d = cfg.diffusion
    sched = _schedule(cfg)
    hp = FinetuneHParams(steps=d.memorize_steps, lr=d.memorize_lr, batch=d.batch, mode=mode, rank=d.adapter_rank)
    ft, _ = finetune(base, z[None], _sks(cfg), sched, hp, seed=derive_seed(cfg.seed, f"memorize/{mode}"))
    zt = sample(ft, _sks(cfg), sched, rng_for(cfg.seed, f"memorize/sample/{mode}"), n=d.memorize_samples)
    loss = mean_denoise_loss(ft, z[None], _sks(cfg), sched, draws=256, seed=derive_seed(cfg.seed, "memorize/eval"))
    log.info("%s memorize %s: loss %.4f", mode, label, loss)
    return zt, loss


def _memorize_base(ctx: StageContext, mode: str, ldm_path: Path):
    if mode == "full":
        d = ctx.cfg.diffusion
        shape = load_checkpoint(ldm_path).config["denoiser"]["latent_shape"]
        return build_denoiser(
            DenoiserConfig(tuple(shape), d.channels, d.concept_vocab, d.temb_dim), seed=derive_seed(ctx.cfg.seed, "memorize/base")
        )
    return ctx.load_model(ldm_path)


# ------------------------------------------------------------------ stages


def stage_corpus(ctx: StageContext) -> None:
    c = ctx.cfg.corpus
    if c.kind == "folder":
        corpus, skipped = ingest_folder(c.path, c.size, tuple(c.split))
        ctx.metrics["skipped"] = len(skipped)
    else:
        spec = CorpusSpec("synthetic", c.identities, c.images_per_identity, c.size, None, tuple(c.split))
        corpus = synth_corpus(spec, seed=derive_seed(ctx.seed, "corpus/eval"))
    for split in SPLIT_DIRS:
        part = corpus.select(split)
        if len(part):
            ctx.save_corpus(f"eval/{split}", part)
    n = c.pretrain_images_per_identity
    pre = synth_corpus(
        CorpusSpec("synthetic", c.pretrain_identities, n, c.size, None, (n, 0, 0)), seed=derive_seed(ctx.seed, "corpus/pretrain")
    )
    ctx.save_corpus("pretrain", pre)
    ctx.metrics.update(eval_images=len(corpus), pretrain_images=len(pre), eval_digest=corpus.digest())


def stage_train_ae(ctx: StageContext) -> None:
    p = _paths(ctx.root)
    a = ctx.cfg.ae
    pre = ctx.read_corpus(p["pretrain"])
    cfg = AutoencoderConfig(ctx.cfg.corpus.size, 3, a.base_channels, a.latent_channels, 4, a.attention)
    graph, curve = train_autoencoder(pre.images, cfg, lr=a.lr, batch=a.batch, steps=a.steps, seed=ctx.subseed("train"))
    ctx.save_model("ae.catw", graph)
    rec = decode_np(encode_np(pre.images, graph), graph)
    train_mse = float(np.mean((rec - pre.images) ** 2))
    ctx.metrics.update(train_mse=train_mse, train_psnr=M.psnr(rec, pre.images), latent_scale=graph.config["latent_scale"])
    ctx.save_json("curve.json", [float(v) for v in curve])


def stage_train_ldm(ctx: StageContext) -> None:
    p = _paths(ctx.root)
    d = ctx.cfg.diffusion
    ae = ctx.load_model(p["ae"])
    pre = ctx.read_corpus(p["pretrain"])
    z = encode_np(pre.images, ae) * ae.config["latent_scale"]
    tokens = pre.identity % max(d.concept_vocab - 1, 1)
    den = build_denoiser(DenoiserConfig(z.shape[1:], d.channels, d.concept_vocab, d.temb_dim), seed=ctx.subseed("init"))
    hp = FinetuneHParams(steps=d.pretrain_steps, lr=d.lr, batch=d.batch)
    den, curve = finetune(den, z, tokens, _schedule(ctx.cfg), hp, seed=ctx.subseed("train"))
    ctx.save_model("ldm.catw", den)
    ctx.save_json("curve.json", [float(v) for v in curve])
    ctx.metrics["final_loss"] = float(np.mean(curve[-100:])) if curve else None


def _target_latents(ae, refs: Corpus, protected: Corpus) -> np.ndarray:
    """For each protected image, the latent of a reference image of the next identity."""
    ids = sorted(set(refs.identity.tolist()))
    if len(ids) < 2:
        raise ValueError("encoder_target needs at least two identities")
    first = {k: int(np.flatnonzero(refs.identity == k)[0]) for k in ids}
    pick = [first[ids[(ids.index(int(k)) + 1) % len(ids)]] for k in protected.identity]
    return encode_np(refs.images[pick], ae)


def _first(c: Corpus, n: int) -> Corpus:
    keep = list(range(min(n, len(c))))
    return Corpus(c.images[keep], [c.ids[i] for i in keep], c.identity[keep], [c.split[i] for i in keep], dict(c.meta))


def stage_attack(ctx: StageContext) -> None:
    p = _paths(ctx.root)
    a = ctx.cfg.attack
    ae = ctx.load_model(p["ae"])
    ldm = ctx.load_model(p["ldm"])
    clean = _first(ctx.read_corpus(p["eval"] / "protect_target"), a.images)
    models = atk.AttackModels(ae, ldm, _schedule(ctx.cfg), _sks(ctx.cfg))
    targets = None
    for obj in a.objectives:
        if obj == "encoder_target" and targets is None:
            targets = _target_latents(ae, ctx.read_corpus(p["eval"] / "reference"), clean)
        cfg = atk.AttackConfig(
            objective=obj,
            budget=a.budget,
            steps=a.steps,
            step_size=a.step_size or None,
            weights=tuple(a.weights),
            target_latent=targets if obj == "encoder_target" else None,
        )
        t0 = time.perf_counter()
        res = atk.pgd_attack(clean.images, models, cfg, ctx.rng(obj))
        achieved = np.abs(res.protected - clean.images).reshape(len(clean), -1).max(axis=1)
        prot = Corpus(res.protected, list(clean.ids), clean.identity.copy(), ["protected"] * len(clean), {"objective": obj})
        sidecar = {
            "objective": obj,
            "methods": sorted(k for k, v in atk.NAMED_METHODS.items() if v == obj),
            "budget": a.budget,
            "steps": a.steps,
            "step_size": cfg.alpha,
            "random_start": cfg.use_random_start,
            "seed": ctx.subseed(obj),
            "achieved_budget": {i: float(v) for i, v in zip(clean.ids, achieved)},
        }
        ctx.save_corpus(obj, prot, sidecar)
        ctx.metrics[obj] = {"seconds": round(time.perf_counter() - t0, 3), "max_budget": float(achieved.max())}


def _protected(ctx: StageContext, obj: str) -> Corpus:
    return ctx.read_corpus(_paths(ctx.root)["attack"] / obj)


def stage_diagnose(ctx: StageContext) -> None:
    """Analyst view: noisy baseline, latents of every role and (optionally) the memorization runs."""
    p = _paths(ctx.root)
    cfg = ctx.cfg
    ae = ctx.load_model(p["ae"])
    clean = ctx.read_corpus(p["eval"] / "protect_target")
    prot = {obj: _protected(ctx, obj) for obj in cfg.attack.objectives}
    n = len(next(iter(prot.values())))
    x_c = clean.images[:n]
    x_r = atk.make_noisy_baseline(x_c, cfg.attack.budget, ctx.rng("noisy"))
    ctx.save_corpus("noisy", Corpus(x_r, clean.ids[:n], clean.identity[:n], ["noisy"] * n, {}), {"delta": cfg.attack.budget})
    lat = {"clean": encode_np(x_c, ae), "noisy": encode_np(x_r, ae)}
    for obj, c in prot.items():
        lat[f"protected/{obj}"] = encode_np(c.images, ae)
    ctx.save_npz("latents.npz", **lat)
    if not cfg.diffusion.learnability:
        return
    scale = ae.config["latent_scale"]
    out = {}
    for mode in cfg.diffusion.learnability_modes:
        base = _memorize_base(ctx, mode, p["ldm"])
        runs = {}
        for role, z in [("clean", lat["clean"][0]), ("noisy", lat["noisy"][0])] + [(o, lat[f"protected/{o}"][0]) for o in prot]:
            zt, loss = _memorize(ctx, base, z * scale, mode, role)
            runs[role] = {"samples": zt / scale, "loss": loss}
        ctx.save_npz(f"memorize_{mode}.npz", **{k: v["samples"] for k, v in runs.items()})
        out[mode] = {k: v["loss"] for k, v in runs.items()}
    ctx.save_json("memorize_loss.json", out)


def stage_cat(ctx: StageContext) -> None:
    """Adversary view: trains adapters on protected images only; also the purification baseline."""
    p = _paths(ctx.root)
    c = ctx.cfg.cat
    ae = ctx.load_model(p["ae"])
    hp = CatHParams(batch=c.batch, lr=c.lr, steps=c.steps)
    jobs = [(s, c.rank_both if s == "both" else c.rank_single, obj, s) for s in c.settings for obj in ctx.cfg.attack.objectives]
    jobs += [(c.sweep_setting, r, obj, f"sweep/r{r}") for r in c.sweep_ranks for obj in c.sweep_objectives]
    cache: dict[str, Corpus] = {}
    for setting, rank, obj, tag in jobs:
        x_a = cache.setdefault(obj, _protected(ctx, obj)).images
        placement = AdapterPlacement(setting, rank)
        g = attach_adapters(ae, placement, seed=ctx.subseed(f"{tag}/{obj}/init"))
        loss0 = cat_loss(g, x_a).item()
        t0 = time.perf_counter()
        g, curve = train_cat(g, x_a, hp, seed=ctx.subseed(f"{tag}/{obj}/train"))
        loss1 = cat_loss(g, x_a).item()
        ctx.save_model(f"{tag}/{obj}.catw", g, adapters_only=True)
        ctx.save_npz(
            f"{tag}/{obj}.npz",
            z_cat=encode_np(x_a, g),
            recon=decode_np(encode_np(x_a, g), g),
            curve=np.asarray(curve, dtype=np.float64),
            loss=np.array([loss0, loss1]),
            params=np.array([g.adapter_param_count()]),
        )
        ctx.metrics[f"{tag}/{obj}"] = {"loss_ratio": loss1 / loss0 if loss0 else None, "seconds": round(time.perf_counter() - t0, 3)}
    if c.purify:
        for obj in ctx.cfg.attack.objectives:
            src = cache.setdefault(obj, _protected(ctx, obj))
            x_p = gaussian_purify(src.images, c.purify_ksize, c.purify_sigma)
            side = {"purified_by": {"method": "gaussian", "ksize": c.purify_ksize, "sigma": c.purify_sigma}, "objective": obj}
            ctx.save_corpus(f"purify/{obj}", Corpus(x_p, list(src.ids), src.identity.copy(), ["purified"] * len(src), {}), side)
            ctx.save_npz(f"purify/{obj}.npz", z=encode_np(x_p, ae), recon=decode_np(encode_np(x_p, ae), ae))


def _arm_latents(ctx: StageContext, ae, obj: str) -> dict[str, np.ndarray]:
    """Latents an adversary would fine-tune on: raw protected, CAT-realigned and purified."""
    p = _paths(ctx.root)
    x_a = _protected(ctx, obj).images
    arms = {"raw": encode_np(x_a, ae)}
    if "both" in ctx.cfg.cat.settings:
        arms["cat"] = ctx.load_npz(p["cat"] / "both" / f"{obj}.npz")["z_cat"]
    if ctx.cfg.cat.purify:
        arms["purify"] = ctx.load_npz(p["cat"] / "purify" / f"{obj}.npz")["z"]
    return arms


def stage_customize(ctx: StageContext) -> None:
    """Adversary view: fine-tune the pretrained denoiser on each arm's latents and sample."""
    p = _paths(ctx.root)
    cfg = ctx.cfg
    d = cfg.diffusion
    ae = ctx.load_model(p["ae"])
    ldm = ctx.load_model(p["ldm"])
    scale = ae.config["latent_scale"]
    sched = _schedule(cfg)
    for obj in cfg.attack.objectives:
        arms = _arm_latents(ctx, ae, obj)
        if d.customize:
            for arm, z in arms.items():
                samples = []
                for s in range(d.customize_seeds):
                    hp = FinetuneHParams(steps=d.customize_steps, lr=d.lr, batch=d.batch)
                    ft, _ = finetune(ldm, z * scale, _sks(cfg), sched, hp, seed=derive_seed(cfg.seed, f"customize/{obj}/{s}"))
                    zs = sample(ft, _sks(cfg), sched, rng_for(cfg.seed, f"customize/sample/{obj}/{s}"), n=d.customize_samples)
                    samples.append(zs / scale)
                zs = np.stack(samples)  # (seeds, samples, C, h, w)
                images = decode_np(zs.reshape((-1,) + zs.shape[2:]), ae)
                ctx.save_npz(f"{arm}/{obj}.npz", latents=zs, images=images.reshape(zs.shape[:2] + images.shape[1:]))
        if d.learnability and "cat" in arms:
            base = _memorize_base(ctx, "full", p["ldm"])
            zt, loss = _memorize(ctx, base, arms["cat"][0] * scale, "full", f"cat/{obj}")
            ctx.save_npz(f"memorize_cat/{obj}.npz", samples=zt / scale, z=arms["cat"][0], loss=np.array([loss]))


# ------------------------------------------------------------------ report


def _gap(d_x: np.ndarray, d_r: np.ndarray) -> float:
    return float(np.mean(np.abs(d_x - d_r)))


def _nearest_psnr_ssim(images: np.ndarray, refs: np.ndarray) -> tuple[float, float]:
    ps, ss = [], []
    for img in images:
        j = int(np.argmin(((refs - img) ** 2).reshape(len(refs), -1).mean(axis=1)))
        ps.append(M.psnr(img, refs[j]))
        ss.append(M.ssim(img, refs[j]))
    return float(np.mean(ps)), float(np.mean(ss))


DIST_COLUMNS = M.COLUMNS + ("gap", "gap_cat", "d_ratio", "cat_loss_ratio")
LEARN_COLUMNS = ("s_c", "s_r", "s_a", "s_a_cat", "lo", "hi", "within", "memorized", "loss_c", "loss_a")
CUSTOM_COLUMNS = ("frechet", "psnr", "ssim", "frechet_seeds", "psnr_seeds")
SWEEP_COLUMNS = ("rank", "params", "d_a", "d_r", "d_a_cat", "gap", "gap_cat", "reduction")


def stage_report(ctx: StageContext) -> None:
    p = _paths(ctx.root)
    cfg = ctx.cfg
    ae = ctx.load_model(p["ae"])
    clean = ctx.read_corpus(p["eval"] / "protect_target")
    refs = ctx.read_corpus(p["eval"] / "reference")
    lat = ctx.load_npz(p["diagnose"] / "latents.npz")
    z_c, z_r = lat["clean"], lat["noisy"]
    n = len(z_c)
    x_c = clean.images[:n]
    digest = digest_arrays([clean.images, refs.images])
    d_r = M.per_image_mae(z_r, z_c)
    ran = set(cfg.stages)
    dist = M.MetricTable(cfg.seed, digest, columns=DIST_COLUMNS)
    for obj in cfg.attack.objectives:
        z_a = lat[f"protected/{obj}"]
        d_a = M.per_image_mae(z_a, z_c)
        rec = decode_np(z_a, ae)  # every row compares reconstructions with the clean images
        method = ", ".join(sorted(k for k, v in atk.NAMED_METHODS.items() if v == obj))
        dist.add(
            obj, "none", method=method, d_a=d_a.mean(), d_r=d_r.mean(), gap=_gap(d_a, d_r), d_ratio=d_a.mean() / d_r.mean(),
            frechet=M.frechet_latent_distance(z_a, z_c), psnr=M.batch_psnr(rec, x_c), ssim=M.batch_ssim(rec, x_c),
        )
        if "cat" not in ran:
            continue
        for setting in cfg.cat.settings:
            npz = ctx.load_npz(p["cat"] / setting / f"{obj}.npz")
            d_cat = M.per_image_mae(npz["z_cat"], z_c)
            dist.add(
                obj, setting, method=method, d_a=d_a.mean(), d_r=d_r.mean(), d_a_cat=d_cat.mean(), gap=_gap(d_a, d_r),
                gap_cat=_gap(d_cat, d_r), d_ratio=d_cat.mean() / d_r.mean(), frechet=M.frechet_latent_distance(npz["z_cat"], z_c),
                psnr=M.batch_psnr(npz["recon"], x_c), ssim=M.batch_ssim(npz["recon"], x_c), cat_loss_ratio=npz["loss"][1] / npz["loss"][0],
            )
        if cfg.cat.purify:
            npz = ctx.load_npz(p["cat"] / "purify" / f"{obj}.npz")
            d_p = M.per_image_mae(npz["z"], z_c)
            dist.add(
                obj, "purify", method=method, d_a=d_a.mean(), d_r=d_r.mean(), d_a_cat=d_p.mean(), gap=_gap(d_a, d_r),
                gap_cat=_gap(d_p, d_r), d_ratio=d_p.mean() / d_r.mean(), frechet=M.frechet_latent_distance(npz["z"], z_c),
                psnr=M.batch_psnr(npz["recon"], x_c), ssim=M.batch_ssim(npz["recon"], x_c),
            )
    for name, obj in atk.NAMED_METHODS.items():
        if obj is None:
            dist.add(name, "none", method=name, note="not replicated")
    tables = {"distortion": dist}

    if cfg.diffusion.learnability and "diagnose" in ran:
        learn = M.MetricTable(cfg.seed, digest, columns=LEARN_COLUMNS)
        losses = ctx.load_json(p["diagnose"] / "memorize_loss.json")
        z0 = {"clean": z_c[0], "noisy": z_r[0], **{o: lat[f"protected/{o}"][0] for o in cfg.attack.objectives}}
        for mode in cfg.diffusion.learnability_modes:
            mem = ctx.load_npz(p["diagnose"] / f"memorize_{mode}.npz")
            s = {k: float(np.mean([M.difference_ratio(z0[k], zt, z_c[0]) for zt in mem[k]])) for k in z0}
            lo, hi = M.sr_range(s["clean"], s["noisy"], THRESHOLDS["learnability_widen"])
            memorized = s["clean"] < cfg.diffusion.memorize_threshold
            for obj in cfg.attack.objectives:
                s_cat = None
                if mode == "full" and "customize" in ran and "both" in cfg.cat.settings:
                    mc = ctx.load_npz(p["customize"] / "memorize_cat" / f"{obj}.npz")
                    s_cat = float(np.mean([M.difference_ratio(mc["z"], zt, z_c[0]) for zt in mc["samples"]]))
                learn.add(
                    obj, mode, s_c=s["clean"], s_r=s["noisy"], s_a=s[obj], s_a_cat=s_cat, lo=lo, hi=hi,
                    within=int(lo <= s[obj] <= hi), memorized=int(memorized), loss_c=losses[mode]["clean"], loss_a=losses[mode][obj],
                )
        tables["learnability"] = learn

    if cfg.diffusion.customize and "customize" in ran:
        cust = M.MetricTable(cfg.seed, digest, columns=CUSTOM_COLUMNS)
        z_ref = encode_np(refs.images, ae)
        for obj in cfg.attack.objectives:
            for arm in ("raw", "cat", "purify"):
                f = p["customize"] / arm / f"{obj}.npz"
                if not f.exists():
                    continue
                npz = ctx.load_npz(f)
                fr = [M.frechet_latent_distance(zs, z_ref) for zs in npz["latents"]]
                ps = [_nearest_psnr_ssim(im, refs.images) for im in npz["images"]]
                cust.add(
                    obj, arm, frechet=float(np.mean(fr)), psnr=float(np.mean([q[0] for q in ps])), ssim=float(np.mean([q[1] for q in ps])),
                    frechet_seeds=json.dumps([round(v, 6) for v in fr]), psnr_seeds=json.dumps([round(q[0], 4) for q in ps]),
                )
        tables["customize"] = cust

    if cfg.cat.sweep_ranks and "cat" in ran:
        sweep = M.MetricTable(cfg.seed, digest, columns=SWEEP_COLUMNS)
        for obj in cfg.cat.sweep_objectives:
            d_a = M.per_image_mae(lat[f"protected/{obj}"], z_c)
            for r in cfg.cat.sweep_ranks:
                npz = ctx.load_npz(p["cat"] / "sweep" / f"r{r}" / f"{obj}.npz")
                d_cat = M.per_image_mae(npz["z_cat"], z_c)
                g0, g1 = _gap(d_a, d_r), _gap(d_cat, d_r)
                sweep.add(
                    obj, cfg.cat.sweep_setting, rank=r, params=int(npz["params"][0]), d_a=d_a.mean(), d_r=d_r.mean(),
                    d_a_cat=d_cat.mean(), gap=g0, gap_cat=g1, reduction=1.0 - g1 / g0,
                )
        tables["rank_sweep"] = sweep

    first = cfg.attack.objectives[0]
    groups = [("clean", z_c), ("noisy", z_r), (f"protected {first}", lat[f"protected/{first}"])]
    if "cat" in ran and "both" in cfg.cat.settings:
        groups.append((f"cat {first}", ctx.load_npz(p["cat"] / "both" / f"{first}.npz")["z_cat"]))
    proj = M.pca_project(np.concatenate([g for _, g in groups]), k=2)
    points, i = [], 0
    for name, g in groups:
        for _ in range(len(g)):
            points.append({"group": name, "x": round(float(proj.coords[i, 0]), 6), "y": round(float(proj.coords[i, 1]), 6)})
            i += 1
    report = build_report(
        cfg.name, cfg.seed, cfg.digest(), digest, tables,
        dataset=cfg.corpus.kind, thresholds=thresholds(cfg),
        named_methods={k: (v if v is not None else "not replicated") for k, v in atk.NAMED_METHODS.items()},
        pca={"explained": [round(float(v), 6) for v in proj.explained], "points": points},
    )
    for f in make_report(report, ctx.dir, plots=cfg.report.plots):
        ctx.outputs.append(f)


RUNNERS = {
    "corpus": stage_corpus,
    "train-ae": stage_train_ae,
    "train-ldm": stage_train_ldm,
    "attack": stage_attack,
    "diagnose": stage_diagnose,
    "cat": stage_cat,
    "customize": stage_customize,
    "report": stage_report,
}


# ------------------------------------------------------------------ orchestration


def _stage_key(cfg: ExperimentConfig, stage: str, keys: dict[str, str]) -> str:
    up = {u: keys.get(u) for u in UPSTREAM[stage] if u in keys}
    return digest_json({"stage": stage, "seed": cfg.seed, "config": stage_config(cfg, stage), "upstream": up})


def _cached(ctx: StageContext, key: str) -> dict | None:
    meta = ctx.dir / "stage.json"
    if not meta.exists():
        return None
    doc = json.loads(meta.read_text())
    if doc.get("key") != key:
        return None
    for rel, dig in doc.get("outputs", {}).items():
        f = ctx.root / rel
        if not f.exists() or digest_file(f) != dig:
            return None
    return doc


def _environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "numba_kernels": numba_enabled(), "platform": platform.platform()}


def run_pipeline(cfg: ExperimentConfig, out_dir, stages=None, force: bool = False) -> dict:
    """Run (or reuse) the requested stages and append one entry to ``manifest.json``.

    Raises StageFailure after recording the failure; earlier artifacts stay on disk.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    wanted = list(stages) if stages else list(cfg.stages)
    order = [s for s in STAGES if s in wanted]
    entry = {
        "seed": cfg.seed,
        "config_name": cfg.name,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "environment": _environment(),
        "thresholds": thresholds(cfg),
        "stages": [],
    }
    keys: dict[str, str] = {}
    for s in STAGES:
        meta = root / "stages" / s / "stage.json"
        if s not in order and meta.exists():
            keys[s] = json.loads(meta.read_text())["key"]
    failure = None
    for name in order:
        ctx = StageContext(name, root, cfg.seed, cfg)
        key = _stage_key(cfg, name, keys)
        keys[name] = key
        rec = {"name": name, "key": key}
        hit = None if force else _cached(ctx, key)
        if hit is not None:
            rec.update(status="cached", inputs=hit["inputs"], outputs=hit["outputs"], metrics=hit.get("metrics", {}), seconds=0.0)
            entry["stages"].append(rec)
            log.info("stage %s cached", name)
            continue
        if ctx.dir.exists():
            shutil.rmtree(ctx.dir)
        ctx.dir.mkdir(parents=True)
        t0 = time.perf_counter()
        try:
            RUNNERS[name](ctx)
        except Exception as exc:  # recorded in the manifest, then re-raised as StageFailure
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}", seconds=round(time.perf_counter() - t0, 3))
            entry["stages"].append(rec)
            failure = StageFailure(name, exc)
            break
        outputs = {ctx.rel(f): digest_file(f) for f in sorted(set(ctx.outputs))}
        rec.update(status="ran", inputs=dict(sorted(ctx.reads.items())), outputs=outputs, metrics=ctx.metrics, seconds=round(time.perf_counter() - t0, 3))
        (ctx.dir / "stage.json").write_text(json.dumps({k: rec[k] for k in ("key", "inputs", "outputs", "metrics")}, indent=1, sort_keys=True, default=float))
        entry["stages"].append(rec)
        log.info("stage %s ran in %.1fs", name, rec["seconds"])
    _append_manifest(root, entry)
    if failure is not None:
        raise failure
    return entry


def _append_manifest(root: Path, entry: dict) -> None:
    path = root / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {"runs": []}
    doc["runs"].append(entry)
    tmp = path.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True, default=float) + "\n")
    os.replace(tmp, path)


def load_manifest(out_dir) -> dict:
    return json.loads((Path(out_dir) / "manifest.json").read_text())


def output_digests(entry: dict) -> dict[str, str]:
    """Every artifact digest of one manifest entry, for run-to-run comparison."""
    return {rel: dig for st in entry["stages"] for rel, dig in st.get("outputs", {}).items()}


