"""INI experiment configuration with strict keys, typed values and named presets."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from catw.seeding import digest_json


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(_number(v) for v in text.split(",") if v.strip())


def _number(text: str) -> float:
    """Float literal, also accepting a fraction such as ``16/255``."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _flag(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class CorpusSection:
    kind: str = "synthetic"
    identities: int = 5
    images_per_identity: int = 12
    size: int = 32
    path: str = ""
    split: tuple[int, ...] = (4, 4, 4)
    pretrain_identities: int = 64
    pretrain_images_per_identity: int = 4


@dataclass
class AESection:
    base_channels: int = 16
    latent_channels: int = 4
    attention: bool = True
    lr: float = 1e-3
    batch: int = 8
    steps: int = 3000


@dataclass
class DiffusionSection:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    channels: int = 32
    temb_dim: int = 32
    concept_vocab: int = 8
    pretrain_steps: int = 3000
    lr: float = 1e-3
    batch: int = 8
    memorize_steps: int = 2000
    memorize_lr: float = 2e-3
    memorize_samples: int = 8
    memorize_threshold: float = 0.05
    adapter_rank: int = 8
    learnability: bool = False
    learnability_modes: tuple[str, ...] = ("full", "adapter")
    customize: bool = False
    customize_steps: int = 600
    customize_seeds: int = 3
    customize_samples: int = 8


@dataclass
class AttackSection:
    objectives: tuple[str, ...] = (
        "encoder_away",
        "encoder_target",
        "recon",
        "denoise_ascent",
        "denoise_descent",
        "joint",
        "sds_ascent",
        "sds_descent",
    )
    budget: float = 16 / 255
    steps: int = 40
    step_size: float = 0.0  # 0 selects budget / 8
    weights: tuple[float, ...] = (1.0, 1.0)
    images: int = 20
    encoder_ratio_threshold: float = 1.5


@dataclass
class CatSection:
    settings: tuple[str, ...] = ("both", "encoder_only", "decoder_only")
    rank_both: int = 128
    rank_single: int = 256
    batch: int = 4
    lr: float = 1e-4
    steps: int = 1000
    purify: bool = True
    purify_ksize: int = 5
    purify_sigma: float = 1.0
    sweep_ranks: tuple[int, ...] = ()
    sweep_setting: str = "both"
    sweep_objectives: tuple[str, ...] = ("encoder_away",)


@dataclass
class ReportSection:
    plots: bool = True
    title: str = "desk"


SECTIONS = {
    "corpus": CorpusSection,
    "ae": AESection,
    "diffusion": DiffusionSection,
    "attack": AttackSection,
    "cat": CatSection,
    "report": ReportSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    ae: AESection = field(default_factory=AESection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    attack: AttackSection = field(default_factory=AttackSection)
    cat: CatSection = field(default_factory=CatSection)
    report: ReportSection = field(default_factory=ReportSection)
    name: str = "custom"
    stages: tuple[str, ...] = ("corpus", "train-ae", "train-ldm", "attack", "diagnose", "cat", "report")

    def section_dict(self, name: str) -> dict:
        sec = getattr(self, name)
        return {f.name: (list(v) if isinstance(v := getattr(sec, f.name), tuple) else v) for f in fields(sec)}

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stages": list(self.stages), **{n: self.section_dict(n) for n in SECTIONS}}

    def digest(self) -> str:
        return digest_json(self.to_dict())


def _convert(cls, key: str, raw: str):
    types = {f.name: f.type for f in fields(cls)}
    t = types[key]
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return _number(raw)
        if t == "bool":
            return _flag(raw)
        if t == "str":
            return raw.strip()
        if t.startswith("tuple[int"):
            return _ints(raw)
        if t.startswith("tuple[float"):
            return _floats(raw)
        if t.startswith("tuple[str"):
            return _strs(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {cls.__name__}.{key}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unsupported field type {t}")


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse INI text on top of ``base`` (defaults when omitted); unknown sections or keys are errors."""
    parser = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base if base is not None else ExperimentConfig()
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key == "seed":
                    cfg.seed = int(raw)
                elif key == "preset":
                    continue
                elif key == "name":
                    cfg.name = raw.strip()
                elif key == "stages":
                    cfg.stages = _strs(raw)
                else:
                    raise ConfigError(f"unknown key [run] {key}")
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = SECTIONS[section]
        known = {f.name for f in fields(cls)}
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(target, key, _convert(cls, key, raw))
    validate(cfg)
    return cfg


def load_config(path_or_preset: str) -> ExperimentConfig:
    """A preset name or a path to an INI file (which may start from a preset via ``[run] preset``)."""
    if path_or_preset in PRESETS:
        return preset(path_or_preset)
    path = Path(path_or_preset)
    if not path.is_file():
        raise ConfigError(f"no preset or config file named {path_or_preset!r}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = preset(parser.get("run", "preset").strip()) if parser.has_option("run", "preset") else None
    cfg = parse_config(text, base)
    if cfg.name == "custom":
        cfg.name = path.stem
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    from catw.attacks import OBJECTIVES
    from catw.cat import SETTINGS

    from catw.pipeline import STAGES

    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}; choose from {STAGES}")
    bad = [o for o in cfg.attack.objectives if o not in OBJECTIVES]
    if bad or not cfg.attack.objectives:
        raise ConfigError(f"unknown attack objectives {bad}; choose from {OBJECTIVES}")
    bad = [s for s in cfg.cat.settings if s not in SETTINGS]
    if bad:
        raise ConfigError(f"unknown CAT settings {bad}; choose from {SETTINGS}")
    if cfg.cat.sweep_setting not in SETTINGS:
        raise ConfigError(f"unknown sweep setting {cfg.cat.sweep_setting!r}")
    if len(cfg.corpus.split) != 3 or sum(cfg.corpus.split) != cfg.corpus.images_per_identity:
        raise ConfigError("corpus.split needs three sizes summing to images_per_identity")
    if not 0 <= cfg.attack.budget <= 1:
        raise ConfigError("attack.budget must lie in [0, 1]")
    if len(cfg.attack.weights) != 2:
        raise ConfigError("attack.weights needs two values")
    if cfg.cat.purify_ksize % 2 == 0 or cfg.cat.purify_ksize < 1:
        raise ConfigError("cat.purify_ksize must be a positive odd integer")
    if any(m not in ("full", "adapter") for m in cfg.diffusion.learnability_modes):
        raise ConfigError("diffusion.learnability_modes accepts full and adapter")
    if cfg.corpus.kind not in ("synthetic", "folder"):
        raise ConfigError(f"unknown corpus kind {cfg.corpus.kind!r}")
    if cfg.corpus.kind == "folder" and not cfg.corpus.path:
        raise ConfigError("folder corpus needs corpus.path")
    if cfg.corpus.size % 4:
        raise ConfigError("corpus.size must be divisible by 4")


def _fig3() -> ExperimentConfig:
    return ExperimentConfig(name="fig3-desk")


def _fig4() -> ExperimentConfig:
    cfg = ExperimentConfig(name="fig4-desk")
    cfg.diffusion.learnability = True
    cfg.diffusion.customize = True
    cfg.stages = cfg.stages[:-1] + ("customize", "report")
    return cfg


def _rank_sweep() -> ExperimentConfig:
    cfg = ExperimentConfig(name="rank-sweep")
    cfg.cat.settings = ()
    cfg.cat.purify = False
    cfg.cat.sweep_ranks = (4, 8, 16, 32, 64, 128)
    cfg.cat.sweep_objectives = ("encoder_away", "recon")
    return cfg


PRESETS = {"fig3-desk": _fig3, "fig4-desk": _fig4, "rank-sweep": _rank_sweep}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg``."""
    lines = ["[run]", f"seed = {cfg.seed}", f"name = {cfg.name}", f"stages = {', '.join(cfg.stages)}", ""]
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in cfg.section_dict(name).items():
            if isinstance(value, list):
                value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            elif isinstance(value, bool):
                value = "on" if value else "off"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
