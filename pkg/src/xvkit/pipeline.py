"""End-to-end recipe: toy corpus, configuration, manifest-tracked stages, evaluation."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import archive
from .backend import AdaptConfig, LdaModel, PldaModel, enroll_vector, lda_fit, length_norm, plda_adapt, plda_fit
from .calibration import (NONTARGET, TARGET, act_dcf, CalibrationMap, DcfConfig, FusionModel, TrialScoreSet, apply_key,
                          evaluate_trials, format_report, fusion_fit, pav_apply, pav_fit, read_key, read_scores,
                          write_key, write_scores)
from .embedder import LossConfig, TrainConfig, Utterance, build_model, load_model, save_model, train
from .errors import ConfigError, DataError, PrerequisiteError, StaleArtifactError
from .features import (FeatureConfig, FeatureMatrix, Waveform, apply_mask, augment_noise, compute_features,
                       energy_vad, read_wav)
from .netspec import BUILTIN_NAMES, builtin
from .scorenorm import asnorm_matrix, cohort_score_matrix

log = logging.getLogger(__name__)

SCORE_PRECISION = 6
DEFAULT_LOSS = {"etdnn": "am_softmax", "eftdnn": "am_softmax", "ftdnn": "a_softmax", "resnet": "a_softmax",
                "multitask": "softmax", "cvector": "softmax"}


# -- toy corpus ---------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpeakerModel:
    """Synthetic corpus: frame = speaker mean + session offset + senone mean + noise.

    Speaker means ~ N(0, speaker_var P) with P the projector onto a random
    `speaker_rank`-dimensional subspace (identity when 0); frame noise ~ N(0, within_var I). Senone 0 is silence and pulls column 0 (the C0-like
    energy coefficient) down, so the energy VAD removes it.
    """

    num_speakers: int = 50
    utts_per_speaker: int = 20
    feat_dim: int = 23
    speaker_var: float = 4.0
    speaker_rank: int = 0  # rank of the speaker-mean covariance; 0 = full
    within_var: float = 1.0
    session_var: float = 0.05
    senone_var: float = 1.0
    frames_min: int = 150
    frames_max: int = 250
    num_senones: int = 8
    stay_prob: float = 0.8
    silence_level: float = 8.0

    def __post_init__(self):
        for name in ("num_speakers", "utts_per_speaker", "feat_dim", "frames_min", "num_senones"):
            if getattr(self, name) < 1:
                raise ConfigError(f"toy {name} must be positive")
        if not 0 <= self.speaker_rank <= self.feat_dim:
            raise ConfigError("speaker_rank must lie in [0, feat_dim]")
        if self.frames_max < self.frames_min:
            raise ConfigError("frames_max < frames_min")
        for name in ("speaker_var", "within_var", "session_var", "senone_var"):
            if getattr(self, name) < 0:
                raise ConfigError(f"toy {name} must be >= 0 (covariance must be PSD)")
        if not 0 <= self.stay_prob <= 1:
            raise ConfigError("stay_prob must lie in [0, 1]")


@dataclass
class ToyCorpus:
    feats: dict  # utt -> (T, D)
    utt2spk: dict
    frame_labels: dict  # utt -> (T,) int

    @property
    def utterances(self) -> list:
        return list(self.feats)


def utt_id(spk: int, utt: int) -> str:
    return f"spk{spk:03d}-utt{utt:03d}"


def markov_labels(n: int, num_states: int, stay: float, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    state = int(rng.integers(num_states))
    u = rng.random(n)
    jump = rng.integers(num_states, size=n)
    for t in range(n):
        if t > 0 and u[t] >= stay:
            state = int(jump[t])
        out[t] = state
    return out


def gen_toy_audio(m: ToySpeakerModel, seed: int = 0) -> ToyCorpus:
    """Draw a deterministic toy feature corpus with senone label stubs."""
    rng = np.random.default_rng(seed)
    d = m.feat_dim
    senone_means = rng.normal(size=(m.num_senones, d)) * np.sqrt(m.senone_var)
    senone_means[:, 0] = np.abs(senone_means[:, 0])
    senone_means[0, 0] = -m.silence_level
    rank = m.speaker_rank or d
    basis = np.linalg.qr(rng.normal(size=(d, rank)))[0].T  # orthonormal rows
    spk_means = rng.normal(size=(m.num_speakers, rank)) @ basis * np.sqrt(m.speaker_var)
    feats, utt2spk, labels = {}, {}, {}
    for s in range(m.num_speakers):
        for u in range(m.utts_per_speaker):
            n = int(rng.integers(m.frames_min, m.frames_max + 1))
            lab = markov_labels(n, m.num_senones, m.stay_prob, rng)
            session = rng.normal(size=d) * np.sqrt(m.session_var)
            noise = rng.normal(size=(n, d)) * np.sqrt(m.within_var)
            key = utt_id(s, u)
            feats[key] = spk_means[s] + session + senone_means[lab] + noise
            utt2spk[key] = f"spk{s:03d}"
            labels[key] = lab
    return ToyCorpus(feats, utt2spk, labels)


def gen_toy_embeddings(plda: PldaModel, speakers: int, per_speaker: int, seed: int = 0):
    """Sample (vectors, labels) from the two-covariance generative model."""
    rng = np.random.default_rng(seed)
    d = plda.dim
    means = rng.multivariate_normal(plda.mean, plda.between, size=speakers, method="eigh")
    noise = rng.multivariate_normal(np.zeros(d), plda.within, size=(speakers, per_speaker), method="eigh")
    x = (means[:, None, :] + noise).reshape(speakers * per_speaker, d)
    return x, np.repeat(np.arange(speakers), per_speaker)


def write_toy_corpus(corpus: ToyCorpus, out_dir) -> None:
    out = Path(out_dir)
    archive.write_archive(out / "feats.ark", corpus.feats.items())
    archive.write_archive(out / "labels.ark",
                          ((k, v.astype(np.float64)[:, None]) for k, v in corpus.frame_labels.items()))
    archive.atomic_write_text(out / "utt2spk", "".join(f"{u} {s}\n" for u, s in corpus.utt2spk.items()))


# -- configuration --------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    source: str = "toy"  # toy | wav
    wav_list: str = ""  # lines "<utt-id> <speaker> <wav path>"
    noise_list: str = ""  # one wav path per line, used for augmentation folds
    folds: int = 1  # 1 = clean only; k adds k-1 augmented copies of each training utterance
    snr_low: float = 5.0
    snr_high: float = 15.0
    train_speakers: int = 30
    adapt_speakers: int = 6  # unlabeled in-domain data for PLDA adaptation, never used in trials
    dev_speakers: int = 7


@dataclass(frozen=True)
class VadConfig:
    enabled: bool = True
    threshold_offset: float = 0.0
    context: int = 2


@dataclass(frozen=True)
class EmbedderConfig:
    width: float = 0.25
    width_overrides: tuple = ("resnet:0.0625", "eftdnn:0.125")  # per-architecture "name:factor"
    loss: str = "auto"

    def width_for(self, system: str) -> float:
        for item in self.width_overrides:
            name, _, value = item.partition(":")
            if name.strip() == system:
                return float(value)
        return self.width


@dataclass(frozen=True)
class BackendConfig:
    lda_dim: int = 150
    plda_iters: int = 10
    adapt_within: float = 0.75
    adapt_between: float = 0.25
    asnorm_k: int = 200


@dataclass(frozen=True)
class FusionConfig:
    prior: float = 0.5
    reg: float = 1e-6
    guard: bool = True  # fall back to the best single subsystem if it beats the fusion on dev act-DCF


SECTIONS = {
    "data": DataConfig, "toy": ToySpeakerModel, "features": FeatureConfig, "vad": VadConfig,
    "embedder": EmbedderConfig, "train": TrainConfig, "loss": LossConfig, "backend": BackendConfig,
    "fusion": FusionConfig, "dcf": DcfConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    systems: tuple = ("etdnn",)
    seed: int = 0
    workers: int = 1
    data: DataConfig = DataConfig()
    toy: ToySpeakerModel = ToySpeakerModel()
    features: FeatureConfig = FeatureConfig()
    vad: VadConfig = VadConfig()
    embedder: EmbedderConfig = EmbedderConfig()
    train: TrainConfig = TrainConfig(steps=300, chunk_frames=100)
    loss: LossConfig = LossConfig()
    backend: BackendConfig = BackendConfig()
    fusion: FusionConfig = FusionConfig()
    dcf: DcfConfig = DcfConfig()

    def __post_init__(self):
        if not self.systems:
            raise ConfigError("at least one system is required")
        for s in self.systems:
            if s not in BUILTIN_NAMES:
                raise ConfigError(f"unknown architecture {s!r}; choose from {', '.join(BUILTIN_NAMES)}")
        if len(set(self.systems)) != len(self.systems):
            raise ConfigError("duplicate system names")
        if self.data.source not in ("toy", "wav"):
            raise ConfigError(f"data source must be toy or wav, got {self.data.source!r}")
        if self.data.folds < 1:
            raise ConfigError("folds must be >= 1")
        if self.embedder.loss not in ("auto", "softmax", "am_softmax", "a_softmax"):
            raise ConfigError(f"unknown loss {self.embedder.loss!r}")
        AdaptConfig(self.backend.adapt_within, self.backend.adapt_between)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def loss_for(self, system: str) -> LossConfig:
        kind = DEFAULT_LOSS[system] if self.embedder.loss == "auto" else self.embedder.loss
        return dataclasses.replace(self.loss, kind=kind)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and isinstance(default[0], (int, float)):
            return tuple(float(x) for x in items)
        return tuple(items)
    if default is None:
        return None if raw.lower() in ("", "none") else int(raw)
    return raw


def _build_section(cls, items: dict, section: str):
    defaults = cls()
    kw = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            kw[key] = _parse_value(raw, getattr(defaults, key))
        except ValueError:
            raise ConfigError(f"[{section}] bad value for {key}: {raw!r}") from None
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str) -> PipelineConfig:
    """Parse INI text. ``[pipeline]`` holds systems/seed/workers; other sections map to sub-configs."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    base = PipelineConfig()
    kw = {}
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "pipeline":
            for key, raw in items.items():
                if key not in ("systems", "seed", "workers"):
                    raise ConfigError(f"[pipeline] unknown key {key!r}")
                try:
                    kw[key] = _parse_value(raw, getattr(base, key))
                except ValueError:
                    raise ConfigError(f"[pipeline] bad value for {key}: {raw!r}") from None
        elif section in SECTIONS:
            kw[section] = _build_section(SECTIONS[section], items, section)
        else:
            raise ConfigError(f"unknown config section [{section}]")
    if "train" not in kw:
        kw["train"] = base.train
    return PipelineConfig(**kw)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def _canon(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_canon(v) for v in value)
    return str(value)


def render_config(cfg: PipelineConfig) -> str:
    """Canonical INI text (sorted keys); parse_config(render_config(c)) == c."""
    lines = ["[pipeline]", f"seed = {cfg.seed}", f"systems = {_canon(cfg.systems)}", f"workers = {cfg.workers}", ""]
    for name in sorted(SECTIONS):
        sub = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in sorted(dataclasses.fields(sub), key=lambda f: f.name):
            v = getattr(sub, f.name)
            lines.append(f"{f.name} = {'none' if v is None else _canon(v)}")
        lines.append("")
    return "\n".join(lines)


def section_text(cfg: PipelineConfig, *names: str) -> str:
    out = []
    for name in names:
        sub = getattr(cfg, name)
        if dataclasses.is_dataclass(sub):
            out += [f"{name}.{f.name}={_canon(getattr(sub, f.name))}" for f in sorted(dataclasses.fields(sub),
                                                                                     key=lambda f: f.name)]
        else:
            out.append(f"{name}={_canon(sub)}")
    return "\n".join(out)


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(cfg: PipelineConfig) -> str:
    return digest(render_config(cfg))


# -- staging ----------------------------------------------------------------------------

STAGES = ("features", "vad", "train", "extract", "lda", "length-norm", "plda", "adapt", "score", "asnorm",
          "calibrate", "fuse", "evaluate")
PER_SYSTEM = {"train", "extract", "lda", "length-norm", "plda", "adapt", "score", "asnorm", "calibrate"}
SPLITS = ("dev", "eval")


def _stage_key(stage: str, system: str | None) -> str:
    return f"{stage}/{system}" if system else stage


class Workspace:
    """A work directory plus its manifest of completed stages."""

    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.manifest_path = self.root / "manifest.json"
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"stages": {}}
        try:
            return json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt manifest {self.manifest_path}: {exc}") from None

    def save_manifest(self) -> None:
        archive.atomic_write_text(self.manifest_path, json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def sys_path(self, system: str, name: str) -> Path:
        return self.root / "systems" / system / name

    # dependency graph and expected hashes ------------------------------------------

    def deps(self, stage: str, system: str | None) -> list:
        s = system
        table = {
            "features": [],
            "vad": [("features", None)],
            "train": [("vad", None)],
            "extract": [("train", s), ("vad", None)],
            "lda": [("extract", s), ("features", None)],
            "length-norm": [("lda", s), ("extract", s)],
            "plda": [("length-norm", s), ("features", None)],
            "adapt": [("plda", s), ("length-norm", s), ("features", None)],
            "score": [("adapt", s), ("length-norm", s), ("features", None)],
            "asnorm": [("score", s), ("adapt", s), ("length-norm", s), ("features", None)],
            "calibrate": [("asnorm", s), ("features", None)],
            "fuse": [("calibrate", x) for x in self.cfg.systems] + [("features", None)],
            "evaluate": [("calibrate", x) for x in self.cfg.systems] + [("fuse", None), ("features", None)],
        }
        return table[stage]

    def own_config(self, stage: str, system: str | None) -> str:
        cfg = self.cfg
        train = ""
        if stage == "train":
            loss = json.dumps(dataclasses.asdict(cfg.loss_for(system)), sort_keys=True)
            train = f"width={cfg.embedder.width_for(system)!r}\nloss={loss}\n" + section_text(cfg, "train")
        parts = {
            "features": section_text(cfg, "seed", "data", "toy", "features"),
            "vad": section_text(cfg, "vad"),
            "train": train,
            "lda": f"lda_dim={cfg.backend.lda_dim}",
            "plda": f"plda_iters={cfg.backend.plda_iters}",
            "adapt": f"adapt={cfg.backend.adapt_within!r},{cfg.backend.adapt_between!r}",
            "asnorm": f"k={cfg.backend.asnorm_k}",
            "fuse": section_text(cfg, "fusion") + f"\nsystems={_canon(cfg.systems)}",
            "evaluate": section_text(cfg, "dcf") + f"\nsystems={_canon(cfg.systems)}",
        }
        return f"stage={stage}\nsystem={system or ''}\n" + parts.get(stage, "")

    def expected_hash(self, stage: str, system: str | None, _memo=None) -> str:
        memo = {} if _memo is None else _memo
        key = _stage_key(stage, system)
        if key not in memo:
            ups = [self.expected_hash(d, ds, memo) for d, ds in self.deps(stage, system)]
            memo[key] = digest(self.own_config(stage, system) + "\n" + "\n".join(ups))
        return memo[key]

    def is_current(self, stage: str, system: str | None) -> bool:
        entry = self.manifest["stages"].get(_stage_key(stage, system))
        return (entry is not None and entry["hash"] == self.expected_hash(stage, system)
                and all(self.path(a).exists() for a in entry["artifacts"]))

    def check_prerequisites(self, stage: str, system: str | None) -> None:
        for dep, dsys in self.deps(stage, system):
            key = _stage_key(dep, dsys)
            entry = self.manifest["stages"].get(key)
            if entry is None:
                raise PrerequisiteError(f"stage {_stage_key(stage, system)} needs {key}, which has not been run")
            missing = [a for a in entry["artifacts"] if not self.path(a).exists()]
            if missing:
                raise PrerequisiteError(f"stage {_stage_key(stage, system)} needs {key}; missing artifacts: "
                                        + ", ".join(missing))
            if entry["hash"] != self.expected_hash(dep, dsys):
                raise StaleArtifactError(f"artifacts of {key} were built with a different configuration; "
                                         f"rerun from stage {dep}")

    def record(self, stage: str, system: str | None, artifacts) -> None:
        rel = [str(Path(a).relative_to(self.root)) for a in artifacts]
        self.manifest["stages"][_stage_key(stage, system)] = {"hash": self.expected_hash(stage, system),
                                                              "artifacts": sorted(rel)}
        self.save_manifest()

    # shared corpus metadata ------------------------------------------------------------

    def utt2spk(self) -> dict:
        return dict(line.split() for line in self.path("utt2spk").read_text().splitlines() if line.strip())

    def splits(self) -> dict:
        return json.loads(self.path("splits.json").read_text())

    def key(self, split: str) -> dict:
        return read_key(self.path(f"trials_{split}.key"))


# -- stage implementations -----------------------------------------------------------------


def _sub_seed(seed: int, *tags) -> int:
    words = [seed] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _read_list(path, fields: int) -> list:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != fields:
            raise DataError(f"{path}:{n}: expected {fields} fields")
        rows.append(parts)
    return rows


def _wav_features(args):
    path, fcfg, noise_path, snr, seed = args
    w = read_wav(path)
    if noise_path is not None:
        w = augment_noise(w, read_wav(noise_path), snr, seed)
    return compute_features(w, fcfg).values


def _split_speakers(speakers: list, cfg: DataConfig) -> dict:
    n_train, n_adapt, n_dev = cfg.train_speakers, cfg.adapt_speakers, cfg.dev_speakers
    if n_train < 2 or n_adapt < 0 or n_dev < 1 or n_train + n_adapt + n_dev >= len(speakers):
        raise ConfigError(f"cannot split {len(speakers)} speakers into train={n_train}, adapt={n_adapt}, "
                          f"dev={n_dev} and a non-empty eval set")
    a, b = n_train + n_adapt, n_train + n_adapt + n_dev
    return {"train": speakers[:n_train], "adapt": speakers[n_train:a], "dev": speakers[a:b], "eval": speakers[b:]}


def _trials(utts_by_spk: dict, speakers: list):
    """First utterance of each speaker enrolls; every other utterance is a test against every enrollment."""
    enroll = {s: utts_by_spk[s][0] for s in speakers}
    tests = [u for s in speakers for u in utts_by_spk[s][1:]]
    keys, labels = [], []
    for s in speakers:
        for u in tests:
            keys.append((enroll[s], u))
            labels.append(TARGET if u.split("-")[0] == s else NONTARGET)
    return keys, labels


def stage_features(ws: Workspace, system=None) -> list:
    cfg = ws.cfg
    aug = {}
    if cfg.data.source == "toy":
        corpus = gen_toy_audio(cfg.toy, _sub_seed(cfg.seed, "toy"))
        feats, utt2spk, labels = corpus.feats, corpus.utt2spk, corpus.frame_labels
    else:
        rows = _read_list(cfg.data.wav_list, 3)
        utt2spk = {u: s for u, s, _ in rows}
        jobs = [(p, cfg.features, None, 0.0, 0) for _, _, p in rows]
        feats = dict(zip((u for u, _, _ in rows), _pool_map(_wav_features, jobs, cfg.workers)))
        labels = {}
    speakers = sorted(set(utt2spk.values()))
    split = _split_speakers(speakers, cfg.data)
    utts_by_spk = {s: sorted(u for u in feats if utt2spk[u] == s) for s in speakers}
    if any(len(utts_by_spk[s]) < 2 for s in split["dev"] + split["eval"]):
        raise DataError("every held-out speaker needs at least two utterances")
    train_utts = [u for s in split["train"] for u in utts_by_spk[s]]
    if cfg.data.folds > 1:
        rng = np.random.default_rng(_sub_seed(cfg.seed, "augment"))
        noises = [p for (p,) in _read_list(cfg.data.noise_list, 1)] if cfg.data.source == "wav" else []
        path_of = {u: p for u, _, p in _read_list(cfg.data.wav_list, 3)} if noises else {}
        jobs, names = [], []
        for fold in range(1, cfg.data.folds):
            for u in train_utts:
                snr = float(rng.uniform(cfg.data.snr_low, cfg.data.snr_high))
                names.append((u, f"{u}-aug{fold}"))
                if noises:
                    jobs.append((path_of[u], cfg.features, noises[int(rng.integers(len(noises)))], snr,
                                 int(rng.integers(2**31))))
                else:
                    # feature-domain noise at the requested SNR for the toy corpus
                    x = feats[u]
                    jobs.append(x + rng.normal(size=x.shape) * x.std() * 10 ** (-snr / 20))
        values = _pool_map(_wav_features, jobs, cfg.workers) if noises else jobs
        aug = {new: v for (_, new), v in zip(names, values)}
        for (src, new) in names:
            utt2spk[new] = utt2spk[src]
            if src in labels:
                labels[new] = labels[src]
    order = sorted(feats)
    archive.write_archive(ws.path("feats.ark"), ((u, feats[u]) for u in order))
    archive.write_archive(ws.path("feats_aug.ark"), ((u, aug[u]) for u in sorted(aug)))
    archive.write_archive(ws.path("labels.ark"),
                          ((u, labels[u].astype(np.float64)[:, None]) for u in sorted(labels)))
    archive.atomic_write_text(ws.path("utt2spk"), "".join(f"{u} {utt2spk[u]}\n" for u in sorted(utt2spk)))
    archive.atomic_write_text(ws.path("splits.json"), json.dumps(
        {"speakers": split, "train_utts": train_utts, "aug_utts": sorted(aug)}, indent=1, sort_keys=True) + "\n")
    out = [ws.path(n) for n in ("feats.ark", "feats_aug.ark", "labels.ark", "utt2spk", "splits.json")]
    out += [Path(str(ws.path(n)) + ".idx") for n in ("feats.ark", "feats_aug.ark", "labels.ark")]
    for sp in SPLITS:
        keys, lab = _trials(utts_by_spk, split[sp])
        write_key(ws.path(f"trials_{sp}.key"), keys, lab)
        out.append(ws.path(f"trials_{sp}.key"))
    return out


def _pool_map(fn, jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def stage_vad(ws: Workspace, system=None) -> list:
    vcfg = ws.cfg.vad
    feats = archive.read_archive(ws.path("feats.ark"))
    aug = archive.read_archive(ws.path("feats_aug.ark"))
    labels = archive.read_archive(ws.path("labels.ark"))
    masks = {}
    for u, x in feats.items():
        f = FeatureMatrix(np.asarray(x, dtype=np.float64))
        masks[u] = energy_vad(f, vcfg.threshold_offset, vcfg.context).keep if vcfg.enabled else np.ones(len(x), bool)
        if not masks[u].any():
            raise DataError(f"{u}: VAD removed every frame")
    aug_src = {a: a.rsplit("-aug", 1)[0] for a in aug}
    archive.write_archive(ws.path("feats_vad.ark"), ((u, feats[u][masks[u]]) for u in sorted(feats)))
    archive.write_archive(ws.path("feats_aug_vad.ark"), ((a, aug[a][masks[aug_src[a]]]) for a in sorted(aug)))

    def lab(u):
        src = aug_src.get(u, u)
        return labels[u][masks[src]]

    archive.write_archive(ws.path("labels_vad.ark"), ((u, lab(u)) for u in sorted(labels)))
    names = ("feats_vad.ark", "feats_aug_vad.ark", "labels_vad.ark")
    return [ws.path(n) for n in names] + [Path(str(ws.path(n)) + ".idx") for n in names]


def stage_train(ws: Workspace, system: str) -> list:
    cfg = ws.cfg
    splits = ws.splits()
    utt2spk = ws.utt2spk()
    spk_index = {s: i for i, s in enumerate(splits["speakers"]["train"])}
    feats = archive.read_archive(ws.path("feats_vad.ark"))
    feats.update(archive.read_archive(ws.path("feats_aug_vad.ark")))
    labels = archive.read_archive(ws.path("labels_vad.ark"))
    data = []
    for u in splits["train_utts"] + splits["aug_utts"]:
        fl = labels[u][:, 0].astype(np.int64) if u in labels else None
        data.append(Utterance(np.asarray(feats[u], dtype=np.float64), spk_index[utt2spk[u]], fl, u))
    spec = builtin(system)
    has_frame_task = any(b != spec.tap[0] and spec.num_classes(b) is not None for b in spec.branch_names)
    if has_frame_task and not labels:
        raise DataError(f"{system} needs frame labels, which this data source does not provide")
    num_senones = cfg.toy.num_senones if labels else None
    seed = _sub_seed(cfg.seed, "train", system)
    model = build_model(spec, data[0].feats.shape[1], len(spk_index), width=cfg.embedder.width_for(system),
                        num_senones=num_senones, seed=seed)
    loss_cfg = cfg.loss_for(system)
    result = train(model, data, loss_cfg, cfg.train, seed=seed)
    log.info("%s: held-out loss %.4f -> %.4f", system, result.heldout_before, result.heldout_after)
    path = ws.sys_path(system, "model.xvkt")
    save_model(path, result.model, loss_cfg)
    losses = ws.sys_path(system, "train_log.json")
    archive.atomic_write_text(losses, json.dumps({"heldout_before": result.heldout_before,
                                                  "heldout_after": result.heldout_after,
                                                  "losses": result.losses}) + "\n")
    return [path, losses]


def stage_extract(ws: Workspace, system: str) -> list:
    model, _ = load_model(ws.sys_path(system, "model.xvkt"))
    feats = archive.read_archive(ws.path("feats_vad.ark"))
    vecs = ((u, model.embed(feats[u])[None, :]) for u in sorted(feats))
    path = ws.sys_path(system, "embeddings.ark")
    archive.write_archive(path, vecs)
    return [path, Path(str(path) + ".idx")]


def _vectors(path, utts) -> np.ndarray:
    arc = archive.read_archive(path)
    return np.stack([np.asarray(arc[u][0], dtype=np.float64) for u in utts])


def stage_lda(ws: Workspace, system: str) -> list:
    splits = ws.splits()
    utt2spk = ws.utt2spk()
    utts = splits["train_utts"]
    x = _vectors(ws.sys_path(system, "embeddings.ark"), utts)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = lda_fit(x, [utt2spk[u] for u in utts], ws.cfg.backend.lda_dim)
    for w in caught:
        log.warning("%s lda: %s", system, w.message)
    path = ws.sys_path(system, "lda.xvkt")
    model.save(path)
    return [path]


def stage_length_norm(ws: Workspace, system: str) -> list:
    lda = LdaModel.load(ws.sys_path(system, "lda.xvkt"))
    arc = archive.read_archive(ws.sys_path(system, "embeddings.ark"))
    utts = sorted(arc)
    x = length_norm(lda.apply(np.stack([np.asarray(arc[u][0], dtype=np.float64) for u in utts])))
    path = ws.sys_path(system, "vectors.ark")
    archive.write_archive(path, ((u, x[i][None, :]) for i, u in enumerate(utts)))
    return [path, Path(str(path) + ".idx")]


def stage_plda(ws: Workspace, system: str) -> list:
    splits = ws.splits()
    utt2spk = ws.utt2spk()
    utts = splits["train_utts"]
    x = _vectors(ws.sys_path(system, "vectors.ark"), utts)
    model = plda_fit(x, [utt2spk[u] for u in utts], iters=ws.cfg.backend.plda_iters)
    path = ws.sys_path(system, "plda.xvkt")
    model.save(path)
    return [path]


def _split_utts(ws: Workspace, split: str) -> list:
    spk = set(ws.splits()["speakers"][split])
    return sorted(u for u, s in ws.utt2spk().items() if s in spk and "-aug" not in u)


def stage_adapt(ws: Workspace, system: str) -> list:
    plda = PldaModel.load(ws.sys_path(system, "plda.xvkt"))
    # without a dedicated adaptation split, fall back to the (unlabeled) dev utterances
    split = "adapt" if ws.splits()["speakers"]["adapt"] else "dev"
    x = _vectors(ws.sys_path(system, "vectors.ark"), _split_utts(ws, split))
    b = ws.cfg.backend
    adapted = plda_adapt(plda, x, AdaptConfig(b.adapt_within, b.adapt_between))
    path = ws.sys_path(system, "plda_adapt.xvkt")
    adapted.save(path)
    return [path]


def _trial_sides(ws: Workspace, split: str):
    key = ws.key(split)
    trials = list(key)
    enroll = sorted({e for e, _ in trials})
    test = sorted({t for _, t in trials})
    return key, trials, enroll, test


def _enroll_matrix(vec_arc: dict, ids) -> np.ndarray:
    # single-session enrollment; enroll_vector also covers comma-joined multi-session ids
    return np.stack([enroll_vector(np.stack([vec_arc[s][0] for s in e.split(",")])) for e in ids])


def stage_score(ws: Workspace, system: str) -> list:
    plda = PldaModel.load(ws.sys_path(system, "plda_adapt.xvkt"))
    arc = {u: np.asarray(v, dtype=np.float64) for u, v in archive.read_archive(ws.sys_path(system, "vectors.ark")).items()}
    out = []
    for split in SPLITS:
        key, trials, enroll, test = _trial_sides(ws, split)
        e = _enroll_matrix(arc, enroll)
        t = np.stack([arc[u][0] for u in test])
        mat = plda.score_matrix(e, t)
        ei = {u: i for i, u in enumerate(enroll)}
        ti = {u: i for i, u in enumerate(test)}
        scores = [mat[ei[a], ti[b]] for a, b in trials]
        path = ws.sys_path(system, f"scores_{split}.txt")
        write_scores(path, TrialScoreSet([a for a, _ in trials], [b for _, b in trials], scores,
                                         [key[k] for k in trials]), SCORE_PRECISION)
        out.append(path)
    return out


def stage_asnorm(ws: Workspace, system: str) -> list:
    plda = PldaModel.load(ws.sys_path(system, "plda_adapt.xvkt"))
    arc = {u: np.asarray(v, dtype=np.float64) for u, v in archive.read_archive(ws.sys_path(system, "vectors.ark")).items()}
    cohort = np.stack([arc[u][0] for u in ws.splits()["train_utts"]])
    k = min(ws.cfg.backend.asnorm_k, len(cohort))
    out = []
    for split in SPLITS:
        key, trials, enroll, test = _trial_sides(ws, split)
        raw = read_scores(ws.sys_path(system, f"scores_{split}.txt"))
        e = _enroll_matrix(arc, enroll)
        t = np.stack([arc[u][0] for u in test])
        ec = cohort_score_matrix(plda, e, cohort)
        tc = cohort_score_matrix(plda, t, cohort)
        ei = {u: i for i, u in enumerate(enroll)}
        ti = {u: i for i, u in enumerate(test)}
        rows = np.array([ei[a] for a in raw.enroll])
        cols = np.array([ti[b] for b in raw.test])
        full = np.zeros((len(enroll), len(test)))
        full[rows, cols] = raw.scores
        normed = asnorm_matrix(full, ec, tc, k)[rows, cols]
        path = ws.sys_path(system, f"asnorm_{split}.txt")
        write_scores(path, raw.with_scores(normed), SCORE_PRECISION)
        out.append(path)
    return out


def stage_calibrate(ws: Workspace, system: str) -> list:
    dev = apply_key(read_scores(ws.sys_path(system, "asnorm_dev.txt")), ws.key("dev"))
    known = dev.labels != -1
    cal = pav_fit(dev.scores[known], dev.labels[known] == TARGET)
    path = ws.sys_path(system, "calibration.json")
    archive.atomic_write_text(path, json.dumps(cal.to_dict()) + "\n")
    out = [path]
    for split in SPLITS:
        raw = read_scores(ws.sys_path(system, f"asnorm_{split}.txt"))
        p = ws.sys_path(system, f"calibrated_{split}.txt")
        write_scores(p, raw.with_scores(pav_apply(cal, raw.scores)), SCORE_PRECISION)
        out.append(p)
    return out


def _stack_calibrated(ws: Workspace, split: str):
    sets = [read_scores(ws.sys_path(s, f"calibrated_{split}.txt")) for s in ws.cfg.systems]
    ref = sets[0].keys()
    for s, t in zip(ws.cfg.systems, sets):
        if t.keys() != ref:
            raise DataError(f"{s}: {split} trial list differs from {ws.cfg.systems[0]}")
    return sets[0], np.stack([t.scores for t in sets], axis=1)


def stage_fuse(ws: Workspace, system=None) -> list:
    cfg = ws.cfg
    base, x = _stack_calibrated(ws, "dev")
    dev = apply_key(base, ws.key("dev"))
    if len(cfg.systems) == 1:
        model = FusionModel(np.ones(1), 0.0)
    else:
        known = dev.labels != -1
        tar = dev.labels[known] == TARGET
        model = fusion_fit(x[known], tar, prior=cfg.fusion.prior, reg=cfg.fusion.reg)
        if cfg.fusion.guard:
            model = guard_fusion(model, x[known], tar, cfg.dcf)
    path = ws.path("fusion.json")
    archive.atomic_write_text(path, json.dumps({"systems": list(cfg.systems), **model.to_dict()}) + "\n")
    out = [path]
    for split in SPLITS:
        base, x = _stack_calibrated(ws, split)
        p = ws.path(f"fused_{split}.txt")
        write_scores(p, base.with_scores(model.apply(x)), SCORE_PRECISION)
        out.append(p)
    return out


def guard_fusion(model: FusionModel, x: np.ndarray, tar: np.ndarray, dcf: DcfConfig) -> FusionModel:
    """Replace the fusion by a one-hot selection when a single subsystem has lower act-DCF on the fit data.

    Logistic regression minimizes a cross-entropy, not act-DCF, so on its own it
    can lose to a calibrated input system at the DCF operating points.
    """
    fused = act_dcf(model.apply(x), tar, dcf)
    singles = [act_dcf(x[:, j], tar, dcf) for j in range(x.shape[1])]
    best = int(np.argmin(singles))
    if singles[best] < fused:
        log.warning("fusion act-DCF %.4f worse than subsystem %d (%.4f); using it alone", fused, best, singles[best])
        w = np.zeros(x.shape[1])
        w[best] = 1.0
        return FusionModel(w, 0.0, model.objective_history)
    return model


def evaluate(scores, key, cfg: DcfConfig = DcfConfig(), name: str = ""):
    """Metric report for a score file (or TrialScoreSet) against a key file (or dict)."""
    t = scores if isinstance(scores, TrialScoreSet) else read_scores(scores)
    k = key if isinstance(key, dict) else read_key(key)
    labeled = apply_key(t, k)
    known = labeled.labels != -1
    labeled = TrialScoreSet([e for e, m in zip(labeled.enroll, known) if m],
                            [s for s, m in zip(labeled.test, known) if m], labeled.scores[known],
                            labeled.labels[known])
    return evaluate_trials(labeled, cfg, name)


def stage_evaluate(ws: Workspace, system=None) -> list:
    cfg = ws.cfg
    reports = {}
    text = []
    for split in SPLITS:
        key = ws.key(split)
        rows = [evaluate(ws.sys_path(s, f"calibrated_{split}.txt"), key, cfg.dcf, s) for s in cfg.systems]
        rows.append(evaluate(ws.path(f"fused_{split}.txt"), key, cfg.dcf, "fused"))
        text.append(f"== {split} ==\n" + format_report(rows))
        reports[split] = {r.name: {"eer": r.eer, "min_dcf": r.min_dcf, "act_dcf": r.act_dcf,
                                   "min_dcf_points": {str(p): v for p, v in r.min_dcf_points.items()},
                                   "act_dcf_points": {str(p): v for p, v in r.act_dcf_points.items()}}
                          for r in rows}
    txt, js = ws.path("report.txt"), ws.path("report.json")
    archive.atomic_write_text(txt, "\n".join(text))
    archive.atomic_write_text(js, json.dumps(reports, indent=1, sort_keys=True) + "\n")
    return [txt, js]


STAGE_FUNCS = {
    "features": stage_features, "vad": stage_vad, "train": stage_train, "extract": stage_extract,
    "lda": stage_lda, "length-norm": stage_length_norm, "plda": stage_plda, "adapt": stage_adapt,
    "score": stage_score, "asnorm": stage_asnorm, "calibrate": stage_calibrate, "fuse": stage_fuse,
    "evaluate": stage_evaluate,
}


def stage_range(start: str | None = None, stop: str | None = None) -> list:
    for s in (start, stop):
        if s is not None and s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; stages are {', '.join(STAGES)}")
    i = STAGES.index(start) if start else 0
    j = STAGES.index(stop) + 1 if stop else len(STAGES)
    if j <= i:
        raise ConfigError(f"empty stage range {start}..{stop}")
    return list(STAGES[i:j])


@dataclass
class RunResult:
    ran: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def run_pipeline(cfg: PipelineConfig, workdir, start: str | None = None, stop: str | None = None,
                 force: bool = False) -> RunResult:
    """Run stages start..stop (inclusive). Completed stages whose configuration hash matches are skipped."""
    ws = Workspace(workdir, cfg)
    ws.root.mkdir(parents=True, exist_ok=True)
    result = RunResult()
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(cfg.workers)
    try:
        for stage in stage_range(start, stop):
            targets = cfg.systems if stage in PER_SYSTEM else (None,)
            for system in targets:
                key = _stage_key(stage, system)
                if not force and ws.is_current(stage, system):
                    result.skipped.append(key)
                    continue
                ws.check_prerequisites(stage, system)
                log.info("running %s", key)
                artifacts = STAGE_FUNCS[stage](ws, system)
                ws.record(stage, system, artifacts)
                result.ran.append(key)
    finally:
        torch.set_num_threads(prev_threads)
    return result
