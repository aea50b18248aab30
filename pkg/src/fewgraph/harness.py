"""Episodic training, evaluation with confidence intervals, and run files.

Everything a run produces is a pure function of (seed, config): episode
draws, dropout masks, query selections, and the parameter trajectory all
derive from named seed streams, so two runs with the same config and seed
write identical metrics (wall-seconds excepted, being a measurement).
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .episodes import (
    DatasetSplit,
    Episode,
    ProtocolError,
    augment_rotations,
    ingest_omniglot,
    load_cache,
    sample_episode,
    sample_probe_episode,
    synth_dataset,
)
from .models import build_model
from .nn import Module, load_checkpoint, save_checkpoint
from .optim import Adam, StepDecay
from .tensor import NumericError, Tensor

LABELED_FRACTIONS = (0.2, 0.4, 1.0)

# seed-stream tags: one independent generator family per purpose
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_TRAIN = 2
STREAM_VAL = 3
STREAM_TEST = 4


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "fewshot"  # fewshot | semi | active
    k: int = 5
    q: int = 1
    labeled_fraction: float = 1.0
    episodes_per_step: int = 16
    steps: int = 300
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    dataset: str = "synth"
    model: str = "gnn"
    query_policy: str = "learned"  # active mode only
    adj_mask_self: bool = False
    eval_interval: int = 50
    eval_episodes: int = 200
    lr_decay_every: int = 1000
    filters: int = 64
    embed_dim: int = 64
    nf: int = 96
    blocks: int = 3
    synth_classes: int = 50
    synth_test_classes: int = 20
    synth_dim: int = 64
    synth_sep: float = 6.0
    synth_per_class: int = 40
    probe: bool = False
    probe_r: int = 5
    overfit: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("fewshot", "semi", "active"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not any(abs(self.labeled_fraction - f) < 1e-12 for f in LABELED_FRACTIONS):
            raise ConfigError(
                f"labeled-fraction must be one of {LABELED_FRACTIONS}, "
                f"got {self.labeled_fraction}"
            )
        if self.mode == "active" and self.model != "gnn":
            raise ConfigError("active mode applies to the gnn model only")
        if self.query_policy not in ("learned", "random"):
            raise ConfigError(f"unknown query-policy {self.query_policy!r}")

    def shot_split(self) -> tuple[int, int]:
        """(labeled per class, unlabeled per class) after the labeled fraction."""
        q_lab = max(1, round(self.q * self.labeled_fraction))
        if self.mode == "fewshot":
            return q_lab, 0
        return q_lab, self.q - q_lab


_BOOL_FIELDS = {"adj_mask_self", "probe", "overfit"}


def parse_config(text: str) -> TrainConfig:
    """Flat `key = value` lines; # starts a comment; keys may use - or _."""
    values: dict[str, object] = {}
    valid = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_").lower()
        val = val.strip()
        if key not in valid:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        default = getattr(TrainConfig, key)
        try:
            if key in _BOOL_FIELDS:
                if val.lower() not in ("true", "false", "0", "1", "yes", "no"):
                    raise ValueError
                values[key] = val.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                values[key] = int(val)
            elif isinstance(default, float):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError:
            raise ConfigError(
                f"line {lineno}: bad value {val!r} for {key}"
            ) from None
    return TrainConfig(**values)


def config_text(cfg: TrainConfig) -> str:
    """Canonical config echo: every field, hyphenated keys, sorted order."""
    lines = []
    for f in sorted(fields(TrainConfig), key=lambda f: f.name):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{f.name.replace('_', '-')} = {val}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha1(config_text(cfg).encode()).hexdigest()[:12]


def blob_hash(data: bytes) -> str:
    """Git-style content hash: sha1 over a `blob <len>\\0` header plus payload."""
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def _stream_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


@dataclass
class SplitBundle:
    train: DatasetSplit
    val: DatasetSplit
    test: DatasetSplit
    dataset_hash: str


def _hold_out_val(train: DatasetSplit) -> tuple[DatasetSplit, DatasetSplit]:
    """Fixed 10% of train classes (the trailing ones) become the val split."""
    n = train.class_count
    n_val = max(1, int(np.ceil(0.1 * n)))
    cut = n - n_val
    return (
        DatasetSplit("train", train.class_names[:cut], train.class_images[:cut]),
        DatasetSplit("val", train.class_names[cut:], train.class_images[cut:]),
    )


def build_splits(cfg: TrainConfig) -> SplitBundle:
    if cfg.dataset == "synth":
        rng = _stream_rng(cfg.seed, STREAM_DATA)
        train_full = synth_dataset(
            cfg.synth_classes, cfg.synth_dim, cfg.synth_sep, rng,
            n_per_class=cfg.synth_per_class, name="train",
        )
        test = synth_dataset(
            cfg.synth_test_classes, cfg.synth_dim, cfg.synth_sep, rng,
            n_per_class=cfg.synth_per_class, name="test",
        )
        train, val = _hold_out_val(train_full)
        digest = hashlib.sha1()
        for split in (train_full, test):
            for arr in split.class_images:
                digest.update(np.ascontiguousarray(arr).tobytes())
        return SplitBundle(train, val, test, blob_hash(digest.digest()))

    kind, _, path = cfg.dataset.partition(":")
    if kind != "omniglot" or not path:
        raise ConfigError(
            f"dataset selector {cfg.dataset!r} not understood; "
            "use `synth` or `omniglot:<root-or-cache>`"
        )
    p = Path(path)
    if p.is_file():
        train_full, test = load_cache(str(p))
        cache_bytes = p.read_bytes()
    else:
        train_full, test = ingest_omniglot(str(p))
        cache_bytes = None
    train_base, val = _hold_out_val(train_full)
    train = augment_rotations(train_base)
    if cache_bytes is None:
        digest = hashlib.sha1()
        for split in (train_full, test):
            for arr in split.class_images:
                digest.update(np.ascontiguousarray(arr).tobytes())
        h = blob_hash(digest.digest())
    else:
        h = blob_hash(cache_bytes)
    return SplitBundle(train, val, test, h)


def make_model(cfg: TrainConfig, image_shape: tuple[int, int, int]) -> Module:
    rng = _stream_rng(cfg.seed, STREAM_INIT)
    return build_model(
        cfg.model, rng, cfg.k, image_shape,
        filters=cfg.filters, embed_dim=cfg.embed_dim, nf=cfg.nf, n_blocks=cfg.blocks,
        mask_self=cfg.adj_mask_self,
        query_policy=cfg.query_policy if cfg.mode == "active" else None,
    )


def draw_episode(
    cfg: TrainConfig, split: DatasetSplit, rng: np.random.Generator
) -> tuple[Episode, int | None]:
    """One episode per the configured protocol; second item is the
    informative-node index for probe episodes, else None."""
    if cfg.probe:
        return sample_probe_episode(split, cfg.k, cfg.probe_r, rng)
    q_lab, r = cfg.shot_split()
    mode = "fewshot" if r == 0 else cfg.mode
    return sample_episode(split, cfg.k, q_lab, r, mode, rng), None


def episode_loss(
    model: Module,
    episode: Episode,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy at the query node: minus the true class's log-probability."""
    scores = model.log_scores(episode, train=train, rng=rng)
    if scores.shape != (1, episode.way):
        raise ContractError(f"expected (1, {episode.way}) log-scores, got {scores.shape}")
    total = float(np.exp(scores.data).sum())
    if not np.isfinite(total):
        raise NumericError(f"log-scores are non-finite (probabilities sum to {total})")
    if abs(total - 1.0) > 1e-6:
        raise ContractError(f"log-scores are not normalized (probabilities sum to {total})")
    onehot = T.one_hot([episode.answer - 1], episode.way)
    return T.neg((scores * onehot).sum())


@dataclass
class EvalReport:
    accuracy: float
    half_width: float | None  # None when episodes == 1
    episodes: int
    mode: str
    config_hash: str
    model: str = "gnn"
    k: int = 5
    q: int = 1
    labeled_fraction: float = 1.0
    policy: str = ""
    hit_rate: float | None = None  # probe runs: informative-node hit frequency


def evaluate(
    model: Module,
    cfg: TrainConfig,
    split: DatasetSplit,
    n_episodes: int,
    stream: int = STREAM_TEST,
    informative_hits: bool = False,
) -> EvalReport:
    if n_episodes < 1:
        raise ProtocolError("evaluation needs at least one episode")
    correct = np.zeros(n_episodes)
    hits = np.zeros(n_episodes)
    for i in range(n_episodes):
        rng = _stream_rng(cfg.seed, stream, i)
        episode, informative = draw_episode(cfg, split, rng)
        probs = model.predict(episode, rng=rng)
        correct[i] = float(int(np.argmax(probs)) + 1 == episode.answer)
        if informative_hits and informative is not None:
            selection = getattr(model, "last_selection", None)
            hits[i] = float(selection is not None and selection[0] == informative)
    acc = float(correct.mean())
    half = (
        float(1.96 * correct.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else None
    )
    return EvalReport(
        accuracy=acc,
        half_width=half,
        episodes=n_episodes,
        mode=cfg.mode,
        config_hash=config_hash(cfg),
        model=cfg.model,
        k=cfg.k,
        q=cfg.q,
        labeled_fraction=cfg.labeled_fraction,
        policy=cfg.query_policy if cfg.mode == "active" else "",
        hit_rate=float(hits.mean()) if informative_hits and cfg.probe else None,
    )


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    manifest_path: str
    best_val_accuracy: float
    final_train_loss: float


def train(cfg: TrainConfig, out_dir: str) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = build_splits(cfg)
    for name, split in (("train", bundle.train), ("val", bundle.val), ("test", bundle.test)):
        if len(split.class_names) < cfg.k:
            raise ConfigError(
                f"{name} split has {len(split.class_names)} classes, "
                f"fewer than the {cfg.k}-way episodes the config asks for"
            )
    model = make_model(cfg, bundle.train.image_shape)
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = StepDecay(opt, cfg.lr_decay_every)

    manifest_path = out / "manifest.txt"
    manifest_path.write_text(
        config_text(cfg) + f"dataset-cache-hash = {bundle.dataset_hash}\n"
    )

    frozen: tuple[Episode, int | None] | None = None
    if cfg.overfit:
        frozen = draw_episode(cfg, bundle.train, _stream_rng(cfg.seed, STREAM_TRAIN, 0, 0))

    rows: list[tuple[int, float, float, float]] = []
    window: list[float] = []
    best_val = -1.0
    final_loss = float("nan")
    ck_path = out / "checkpoint.bin"
    t0 = time.perf_counter()

    for step in range(cfg.steps):
        sched.update(step)
        opt.zero_grad()
        for idx in range(cfg.episodes_per_step):
            rng = _stream_rng(cfg.seed, STREAM_TRAIN, step, idx)
            episode, _ = frozen if frozen is not None else draw_episode(cfg, bundle.train, rng)
            try:
                with T.Trace():
                    loss = episode_loss(model, episode, train=True, rng=rng)
                lval = loss.item()
            except NumericError as e:
                raise NumericError(
                    f"{e}; offending episode seed "
                    f"(seed={cfg.seed}, stream={STREAM_TRAIN}, step={step}, index={idx})"
                ) from None
            if not np.isfinite(lval):
                raise NumericError(
                    f"non-finite loss {lval} at episode seed "
                    f"(seed={cfg.seed}, stream={STREAM_TRAIN}, step={step}, index={idx})"
                )
            T.backward(loss)
            window.append(lval)
        scale = 1.0 / cfg.episodes_per_step
        for p in params.values():
            p.grad *= scale
        opt.step()
        final_loss = float(np.mean(window[-cfg.episodes_per_step :]))

        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
            report = evaluate(model, cfg, bundle.val, cfg.eval_episodes, stream=STREAM_VAL)
            rows.append(
                (step + 1, float(np.mean(window)), report.accuracy, time.perf_counter() - t0)
            )
            window.clear()
            if report.accuracy > best_val:
                best_val = report.accuracy
                save_checkpoint(str(ck_path), model.state())

    if not ck_path.exists():  # steps < eval_interval and steps == 0 edge
        save_checkpoint(str(ck_path), model.state())

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w") as fh:
        fh.write("step,train-loss,val-accuracy,wall-seconds\n")
        for step, tl, va, ws in rows:
            fh.write(f"{step},{tl:.17g},{va:.17g},{ws:.3f}\n")

    return TrainResult(
        checkpoint_path=str(ck_path),
        metrics_path=str(metrics_path),
        manifest_path=str(manifest_path),
        best_val_accuracy=best_val,
        final_train_loss=final_loss,
    )


def load_run(checkpoint_path: str) -> tuple[TrainConfig, Module, SplitBundle]:
    """Rebuild the model and splits for a checkpoint from its run manifest."""
    ck = Path(checkpoint_path)
    manifest = ck.parent / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(f"no manifest.txt next to {checkpoint_path!r}")
    text = "\n".join(
        line for line in manifest.read_text().splitlines()
        if not line.replace("-", "_").startswith("dataset_cache_hash")
    )
    cfg = parse_config(text)
    bundle = build_splits(cfg)
    model = make_model(cfg, bundle.train.image_shape)
    model.load_state(load_checkpoint(str(ck)))
    return cfg, model, bundle


REPORT_FIELDS = (
    "model", "mode", "k", "q", "labeled_fraction", "policy",
    "episodes", "accuracy", "half_width", "hit_rate", "config_hash",
)


def save_report(path: str, report: EvalReport) -> None:
    with open(path, "w") as fh:
        for name in REPORT_FIELDS:
            val = getattr(report, name)
            if val is None:
                val = "n/a"
            fh.write(f"{name.replace('_', '-')} = {val}\n")


def load_report(path: str) -> EvalReport:
    raw: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        raw[key.strip().replace("-", "_")] = val.strip()
    def num(s: str) -> float | None:
        return None if s == "n/a" else float(s)
    return EvalReport(
        accuracy=float(raw["accuracy"]),
        half_width=num(raw["half_width"]),
        episodes=int(raw["episodes"]),
        mode=raw["mode"],
        config_hash=raw["config_hash"],
        model=raw.get("model", "gnn"),
        k=int(raw.get("k", 5)),
        q=int(raw.get("q", 1)),
        labeled_fraction=float(raw.get("labeled_fraction", 1.0)),
        policy=raw.get("policy", ""),
        hit_rate=num(raw.get("hit_rate", "n/a")),
    )
