"""Four-pathway brain-age network and its training step.

The backbone consumes the T1 volume; two sibling pathways consume the
gray- and white-matter volumes. After every stage the two sibling
features are blended and added into the backbone's stage output, and the
four post-addition backbone features form the pyramid. The pyramid is
fused and embedded (or pooled, depending on the ablation flags), the
sibling pathways contribute globally pooled descriptors, the sex label a
small learned embedding, and a GELU MLP maps the concatenation to one
scalar age. Ablation flags map one-to-one onto the variant table:
removing a flag removes parameters.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ops
from .autodiff import DTYPE, Parameter, Tensor, no_grad
from .convnext import Dense, FusionModule, Pathway, StageConfig
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .module import Module
from .optim import AdamW
from .pyramid import FeaturePyramid, Fpfn, OtfpfHead

CHECKPOINT_FORMAT = "otfpf-ckpt-v1"


# ---------------------------------------------------------------------------
# samples and configuration
# ---------------------------------------------------------------------------

@dataclass
class SubjectSample:
    """One subject: three same-shape single-channel volumes, sex, age."""

    t1: np.ndarray
    gm: np.ndarray
    wm: np.ndarray
    sex: int
    age: float

    def __post_init__(self):
        vols = []
        for name in ("t1", "gm", "wm"):
            v = np.asarray(getattr(self, name), dtype=DTYPE)
            if v.ndim == 3:
                v = v[..., None]
            if v.ndim != 4 or v.shape[-1] != 1:
                raise DataError(f"{name} volume must be [D,W,H] or [D,W,H,1], got {v.shape}")
            vols.append(v)
            setattr(self, name, v)
        if not (vols[0].shape == vols[1].shape == vols[2].shape):
            raise DataError("t1/gm/wm volumes must share one spatial shape")
        if int(self.sex) not in (0, 1):
            raise DataError(f"sex label must be 0 or 1, got {self.sex}")
        self.sex = int(self.sex)
        if not (np.isfinite(self.age) and self.age > 0):
            raise DataError(f"age must be a positive real, got {self.age}")
        self.age = float(self.age)


@dataclass
class OtfpfConfig:
    """Model and training settings; flags mirror the ablation table rows."""

    use_otem: bool = True
    use_fpfn: bool = True
    multi_pathway: bool = True
    use_sex: bool = True
    downsample_mode: str = "overlapped"
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 3, 1)
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    ds_kernel: int = 3
    otem_n_refs: int = 4
    otem_epsilon: float = 0.1
    otem_sigma: float = 1.0
    otem_max_iterations: int = 100
    otem_tolerance: float = 1e-6
    calibrate_otem: bool = True
    mlp_widths: tuple[int, int] = (256, 64)
    sex_embed_dim: int = 8
    head_bias_init: float = 44.19
    seed: int = 0
    lr: float = 5e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 10

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if self.use_otem and not self.use_fpfn:
            raise ConfigError("use_otem requires use_fpfn: the embedding consumes fused levels")
        if self.otem_n_refs < 1:
            raise ConfigError(f"otem_n_refs must be >= 1, got {self.otem_n_refs}")
        if self.otem_epsilon <= 0 or self.otem_sigma <= 0:
            raise ConfigError("otem_epsilon and otem_sigma must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size/max_epochs must be >= 1 and patience >= 0")
        StageConfig(self.blocks_per_stage, self.stage_channels,
                    self.downsample_mode, self.ds_kernel)  # validates the rest

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("blocks_per_stage", "stage_channels", "mlp_widths"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OtfpfConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "OtfpfConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON {path}: {exc}") from exc
        return cls.from_dict(payload)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")

    def stage_config(self) -> StageConfig:
        return StageConfig(self.blocks_per_stage, self.stage_channels,
                           self.downsample_mode, self.ds_kernel)


def ablation_variants(base: OtfpfConfig | None = None) -> dict[str, OtfpfConfig]:
    """The six ablation rows, keyed by slug, derived from a base config."""
    base = base or OtfpfConfig()
    d = base.to_dict()

    def make(**overrides):
        nd = dict(d)
        nd.update(overrides)
        return OtfpfConfig.from_dict(nd)

    return {
        "no_otem": make(use_otem=False),
        "no_otem_no_fpfn": make(use_otem=False, use_fpfn=False),
        "no_otem_no_fpfn_single_pathway": make(use_otem=False, use_fpfn=False,
                                               multi_pathway=False),
        "no_sex_label": make(use_sex=False),
        "classical_stage_depths": make(blocks_per_stage=(3, 3, 9, 3)),
        "no_overlapped_downsampling": make(downsample_mode="patchify"),
    }


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class Mlp(Module):
    def __init__(self, in_dim: int, widths: tuple[int, ...], head_bias: float,
                 rng: np.random.Generator):
        dims = (in_dim,) + tuple(widths)
        self.hidden = [Dense(dims[i], dims[i + 1], rng) for i in range(len(widths))]
        self.head = Dense(dims[-1], 1, rng)
        self.head.bias.data = np.array([head_bias], dtype=DTYPE)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.hidden:
            x = ops.gelu(layer(x))
        return self.head(x)


class OtfpfModel(Module):
    def __init__(self, cfg: OtfpfConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        sc = cfg.stage_config()
        ch = cfg.stage_channels
        self.backbone = Pathway(1, sc, rng)
        if cfg.multi_pathway:
            self.gm_path = Pathway(1, sc, rng)
            self.wm_path = Pathway(1, sc, rng)
            self.fusions = [FusionModule(ch[i], rng) for i in range(4)]
        if cfg.use_fpfn:
            self.fpfn = Fpfn(ch, rng)
        if cfg.use_otem:
            self.otfpf_head = OtfpfHead(
                unified_channels=ch[0], n_refs=cfg.otem_n_refs,
                sigma=cfg.otem_sigma, epsilon=cfg.otem_epsilon,
                max_iterations=cfg.otem_max_iterations,
                tolerance=cfg.otem_tolerance, rng=rng)
        if cfg.use_sex:
            self.sex_embed = Dense(2, cfg.sex_embed_dim, rng)
        self.mlp = Mlp(self.descriptor_length(), cfg.mlp_widths,
                       cfg.head_bias_init, rng)
        self.assign_names()

    # -- shape bookkeeping ------------------------------------------------
    def backbone_descriptor_length(self) -> int:
        cfg = self.cfg
        if cfg.use_otem:
            return 4 * cfg.otem_n_refs * cfg.stage_channels[0]
        if cfg.use_fpfn:
            return 4 * cfg.stage_channels[0]
        return cfg.stage_channels[3]

    def descriptor_length(self) -> int:
        cfg = self.cfg
        total = self.backbone_descriptor_length()
        if cfg.multi_pathway:
            total += 2 * cfg.stage_channels[3]
        if cfg.use_sex:
            total += cfg.sex_embed_dim
        return total

    # -- forward ------------------------------------------------------------
    def _stage_features(self, t1: Tensor, gm: Tensor | None, wm: Tensor | None):
        """Run all pathways stage by stage with the per-stage additions.

        Returns the post-addition backbone pyramid plus the final sibling
        stage outputs (None without the sibling pathways).
        """
        cfg = self.cfg
        xb = self.backbone.stem(t1)
        xg = xw = None
        if cfg.multi_pathway:
            xg = self.gm_path.stem(gm)
            xw = self.wm_path.stem(wm)
        levels = []
        for i in range(4):
            if i > 0:
                xb = self.backbone.downs[i - 1](xb)
            xb = self.backbone.stages[i](xb)
            if cfg.multi_pathway:
                if i > 0:
                    xg = self.gm_path.downs[i - 1](xg)
                    xw = self.wm_path.downs[i - 1](xw)
                xg = self.gm_path.stages[i](xg)
                xw = self.wm_path.stages[i](xw)
                xb = ops.add(xb, self.fusions[i](xg, xw))
            levels.append(xb)
        return FeaturePyramid(tuple(levels)), xg, xw

    def forward_batch(self, t1: Tensor, gm: Tensor | None, wm: Tensor | None,
                      sex: np.ndarray) -> Tensor:
        cfg = self.cfg
        self.backbone.check_input(t1)
        pyramid, xg, xw = self._stage_features(t1, gm, wm)
        parts = []
        if cfg.use_otem:
            parts.append(self.otfpf_head(self.fpfn(pyramid)))
        elif cfg.use_fpfn:
            fused = self.fpfn(pyramid)
            parts.append(ops.concat([ops.global_avg_pool(lv) for lv in fused.levels],
                                    axis=-1))
        else:
            parts.append(ops.global_avg_pool(pyramid.levels[3]))
        if cfg.multi_pathway:
            parts.append(ops.global_avg_pool(xg))
            parts.append(ops.global_avg_pool(xw))
        if cfg.use_sex:
            onehot = np.eye(2, dtype=DTYPE)[np.asarray(sex, dtype=int)]
            parts.append(self.sex_embed(Tensor(onehot)))
        h = ops.concat(parts, axis=-1)
        out = self.mlp(h)
        return out.reshape((out.shape[0],))

    def forward(self, sample: SubjectSample) -> float:
        """Predicted age for one subject (inference mode, no recording)."""
        with no_grad():
            pred = self._forward_samples([sample])
        return float(pred[0])

    def _forward_samples(self, samples: list[SubjectSample]) -> np.ndarray:
        t1, gm, wm, sex, _ = stack_batch(samples, self.cfg.multi_pathway)
        out = self.forward_batch(t1, gm, wm, sex)
        return out.data.copy()

    # -- calibration --------------------------------------------------------
    def calibrate_from_samples(self, samples: list[SubjectSample],
                               max_samples: int = 8) -> None:
        """Fit per-level embedding kernels to real fused features.

        Runs a no-grad partial forward over a few subjects, pools each fused
        level's rows, and recalibrates that level's bandwidth, anchors, and
        references. No effect unless the embedding head is enabled.
        """
        if not self.cfg.use_otem or not samples:
            return
        rng = np.random.default_rng(self.cfg.seed + 1)
        batch = samples[:max_samples]
        with no_grad():
            t1, gm, wm, _, _ = stack_batch(batch, self.cfg.multi_pathway)
            pyramid, _, _ = self._stage_features(t1, gm, wm)
            fused = self.fpfn(pyramid)
        for level, emb in zip(fused.levels, self.otfpf_head.levels):
            rows = level.data.reshape(-1, level.shape[-1])
            emb.calibrate(rows, rng)


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

def loss(pred: float, age: float) -> float:
    """Absolute-deviation training loss; aligned with the MAE metric."""
    return abs(float(pred) - float(age))


def batch_loss_tensor(pred: Tensor, ages: np.ndarray) -> Tensor:
    return (pred - Tensor(np.asarray(ages, dtype=DTYPE))).abs().mean()


def stack_batch(samples: list[SubjectSample], multi_pathway: bool):
    if not samples:
        raise DataError("batch must be non-empty")
    shape = samples[0].t1.shape
    for i, s in enumerate(samples):
        if s.t1.shape != shape:
            raise DataError(f"sample {i}: volume shape {s.t1.shape} differs from {shape}")
    t1 = Tensor(np.stack([s.t1 for s in samples]))
    gm = wm = None
    if multi_pathway:
        gm = Tensor(np.stack([s.gm for s in samples]))
        wm = Tensor(np.stack([s.wm for s in samples]))
    sex = np.array([s.sex for s in samples], dtype=int)
    ages = np.array([s.age for s in samples], dtype=np.float64)
    return t1, gm, wm, sex, ages


def train_step(model: OtfpfModel, optimizer: AdamW,
               samples: list[SubjectSample]) -> float:
    """One optimization step on a mini-batch; returns the mean batch loss.

    A non-finite loss aborts before any state is touched.
    """
    t1, gm, wm, sex, ages = stack_batch(samples, model.cfg.multi_pathway)
    optimizer.zero_grad()
    pred = model.forward_batch(t1, gm, wm, sex)
    loss_t = batch_loss_tensor(pred, ages)
    value = float(loss_t.data)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite training loss: {value}")
    loss_t.backward()
    optimizer.step()
    optimizer.zero_grad()
    return value


def predict_batch(model: OtfpfModel, samples: list[SubjectSample]) -> np.ndarray:
    """Predicted ages, order preserved; empty input gives an empty array.

    Forward failures carry the offending sample index. ``OTFPF_THREADS``
    caps chunk-level parallelism (results are assembled by index, so the
    output never depends on scheduling).
    """
    if not samples:
        return np.zeros(0, dtype=np.float64)
    chunk = max(1, model.cfg.batch_size)
    chunks = [(start, samples[start:start + chunk])
              for start in range(0, len(samples), chunk)]

    def run(item):
        start, part = item
        try:
            with no_grad():
                return start, model._forward_samples(part)
        except Exception as exc:
            raise type(exc)(f"sample {start}: {exc}") from exc

    workers = int(os.environ.get("OTFPF_THREADS", "1"))
    out = np.zeros(len(samples), dtype=np.float64)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for start, preds in results:
        out[start:start + len(preds)] = preds
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: OtfpfModel, path_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` manifest + ``<prefix>.bin`` parameter blob."""
    base = Path(path_prefix)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    entries = []
    blobs = []
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.shape)})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "params": entries,
    }
    if model.cfg.use_otem:
        manifest["otem_bandwidths"] = [lvl.cfg.kernel.bandwidth
                                       for lvl in model.otfpf_head.levels]
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    bin_path.write_bytes(b"".join(blobs))
    return json_path, bin_path


def load_checkpoint(path_prefix) -> OtfpfModel:
    base = Path(path_prefix)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise DataError(f"checkpoint files missing: {json_path} / {bin_path}")
    manifest = json.loads(json_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format: {manifest.get('format')!r}")
    model = OtfpfModel(OtfpfConfig.from_dict(manifest["config"]))
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    offset = 0
    params = dict(model.named_parameters())
    if len(manifest["params"]) != len(params):
        raise DataError(
            f"checkpoint holds {len(manifest['params'])} parameters, "
            f"model expects {len(params)}"
        )
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params:
            raise DataError(f"checkpoint parameter {name!r} not in model")
        p = params[name]
        if p.shape != shape:
            raise DataError(f"checkpoint {name!r} shape {shape} != model {p.shape}")
        size = int(np.prod(shape)) if shape else 1
        if offset + size > raw.size:
            raise DataError("checkpoint payload shorter than manifest")
        p.data = raw[offset:offset + size].reshape(shape).astype(DTYPE)
        offset += size
    if offset != raw.size:
        raise DataError("checkpoint payload longer than manifest")
    if model.cfg.use_otem and "otem_bandwidths" in manifest:
        from .otem import KernelSpec
        from dataclasses import replace
        for lvl, bw in zip(model.otfpf_head.levels, manifest["otem_bandwidths"]):
            lvl.cfg = replace(lvl.cfg, kernel=KernelSpec(bandwidth=float(bw)))
    return model
