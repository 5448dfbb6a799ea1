"""Two-branch model assembly, two-phase training, fusion and checkpoints.

Phase 1 trains the image branch (relation module + action and activity
classifiers) on actor features. Phase 2 freezes all of that and trains
only the text branch: the feature-to-text adapter, the low-rank adapters
injected into the shared relation module, the text activity classifier
and the softmax temperature. Inference never consults the teacher; the
two branches' activity scores are fused by elementwise addition.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import __version__
from .autodiff import Parameter, Tensor, add, concat_rows, cross_entropy_logits, matmul, mean_rows, mul
from .data import ActorClip, Scenario, confusion_matrix, mca, mpca
from .distill import Temperature, kd_loss
from .errors import CheckpointFormatError, ConfigError, DataError, ShapeError, StateError
from .image2text import Image2TextAdapter
from .layers import Linear
from .optim import AdamW, warmup_lr
from .relation import RelationModule
from .teacher import TextTeacher

CHECKPOINT_MAGIC = b"GACK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs for the two-branch model."""

    text_dim: int = 64            # teacher embedding width D2
    encoder_layers: int = 2
    encoder_heads: int = 4
    ffn_width: int | None = None  # default 4 * text_dim
    relation_kind: str = "attention"
    dual_path: bool = True
    teacher_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe shared by both phases."""

    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    warmup_epochs: int = 5
    alpha: float = 8.0            # adapter influence ratio
    r: int = 2                    # adapter rank
    lambda_kd: float = 1.0
    seed: int = 0
    distill_scope: str = "frame"  # "frame" (key frame only) or "clip"

    def __post_init__(self):
        if self.distill_scope not in ("frame", "clip"):
            raise ConfigError(f"distill_scope must be 'frame' or 'clip', got {self.distill_scope!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class TwoBranchModel:
    """Frozen-image-branch / trainable-text-branch group activity model.

    The relation module is a single object serving both branches: the
    image branch runs it without adapters, the text branch with adapters
    enabled, so the base weights exist exactly once.
    """

    def __init__(self, scenario: Scenario, model_cfg: ModelConfig, train_cfg: TrainConfig):
        self.scenario = scenario
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.n_actions = len(scenario.actions)
        self.n_activities = len(scenario.activities)
        m = scenario.feature_dim

        init_rng = np.random.default_rng([train_cfg.seed, 3, 0])
        self.relation = RelationModule(init_rng, model_cfg.relation_kind, m,
                                       dual_path=model_cfg.dual_path)
        self.relation.attach_adapters(init_rng, train_cfg.r, train_cfg.alpha)
        self.image_action_cls = Linear(init_rng, m, self.n_actions)
        self.image_activity_cls = Linear(init_rng, m, self.n_activities)
        self.image2text = Image2TextAdapter(init_rng, m, model_cfg.text_dim,
                                            layers=model_cfg.encoder_layers,
                                            heads=model_cfg.encoder_heads,
                                            ffn_width=model_cfg.ffn_width)
        # zero init: an untrained text branch must not move fused scores
        self.text_activity_cls = Linear(init_rng, m, self.n_activities, zero_init=True)
        self.tau = Temperature(0.07)
        self.teacher = TextTeacher(scenario.actions, dim=model_cfg.text_dim,
                                   seed=model_cfg.teacher_seed)
        self.rng = np.random.default_rng([train_cfg.seed, 5])
        self.trained_phases: set[int] = set()
        self.phase: int | None = None
        self.set_phase(None)

    # -- parameter bookkeeping --------------------------------------------

    def image_parameters(self) -> list[Parameter]:
        return (self.relation.base_parameters()
                + self.image_action_cls.parameters()
                + self.image_activity_cls.parameters())

    def text_parameters(self) -> list[Parameter]:
        return (self.image2text.parameters()
                + self.relation.adapter_parameters()
                + self.text_activity_cls.parameters()
                + [self.tau.param])

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        rel = self.relation
        if rel.kind == "attention":
            out += [("image.relation.ln.gain", rel.ln.gain),
                    ("image.relation.ln.bias", rel.ln.bias)]
            rel_maps = [("wq", rel.wq), ("wk", rel.wk), ("wv", rel.wv), ("wo", rel.wo)]
        else:
            rel_maps = [("we", rel.we), ("w1", rel.w1), ("w2", rel.w2)]
        for name, lin in rel_maps:
            out += [(f"image.relation.{name}.weight", lin.weight),
                    (f"image.relation.{name}.bias", lin.bias)]
        for name, lin in [("image.action_cls", self.image_action_cls),
                          ("image.activity_cls", self.image_activity_cls)]:
            out += [(f"{name}.weight", lin.weight), (f"{name}.bias", lin.bias)]

        i2t = self.image2text
        out += [("text.image2text.linear1.weight", i2t.linear1.weight),
                ("text.image2text.linear1.bias", i2t.linear1.bias)]
        for i, layer in enumerate(i2t.encoder_layers):
            pre = f"text.image2text.enc{i}"
            out += [(f"{pre}.ln1.gain", layer.ln1.gain), (f"{pre}.ln1.bias", layer.ln1.bias)]
            for nm, lin in [("wq", layer.attn.wq), ("wk", layer.attn.wk),
                            ("wv", layer.attn.wv), ("wo", layer.attn.wo)]:
                out += [(f"{pre}.attn.{nm}.weight", lin.weight),
                        (f"{pre}.attn.{nm}.bias", lin.bias)]
            out += [(f"{pre}.ln2.gain", layer.ln2.gain), (f"{pre}.ln2.bias", layer.ln2.bias),
                    (f"{pre}.ffn.lin1.weight", layer.ffn.lin1.weight),
                    (f"{pre}.ffn.lin1.bias", layer.ffn.lin1.bias),
                    (f"{pre}.ffn.lin2.weight", layer.ffn.lin2.weight),
                    (f"{pre}.ffn.lin2.bias", layer.ffn.lin2.bias)]
        out += [("text.image2text.linear2.weight", i2t.linear2.weight),
                ("text.image2text.linear2.bias", i2t.linear2.bias)]
        adapted_names = ("wq", "wk", "wv") if rel.kind == "attention" else ("we", "w1", "w2")
        for name, adapter in zip(adapted_names, rel.adapters):
            out += [(f"text.adapter.{name}.A", adapter.A),
                    (f"text.adapter.{name}.B", adapter.B)]
        out += [("text.activity_cls.weight", self.text_activity_cls.weight),
                ("text.activity_cls.bias", self.text_activity_cls.bias),
                ("text.tau", self.tau.param)]
        return out

    def set_phase(self, phase: int | None) -> None:
        """Set trainability flags per the phase freezing rules.

        Gradient buffers are cleared so the frozen-parameter zero-grad
        checks start from a clean slate.
        """
        image_on = phase == 1
        text_on = phase == 2
        for p in self.image_parameters():
            p.trainable = image_on
            p.zero_grad()
        for p in self.text_parameters():
            p.trainable = text_on
            p.zero_grad()
        self.phase = phase

    def frozen_parameters(self) -> list[Parameter]:
        if self.phase == 1:
            return self.text_parameters()
        if self.phase == 2:
            return self.image_parameters()
        return self.image_parameters() + self.text_parameters()

    def assert_frozen_grads_zero(self) -> None:
        for p in self.frozen_parameters():
            if p.grad is not None and np.any(p.grad):
                raise StateError("a frozen parameter received gradient")

    def frozen_phase2_hash(self) -> str:
        """SHA-256 over every image-branch parameter plus the teacher table."""
        h = hashlib.sha256()
        for p in self.image_parameters():
            h.update(p.data.tobytes())
        h.update(self.teacher.embedding_matrix(range(self.n_actions)).tobytes())
        return h.hexdigest()

    # -- forward passes -----------------------------------------------------

    def _check_clip(self, clip: ActorClip) -> None:
        if clip.n_actors == 0 or clip.n_frames == 0:
            raise DataError(f"clip {clip.clip_id} has no actors or no frames")
        if clip.features.shape[2] != self.scenario.feature_dim:
            raise ShapeError(
                f"clip feature width {clip.features.shape[2]} != model width "
                f"{self.scenario.feature_dim}")

    def _actor_mean_matrix(self, n: int, f: int) -> Tensor:
        """Constant (N, F*N) map averaging each actor's rows over frames."""
        a = np.zeros((n, f * n))
        for fr in range(f):
            a[np.arange(n), fr * n + np.arange(n)] = 1.0 / f
        return Tensor(a)

    def forward_image(self, clip: ActorClip):
        """Image branch: (activity logits 1xA, action logits NxK, relation maps)."""
        self._check_clip(clip)
        n, f = clip.n_actors, clip.n_frames
        tokens = Tensor(clip.features.reshape(f * n, -1))
        refined, maps = self.relation.forward(tokens, n, f, use_adapters=False)
        activity_logits = self.image_activity_cls(mean_rows(refined))
        actor_feats = matmul(self._actor_mean_matrix(n, f), refined)
        action_logits = self.image_action_cls(actor_feats)
        return activity_logits, action_logits, maps

    def forward_text(self, clip: ActorClip, collect_distill: bool = False):
        """Text branch: (activity logits, distill features + labels or None, maps).

        The adapter runs per frame over that frame's actors; its branch
        outputs re-enter the shared relation module with adapters on.
        Distill features are taken from the key (middle) frame, or from
        all frames when distill_scope is "clip".
        """
        self._check_clip(clip)
        n, f = clip.n_actors, clip.n_frames
        branch_parts = []
        distill_parts = []
        key_frame = f // 2
        for fr in range(f):
            distill_f, branch_f = self.image2text.forward(Tensor(clip.features[fr]))
            branch_parts.append(branch_f)
            if collect_distill and (self.train_cfg.distill_scope == "clip" or fr == key_frame):
                distill_parts.append(distill_f)
        tokens = concat_rows(branch_parts) if f > 1 else branch_parts[0]
        refined, maps = self.relation.forward(tokens, n, f, use_adapters=True)
        activity_logits = self.text_activity_cls(mean_rows(refined))
        distill = None
        if collect_distill:
            student = concat_rows(distill_parts) if len(distill_parts) > 1 else distill_parts[0]
            labels = np.tile(clip.actions, len(distill_parts))
            distill = (student, labels)
        return activity_logits, distill, maps

    def predict(self, clip: ActorClip):
        """(activity id, per-branch score rows, per-actor action ids); teacher-free."""
        image_logits, action_logits, _ = self.forward_image(clip)
        text_logits, _, _ = self.forward_text(clip)
        fused = fuse_scores(image_logits.data, text_logits.data)
        scores = {"image": image_logits.data.copy(),
                  "text": text_logits.data.copy(),
                  "fused": fused}
        actions = action_logits.data.argmax(axis=1)
        return int(fused.argmax()), scores, actions


def build_model(scenario: Scenario, model_cfg: ModelConfig | None = None,
                train_cfg: TrainConfig | None = None) -> TwoBranchModel:
    return TwoBranchModel(scenario, model_cfg or ModelConfig(), train_cfg or TrainConfig())


def fuse_scores(image_scores: np.ndarray, text_scores: np.ndarray) -> np.ndarray:
    """Late fusion: elementwise sum of the raw per-branch activity scores."""
    a = np.asarray(image_scores, dtype=np.float64)
    b = np.asarray(text_scores, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse scores of shapes {a.shape} and {b.shape}")
    return a + b


# -- evaluation ---------------------------------------------------------------

def evaluate(model: TwoBranchModel, clips: list[ActorClip],
             branches: tuple[str, ...] = ("image", "text", "fused")) -> dict:
    """Branch-wise MCA/MPCA and confusion matrices over a clip set.

    The teacher must never be consulted here; a call-counter check
    enforces it.
    """
    if not clips:
        raise DataError("cannot evaluate on an empty clip set")
    calls_before = model.teacher.calls
    labels = np.array([c.activity for c in clips])
    preds: dict[str, list[int]] = {b: [] for b in branches}
    need_text = "text" in branches or "fused" in branches
    for clip in clips:
        image_logits, _, _ = model.forward_image(clip)
        scores = {"image": image_logits.data}
        if need_text:
            text_logits, _, _ = model.forward_text(clip)
            scores["text"] = text_logits.data
            scores["fused"] = fuse_scores(image_logits.data, text_logits.data)
        for b in branches:
            preds[b].append(int(scores[b].argmax()))
    if model.teacher.calls != calls_before:
        raise StateError("teacher was consulted during evaluation")
    out = {}
    for b in branches:
        p = np.array(preds[b])
        out[b] = {"mca": mca(p, labels), "mpca": mpca(p, labels),
                  "confusion": confusion_matrix(p, labels, model.n_activities)}
    return out


# -- training -----------------------------------------------------------------

def _batches(order: np.ndarray, size: int):
    for lo in range(0, len(order), size):
        yield order[lo:lo + size]


def _phase1_batch_loss(model: TwoBranchModel, batch: list[ActorClip]):
    total = None
    ce_act = ce_ind = 0.0
    for clip in batch:
        activity_logits, action_logits, _ = model.forward_image(clip)
        l_act = cross_entropy_logits(activity_logits, [clip.activity])
        l_ind = cross_entropy_logits(action_logits, clip.actions)
        ce_act += l_act.item()
        ce_ind += l_ind.item()
        term = add(l_act, l_ind)
        total = term if total is None else add(total, term)
    loss = mul(total, 1.0 / len(batch))
    return loss, ce_act / len(batch), ce_ind / len(batch)


def _phase2_batch_loss(model: TwoBranchModel, batch: list[ActorClip], lambda_kd: float):
    ce_total = None
    students = []
    labels = []
    for clip in batch:
        activity_logits, distill, _ = model.forward_text(clip, collect_distill=True)
        l_act = cross_entropy_logits(activity_logits, [clip.activity])
        ce_total = l_act if ce_total is None else add(ce_total, l_act)
        students.append(distill[0])
        labels.append(distill[1])
    ce = mul(ce_total, 1.0 / len(batch))
    student = concat_rows(students) if len(students) > 1 else students[0]
    teacher = Tensor(model.teacher.embedding_matrix(np.concatenate(labels)))
    l_kd = kd_loss(student, teacher, np.concatenate(labels), model.tau)
    if lambda_kd != 0.0:
        loss = add(ce, mul(l_kd, lambda_kd))
    else:
        loss = ce  # KD reported but contributes no gradient
    return loss, ce.item(), l_kd.item()


def phase1_train(model: TwoBranchModel, train_clips: list[ActorClip],
                 eval_clips: list[ActorClip], cfg: TrainConfig | None = None,
                 log_cb=None) -> list[dict]:
    """Train the image branch; returns one metrics row per epoch."""
    cfg = cfg or model.train_cfg
    if not train_clips:
        raise DataError("phase-1 training needs a non-empty dataset")
    model.set_phase(1)
    opt = AdamW(model.image_parameters(), lr=cfg.lr)
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        order = model.rng.permutation(len(train_clips))
        lr = warmup_lr(cfg.lr, epoch, cfg.warmup_epochs)
        sums = np.zeros(3)
        n_steps = 0
        for idx in _batches(order, cfg.batch_size):
            batch = [train_clips[i] for i in idx]
            loss, ce_act, ce_ind = _phase1_batch_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            model.assert_frozen_grads_zero()
            opt.step(lr=lr)
            sums += (loss.item(), ce_act, ce_ind)
            n_steps += 1
        res = evaluate(model, eval_clips, branches=("image",))
        row = {"epoch": epoch + 1, "phase": 1,
               "loss_total": float(sums[0] / n_steps),
               "loss_ce_activity": float(sums[1] / n_steps),
               "loss_ce_actions": float(sums[2] / n_steps),
               "loss_kd": "",
               "mca": res["image"]["mca"], "mpca": res["image"]["mpca"]}
        log.append(row)
        if log_cb:
            log_cb(row)
    model.trained_phases.add(1)
    model.set_phase(None)
    return log


def phase2_train(model: TwoBranchModel, train_clips: list[ActorClip],
                 eval_clips: list[ActorClip], cfg: TrainConfig | None = None,
                 log_cb=None) -> list[dict]:
    """Train the text branch against the frozen image branch and teacher."""
    cfg = cfg or model.train_cfg
    if 1 not in model.trained_phases:
        raise StateError("phase-2 training requires a phase-1 trained model")
    if not train_clips:
        raise DataError("phase-2 training needs a non-empty dataset")
    model.set_phase(2)
    frozen_before = model.frozen_phase2_hash()
    opt = AdamW(model.text_parameters(), lr=cfg.lr)
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        order = model.rng.permutation(len(train_clips))
        lr = warmup_lr(cfg.lr, epoch, cfg.warmup_epochs)
        sums = np.zeros(3)
        n_steps = 0
        for idx in _batches(order, cfg.batch_size):
            batch = [train_clips[i] for i in idx]
            loss, ce_act, l_kd = _phase2_batch_loss(model, batch, cfg.lambda_kd)
            opt.zero_grad()
            loss.backward()
            model.assert_frozen_grads_zero()
            opt.step(lr=lr)
            model.tau.clamp()
            sums += (loss.item(), ce_act, l_kd)
            n_steps += 1
        if model.frozen_phase2_hash() != frozen_before:
            raise StateError(f"frozen parameters changed during phase-2 epoch {epoch + 1}")
        res = evaluate(model, eval_clips)
        row = {"epoch": epoch + 1, "phase": 2,
               "loss_total": float(sums[0] / n_steps),
               "loss_ce_activity": float(sums[1] / n_steps),
               "loss_ce_actions": "",
               "loss_kd": float(sums[2] / n_steps),
               "mca": res["fused"]["mca"], "mpca": res["fused"]["mpca"]}
        log.append(row)
        if log_cb:
            log_cb(row)
    model.trained_phases.add(2)
    model.set_phase(None)
    return log


# -- parameter report ----------------------------------------------------------

def parameter_report(model: TwoBranchModel) -> dict:
    """Per-module parameter ledger with phase-2 trainable counts."""
    adapters = model.relation.adapters
    adapter_total = sum(a.A.data.size + a.B.data.size for a in adapters)
    formula_total = model.relation.count_trainable()
    if adapter_total != formula_total:
        raise StateError(
            f"adapter ledger mismatch: {adapter_total} vs formula {formula_total}")
    i2t_total = model.image2text.count_parameters()
    text_cls_total = model.text_activity_cls.n_params()
    rel_total = sum(p.data.size for p in model.relation.base_parameters())
    rows = [
        {"module": "image.relation", "total": rel_total, "trainable_phase2": 0},
        {"module": "image.action_classifier",
         "total": model.image_action_cls.n_params(), "trainable_phase2": 0},
        {"module": "image.activity_classifier",
         "total": model.image_activity_cls.n_params(), "trainable_phase2": 0},
        {"module": "text.image2text", "total": i2t_total, "trainable_phase2": i2t_total},
        {"module": "text.adapters", "total": adapter_total, "trainable_phase2": adapter_total},
        {"module": "text.activity_classifier",
         "total": text_cls_total, "trainable_phase2": text_cls_total},
        {"module": "text.temperature", "total": 1, "trainable_phase2": 1},
    ]
    r = model.train_cfg.r
    terms = " + ".join(f"{r}*({a.m_in}+{a.m_out})" for a in adapters)
    return {
        "rows": rows,
        "adapter_formula": f"{terms} = {formula_total}",
        "adapter_trainable": formula_total,
        "phase2_trainable_total": sum(row["trainable_phase2"] for row in rows),
    }


# -- checkpoints ----------------------------------------------------------------

def _config_dict(model: TwoBranchModel) -> dict:
    return {"scenario": model.scenario.to_dict(),
            "model": model.model_cfg.to_dict(),
            "train": model.train_cfg.to_dict()}


def save_checkpoint(model: TwoBranchModel, path) -> None:
    """Write a versioned binary checkpoint (JSON header + raw float64 blobs)."""
    named = model.named_parameters()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "config": _config_dict(model),
        "params": [{"name": n, "rows": p.data.shape[0], "cols": p.data.shape[1]}
                   for n, p in named],
        "rng_state": model.rng.bit_generator.state,
        "trained_phases": sorted(model.trained_phases),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path) -> TwoBranchModel:
    """Rebuild a model from a checkpoint; bit-exact parameter round-trip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint file: {path}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint format version {version} "
            f"(expected {CHECKPOINT_VERSION}) in {path}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint format version {header['format_version']} in {path}")
    cfg = header["config"]
    model = TwoBranchModel(Scenario.from_dict(cfg["scenario"]),
                           ModelConfig(**cfg["model"]),
                           TrainConfig(**cfg["train"]))
    named = model.named_parameters()
    if [n for n, _ in named] != [p["name"] for p in header["params"]]:
        raise CheckpointFormatError(f"parameter table mismatch in {path}")
    offset = 16 + hlen
    for spec, (_, param) in zip(header["params"], named):
        n_bytes = spec["rows"] * spec["cols"] * 8
        if param.data.shape != (spec["rows"], spec["cols"]):
            raise CheckpointFormatError(
                f"shape mismatch for {spec['name']} in {path}")
        flat = np.frombuffer(raw[offset:offset + n_bytes], dtype="<f8")
        if flat.size != spec["rows"] * spec["cols"]:
            raise CheckpointFormatError(f"truncated checkpoint: {path}")
        param.data = flat.reshape(spec["rows"], spec["cols"]).astype(np.float64)
        param.grad = np.zeros_like(param.data)
        offset += n_bytes
    model.rng.bit_generator.state = header["rng_state"]
    model.trained_phases = set(header["trained_phases"])
    return model


def metrics_csv(rows: list[dict], config: dict) -> str:
    """Render per-epoch metric rows as CSV with an embedded config header."""
    cols = ["epoch", "phase", "loss_total", "loss_ce_activity",
            "loss_ce_actions", "loss_kd", "mca", "mpca"]
    lines = [f"# groupact {__version__} config={json.dumps(config, sort_keys=True)}",
             ",".join(cols)]
    for row in rows:
        lines.append(",".join(repr(float(row[c])) if isinstance(row[c], float) else str(row[c])
                              for c in cols))
    return "\n".join(lines) + "\n"
