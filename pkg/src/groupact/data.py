"""Synthetic group-activity scenarios and the evaluation metrics.

Each clip has N actors observed over F frames. One designated key actor
performs one of the key actions, which together with the side (left or
right team) determines the group activity; the other actors perform
filler actions. Per-frame actor features are built from orthonormal
action prototypes plus a side offset along a direction orthogonal to all
prototypes, a per-clip temporal drift, and Gaussian noise. With zero
noise both the per-actor actions and the activity are exactly decodable
from the features, so the construction has a known Bayes optimum.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DataError, UndefinedClassError

DEFAULT_ACTIONS = ("waiting", "setting", "digging", "falling", "spiking",
                   "blocking", "jumping", "moving", "standing")
DEFAULT_KEY_ACTIONS = ("setting", "spiking", "digging", "falling")
# activity kind implied by each key action
KEY_ACTION_KIND = {"setting": "set", "spiking": "spike",
                   "digging": "pass", "falling": "winpoint"}
SIDES = ("r", "l")

PROTO_SCALE = 2.0
SIDE_OFFSET = 0.5
DRIFT_SCALE = 0.1


@dataclass(frozen=True)
class Scenario:
    """Full description of a synthetic dataset; generation is a pure function of it."""

    actions: tuple[str, ...] = DEFAULT_ACTIONS
    key_actions: tuple[str, ...] = DEFAULT_KEY_ACTIONS
    actors_per_clip: int = 12
    frames: int = 3
    feature_dim: int = 128
    noise_sigma: float = 0.3
    seed: int = 0
    train_clips: int = 500
    test_clips: int = 200

    def __post_init__(self):
        if len(self.actions) < 2:
            raise ConfigError(f"need at least 2 actions, got {len(self.actions)}")
        if len(set(self.actions)) != len(self.actions):
            raise ConfigError("duplicate action labels")
        if not self.key_actions:
            raise ConfigError("need at least one key action")
        missing = [a for a in self.key_actions if a not in self.actions]
        if missing:
            raise ConfigError(f"key actions not in vocabulary: {missing}")
        if len(self.key_actions) >= len(self.actions):
            raise ConfigError("need at least one non-key filler action")
        if len(self.activities) < 2:
            raise ConfigError(f"need at least 2 activities, got {len(self.activities)}")
        if self.actors_per_clip < 1 or self.frames < 1:
            raise ConfigError("need at least one actor and one frame")
        if self.feature_dim < len(self.actions) + 1:
            raise ConfigError(
                f"feature_dim must be >= n_actions + 1 = {len(self.actions) + 1}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def activities(self) -> tuple[str, ...]:
        """Side x kind activity vocabulary, e.g. r_set ... l_winpoint."""
        return tuple(f"{side}_{KEY_ACTION_KIND.get(a, a)}"
                     for side in SIDES for a in self.key_actions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actions"] = list(self.actions)
        d["key_actions"] = list(self.key_actions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["actions"] = tuple(d["actions"])
        d["key_actions"] = tuple(d["key_actions"])
        return cls(**d)


@dataclass
class ActorClip:
    """One group-activity instance."""

    clip_id: int
    features: np.ndarray          # (frames, actors, feature_dim)
    actions: np.ndarray           # (actors,) int action ids
    activity: int                 # activity id
    side: int                     # 0 = right, 1 = left
    key_actor: int = 0

    @property
    def n_actors(self) -> int:
        return self.features.shape[1]

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def prototype_basis(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal action prototypes (one row per action) and side direction."""
    rng = np.random.default_rng([scenario.seed, 0, 0])
    k = len(scenario.actions)
    g = rng.standard_normal((scenario.feature_dim, k + 1))
    q, _ = np.linalg.qr(g)
    return q[:, :k].T.copy(), q[:, k].copy()


def generate_clip(scenario: Scenario, clip_id: int,
                  basis: tuple[np.ndarray, np.ndarray] | None = None) -> ActorClip:
    """Deterministically build one clip from (scenario, clip_id)."""
    protos, side_dir = prototype_basis(scenario) if basis is None else basis
    rng = np.random.default_rng([scenario.seed, 1, clip_id])
    activities = scenario.activities
    activity = clip_id % len(activities)
    n_kinds = len(scenario.key_actions)
    side, kind = divmod(activity, n_kinds)
    key_action = scenario.actions.index(scenario.key_actions[kind])

    n, f, d = scenario.actors_per_clip, scenario.frames, scenario.feature_dim
    key_actor = int(rng.integers(n))
    filler = [i for i, a in enumerate(scenario.actions) if a not in scenario.key_actions]
    actions = rng.choice(filler, size=n)
    actions[key_actor] = key_action

    drift = rng.standard_normal(d)
    drift /= np.linalg.norm(drift)
    side_sign = 1.0 if side == 0 else -1.0
    base = PROTO_SCALE * protos[actions] + side_sign * SIDE_OFFSET * side_dir

    features = np.empty((f, n, d))
    center = (f - 1) / 2.0
    for fr in range(f):
        features[fr] = base + DRIFT_SCALE * (fr - center) * drift
    if scenario.noise_sigma > 0:
        features += rng.normal(0.0, scenario.noise_sigma, size=features.shape)
    return ActorClip(clip_id, features, actions.astype(np.intp), activity, side, key_actor)


def generate(scenario: Scenario) -> tuple[list[ActorClip], list[ActorClip]]:
    """Build the train and test splits; clip ids are disjoint by construction."""
    basis = prototype_basis(scenario)
    train = [generate_clip(scenario, i, basis) for i in range(scenario.train_clips)]
    test = [generate_clip(scenario, scenario.train_clips + i, basis)
            for i in range(scenario.test_clips)]
    return train, test


# -- closed-form oracles ---------------------------------------------------

def oracle_action_predictions(clips: list[ActorClip], scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype action decoding for every (actor, frame) sample."""
    protos, _ = prototype_basis(scenario)
    scaled = PROTO_SCALE * protos
    preds, labels = [], []
    for clip in clips:
        flat = clip.features.reshape(-1, scenario.feature_dim)
        d2 = ((flat[:, None, :] - scaled[None, :, :]) ** 2).sum(axis=2)
        preds.append(d2.argmin(axis=1))
        labels.append(np.tile(clip.actions, clip.n_frames))
    return np.concatenate(preds), np.concatenate(labels)


def oracle_activity_predictions(clips: list[ActorClip], scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Decode the activity from features alone: nearest-prototype actions
    pick the key action, the side-direction projection picks the side."""
    protos, side_dir = prototype_basis(scenario)
    scaled = PROTO_SCALE * protos
    key_ids = np.array([scenario.actions.index(a) for a in scenario.key_actions])
    preds, labels = [], []
    for clip in clips:
        mean_feat = clip.features.mean(axis=0)          # (N, D) over frames
        d2 = ((mean_feat[:, None, :] - scaled[None, :, :]) ** 2).sum(axis=2)
        decoded = d2.argmin(axis=1)
        is_key = np.isin(decoded, key_ids)
        if is_key.sum() == 1:
            key_action = decoded[is_key][0]
        else:
            # ambiguous decode: fall back to the best (actor, key action) match
            actor, col = np.unravel_index(d2[:, key_ids].argmin(), (len(decoded), len(key_ids)))
            key_action = key_ids[col]
        kind = int(np.nonzero(key_ids == key_action)[0][0])
        side = 0 if clip.features.mean(axis=(0, 1)) @ side_dir > 0 else 1
        preds.append(side * len(key_ids) + kind)
        labels.append(clip.activity)
    return np.asarray(preds), np.asarray(labels)


# -- metrics ----------------------------------------------------------------

def mca(predictions, labels) -> float:
    """Multi-class accuracy: fraction of correct predictions."""
    p = np.asarray(predictions).reshape(-1)
    t = np.asarray(labels).reshape(-1)
    if p.size != t.size:
        raise DataError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size == 0:
        raise DataError("mca of an empty sample is undefined")
    return float((p == t).mean())


def mpca(predictions, labels) -> float:
    """Mean per-class accuracy: unweighted mean of per-class recalls."""
    p = np.asarray(predictions).reshape(-1)
    t = np.asarray(labels).reshape(-1)
    if p.size != t.size:
        raise DataError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size == 0:
        raise DataError("mpca of an empty sample is undefined")
    classes = np.unique(np.concatenate([p, t]))
    recalls = []
    for c in classes:
        support = t == c
        if not support.any():
            raise UndefinedClassError(f"class {c} predicted but absent from labels")
        recalls.append((p[support] == c).mean())
    return float(np.mean(recalls))


def confusion_matrix(predictions, labels, k: int) -> np.ndarray:
    """k x k count matrix: entry (i, j) counts true class i predicted as j."""
    p = np.asarray(predictions, dtype=np.intp).reshape(-1)
    t = np.asarray(labels, dtype=np.intp).reshape(-1)
    if p.size != t.size:
        raise DataError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k):
        raise DataError(f"class id outside [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def per_class_delta(matrix_a: np.ndarray, matrix_b: np.ndarray) -> np.ndarray:
    """Per-class difference of correct counts: diag(a) - diag(b)."""
    a, b = np.asarray(matrix_a), np.asarray(matrix_b)
    if a.shape != b.shape:
        raise DataError(f"confusion shape mismatch: {a.shape} vs {b.shape}")
    return np.diagonal(a) - np.diagonal(b)


# -- serialization -----------------------------------------------------------

def _encode_features(features: np.ndarray) -> str:
    return base64.b64encode(features.astype("<f8").tobytes()).decode("ascii")


def _decode_features(blob: str, shape: tuple[int, int, int]) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(blob), dtype="<f8")
    return arr.reshape(shape).astype(np.float64)


def clips_to_jsonl(clips: list[ActorClip], scenario: Scenario,
                   header_extra: dict | None = None,
                   embed_features: bool = True) -> str:
    """Serialize clips to JSON-lines: a header object, then one clip per line.

    With ``embed_features=False`` the features are omitted and each line
    carries ``regen_seed`` (the scenario seed) instead, so features can be
    regenerated from (scenario, clip_id). Feature byte order is
    little-endian float64, base64-encoded.
    """
    header = {"kind": "groupact-dataset", "scenario": scenario.to_dict()}
    if header_extra:
        header.update(header_extra)
    lines = [json.dumps(header, sort_keys=True)]
    for clip in clips:
        rec = {
            "clip_id": clip.clip_id,
            "actions": clip.actions.tolist(),
            "activity": clip.activity,
            "side": SIDES[clip.side],
            "frames": clip.n_frames,
            "feature_dim": clip.features.shape[2],
            "key_actor": clip.key_actor,
        }
        if embed_features:
            rec["features_b64"] = _encode_features(clip.features)
        else:
            rec["regen_seed"] = scenario.seed
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def save_clips(path, clips: list[ActorClip], scenario: Scenario,
               header_extra: dict | None = None, embed_features: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(clips_to_jsonl(clips, scenario, header_extra, embed_features))


def load_clips(path) -> tuple[list[ActorClip], Scenario, dict]:
    """Read a dataset file back; regenerates features where they were omitted."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise DataError(f"empty dataset file: {path}")
    header = json.loads(lines[0])
    if header.get("kind") != "groupact-dataset":
        raise DataError(f"not a dataset file: {path}")
    scenario = Scenario.from_dict(header["scenario"])
    basis = prototype_basis(scenario)
    clips = []
    for line in lines[1:]:
        rec = json.loads(line)
        shape = (rec["frames"], len(rec["actions"]), rec["feature_dim"])
        if "features_b64" in rec:
            features = _decode_features(rec["features_b64"], shape)
            clip = ActorClip(rec["clip_id"], features,
                             np.asarray(rec["actions"], dtype=np.intp),
                             rec["activity"], SIDES.index(rec["side"]),
                             rec.get("key_actor", 0))
        elif "regen_seed" in rec:
            regen = scenario if rec["regen_seed"] == scenario.seed else \
                Scenario.from_dict({**scenario.to_dict(), "seed": rec["regen_seed"]})
            clip = generate_clip(regen, rec["clip_id"],
                                 basis if regen is scenario else None)
            if clip.actions.tolist() != rec["actions"] or clip.activity != rec["activity"]:
                raise DataError(f"regenerated clip {rec['clip_id']} disagrees with stored labels")
        else:
            raise DataError(f"clip {rec.get('clip_id')} has neither features_b64 nor regen_seed")
        clips.append(clip)
    return clips, scenario, header


def dataset_summary(clips: list[ActorClip], scenario: Scenario) -> dict:
    """Class balance and closed-form oracle accuracies for a clip set."""
    counts = np.zeros(len(scenario.activities), dtype=int)
    for clip in clips:
        counts[clip.activity] += 1
    act_pred, act_true = oracle_action_predictions(clips, scenario)
    gr_pred, gr_true = oracle_activity_predictions(clips, scenario)
    return {
        "clips": len(clips),
        "activity_counts": {name: int(c) for name, c in zip(scenario.activities, counts)},
        "oracle_action_accuracy": mca(act_pred, act_true),
        "oracle_activity_accuracy": mca(gr_pred, gr_true),
    }
