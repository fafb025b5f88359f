"""Deterministic synthetic co-salient videos.

Each identity is a textured shape with its own hue.  A video moves the shape
smoothly over clutter made of the same kind of textured shapes, re-drawn
independently every frame.  Some of the clutter borrows the exact look of
other identities.  The object is therefore the only thing that is
consistent across time, which is exactly the cue co-segmentation attention
is meant to pick up; appearance alone does not separate it from clutter.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import ctf

KINDS = ("disk", "bar", "blob")
MIN_SIZE, MAX_SIZE = 0.1, 0.4
LOOKALIKES_PER_FRAME = (1, 2)  # inclusive range of look-alike distractors drawn per frame


@dataclass(frozen=True)
class IdentitySpec:
    kind: str
    texture_seed: int
    hue: tuple
    size: float  # object height as a fraction of frame height

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not MIN_SIZE <= self.size <= MAX_SIZE:
            raise ValueError(f"size {self.size} outside [{MIN_SIZE}, {MAX_SIZE}]")


@dataclass(frozen=True)
class Nuisance:
    start: tuple  # object centre (y, x) in pixels at frame 0
    velocity: tuple = (0.0, 0.0)  # pixels per frame
    wobble: float = 0.0  # amplitude (pixels) of a slow horizontal sway
    gain: float = 1.0
    clutter_seed: int = 0
    occluder: bool = False
    occluder_x: float = 0.5  # occluder column centre, fraction of width
    occluder_width: float = 0.15  # fraction of width
    lookalikes: tuple = ()  # IdentitySpecs whose appearance clutter may copy


@dataclass
class SnippetSample:
    frames: np.ndarray  # [N, 3, H, W] in [0, 1]
    gt_masks: np.ndarray  # [N, 1, H, W] binary
    identity: int
    snippet_id: int


def gen_identities(count: int, seed: int) -> list[IdentitySpec]:
    if count < 2:
        raise ValueError("need at least 2 identities")
    rng = np.random.default_rng(seed)
    tex = rng.choice(2**31 - 1, size=count, replace=False)
    # spread hues around the colour wheel, then jitter
    offsets = (np.arange(count) + rng.uniform(0, 1)) / count
    order = rng.permutation(count)
    specs = []
    for i in range(count):
        h = (offsets[order[i]] + rng.uniform(-0.2, 0.2) / count) % 1.0
        specs.append(
            IdentitySpec(
                kind=KINDS[int(rng.integers(len(KINDS)))],
                texture_seed=int(tex[i]),
                hue=tuple(float(c) for c in _hue_to_rgb(h, rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0))),
                size=float(rng.uniform(0.28, 0.38)),
            )
        )
    return specs


def _hue_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _axes(spec: IdentitySpec, height: int) -> tuple[float, float]:
    a = spec.size * height / 2
    if spec.kind == "disk":
        return a, a * 0.8
    if spec.kind == "bar":
        return a * 1.2, a * 0.5
    return a, a * 0.9


def half_extents(spec: IdentitySpec, height: int) -> tuple[float, float]:
    """Half height / half width in pixels of the shape's bounding box."""
    a, b = _axes(spec, height)
    if spec.kind == "blob":
        # lobes reach radius 1.2 in the (u, 1.25 v) metric
        return 1.2 * a, 1.2 * b / 1.25
    return a, b


def _shape_coords(kind: str, a: float, b: float, cy: float, cx: float, height: int, width: int, phase: float):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (yy + 0.5 - cy) / a
    v = (xx + 0.5 - cx) / b
    if kind == "disk":
        inside = u * u + v * v <= 1.0
    elif kind == "bar":
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    else:
        r = np.hypot(u, v * 1.25)
        theta = np.arctan2(u, v)
        inside = r <= 1.0 + 0.2 * np.sin(3 * theta + phase)
    return inside, u, v


def _texture(seed: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smooth pattern in [-1, 1] attached to the object's own coordinates."""
    rng = np.random.default_rng(seed)
    out = np.zeros_like(u)
    for _ in range(3):
        fu, fv = rng.uniform(1.5, 4.5, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        out += np.sin(fu * u * np.pi + fv * v * np.pi * rng.choice([-1, 1]) + ph)
    return out / 3.0


def object_layer(spec: IdentitySpec, center: tuple, height: int, width: int):
    """Rasterise one identity: returns (coverage mask [H, W] bool, rgb [3, H, W])."""
    a, b = _axes(spec, height)
    phase = (spec.texture_seed % 997) / 997 * 2 * np.pi
    inside, u, v = _shape_coords(spec.kind, a, b, center[0], center[1], height, width, phase)
    pattern = _texture(spec.texture_seed, u, v)
    hue = np.asarray(spec.hue).reshape(3, 1, 1)
    rgb = np.clip(hue * (0.7 + 0.3 * pattern)[None], 0.0, 1.0)
    return inside, rgb


def occluder_columns(nuisance: Nuisance, width: int) -> tuple[int, int]:
    half = max(1, int(round(nuisance.occluder_width * width / 2)))
    c = int(round(nuisance.occluder_x * width))
    return max(0, c - half), min(width, c + half)


def trajectory(nuisance: Nuisance, n_frames: int) -> np.ndarray:
    t = np.arange(n_frames, dtype=np.float64)
    cy = nuisance.start[0] + nuisance.velocity[0] * t
    cx = nuisance.start[1] + nuisance.velocity[1] * t + nuisance.wobble * np.sin(t * 0.7)
    return np.stack([cy, cx], axis=1)


def _clutter(seed: int, frame: int, height: int, width: int, lookalikes: tuple = ()) -> np.ndarray:
    rng = np.random.default_rng([seed, frame])
    img = np.empty((3, height, width))
    img[:] = rng.uniform(0.2, 0.5, size=(3, 1, 1))
    img += rng.normal(0.0, 0.04, size=img.shape)
    for _ in range(int(rng.integers(5, 9))):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        size = rng.uniform(0.12, 0.3)
        fake = IdentitySpec(
            kind=kind,
            texture_seed=int(rng.integers(2**31 - 1)),
            hue=tuple(float(c) for c in _hue_to_rgb(rng.uniform(), rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0))),
            size=float(size),
        )
        center = (rng.uniform(0, height), rng.uniform(0, width))
        inside, rgb = object_layer(fake, center, height, width)
        img = np.where(inside[None], rgb, img)
    if lookalikes:
        # one or two copies of other identities, placed anywhere (edges may crop them)
        lo, hi = LOOKALIKES_PER_FRAME
        for _ in range(int(rng.integers(lo, hi + 1))):
            spec = lookalikes[int(rng.integers(len(lookalikes)))]
            center = (rng.uniform(0, height), rng.uniform(0, width))
            inside, rgb = object_layer(spec, center, height, width)
            img = np.where(inside[None], rgb, img)
    return np.clip(img, 0.0, 1.0)


def render_snippet(spec: IdentitySpec, nuisance: Nuisance, N: int, H: int, W: int, identity: int = 0, snippet_id: int = 0) -> SnippetSample:
    if N < 2:
        raise ValueError("a snippet needs at least 2 frames")
    centers = trajectory(nuisance, N)
    hy, hx = half_extents(spec, H)
    lo_y, hi_y = centers[:, 0].min() - hy, centers[:, 0].max() + hy
    lo_x, hi_x = centers[:, 1].min() - hx, centers[:, 1].max() + hx
    if lo_y < 0 or lo_x < 0 or hi_y > H or hi_x > W:
        raise ValueError("object leaves the frame along its trajectory")
    frames = np.empty((N, 3, H, W))
    masks = np.zeros((N, 1, H, W))
    occ = np.zeros((H, W), dtype=bool)
    if nuisance.occluder:
        c0, c1 = occluder_columns(nuisance, W)
        occ[:, c0:c1] = True
    for t in range(N):
        img = _clutter(nuisance.clutter_seed, t, H, W, nuisance.lookalikes)
        inside, rgb = object_layer(spec, tuple(centers[t]), H, W)
        img = np.where(inside[None], rgb, img)
        img = np.clip(img * nuisance.gain, 0.0, 1.0)
        if nuisance.occluder:
            img = np.where(occ[None], 0.5, img)
        frames[t] = img
        masks[t, 0] = inside & ~occ
        if not masks[t].any():
            raise ValueError("object fully occluded")
    return SnippetSample(frames, masks, identity, snippet_id)


def sample_nuisance(
    spec: IdentitySpec, n_frames: int, H: int, W: int, rng: np.random.Generator, lookalikes: tuple = ()
) -> Nuisance:
    """Random trajectory / gain / clutter / occluder that keeps the object inside the frame."""
    hy, hx = half_extents(spec, H)
    wobble = float(rng.uniform(0.0, 1.5))
    span_y = H - 2 * hy
    span_x = W - 2 * hx - 2 * wobble
    vy = float(rng.uniform(-1, 1) * min(2.0, 0.8 * span_y / max(n_frames - 1, 1)))
    vx = float(rng.uniform(-1, 1) * min(0.8, 0.5 * max(span_x, 0) / max(n_frames - 1, 1)))
    path_y = abs(vy) * (n_frames - 1)
    path_x = abs(vx) * (n_frames - 1)
    y0 = hy + rng.uniform(0, max(span_y - path_y, 0)) + (path_y if vy < 0 else 0)
    x0 = hx + wobble + rng.uniform(0, max(span_x - path_x, 0)) + (path_x if vx < 0 else 0)
    occluded = bool(rng.uniform() < 0.3)
    return Nuisance(
        start=(float(y0), float(x0)),
        velocity=(vy, vx),
        wobble=wobble,
        gain=float(rng.uniform(0.7, 1.0)),
        clutter_seed=int(rng.integers(2**31 - 1)),
        occluder=occluded,
        occluder_x=float(rng.uniform(0.3, 0.7)),
        occluder_width=0.12,
        lookalikes=tuple(lookalikes),
    )


@dataclass
class Dataset:
    identities: list
    train: list = field(default_factory=list)
    query: list = field(default_factory=list)
    gallery: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @property
    def train_ids(self) -> list[int]:
        return sorted({s.identity for s in self.train})

    def train_label_map(self) -> dict[int, int]:
        return {gid: i for i, gid in enumerate(self.train_ids)}

    def splits(self) -> dict[str, list]:
        return {"train": self.train, "query": self.query, "gallery": self.gallery}


def make_dataset(num_ids: int, snippets_per_id: int, N: int, H: int, W: int, seed: int, train_fraction: float = 0.5) -> Dataset:
    """Identity-disjoint train / test split; each test identity splits its
    snippets into query and gallery halves (at least one of each)."""
    if snippets_per_id < 2:
        raise ValueError("need at least 2 snippets per identity")
    n_train = int(round(num_ids * train_fraction))
    if n_train < 2 or num_ids - n_train < 2:
        raise ValueError(f"{num_ids} identities cannot form train and test splits of >= 2 identities")
    specs = gen_identities(num_ids, seed)
    ds = Dataset(specs, params=dict(num_ids=num_ids, snippets_per_id=snippets_per_id, N=N, H=H, W=W, seed=seed))
    sid = 0
    for ident, spec in enumerate(specs):
        n_query = max(1, snippets_per_id // 2)
        # look-alike clutter comes from the other identities of the same split
        group = range(n_train) if ident < n_train else range(n_train, num_ids)
        others = tuple(specs[i] for i in group if i != ident)
        for j in range(snippets_per_id):
            rng = np.random.default_rng([seed, ident, j, 7])
            sample = render_snippet(spec, sample_nuisance(spec, N, H, W, rng, others), N, H, W, ident, sid)
            if ident < n_train:
                ds.train.append(sample)
            elif j < n_query:
                ds.query.append(sample)
            else:
                ds.gallery.append(sample)
            sid += 1
    return ds


@dataclass
class Batch:
    frames: np.ndarray  # [B, N, 3, H, W]
    gt_masks: np.ndarray  # [B, N, 1, H, W]
    labels: np.ndarray  # identity ids
    frame_indices: np.ndarray  # [B, N]


def select_frames(length: int, N: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    if N > length:
        raise ValueError(f"cannot take {N} frames from a {length}-frame video")
    if mode == "sequential":
        s = int(rng.integers(0, length - N + 1))
        return np.arange(s, s + N)
    if mode == "random":
        return np.sort(rng.choice(length, size=N, replace=False))
    raise ValueError(f"unknown frame selection mode {mode!r}")


def sample_batch(split: list, P: int, K_s: int, frame_select: str, N: int, seed) -> Batch:
    """P identities x K_s snippets each, N frames per snippet."""
    rng = np.random.default_rng(seed)
    by_id: dict[int, list] = {}
    for s in split:
        by_id.setdefault(s.identity, []).append(s)
    eligible = sorted(i for i, v in by_id.items() if len(v) >= K_s)
    if P < 1 or K_s < 1 or len(eligible) < P:
        raise ValueError(f"split cannot supply {P} identities with {K_s} snippets each")
    chosen = rng.choice(eligible, size=P, replace=False)
    frames, masks, labels, idx = [], [], [], []
    for ident in chosen:
        pool = by_id[int(ident)]
        for k in rng.choice(len(pool), size=K_s, replace=False):
            s = pool[int(k)]
            sel = select_frames(s.frames.shape[0], N, frame_select, rng)
            frames.append(s.frames[sel])
            masks.append(s.gt_masks[sel])
            labels.append(s.identity)
            idx.append(sel)
    return Batch(np.stack(frames), np.stack(masks), np.array(labels), np.stack(idx))


def eval_stack(split: list, N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frames [S, N, ...] from the first N frames of every snippet, masks, identities."""
    frames = np.stack([s.frames[:N] for s in split])
    masks = np.stack([s.gt_masks[:N] for s in split])
    return frames, masks, np.array([s.identity for s in split])


# -- on-disk layout ---------------------------------------------------------


def save_dataset(ds: Dataset, root: str | os.PathLike) -> str:
    """Writes ``manifest`` (id, split, path, identity per line) and CTF1 files per snippet."""
    os.makedirs(root, exist_ok=True)
    lines = ["# " + " ".join(f"{k}={v}" for k, v in ds.params.items())]
    for split, items in ds.splits().items():
        for s in items:
            rel = f"snippets/{s.snippet_id:05d}"
            os.makedirs(os.path.join(root, "snippets"), exist_ok=True)
            ctf.save(os.path.join(root, rel + ".frames.ctf"), s.frames)
            ctf.save(os.path.join(root, rel + ".masks.ctf"), s.gt_masks)
            lines.append(f"{s.snippet_id}\t{split}\t{rel}\t{s.identity}")
    path = os.path.join(root, "manifest")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_dataset(root: str | os.PathLike) -> Dataset:
    with open(os.path.join(root, "manifest")) as fh:
        lines = fh.read().splitlines()
    params = {}
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            k, _, v = tok.partition("=")
            params[k] = int(v) if v.lstrip("-").isdigit() else v
        lines = lines[1:]
    ds = Dataset(gen_identities(params["num_ids"], params["seed"]) if "num_ids" in params else [], params=params)
    for line in lines:
        if not line.strip():
            continue
        sid, split, rel, ident = line.split("\t")
        sample = SnippetSample(
            ctf.load(os.path.join(root, rel + ".frames.ctf")),
            ctf.load(os.path.join(root, rel + ".masks.ctf")),
            int(ident),
            int(sid),
        )
        ds.splits()[split].append(sample)
    return ds
