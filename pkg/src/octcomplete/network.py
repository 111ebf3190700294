"""Encoder-decoder completion network assembly.

The encoder runs bottom-up over the input octree; the decoder grows the
output octree top-down, level by level, attaching output-guided skip
connections to the encoder features of the same level. Levels up to the
coarsest decoder level (default 2) are always fully expanded, so structure
prediction and its loss start at level 3.

Training uses teacher forcing: the decoder expands along the ground-truth
structure while statuses and losses come from the predictions. Inference
expands along the rounded predicted statuses.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import FeatureMap
from .errors import DomainError, NumericalError
from .octree import (
    Octree,
    PointSet,
    coords_from_keys,
    find_in_sorted,
    neighbor_table,
    octree_from_codes,
)
from .skip import StatusMask, align_encoder_rows, guided_skip_add


@dataclass
class NetworkSpec:
    input_depth: int = 6
    output_depth: int = 6
    n_res: int = 2
    c0: int = 64
    c_max: int = 256
    task: str = "completion"       # completion | semantic
    num_classes: int = 0
    scene_head: bool = False
    skip_mode: str = "guided"      # guided | off | full
    mask_mode: str = "rounded"     # rounded | soft
    hidden: int = 32
    coarsest: int = 2

    @property
    def core_depth(self):
        return 6 if self.scene_head else self.input_depth

    def validate(self):
        if self.scene_head and self.input_depth != 8:
            raise DomainError("scene head requires input depth 8")
        if self.output_depth != self.core_depth:
            raise DomainError("output depth must match the core input depth")
        if self.core_depth <= self.coarsest + 1:
            raise DomainError("network needs at least two stages")
        if self.task == "semantic" and self.num_classes < 2:
            raise DomainError("semantic task needs num_classes >= 2")
        if self.task not in ("completion", "semantic"):
            raise DomainError(f"unknown task {self.task}")
        if self.skip_mode not in ("guided", "off", "full"):
            raise DomainError(f"unknown skip mode {self.skip_mode}")

    def channels(self):
        """Per-level channel schedule, core_depth down to coarsest."""
        c = {self.core_depth: self.c0}
        for l in range(self.core_depth, self.coarsest, -1):
            c[l - 1] = min(2 * c[l], self.c_max)
        return c


class OctreeBatch:
    """Merged row-major view over a batch of octrees of equal depth."""

    def __init__(self, octrees: List[Octree]):
        if not octrees:
            raise DomainError("empty batch")
        self.octrees = octrees
        self.depth = octrees[0].depth
        if any(o.depth != self.depth for o in octrees):
            raise DomainError("mixed octree depths in one batch")
        self._cache = {}

    @property
    def size(self):
        return len(self.octrees)

    def offsets(self, level):
        key = ("off", level)
        if key not in self._cache:
            lens = [o.levels[level].num_nodes for o in self.octrees]
            self._cache[key] = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        return self._cache[key]

    def rows(self, level):
        return int(self.offsets(level)[-1])

    def status(self, level):
        return np.concatenate([o.levels[level].status for o in self.octrees])

    def nonempty(self, level):
        return int(sum(o.levels[level].num_nonempty for o in self.octrees))

    def signal_fm(self):
        sig = np.vstack([o.signal for o in self.octrees])
        return FeatureMap(sig, level=self.depth)

    def _merge_tables(self, tables, level_of_targets):
        off = self.offsets(level_of_targets)
        merged = []
        for b, tab in enumerate(tables):
            t = tab.copy()
            t[t >= 0] += off[b]
            merged.append(t)
        return np.vstack(merged) if merged else np.zeros((0, 0), dtype=np.int64)

    def nbr_table(self, level):
        key = ("nbr", level)
        if key not in self._cache:
            self._cache[key] = self._merge_tables(
                [o.neighbor_table(level) for o in self.octrees], level
            )
        return self._cache[key]

    def child_table(self, level):
        key = ("child", level)
        if key not in self._cache:
            self._cache[key] = self._merge_tables(
                [o.child_table(level) for o in self.octrees], level + 1
            )
        return self._cache[key]


class DecoderState:
    """Dynamically grown output structure for a batch of samples."""

    def __init__(self, batch_size, coarsest):
        self.coarsest = coarsest
        n = 8**coarsest
        self.keys = {coarsest: [np.arange(n, dtype=np.uint64) for _ in range(batch_size)]}
        self.parent_sel = {}   # level -> merged selected parent rows at level-1
        self.parent_idx = {}   # level -> merged parent row per row at level
        self.batch_size = batch_size
        self._nbr = {}

    def offsets(self, level):
        lens = [len(k) for k in self.keys[level]]
        return np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)

    def rows(self, level):
        return int(sum(len(k) for k in self.keys[level]))

    def split(self, level, merged_vec):
        off = self.offsets(level)
        return [merged_vec[off[b] : off[b + 1]] for b in range(self.batch_size)]

    def subdivide(self, level, expand_mask):
        """Grow level+1 from the rows of `level` flagged in expand_mask."""
        off = self.offsets(level)
        masks = self.split(level, np.asarray(expand_mask) != 0)
        child_keys, sel, pidx = [], [], []
        for b, m in enumerate(masks):
            rows = np.flatnonzero(m)
            keys = (
                (self.keys[level][b][rows][:, None] << np.uint64(3))
                + np.arange(8, dtype=np.uint64)[None, :]
            ).ravel()
            child_keys.append(keys)
            sel.append(rows + off[b])
            pidx.append(np.repeat(rows + off[b], 8))
        self.keys[level + 1] = child_keys
        self.parent_sel[level + 1] = np.concatenate(sel) if sel else np.zeros(0, np.int64)
        self.parent_idx[level + 1] = (
            np.concatenate(pidx) if pidx else np.zeros(0, np.int64)
        )

    def nbr_table(self, level):
        # decoder stencils treat every stored row as valid: statuses are not
        # known yet when the level's convolutions run
        if level not in self._nbr:
            off = self.offsets(level)
            merged = []
            for b, keys in enumerate(self.keys[level]):
                tab = neighbor_table(keys, np.ones(len(keys), dtype=np.uint8), level)
                tab[tab >= 0] += off[b]
                merged.append(tab)
            self._nbr[level] = np.vstack(merged)
        return self._nbr[level]

    def align_to_encoder(self, enc_batch, level):
        eoff = enc_batch.offsets(level)
        out = []
        for b, keys in enumerate(self.keys[level]):
            idx = align_encoder_rows(enc_batch.octrees[b], keys, level)
            idx[idx >= 0] += eoff[b]
            out.append(idx)
        return np.concatenate(out)

    def gt_status(self, gt_batch, level):
        out = []
        for b, keys in enumerate(self.keys[level]):
            lv = gt_batch.octrees[b].levels[level]
            idx = find_in_sorted(lv.keys, keys)
            st = np.zeros(len(keys), dtype=np.float64)
            found = idx >= 0
            st[found] = lv.status[idx[found]]
            out.append(st)
        return np.concatenate(out)


@dataclass
class PredictedShape:
    depth: int
    octree: Octree
    leaf_codes: np.ndarray
    patches: Optional[np.ndarray] = None          # raw (nx, ny, nz, d) per leaf
    semantic_logits: Optional[np.ndarray] = None

    @property
    def empty(self):
        return len(self.leaf_codes) == 0


@dataclass
class DecodeResult:
    logits: Dict[int, FeatureMap] = field(default_factory=dict)
    probs: Dict[int, np.ndarray] = field(default_factory=dict)
    pred_status: Dict[int, np.ndarray] = field(default_factory=dict)
    gt_status: Dict[int, np.ndarray] = field(default_factory=dict)
    head_out: Optional[FeatureMap] = None
    head_rows: Optional[np.ndarray] = None
    skip_levels: List[int] = field(default_factory=list)
    state: Optional[DecoderState] = None
    shape: Optional[PredictedShape] = None


class CompletionNet:
    """The full encoder-decoder with output-guided skips."""

    def __init__(self, spec: NetworkSpec, seed=0, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.params = nn.Parameters(dtype)
        rng = np.random.default_rng(seed)
        p = self.params
        ch = spec.channels()
        co = spec.coarsest
        d = spec.core_depth

        self.head_layers = None
        if spec.scene_head:
            self.head_layers = {
                "conv8": nn.ConvBnRelu(p, "head.conv8", 4, 16, 3, 1, rng=rng),
                "conv7": nn.ConvBnRelu(p, "head.conv7", 16, 16, 3, 1, rng=rng),
                "rb7": nn.ResBlockStack(p, "head.rb7", 16, 32, 1, rng=rng),
                "down7": nn.ConvBnRelu(p, "head.down7", 32, spec.c0, 2, 2, rng=rng),
            }

        self.lift = None
        if not spec.scene_head and spec.n_res > 0:
            self.lift = nn.ConvBnRelu(p, "enc.lift", 4, spec.c0, 3, 1, rng=rng)

        self.enc_rb = {}
        self.enc_down = {}
        for l in range(d, co, -1):
            if spec.n_res > 0:
                self.enc_rb[l] = nn.ResBlockStack(
                    p, f"enc.rb{l}", ch[l], ch[l], spec.n_res, rng=rng
                )
            else:
                in_c = 4 if (l == d and not spec.scene_head) else ch[l]
                self.enc_rb[l] = nn.ConvBnRelu(p, f"enc.conv{l}", in_c, ch[l], 3, 1, rng=rng)
            self.enc_down[l] = nn.ConvBnRelu(
                p, f"enc.down{l}", ch[l], ch[l - 1], 2, 2, rng=rng
            )

        self.dec_up = {}
        self.dec_rb = {}
        self.pred = {}
        for l in range(co + 1, d + 1):
            self.dec_up[l] = nn.Deconv(p, f"dec.up{l}", ch[l - 1], ch[l], rng=rng)
            if spec.n_res > 0:
                self.dec_rb[l] = nn.ResBlockStack(
                    p, f"dec.rb{l}", ch[l], ch[l], spec.n_res, rng=rng
                )
            else:
                self.dec_rb[l] = nn.ConvBnRelu(p, f"dec.conv{l}", ch[l], ch[l], 3, 1, rng=rng)
            self.pred[l] = nn.MLPHead(p, f"dec.pred{l}", ch[l], spec.hidden, 1, rng=rng)

        out_c = 4 if spec.task == "completion" else spec.num_classes
        self.head = nn.MLPHead(p, "dec.head", ch[d], spec.hidden, out_c, rng=rng)

    # -- architecture accounting ------------------------------------------

    def layer_count(self):
        """Learnable layer depth: each conv and each MLP layer counts one."""
        total = 0
        if self.head_layers is not None:
            total += sum(layer.layer_count() for layer in self.head_layers.values())
        if self.lift is not None:
            total += self.lift.layer_count()
        for l in self.enc_rb:
            total += self.enc_rb[l].layer_count() + self.enc_down[l].layer_count()
        for l in self.dec_up:
            total += (
                self.dec_up[l].layer_count()
                + self.dec_rb[l].layer_count()
                + self.pred[l].layer_count()
            )
        total += self.head.layer_count()
        return total

    # -- encoder -----------------------------------------------------------

    def scene_input_head(self, batch: OctreeBatch, train=False):
        """§-style depth-8 input block producing 64-channel features at depth 6."""
        if batch.depth != 8:
            raise DomainError("scene input head expects depth-8 octrees")
        hl = self.head_layers
        x = batch.signal_fm()
        x = hl["conv8"].forward(x, batch.nbr_table(8), train)
        x = nn.max_pool(x, batch.child_table(7))
        x.level = 7
        x = hl["conv7"].forward(x, batch.nbr_table(7), train)
        x = hl["rb7"].forward(x, batch.nbr_table(7), train)
        x = hl["down7"].forward(x, batch.child_table(6), train)
        x.level = 6
        return x

    def encode(self, batch: OctreeBatch, train=False):
        """Bottom-up pass; returns the latent code and per-level skip features."""
        spec = self.spec
        if batch.depth != spec.input_depth:
            raise DomainError(
                f"octree depth {batch.depth} != spec input depth {spec.input_depth}"
            )
        if spec.scene_head:
            x = self.scene_input_head(batch, train)
        else:
            x = batch.signal_fm()
            if self.lift is not None:
                x = self.lift.forward(x, batch.nbr_table(spec.core_depth), train)
        feats = {}
        for l in range(spec.core_depth, spec.coarsest, -1):
            x = self.enc_rb[l].forward(x, batch.nbr_table(l), train)
            feats[l] = x
            x = self.enc_down[l].forward(x, batch.child_table(l - 1), train)
            x.level = l - 1
        return x, feats

    # -- decoder -----------------------------------------------------------

    def decode(
        self,
        code,
        enc_batch,
        enc_feats,
        gt_batch=None,
        train=False,
        expand_cap=8.0,
    ):
        """Top-down growth of the output octree.

        Train mode (teacher forcing) expands along gt_batch structure while
        statuses and losses come from predictions; inference expands along
        the rounded predictions, guarded by `expand_cap` times the input's
        nonempty count per level.
        """
        spec = self.spec
        co = spec.coarsest
        d = spec.output_depth
        if train and gt_batch is None:
            raise DomainError("train-mode decode needs the ground-truth batch")
        res = DecodeResult(state=DecoderState(enc_batch.size, co))
        ds = res.state

        x = ad.row_gather(code, ds.align_to_encoder(enc_batch, co))
        x.level = co

        for l in range(co + 1, d + 1):
            if l == co + 1:
                expand = np.ones(ds.rows(co), dtype=np.float64)
            elif train:
                expand = res.gt_status[l - 1]
            else:
                expand = res.pred_status[l - 1]
                cap = expand_cap * max(enc_batch.nonempty(min(l - 1, enc_batch.depth)), 64)
                if expand.sum() > cap:
                    raise NumericalError(
                        f"decoder explosion at level {l - 1}: "
                        f"{int(expand.sum())} nonempty nodes exceeds cap {int(cap)}"
                    )
            if expand.sum() == 0:
                return res  # nothing predicted nonempty; empty shape
            ds.subdivide(l - 1, expand)
            x = self.dec_up[l].forward(x, ds.parent_sel[l], train)

            if spec.skip_mode != "off":
                align = ds.align_to_encoder(enc_batch, l)
                if spec.skip_mode == "full" or l == co + 1:
                    mask_vals = np.ones(ds.rows(l - 1), dtype=np.float64)
                elif spec.mask_mode == "soft":
                    mask_vals = res.probs[l - 1]
                else:
                    mask_vals = res.pred_status[l - 1]
                x = guided_skip_add(
                    x,
                    enc_feats[l],
                    align,
                    ds.parent_idx[l],
                    StatusMask(l - 1, mask_vals),
                )
                res.skip_levels.append(l)

            x = self.dec_rb[l].forward(x, ds.nbr_table(l), train)
            logits, probs = nn.predict_status(x, self.pred[l])
            res.logits[l] = logits
            res.probs[l] = probs
            res.pred_status[l] = nn.round_status(probs)
            if gt_batch is not None:
                res.gt_status[l] = ds.gt_status(gt_batch, l)

        rows_sel = np.flatnonzero(
            (res.gt_status[d] if train else res.pred_status[d]) > 0
        )
        res.head_rows = rows_sel
        if len(rows_sel):
            head_in = ad.row_gather(x, rows_sel)
            res.head_out = self.head.forward(head_in)
        return res

    # -- single-sample inference ------------------------------------------

    def complete(self, octree, expand_cap=8.0):
        """Run the network on one input octree and build the predicted shape."""
        batch = OctreeBatch([octree])
        with ad.Tape():
            code, feats = self.encode(batch, train=False)
            res = self.decode(code, batch, feats, train=False, expand_cap=expand_cap)
        d = self.spec.output_depth
        if d not in res.pred_status or res.head_out is None:
            return PredictedShape(
                depth=d,
                octree=None,
                leaf_codes=np.zeros(0, dtype=np.uint64),
            )
        keys = res.state.keys[d][0]
        leaf_codes = keys[res.head_rows]
        shape = PredictedShape(
            depth=d,
            octree=octree_from_codes(leaf_codes, d),
            leaf_codes=leaf_codes,
        )
        out = res.head_out.values
        if self.spec.task == "completion":
            shape.patches = np.asarray(out, dtype=np.float64)
        else:
            shape.semantic_logits = np.asarray(out, dtype=np.float64)
        res.shape = shape
        return shape


# -- patch sampling ---------------------------------------------------------

_CUBE_CORNERS = np.array(
    [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64
)
_CUBE_EDGES = [
    (0, 1), (0, 2), (0, 4), (1, 3), (1, 5), (2, 3),
    (2, 6), (3, 7), (4, 5), (4, 6), (5, 7), (6, 7),
]


def _plane_cell_polygon(normal, disp, h):
    """Vertices of the plane/cell intersection in node-local coordinates."""
    corners = _CUBE_CORNERS * h
    s = corners @ normal - disp
    pts = []
    for i, j in _CUBE_EDGES:
        if (s[i] < 0) != (s[j] < 0):
            t = s[i] / (s[i] - s[j])
            pts.append(corners[i] + t * (corners[j] - corners[i]))
    for i in range(8):
        if s[i] == 0.0:
            pts.append(corners[i])
    if len(pts) < 3:
        return None
    pts = np.unique(np.round(np.array(pts), 12), axis=0)
    if len(pts) < 3:
        return None
    # order around the polygon in a plane basis
    a = np.array([1.0, 0.0, 0.0])
    if abs(normal[0]) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    center = pts.mean(axis=0)
    rel = pts - center
    ang = np.arctan2(rel @ v, rel @ u)
    return pts[np.argsort(ang)]


def sample_points(shape: PredictedShape, samples_per_node=4, seed=0) -> PointSet:
    """Sample points on the clipped planar patch of every nonempty leaf.

    Falls back to the node center projected onto the plane when the plane
    misses the cell.
    """
    if shape.patches is None:
        raise DomainError("shape carries no planar patches")
    if shape.empty:
        raise DomainError("empty predicted shape")
    rng = np.random.default_rng(seed)
    n_cells = 1 << shape.depth
    h = 0.5 / n_cells
    xs, ys, zs = coords_from_keys(shape.leaf_codes)
    centers = np.stack([xs, ys, zs], axis=1).astype(np.float64)
    centers = (centers + 0.5) / n_cells

    normals = shape.patches[:, :3].copy()
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    bad = norms[:, 0] < 1e-9
    normals[bad] = (0.0, 0.0, 1.0)
    norms[bad] = 1.0
    normals /= norms
    disp = shape.patches[:, 3] * h  # displacement in node-local length units

    positions, out_normals = [], []
    for i in range(len(centers)):
        poly = _plane_cell_polygon(normals[i], disp[i], h)
        if poly is None:
            pts = np.tile(normals[i] * disp[i], (max(1, samples_per_node), 1))[:1]
        elif samples_per_node == 1:
            pts = poly.mean(axis=0, keepdims=True)
        else:
            # fan triangulation, area-weighted uniform sampling
            v0 = poly[0]
            tri_b = poly[1:-1] - v0
            tri_c = poly[2:] - v0
            areas = 0.5 * np.linalg.norm(np.cross(tri_b, tri_c), axis=1)
            if areas.sum() <= 0:
                pts = poly.mean(axis=0, keepdims=True)
            else:
                which = rng.choice(len(areas), size=samples_per_node, p=areas / areas.sum())
                r1 = np.sqrt(rng.random(samples_per_node))
                r2 = rng.random(samples_per_node)
                pts = (
                    v0
                    + (r1 * (1 - r2))[:, None] * tri_b[which]
                    + (r1 * r2)[:, None] * tri_c[which]
                )
        positions.append(pts + centers[i])
        out_normals.append(np.tile(normals[i], (len(pts), 1)))
    positions = np.clip(np.vstack(positions), 0.0, 1.0)
    return PointSet(positions=positions, normals=np.vstack(out_normals))
