#!/usr/bin/env python3
"""
MLSREG-KIT Coarse
Stage IIIa: ISS keypoints, FPFH descriptors, nearest-neighbour matching,
graph-reliability correspondence filtering and RANSAC rigid estimation.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from core import (
    DegenerateGeometryError, MissingAttributeError, PointCloud, RigidTransform, SpatialIndex,
    crop_aabb, estimate_normals, kabsch_batch, kabsch_fit, orient_normals_towards, ragged_covariances,
)
from preprocess import voxel_downsample

logger = logging.getLogger(__name__)

FPFH_BINS = 11
FPFH_MIN_NEIGHBORS = 5
RADIUS_CHUNK = 20_000
GROR_BLOCK = 1024
RANSAC_BATCH = 256


class CoarseRegistrationError(RuntimeError):
    """Coarse stage could not produce a trustworthy transform."""


@dataclass
class CoarseParams:
    iss_resolution_m: float = field(default=0.1, metadata={"range": (1e-3, 100.0)})
    iss_salient_radius_m: float = field(default=0.0, metadata={"range": (0.0, 1000.0)})
    iss_nonmax_radius_m: float = field(default=0.0, metadata={"range": (0.0, 1000.0)})
    iss_gamma21: float = field(default=0.975, metadata={"range": (0.0, 1.0)})
    iss_gamma32: float = field(default=0.975, metadata={"range": (0.0, 1.0)})
    iss_min_neighbors: int = field(default=5, metadata={"range": (3, 10_000)})
    # lambda3 / lambda1 floor for candidates, 0 disables it
    iss_min_salience: float = field(default=1e-3, metadata={"range": (0.0, 1.0)})
    max_keypoints: int = field(default=5000, metadata={"range": (3, 100_000)})
    normal_k: int = field(default=10, metadata={"range": (3, 200)})
    fpfh_radius_m: float = field(default=0.5, metadata={"range": (1e-3, 100.0)})
    gror_tau_m: float = field(default=0.1, metadata={"range": (1e-6, 100.0)})
    gror_k: int = field(default=800, metadata={"range": (3, 100_000)})
    gror_weighted: bool = False
    ransac_inlier_m: float = field(default=0.5, metadata={"range": (1e-6, 100.0)})
    ransac_confidence: float = field(default=0.999, metadata={"range": (0.5, 0.999999)})
    ransac_max_iterations: int = field(default=10_000, metadata={"range": (1, 10_000_000)})
    min_inliers: int = field(default=10, metadata={"range": (3, 100_000)})
    crop_margin_m: float = field(default=20.0, metadata={"range": (0.0, 10_000.0)})
    voxel_m: float = field(default=0.0, metadata={"range": (0.0, 100.0)})

    @property
    def salient_radius(self) -> float:
        return self.iss_salient_radius_m or 6.0 * self.iss_resolution_m

    @property
    def nonmax_radius(self) -> float:
        return self.iss_nonmax_radius_m or 4.0 * self.iss_resolution_m


# ============================================================================
#  TYPES
# ============================================================================

@dataclass
class Keypoint:
    index: int
    lambdas: Tuple[float, float, float]

    def __post_init__(self):
        l1, l2, l3 = self.lambdas
        if not (l1 >= l2 >= l3 >= 0):
            raise ValueError(f"keypoint {self.index}: eigenvalues {self.lambdas} are not ordered")


class Correspondence(NamedTuple):
    source: int
    target: int
    distance: float


@dataclass
class CorrespondenceSet:
    """Parallel arrays of source index, target index and descriptor distance."""

    source: np.ndarray
    target: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.intp).reshape(-1)
        self.target = np.asarray(self.target, dtype=np.intp).reshape(-1)
        self.distance = np.asarray(self.distance, dtype=np.float64).reshape(-1)
        if not (len(self.source) == len(self.target) == len(self.distance)):
            raise ValueError("correspondence arrays differ in length")
        if (self.distance < 0).any():
            raise ValueError("descriptor distances must be nonnegative")

    def __len__(self) -> int:
        return len(self.source)

    def __iter__(self) -> Iterator[Correspondence]:
        for s, t, d in zip(self.source, self.target, self.distance):
            yield Correspondence(int(s), int(t), float(d))

    def take(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.source[idx], self.target[idx], self.distance[idx])

    @classmethod
    def from_pairs(cls, pairs: Sequence[Correspondence]) -> "CorrespondenceSet":
        arr = np.array([(c.source, c.target, c.distance) for c in pairs], dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, 0].astype(np.intp), arr[:, 1].astype(np.intp), arr[:, 2])


@dataclass
class CompatibilityGraph:
    adjacency: np.ndarray
    reliability: np.ndarray


# ============================================================================
#  ISS KEYPOINTS
# ============================================================================

def _lex_less(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise lexicographic a < b on (x, y, z)."""
    return ((a[:, 0] < b[:, 0])
            | ((a[:, 0] == b[:, 0]) & (a[:, 1] < b[:, 1]))
            | ((a[:, 0] == b[:, 0]) & (a[:, 1] == b[:, 1]) & (a[:, 2] < b[:, 2])))


def _suppressed_by(value_i, value_j, xyz_i, xyz_j, rtol: float = 1e-9) -> np.ndarray:
    """True where j wins over i: larger value, or a tie broken by smaller coordinates."""
    tol = rtol * np.maximum(np.abs(value_i), np.abs(value_j))
    greater = value_j > value_i + tol
    tie = np.abs(value_j - value_i) <= tol
    return greater | (tie & _lex_less(xyz_j, xyz_i))


def detect_iss_keypoints(cloud: PointCloud, salient_radius_m: float, nonmax_radius_m: float,
                         gamma21: float = 0.975, gamma32: float = 0.975, min_neighbors: int = 5,
                         min_salience: float = 1e-3, max_keypoints: int = 5000) -> List[Keypoint]:
    """Intrinsic shape signature keypoints ordered by decreasing salience (smallest eigenvalue).

    Candidates also need lambda3 / lambda1 >= min_salience, which drops flat
    neighborhoods whose third eigenvalue is only noise; 0 keeps the plain ISS test.
    """
    if len(cloud) == 0:
        return []
    xyz = cloud.xyz
    index = SpatialIndex(xyz)
    lambdas = np.zeros((len(xyz), 3))
    counts = np.zeros(len(xyz), dtype=np.intp)
    for start in range(0, len(xyz), RADIUS_CHUNK):
        block = xyz[start:start + RADIUS_CHUNK]
        hits = index.radius(block, salient_radius_m)
        c, cov = ragged_covariances(xyz, hits)
        counts[start:start + len(block)] = c
        # eigvalsh is ascending: lambda3, lambda2, lambda1
        lambdas[start:start + len(block)] = np.maximum(np.linalg.eigvalsh(cov)[:, ::-1], 0.0)
    l1, l2, l3 = lambdas[:, 0], lambdas[:, 1], lambdas[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        candidate = ((counts >= min_neighbors) & (l1 > 0) & (l2 > 0)
                     & (l2 / l1 < gamma21) & (l3 / l2 < gamma32) & (l3 / l1 >= min_salience))
    cand = np.flatnonzero(candidate)
    if len(cand) == 0:
        return []

    cxyz = xyz[cand]
    salience = l3[cand]
    pairs = cKDTree(cxyz).query_pairs(nonmax_radius_m, output_type='ndarray')
    suppressed = np.zeros(len(cand), dtype=bool)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        j_wins = _suppressed_by(salience[i], salience[j], cxyz[i], cxyz[j])
        i_wins = _suppressed_by(salience[j], salience[i], cxyz[j], cxyz[i])
        suppressed[i[j_wins]] = True
        suppressed[j[i_wins]] = True
    keep = np.flatnonzero(~suppressed)

    # rank by salience, ties by coordinates, so the cap is order independent
    k = cxyz[keep]
    rank = np.lexsort((k[:, 2], k[:, 1], k[:, 0], -salience[keep]))
    keep = keep[rank][:max_keypoints]
    logger.debug("iss %s: %d candidates, %d keypoints", cloud.name, len(cand), len(keep))
    return [Keypoint(int(cand[q]), (float(l1[cand[q]]), float(l2[cand[q]]), float(l3[cand[q]]))) for q in keep]


# ============================================================================
#  FPFH
# ============================================================================

def pair_features(p1: np.ndarray, n1: np.ndarray, p2: np.ndarray, n2: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Darboux-frame angles (theta, alpha, phi) for point pairs, source chosen
    as the endpoint whose normal makes the smaller angle with the connecting line."""
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    a1 = np.einsum('ij,ij->i', n1, d) / safe
    a2 = np.einsum('ij,ij->i', n2, d) / safe
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a2, a1)
    v = np.cross(d, u)
    v_norm = np.linalg.norm(v, axis=1)
    ok = (v_norm > 0) & (dist > 0)
    v = v / np.where(v_norm > 0, v_norm, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum('ij,ij->i', v, other)
    theta = np.arctan2(np.einsum('ij,ij->i', w, other), np.einsum('ij,ij->i', u, other))
    return np.where(ok, theta, 0.0), np.where(ok, alpha, 0.0), np.where(ok, phi, 0.0)


def _bins(theta, alpha, phi) -> np.ndarray:
    """Flat bin ids into the 33-bin layout [theta | alpha | phi]."""
    b_theta = np.clip(np.floor(FPFH_BINS * (theta + math.pi) / (2 * math.pi)), 0, FPFH_BINS - 1)
    b_alpha = np.clip(np.floor(FPFH_BINS * (alpha + 1.0) * 0.5), 0, FPFH_BINS - 1)
    b_phi = np.clip(np.floor(FPFH_BINS * (phi + 1.0) * 0.5), 0, FPFH_BINS - 1)
    return np.stack([b_theta, FPFH_BINS + b_alpha, 2 * FPFH_BINS + b_phi], axis=1).astype(np.intp)


def _flatten(hits: List[List[int]], owners: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    counts = np.fromiter((len(h) for h in hits), dtype=np.intp, count=len(hits))
    flat = np.fromiter((q for h in hits for q in h), dtype=np.intp, count=int(counts.sum()))
    return np.repeat(owners, counts), flat


def compute_fpfh(cloud: PointCloud, keypoints: Sequence[int], feature_radius_m: float) -> Tuple[np.ndarray, np.ndarray]:
    """Two-pass FPFH at the keypoint indices.

    Returns (descriptors (K, 33), flagged). Each 11-bin block of a valid
    descriptor sums to 100; keypoints with fewer than 5 neighbours get a
    zero histogram and are flagged.
    """
    if cloud.normals is None:
        raise MissingAttributeError(f"{cloud.name}: FPFH needs normals")
    if not feature_radius_m > 0:
        raise ValueError(f"feature radius must be > 0, got {feature_radius_m}")
    kp = np.asarray(list(keypoints), dtype=np.intp)
    out = np.zeros((len(kp), 3 * FPFH_BINS))
    if len(kp) == 0:
        return out, np.zeros(0, dtype=bool)
    xyz, normals = cloud.xyz, cloud.normals
    index = SpatialIndex(xyz)

    kp_hits = [[q for q in h if q != p] for p, h in zip(kp, index.radius(xyz[kp], feature_radius_m))]
    flagged = np.array([len(h) < FPFH_MIN_NEIGHBORS for h in kp_hits])

    # simplified histograms for every point the second pass touches
    support = np.unique(np.concatenate([kp] + [np.asarray(h, dtype=np.intp) for h in kp_hits]))
    local = {int(p): i for i, p in enumerate(support)}
    spfh = np.zeros((len(support), 3 * FPFH_BINS))
    for start in range(0, len(support), RADIUS_CHUNK):
        block = support[start:start + RADIUS_CHUNK]
        hits = [[q for q in h if q != p] for p, h in zip(block, index.radius(xyz[block], feature_radius_m))]
        owner, other = _flatten(hits, np.arange(start, start + len(block)))
        if len(owner) == 0:
            continue
        src = support[owner]
        theta, alpha, phi = pair_features(xyz[src], normals[src], xyz[other], normals[other])
        bins = _bins(theta, alpha, phi)
        n_hits = np.bincount(owner - start, minlength=len(block)).astype(np.float64)
        inc = 100.0 / n_hits[owner - start]
        for col in range(3):
            np.add.at(spfh, (owner, bins[:, col]), inc)

    owner, other = _flatten(kp_hits, np.arange(len(kp)))
    dist = np.linalg.norm(xyz[kp[owner]] - xyz[other], axis=1)
    keep = dist > 0
    owner, other, dist = owner[keep], other[keep], dist[keep]
    k = np.bincount(owner, minlength=len(kp)).astype(np.float64)
    weights = (1.0 / dist) / np.maximum(k[owner], 1.0)
    cols = np.array([local[int(q)] for q in other], dtype=np.intp)
    w = sparse.csr_matrix((weights, (owner, cols)), shape=(len(kp), len(support)))
    own = np.array([local[int(p)] for p in kp], dtype=np.intp)
    fpfh = spfh[own] + w @ spfh

    for b in range(3):
        block = fpfh[:, b * FPFH_BINS:(b + 1) * FPFH_BINS]
        total = block.sum(axis=1, keepdims=True)
        fpfh[:, b * FPFH_BINS:(b + 1) * FPFH_BINS] = np.divide(100.0 * block, total, out=np.zeros_like(block),
                                                              where=total > 0)
    fpfh[flagged] = 0.0
    out[:] = fpfh
    return out, flagged


# ============================================================================
#  MATCHING AND GRAPH FILTERING
# ============================================================================

def match_features(src_desc: np.ndarray, tgt_desc: np.ndarray) -> CorrespondenceSet:
    """Nearest target descriptor (L2) for every source descriptor; no ratio test."""
    src_desc = np.asarray(src_desc, dtype=np.float64)
    tgt_desc = np.asarray(tgt_desc, dtype=np.float64)
    if len(src_desc) == 0 or len(tgt_desc) == 0:
        raise ValueError("match_features needs non-empty descriptor sets")
    dist, idx = cKDTree(tgt_desc).query(src_desc, k=1)
    return CorrespondenceSet(np.arange(len(src_desc)), idx, dist)


def gror_filter(correspondences: CorrespondenceSet, src_xyz: np.ndarray, tgt_xyz: np.ndarray,
                tau_m: float = 0.1, k: int = 800, weighted: bool = False) -> Tuple[CorrespondenceSet, CompatibilityGraph]:
    """Keep the k correspondences with the largest pairwise-rigidity support.

    Edge ij is 1 when the endpoint distances agree within tau_m (or a
    Gaussian weight when weighted); reliability is the adjacency row sum.
    Ties go to smaller descriptor distance, then lower index.
    """
    n = len(correspondences)
    if n < 2:
        raise ValueError(f"gror_filter needs at least 2 correspondences, got {n}")
    p = np.asarray(src_xyz, dtype=np.float64)[correspondences.source]
    q = np.asarray(tgt_xyz, dtype=np.float64)[correspondences.target]
    adjacency = np.zeros((n, n), dtype=np.float32 if weighted else bool)
    for start in range(0, n, GROR_BLOCK):
        stop = min(start + GROR_BLOCK, n)
        delta = np.abs(cdist(p[start:stop], p) - cdist(q[start:stop], q))
        if weighted:
            adjacency[start:stop] = np.exp(-0.5 * (delta / tau_m) ** 2)
        else:
            adjacency[start:stop] = delta <= tau_m
    np.fill_diagonal(adjacency, 0)
    reliability = adjacency.sum(axis=1, dtype=np.float64)
    order = np.lexsort((np.arange(n), correspondences.distance, -reliability))
    top = np.sort(order[:k]) if k < n else np.arange(n)
    return correspondences.take(top), CompatibilityGraph(adjacency, reliability)


# ============================================================================
#  RANSAC
# ============================================================================

@dataclass
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray
    iterations: int

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def required_iterations(inlier_ratio: float, confidence: float, sample_size: int = 3) -> float:
    if inlier_ratio <= 0:
        return math.inf
    if inlier_ratio >= 1:
        return 1.0
    return math.log(1.0 - confidence) / math.log(1.0 - inlier_ratio ** sample_size)


def estimate_coarse_transform(correspondences: CorrespondenceSet, src_xyz: np.ndarray, tgt_xyz: np.ndarray,
                              params: CoarseParams, rng: Optional[np.random.Generator] = None) -> RansacResult:
    """RANSAC over 3-correspondence samples with an adaptive iteration count,
    followed by a Kabsch refit on the consensus set."""
    n = len(correspondences)
    if n < 3:
        raise CoarseRegistrationError(f"need at least 3 correspondences, got {n}")
    rng = rng or np.random.default_rng(0)
    p = np.asarray(src_xyz, dtype=np.float64)[correspondences.source]
    q = np.asarray(tgt_xyz, dtype=np.float64)[correspondences.target]
    thr2 = params.ransac_inlier_m ** 2

    best_count, best_r, best_t = -1, None, None
    iterations = 0
    needed = float(params.ransac_max_iterations)
    while iterations < min(needed, params.ransac_max_iterations):
        batch = int(min(RANSAC_BATCH, params.ransac_max_iterations - iterations))
        sample = np.argpartition(rng.random((batch, n)), 2, axis=1)[:, :3]
        r, t, ok = kabsch_batch(p[sample], q[sample])
        iterations += batch
        if not ok.any():
            continue
        r, t = r[ok], t[ok]
        residual = q[None, :, :] - (np.einsum('bij,nj->bni', r, p) + t[:, None, :])
        counts = (np.einsum('bni,bni->bn', residual, residual) <= thr2).sum(axis=1)
        b = int(np.argmax(counts))
        if counts[b] > best_count:
            best_count, best_r, best_t = int(counts[b]), r[b], t[b]
            needed = required_iterations(best_count / n, params.ransac_confidence)

    if best_r is None:
        raise CoarseRegistrationError("every RANSAC sample was degenerate")
    transform = RigidTransform(best_r, best_t)
    inliers = _inliers(transform, p, q, thr2)
    for _ in range(2):
        if inliers.sum() < 3:
            break
        try:
            refit = kabsch_fit(p[inliers], q[inliers])
        except DegenerateGeometryError:
            break
        refit_inliers = _inliers(refit, p, q, thr2)
        if refit_inliers.sum() < inliers.sum():
            break
        transform, inliers = refit, refit_inliers
    if inliers.sum() < params.min_inliers:
        raise CoarseRegistrationError(
            f"consensus of {int(inliers.sum())} below coarse.min_inliers={params.min_inliers}")
    return RansacResult(transform, inliers, iterations)


def _inliers(t: RigidTransform, p: np.ndarray, q: np.ndarray, thr2: float) -> np.ndarray:
    r = q - t.apply(p)
    return np.einsum('ij,ij->i', r, r) <= thr2


# ============================================================================
#  STAGE DRIVER
# ============================================================================

@dataclass
class CoarseResult:
    transform: RigidTransform
    inliers: int
    iterations: int
    source_keypoints: int
    target_keypoints: int
    matches: int
    filtered: int
    seconds: float
    timings: dict = field(default_factory=dict)


def prepare_cloud(cloud: PointCloud, params: CoarseParams) -> PointCloud:
    if params.voxel_m > 0:
        cloud = voxel_downsample(cloud, params.voxel_m)
    cloud = estimate_normals(cloud, params.normal_k)
    return orient_normals_towards(cloud, cloud.xyz.mean(axis=0))


def describe(cloud: PointCloud, params: CoarseParams) -> Tuple[np.ndarray, np.ndarray]:
    """Keypoint indices and their valid FPFH descriptors."""
    keypoints = detect_iss_keypoints(
        cloud, params.salient_radius, params.nonmax_radius, params.iss_gamma21, params.iss_gamma32,
        params.iss_min_neighbors, params.iss_min_salience, params.max_keypoints)
    idx = np.array([k.index for k in keypoints], dtype=np.intp)
    desc, flagged = compute_fpfh(cloud, idx, params.fpfh_radius_m)
    return idx[~flagged], desc[~flagged]


def coarse_register(source: PointCloud, target: PointCloud, params: CoarseParams,
                    fragment_id: int = 0, seed: int = 0) -> CoarseResult:
    """Initial alignment of one fragment against the (cropped) reference."""
    started = time.perf_counter()
    timings = {}
    if len(source) < params.normal_k + 1:
        raise CoarseRegistrationError(f"fragment {fragment_id}: {len(source)} points is too few")
    box = source.aabb().dilate(params.crop_margin_m)
    target = crop_aabb(target, box)
    if len(target) < params.normal_k + 1:
        raise CoarseRegistrationError(f"fragment {fragment_id}: reference is empty around the fragment")

    tick = time.perf_counter()
    src = prepare_cloud(source, params)
    tgt = prepare_cloud(target, params)
    timings['normals'] = time.perf_counter() - tick

    tick = time.perf_counter()
    src_idx, src_desc = describe(src, params)
    tgt_idx, tgt_desc = describe(tgt, params)
    timings['features'] = time.perf_counter() - tick
    if len(src_idx) < 3 or len(tgt_idx) < 3:
        raise CoarseRegistrationError(
            f"fragment {fragment_id}: too few keypoints (source {len(src_idx)}, reference {len(tgt_idx)})")

    tick = time.perf_counter()
    matches = match_features(src_desc, tgt_desc)
    matches = CorrespondenceSet(src_idx[matches.source], tgt_idx[matches.target], matches.distance)
    filtered, _ = gror_filter(matches, src.xyz, tgt.xyz, params.gror_tau_m, params.gror_k, params.gror_weighted)
    timings['matching'] = time.perf_counter() - tick

    tick = time.perf_counter()
    rng = np.random.default_rng([seed, fragment_id])
    ransac = estimate_coarse_transform(filtered, src.xyz, tgt.xyz, params, rng)
    timings['ransac'] = time.perf_counter() - tick

    result = CoarseResult(ransac.transform, ransac.inlier_count, ransac.iterations, len(src_idx), len(tgt_idx),
                          len(matches), len(filtered), time.perf_counter() - started, timings)
    logger.debug("coarse fragment=%d keypoints=%d/%d matches=%d filtered=%d inliers=%d",
                 fragment_id, result.source_keypoints, result.target_keypoints, result.matches,
                 result.filtered, result.inliers)
    return result
