"""Neuron segmentation, activity traces and spectral clustering.

Marker volumes over time are median-projected; local maxima above a
triangular threshold seed a marker-controlled watershed that assigns each
neuron a disjoint voxel mask. Activity traces average the brightest
voxels of a second channel inside each mask; baseline-normalized traces
feed a Gaussian similarity graph whose generalized Laplacian eigenvalues
pick the cluster count via the largest eigen-gap, followed by k-means on
the leading eigenvectors.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, ndimage
from skimage.segmentation import watershed
from sklearn.cluster import KMeans

from .datapipe import triangular_threshold
from .errors import DegenerateInputError, DimensionError
from .stack import ImageStack

DEFAULT_SIGMA = 1.5
BRIGHTEST_VOXELS = 100
KMEANS_RESTARTS = 20


@dataclass
class NeuronTrace:
    id: int
    voxels: np.ndarray  # (n, 3) int indices (z, y, x)
    centroid_um: tuple  # (x, y, z)
    f: np.ndarray  # F(t)
    f0: float = 0.0
    df: np.ndarray = None
    activity: float = 0.0
    cluster: int | None = None

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        self.f0 = float(self.f.mean())
        self.df = self.f - self.f0
        self.activity = float(self.df.std())


@dataclass
class SegmentedNeuron:
    id: int
    voxels: np.ndarray
    centroid_um: tuple


def _median_volume(stacks_over_time) -> np.ndarray:
    vols = [s.planes if isinstance(s, ImageStack) else np.asarray(s) for s in stacks_over_time]
    shape = vols[0].shape
    if any(v.shape != shape for v in vols):
        raise DimensionError("marker stacks must share dimensions across time")
    return np.median(np.stack(vols), axis=0)


def segment(marker_stacks_over_time, pixel_size_um: float = 0.325, step_um: float = 0.5) -> list:
    """Neuron masks from a time sequence of marker-channel stacks.

    The time-median volume is thresholded (triangular rule); its local
    maxima (26-neighborhood) become watershed markers; the watershed runs
    on the negated volume restricted to the foreground, producing one
    disjoint voxel mask per seed.
    """
    if not marker_stacks_over_time:
        raise ValueError("need at least one time point")
    first = marker_stacks_over_time[0]
    if isinstance(first, ImageStack):
        pixel_size_um = first.pixel_size_um
        step_um = first.step_um if first.step_um else step_um
    volume = _median_volume(marker_stacks_over_time)

    try:
        thr = triangular_threshold(volume)
    except DegenerateInputError:
        return []
    foreground = volume > thr
    if not foreground.any():
        return []
    local_max = (ndimage.maximum_filter(volume, size=3, mode="nearest") == volume) & foreground
    if not local_max.any():
        return []
    markers, n_seeds = ndimage.label(local_max, structure=np.ones((3, 3, 3), dtype=int))
    labels = watershed(-volume, markers=markers, mask=foreground)

    neurons = []
    for label_id, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        zz, yy, xx = np.nonzero(labels[sl] == label_id)
        if len(zz) == 0:
            continue
        voxels = np.stack(
            [zz + sl[0].start, yy + sl[1].start, xx + sl[2].start], axis=1
        ).astype(np.int32)
        weights = volume[voxels[:, 0], voxels[:, 1], voxels[:, 2]]
        total = weights.sum()
        if total <= 0:
            weights = np.ones(len(voxels))
            total = float(len(voxels))
        cz, cy, cx = (voxels * weights[:, None]).sum(axis=0) / total
        neurons.append(
            SegmentedNeuron(
                id=len(neurons),
                voxels=voxels,
                centroid_um=(float(cx * pixel_size_um), float(cy * pixel_size_um), float(cz * step_um)),
            )
        )
    return neurons


def extract_traces(neurons, activity_stacks_over_time) -> list:
    """F_i(t) = mean of the brightest min(100, |mask_i|) activity voxels
    inside mask i at each time point; dF and F0 fill in automatically."""
    if not activity_stacks_over_time:
        raise ValueError("need at least one activity time point")
    vols = [s.planes if isinstance(s, ImageStack) else np.asarray(s) for s in activity_stacks_over_time]
    traces = []
    for neuron in neurons:
        if len(neuron.voxels) == 0:
            continue
        z, y, x = neuron.voxels[:, 0], neuron.voxels[:, 1], neuron.voxels[:, 2]
        m = min(BRIGHTEST_VOXELS, len(z))
        series = np.empty(len(vols))
        for t, vol in enumerate(vols):
            values = vol[z, y, x]
            if m < len(values):
                values = np.partition(values, len(values) - m)[-m:]
            series[t] = values.mean()
        traces.append(
            NeuronTrace(id=neuron.id, voxels=neuron.voxels, centroid_um=neuron.centroid_um, f=series)
        )
    return traces


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    sigma: float
    trace_ids: list

    @property
    def n(self):
        return self.values.shape[0]


def similarity(traces, sigma: float = DEFAULT_SIGMA, top_m: int | None = None) -> SimilarityMatrix:
    """Gaussian similarity of baseline-normalized activity patterns.

    Keeps the top_m most active traces (default: activity above the 55th
    percentile) and computes S_ij = exp(-||dF_i/F0_i - dF_j/F0_j||^2 / sigma^2).
    """
    if len(traces) < 2:
        raise ValueError("need at least two traces")
    ranked = sorted(traces, key=lambda t: t.activity, reverse=True)
    if top_m is None:
        cut = np.percentile([t.activity for t in traces], 55.0)
        kept = [t for t in ranked if t.activity > cut]
        top_m = max(len(kept), 2)
    kept = ranked[: min(top_m, len(ranked))]
    for t in kept:
        if t.f0 == 0:
            raise DegenerateInputError(f"unnormalizable trace: neuron {t.id} has F0 = 0")
    profiles = np.stack([t.df / t.f0 for t in kept])
    sq = ((profiles[:, None, :] - profiles[None, :, :]) ** 2).sum(axis=2)
    values = np.exp(-sq / sigma**2)
    return SimilarityMatrix(values=values, sigma=sigma, trace_ids=[t.id for t in kept])


@dataclass
class EigenReport:
    eigenvalues: np.ndarray
    gaps: np.ndarray
    chosen_k: int


def spectral_cluster(sim: SimilarityMatrix, seed: int = 0, k: int | None = None):
    """Graph-Laplacian clustering with eigen-gap model selection.

    W is the similarity with zeroed diagonal, D its degree matrix,
    L = D - W; the generalized problem L v = lambda D v is solved, k is
    the index of the largest consecutive gap in the ascending eigenvalues
    (overridable), and k-means with 20 seeded restarts clusters the rows
    of the leading-eigenvector matrix (rows unit-normalized).

    Returns (labels, EigenReport).
    """
    s = np.asarray(sim.values, dtype=np.float64) if isinstance(sim, SimilarityMatrix) else np.asarray(sim, dtype=np.float64)
    n = s.shape[0]
    if n < 3:
        raise ValueError("need at least 3 nodes to cluster")
    if s.shape != (n, n) or not np.allclose(s, s.T, atol=1e-12):
        raise DimensionError("similarity matrix must be square and symmetric")
    w = s.copy()
    np.fill_diagonal(w, 0.0)
    degrees = w.sum(axis=1)
    if (degrees <= 0).any():
        raise DegenerateInputError("disconnected similarity graph: node with zero degree")
    d = np.diag(degrees)
    laplacian = d - w

    eigvals, eigvecs = linalg.eigh(laplacian, d)
    gaps = np.diff(eigvals)
    chosen = int(np.argmax(gaps)) + 1 if k is None else int(k)
    report = EigenReport(eigenvalues=eigvals, gaps=gaps, chosen_k=chosen)

    embedding = eigvecs[:, :chosen]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    embedding = embedding / norms
    km = KMeans(n_clusters=chosen, n_init=KMEANS_RESTARTS, random_state=seed)
    labels = km.fit_predict(embedding)
    return labels.astype(int), report


def assign_clusters(traces, sim: SimilarityMatrix, labels):
    by_id = {t.id: t for t in traces}
    for trace_id, label in zip(sim.trace_ids, labels):
        by_id[trace_id].cluster = int(label)
    return traces


def write_trace_csv(path, traces):
    """CSV rows: neuron id, x, y, z, cluster, then the dF/F0 series."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_t = len(traces[0].f) if traces else 0
        writer.writerow(["id", "x_um", "y_um", "z_um", "cluster"] + [f"dff_t{i}" for i in range(n_t)])
        for t in traces:
            dff = t.df / t.f0 if t.f0 != 0 else np.full_like(t.df, np.nan)
            writer.writerow(
                [t.id, f"{t.centroid_um[0]:.3f}", f"{t.centroid_um[1]:.3f}", f"{t.centroid_um[2]:.3f}",
                 "" if t.cluster is None else t.cluster]
                + [f"{v:.6f}" for v in dff]
            )
