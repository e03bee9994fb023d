"""Benchmark data: CSV and WAV ingestion, event binning, and seeded synthetic generators.

Data files are looked up by id in the directory named by MARKOVGP_DATA (default ./data):

    motorcycle.csv   t,y        accelerometer readings
    coal.csv         t          one disaster date (decimal year) per row
    banana.csv       r,t,y      2D classification, labels in {-1, +1} or {0, 1}
    airline.csv      t          one accident date per row (YYYY-MM-DD)
"""

import csv
import datetime
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.io import wavfile

from errors import DatasetError
from gaussian import robust_cholesky
from prior_ssm import KernelSpec, discretize, to_state_space

LOGGER = logging.getLogger(__name__)

DATA_ENV = "MARKOVGP_DATA"
DEFAULT_DATA_DIR = "data"
DEFAULT_EVENT_BINS = 333
DATA_FILES = {
    "motorcycle": "motorcycle.csv",
    "coal": "coal.csv",
    "banana": "banana.csv",
    "airline": "airline.csv",
}
DATE_FORMATS = ("%Y-%m-%d", "%d/%m/%Y", "%B %d, %Y")
EPOCH = datetime.date(1900, 1, 1)


@dataclass
class Dataset:
    name: str
    t: np.ndarray
    y: np.ndarray
    r: Optional[np.ndarray] = None
    binsize: Optional[float] = None
    events: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None
    meta: Dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.t.shape[0]


def data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, DEFAULT_DATA_DIR))


def clean_float(value: str, line: Optional[int] = None, source: Optional[str] = None) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise DatasetError(f"not a number: {value!r}", line=line, source=source) from None


def parse_date(text: str) -> Optional[float]:
    """Days since 1900-01-01 for 'YYYY-MM-DD', 'DD/MM/YYYY' or 'September 03, 1990'."""
    text = re.sub(r"\s*\(.*\)", "", text or "").strip()
    for fmt in DATE_FORMATS:
        try:
            return float((datetime.datetime.strptime(text, fmt).date() - EPOCH).days)
        except ValueError:
            continue
    return None


def clean_time(value: str, line: Optional[int] = None, source: Optional[str] = None) -> float:
    try:
        return float(value)
    except ValueError:
        days = parse_date(value)
        if days is None:
            raise DatasetError(f"not a number or date: {value!r}", line=line, source=source) from None
        return days


def read_csv(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Columns of a headed CSV as float arrays; time columns may hold dates."""
    path = Path(path)
    source = str(path)
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("empty file", line=1, source=source) from None
        if not header or any(not h or re.fullmatch(r"[-+.\deE]+", h) for h in header):
            raise DatasetError(f"a header row is required, got {header}", line=1, source=source)
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"expected {len(header)} columns, got {len(row)}", line=line, source=source)
            rows.append([clean_time(cell.strip(), line, source) if name == "t"
                         else clean_float(cell.strip(), line, source)
                         for name, cell in zip(header, row)])
    if not rows:
        raise DatasetError("no data rows", line=2, source=source)
    values = np.array(rows, dtype=float)
    return {name: values[:, i] for i, name in enumerate(header)}


def bin_events(events, bins: Union[int, Sequence[int]], value_range=None):
    """Equal-width counts over the observed range.

    1D events give (counts, centers); (N, 2) events with bins (b1, b2) give a
    (b1, b2) count grid and the pair of center vectors.
    """
    events = np.asarray(events, dtype=float)
    if events.ndim == 2 and events.shape[1] == 2:
        b1, b2 = (bins, bins) if np.isscalar(bins) else bins
        if b1 < 1 or b2 < 1:
            raise ValueError(f"bins must be >= 1, got {bins}")
        counts, e1, e2 = np.histogram2d(events[:, 0], events[:, 1], bins=(b1, b2), range=value_range)
        return counts, (0.5 * (e1[1:] + e1[:-1]), 0.5 * (e2[1:] + e2[:-1]))
    events = events.ravel()
    if int(bins) < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    counts, edges = np.histogram(events, bins=int(bins), range=value_range)
    return counts.astype(float), 0.5 * (edges[1:] + edges[:-1])


def _event_dataset(name: str, events: np.ndarray, bins: Optional[int]) -> Dataset:
    bins = DEFAULT_EVENT_BINS if bins is None else int(bins)
    counts, centers = bin_events(events, bins)
    binsize = float(centers[1] - centers[0]) if bins > 1 else float(np.ptp(events) or 1.0)
    LOGGER.info("binned %d events from %s into %d bins of width %.4g", events.size, name, bins, binsize)
    return Dataset(name=name, t=centers, y=counts, binsize=binsize, events=np.sort(events))


def load_csv(path: Union[str, Path], name: Optional[str] = None, bins: Optional[int] = None) -> Dataset:
    path = Path(path)
    name = name or path.stem
    cols = read_csv(path)
    names = tuple(cols)
    if names == ("t",):
        return _event_dataset(name, cols["t"], bins)
    if names == ("t", "y"):
        return Dataset(name=name, t=cols["t"], y=cols["y"])
    if set(names) == {"r", "t", "y"}:
        return Dataset(name=name, t=cols["t"], y=cols["y"], r=cols["r"][:, None])
    if set(names) == {"r1", "r2", "y"}:
        # the first coordinate is swept sequentially
        return Dataset(name=name, t=cols["r1"], y=cols["y"], r=cols["r2"][:, None])
    raise DatasetError(f"unsupported columns {list(names)}; expected t | t,y | r,t,y | r1,r2,y",
                       line=1, source=str(path))


def load_wav(path: Union[str, Path]) -> Dataset:
    """Mono PCM samples scaled to [-1, 1]; t in seconds."""
    rate, data = wavfile.read(str(path))
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        y = data.astype(float) / float(np.iinfo(data.dtype).max + 1)
    else:
        y = data.astype(float)
    if y.ndim > 1:
        LOGGER.warning("%s has %d channels; averaging to mono", path, y.shape[1])
        y = y.mean(axis=1)
    return Dataset(name=Path(path).stem, t=np.arange(y.size) / float(rate), y=y, meta={"rate": int(rate)})


# synthetic benchmarks

def binary_synthetic(n: int = 1000, seed: int = 0, t_max: float = 6.0) -> Dataset:
    """y = sign(12 sin(4 pi t) / (0.25 pi t + 1) + noise), noise ~ N(0, 0.25^2)."""
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0.0, t_max, size=n))
    latent = 12 * np.sin(4 * np.pi * t) / (0.25 * np.pi * t + 1)
    y = np.sign(latent + 0.25 * rng.standard_normal(n))
    y[y == 0] = 1.0
    return Dataset(name="binary-synthetic", t=t, y=y, truth=latent, meta={"seed": seed})


def sample_prior(kernel: KernelSpec, t, rng: np.random.Generator) -> np.ndarray:
    """Draw f(t) from the state-space form of the kernel."""
    ssm = to_state_space(kernel)
    t = np.asarray(t, dtype=float)
    x = robust_cholesky(ssm.Pinf) @ rng.standard_normal(ssm.state_dim)
    out = np.zeros(t.size)
    out[0] = (ssm.H @ x)[0]
    for k in range(1, t.size):
        trans = discretize(ssm, t[k] - t[k - 1])
        noise = robust_cholesky(trans.Q) @ rng.standard_normal(ssm.state_dim)
        x = trans.A @ x + noise
        out[k] = (ssm.H @ x)[0]
    return out


def cox2d_synthetic(shape: Tuple[int, int] = (50, 25), seed: int = 0) -> Dataset:
    """Counts on a regular 2D grid from a smooth log-intensity; the first axis is the sequential one."""
    rng = np.random.default_rng(seed)
    n1, n2 = shape
    c1 = (np.arange(n1) + 0.5) / n1
    c2 = (np.arange(n2) + 0.5) / n2
    g1, g2 = np.meshgrid(c1, c2, indexing="ij")
    log_rate = 1.0 + 1.2 * np.sin(2 * np.pi * g1) * np.cos(np.pi * g2) - 1.5 * (g2 - 0.5) ** 2
    counts = rng.poisson(np.exp(log_rate)).astype(float)
    return Dataset(name="cox2d-synthetic", t=g1.ravel(), y=counts.ravel(), r=g2.ravel()[:, None], binsize=1.0,
                   truth=log_rate.ravel(), meta={"seed": seed, "shape": [n1, n2]})


AUDIO_SUBBANDS = (2 * np.pi * 40.0, 2 * np.pi * 110.0, 2 * np.pi * 230.0)


def audio_synthetic(n: int = 2000, seed: int = 0, rate: float = 2000.0, noise: float = 0.05) -> Dataset:
    """Sum of quasi-periodic subbands modulated by softplus Matern-5/2 amplitudes, plus white noise.

    Columns of `truth` are the three subbands followed by the three amplitude processes.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate
    subbands = [sample_prior(KernelSpec("QuasiPeriodic", variance=1.0, lengthscale=0.05, frequency=w), t, rng)
                for w in AUDIO_SUBBANDS]
    amplitudes = [sample_prior(KernelSpec("Matern52", variance=1.0, lengthscale=0.2), t, rng)
                  for _ in AUDIO_SUBBANDS]
    signal = sum(s * np.logaddexp(0.0, a) for s, a in zip(subbands, amplitudes))
    y = signal + noise * rng.standard_normal(n)
    return Dataset(name="audio-synthetic", t=t, y=y, truth=np.stack(subbands + amplitudes, axis=1),
                   meta={"seed": seed, "rate": rate, "noise": noise})


SYNTHETIC = {
    "binary-synthetic": binary_synthetic,
    "cox2d-synthetic": cox2d_synthetic,
    "audio-synthetic": audio_synthetic,
}


def load_dataset(id_or_path: str, bins: Optional[Union[int, Sequence[int]]] = None, seed: int = 0) -> Dataset:
    """A built-in id (file in MARKOVGP_DATA or synthetic generator) or a path to a CSV / WAV file."""
    if id_or_path in SYNTHETIC:
        if id_or_path == "cox2d-synthetic" and bins is not None:
            shape = (int(bins), int(bins)) if np.isscalar(bins) else tuple(int(b) for b in bins)
            return cox2d_synthetic(shape=shape, seed=seed)
        return SYNTHETIC[id_or_path](seed=seed)
    path = Path(id_or_path)
    if not path.exists():
        path = data_dir() / DATA_FILES.get(id_or_path, id_or_path)
    if not path.exists():
        raise FileNotFoundError(f"no data file for {id_or_path!r}; looked in {data_dir()} (set {DATA_ENV})")
    if path.suffix.lower() == ".wav":
        return load_wav(path)
    name = id_or_path if id_or_path in DATA_FILES else path.stem
    return load_csv(path, name=name, bins=bins)
