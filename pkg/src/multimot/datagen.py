"""Synthetic marginal generators and the on-disk dataset format.

A dataset directory holds ``manifest.json`` plus one ``marginal_<i>.csv``
per marginal (no header, ``repr`` floats so values round-trip exactly).
The manifest records k, n, dims, family, seed and a sha256 per file.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .core import MarginalDataset
from .errors import CorruptDataError, DatasetFormatError

FAMILIES = ("uniform-cube", "isotropic-gaussian", "gmm")
MANIFEST = "manifest.json"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GenSpec:
    family: str
    n: int
    k: int
    d: int
    seed: int = 0
    components: int = 3
    sigma: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        for name in ("n", "k", "d", "components"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def to_dict(self):
        return asdict(self)


def marginal_rng(seed: int, i: int) -> np.random.Generator:
    """Independent, reproducible stream for marginal ``i``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(i)]))


def _check_family(spec, family):
    if spec.family != family:
        raise ValueError(f"spec family {spec.family!r} is not {family!r}")


def gen_uniform_cube(spec: GenSpec) -> MarginalDataset:
    _check_family(spec, "uniform-cube")
    h = spec.d**-0.5
    samples = tuple(marginal_rng(spec.seed, i).uniform(-h, h, size=(spec.n, spec.d)) for i in range(spec.k))
    return MarginalDataset(samples, spec.family, spec.seed)


def gen_isotropic_gaussian(spec: GenSpec) -> MarginalDataset:
    """Per-coordinate standard deviation ``d^{-1/2}``, so ``E|x|^2 = 1``."""
    _check_family(spec, "isotropic-gaussian")
    std = spec.d**-0.5
    samples = tuple(marginal_rng(spec.seed, i).normal(0.0, std, size=(spec.n, spec.d)) for i in range(spec.k))
    return MarginalDataset(samples, spec.family, spec.seed)


def orthonormal_embedding(d: int, rng: np.random.Generator) -> np.ndarray:
    """``d x d/2`` matrix with orthonormal columns."""
    q, r = np.linalg.qr(rng.normal(size=(d, d // 2)))
    return q * np.sign(np.diag(r))


def gmm_means(spec: GenSpec, i: int):
    """Embedded component means for marginal ``i`` and the rng positioned after them."""
    rng = marginal_rng(spec.seed, i)
    emb = orthonormal_embedding(spec.d, rng)
    pre = rng.uniform(-1.0, 1.0, size=(spec.components, spec.d // 2))
    return pre @ emb.T, rng


def gen_gmm(spec: GenSpec) -> MarginalDataset:
    _check_family(spec, "gmm")
    if spec.d < 2 or spec.d % 2:
        raise ValueError(f"gmm needs an even dimension d >= 2, got {spec.d}")
    samples = []
    for i in range(spec.k):
        means, rng = gmm_means(spec, i)
        labels = rng.integers(0, spec.components, size=spec.n)
        samples.append(means[labels] + spec.sigma * rng.normal(size=(spec.n, spec.d)))
    return MarginalDataset(tuple(samples), spec.family, spec.seed)


def generate(spec: GenSpec) -> MarginalDataset:
    return {"uniform-cube": gen_uniform_cube, "isotropic-gaussian": gen_isotropic_gaussian, "gmm": gen_gmm}[
        spec.family
    ](spec)


# -- dataset directories -----------------------------------------------------


def _csv_bytes(x: np.ndarray) -> bytes:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in x).encode()


def _sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_dataset(data: MarginalDataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    hashes = []
    for i, x in enumerate(data.samples):
        blob = _csv_bytes(x)
        with open(os.path.join(path, f"marginal_{i}.csv"), "wb") as fh:
            fh.write(blob)
        hashes.append(_sha256(blob))
    manifest = {
        "format": FORMAT_VERSION,
        "k": data.k,
        "n": data.n,
        "dims": data.dims,
        "family": data.family,
        "seed": data.seed,
        "sha256": hashes,
    }
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _parse_csv(blob: bytes, i: int, n: int, d: int) -> np.ndarray:
    lines = blob.decode().splitlines()
    if len(lines) != n:
        raise DatasetFormatError(f"marginal {i}, row {min(len(lines), n)}: expected {n} rows, found {len(lines)}")
    out = np.empty((n, d))
    for r, line in enumerate(lines):
        parts = line.split(",")
        if len(parts) != d:
            raise DatasetFormatError(f"marginal {i}, row {r}: expected {d} values, found {len(parts)}")
        try:
            out[r] = [float(p) for p in parts]
        except ValueError as exc:
            raise DatasetFormatError(f"marginal {i}, row {r}: {exc}") from None
    return out


def load_dataset(path, verify: bool = True) -> MarginalDataset:
    mpath = os.path.join(path, MANIFEST)
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: invalid JSON ({exc})") from None
    try:
        k, n, dims = int(manifest["k"]), int(manifest["n"]), [int(d) for d in manifest["dims"]]
        hashes = manifest.get("sha256")
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{mpath}: malformed manifest ({exc})") from None
    if len(dims) != k or (hashes is not None and len(hashes) != k):
        raise DatasetFormatError(f"{mpath}: k={k} but {len(dims)} dims / {len(hashes or [])} hashes")
    present = sorted(f for f in os.listdir(path) if f.startswith("marginal_") and f.endswith(".csv"))
    expected = [f"marginal_{i}.csv" for i in range(k)]
    if sorted(expected) != present:
        raise DatasetFormatError(f"{path}: manifest lists k={k} marginals, found files {present}")
    samples = []
    for i in range(k):
        with open(os.path.join(path, expected[i]), "rb") as fh:
            blob = fh.read()
        samples.append(_parse_csv(blob, i, n, dims[i]))
        if verify and hashes is not None and _sha256(blob) != hashes[i]:
            raise CorruptDataError(f"marginal {i}: content hash does not match the manifest")
    try:
        return MarginalDataset(tuple(samples), manifest.get("family", "custom"), manifest.get("seed"))
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
