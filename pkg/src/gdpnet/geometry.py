"""Geometry guidance latents from a linear (PCA) mesh autoencoder.

The guidance only needs a fixed latent per ground-truth mesh, so any
fit/encode/decode provider with this interface can be substituted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numeric import ShapeError

PCA_PROVIDER = "pca-v1"


@dataclass(frozen=True)
class GeoEncoder:
    mean: np.ndarray        # (3N,)
    basis: np.ndarray       # (rank, 3N) orthonormal rows, rank <= latent_dim
    latent_dim: int = 64
    provider_id: str = PCA_PROVIDER

    @property
    def N(self) -> int:
        return self.mean.shape[0] // 3

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    def to_blob(self) -> np.ndarray:
        return np.vstack([self.mean[None, :], self.basis])

    @classmethod
    def from_blob(cls, blob, latent_dim: int, provider_id: str = PCA_PROVIDER) -> "GeoEncoder":
        blob = np.asarray(blob, dtype=np.float64)
        return cls(blob[0].copy(), blob[1:].copy(), latent_dim, provider_id)


def _flat_displacements(meshes, templates):
    meshes = np.asarray(meshes, dtype=np.float64)
    templates = np.asarray(templates, dtype=np.float64)
    d = meshes - templates
    return d.reshape(d.shape[0], -1)


def fit_geometry_encoder(train_meshes, templates, latent_dim: int = 64) -> GeoEncoder:
    """PCA over training displacements ``mesh - template``.

    ``templates`` is broadcast against ``train_meshes`` (one template or one
    per mesh).  With fewer usable directions than ``latent_dim`` the rank is
    reduced and latents are zero-padded.
    """
    d = _flat_displacements(train_meshes, templates)
    count, dim = d.shape
    rank = min(latent_dim, count, dim)
    if rank < latent_dim:
        warnings.warn(f"geometry encoder rank reduced to {rank} (< latent_dim {latent_dim}); "
                      "latents are zero-padded", RuntimeWarning, stacklevel=2)
    mean = d.mean(axis=0)
    _, _, vt = np.linalg.svd(d - mean, full_matrices=False)
    basis = vt[:rank].copy()
    if basis.size:
        idx = np.argmax(np.abs(basis), axis=1)
        signs = np.sign(basis[np.arange(rank), idx])
        signs[signs == 0] = 1
        basis *= signs[:, None]
    return GeoEncoder(mean, basis, latent_dim)


def encode_geometry(mesh, template, enc: GeoEncoder) -> np.ndarray:
    """Latent(s) ``basis @ ((mesh - template) - mean)``, zero-padded to ``latent_dim``."""
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.shape[-2:] != (enc.N, 3):
        raise ShapeError("encode_geometry", "N", (enc.N, 3), mesh.shape[-2:])
    d = (mesh - np.asarray(template, dtype=np.float64)).reshape(mesh.shape[:-2] + (-1,))
    z = (d - enc.mean) @ enc.basis.T
    if enc.rank < enc.latent_dim:
        pad = np.zeros(z.shape[:-1] + (enc.latent_dim - enc.rank,))
        z = np.concatenate([z, pad], axis=-1)
    return z


def decode_geometry(r_hat, template, enc: GeoEncoder) -> np.ndarray:
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if r_hat.shape[-1] != enc.latent_dim:
        raise ShapeError("decode_geometry", "latent", enc.latent_dim, r_hat.shape[-1])
    d = enc.mean + r_hat[..., : enc.rank] @ enc.basis
    return np.asarray(template, dtype=np.float64) + d.reshape(d.shape[:-1] + (enc.N, 3))


def reconstruction_error(mesh, template, enc: GeoEncoder) -> np.ndarray:
    """Per-mesh mean vertex error of ``decode(encode(mesh))``."""
    rec = decode_geometry(encode_geometry(mesh, template, enc), template, enc)
    return np.linalg.norm(rec - np.asarray(mesh), axis=-1).mean(axis=-1)
