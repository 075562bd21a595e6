"""On-disk and in-memory containers for thinned posterior draws.

A draws directory holds ``manifest.json`` plus ``chunk_00000.npz``, ...; each
chunk stores a contiguous block of thinned draws so long chains never need to
sit in memory at once.  Per-sample latent summaries (running means/variances of
phi and gamma) and the pointwise log-likelihood matrix live in ``summary.npz``.
"""
from __future__ import annotations

import glob
import json
import os
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .model import Hyper, ModelParams

PARAM_KEYS = ("Sigma", "B", "tau", "lam", "nu", "omega")


class DrawWriter:
    def __init__(self, outdir: str | None = None, chunk_size: int = 200):
        self.outdir = outdir
        self.chunk_size = int(chunk_size)
        self._buf: dict[str, list] = {k: [] for k in PARAM_KEYS}
        self._chunks: list[dict[str, np.ndarray]] = []
        self._n_chunks = 0
        self.n_draws = 0
        if outdir is not None:
            os.makedirs(outdir, exist_ok=True)
            for f in glob.glob(os.path.join(outdir, "chunk_*.npz")):
                os.remove(f)

    def append(self, Sigma, B, tau, lam, nu, omega) -> None:
        for k, v in zip(PARAM_KEYS, (Sigma, B, tau, lam, nu, omega)):
            self._buf[k].append(np.array(v, dtype=float, copy=True))
        self.n_draws += 1
        if len(self._buf["Sigma"]) >= self.chunk_size:
            self.flush()

    def flush(self) -> None:
        if not self._buf["Sigma"]:
            return
        chunk = {k: np.stack(v) for k, v in self._buf.items()}
        self._buf = {k: [] for k in PARAM_KEYS}
        if self.outdir is None:
            self._chunks.append(chunk)
        else:
            np.savez(os.path.join(self.outdir, f"chunk_{self._n_chunks:05d}.npz"), **chunk)
        self._n_chunks += 1


class PosteriorDraws:
    """Thinned draws of one chain plus provenance and latent summaries."""

    def __init__(self, manifest: dict, summary: dict[str, np.ndarray], chunks=None, path: str | None = None):
        self.manifest = manifest
        self.summary = summary
        self._chunks = chunks
        self.path = path

    # ---- construction -------------------------------------------------
    @classmethod
    def from_writer(cls, writer: DrawWriter, manifest: dict, summary: dict) -> "PosteriorDraws":
        writer.flush()
        manifest = dict(manifest, n_draws=writer.n_draws, n_chunks=writer._n_chunks)
        if writer.outdir is None:
            return cls(manifest, summary, chunks=writer._chunks)
        obj = cls(manifest, summary, path=writer.outdir)
        obj._write_meta()
        return obj

    def _write_meta(self) -> None:
        with open(os.path.join(self.path, "manifest.json"), "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
        np.savez(os.path.join(self.path, "summary.npz"), **self.summary)

    def save(self, outdir: str) -> "PosteriorDraws":
        """Write to ``outdir`` (no-op if already stored there)."""
        if self.path is not None and os.path.abspath(self.path) == os.path.abspath(outdir):
            return self
        w = DrawWriter(outdir, chunk_size=self.manifest.get("chunk_size", 200))
        for p in self.iter_params():
            w.append(p.Sigma, p.B, p.tau, p.lam, p.nu, p.omega)
        return PosteriorDraws.from_writer(w, self.manifest, self.summary)

    @classmethod
    def load(cls, path: str) -> "PosteriorDraws":
        mpath = os.path.join(path, "manifest.json")
        if not os.path.exists(mpath):
            raise ConfigError(f"no draws manifest in {path}", stage="load-draws")
        with open(mpath) as fh:
            manifest = json.load(fh)
        with np.load(os.path.join(path, "summary.npz")) as z:
            summary = {k: z[k] for k in z.files}
        return cls(manifest, summary, path=path)

    # ---- access --------------------------------------------------------
    @property
    def n_draws(self) -> int:
        return int(self.manifest["n_draws"])

    @property
    def dims(self) -> dict:
        return self.manifest["dims"]

    @property
    def hyper(self) -> Hyper:
        return Hyper(**self.manifest["config"]["hyper"])

    @property
    def loglik(self) -> np.ndarray:
        """Pointwise log-likelihood matrix, shape (draws, n)."""
        return self.summary["loglik"]

    def iter_chunks(self) -> Iterator[dict[str, np.ndarray]]:
        if self._chunks is not None:
            yield from self._chunks
            return
        for c in range(self.manifest["n_chunks"]):
            with np.load(os.path.join(self.path, f"chunk_{c:05d}.npz")) as z:
                yield {k: z[k] for k in z.files}

    def iter_params(self) -> Iterator[ModelParams]:
        hyper = self.hyper
        for ch in self.iter_chunks():
            for s in range(ch["Sigma"].shape[0]):
                yield ModelParams(ch["Sigma"][s], ch["B"][s], ch["tau"][s], float(ch["lam"][s]),
                                  ch["nu"][s], ch["omega"][s], hyper)

    def stack(self, key: str) -> np.ndarray:
        return np.concatenate([ch[key] for ch in self.iter_chunks()])

    def posterior_mean(self, key: str) -> np.ndarray:
        tot, cnt = None, 0
        for ch in self.iter_chunks():
            s = ch[key].sum(axis=0)
            tot = s if tot is None else tot + s
            cnt += ch[key].shape[0]
        if cnt == 0:
            raise ConfigError("no retained draws", stage="posterior-mean")
        return tot / cnt


def concat_loglik(draws: list[PosteriorDraws], key: str = "loglik") -> np.ndarray:
    return np.concatenate([d.summary[key] for d in draws])
