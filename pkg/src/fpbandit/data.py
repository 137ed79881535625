"""Drug-screen ingestion and preprocessing.

Three CSV files describe a screen, each with a header row:

* ``expression.csv``: ``cell_id`` then one numeric column per gene
* ``response.csv``: ``cell_id`` then one column per drug id; empty or ``NA`` is missing
* ``fingerprints.csv``: ``drug_id`` then one 0/1 column per bit

``prepare`` turns a raw screen into contexts and rewards in [0, 1]:
filter missing responses, project expression onto principal components,
then min-max scale both tables.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ActionSet, Environment, make_tabular_replay
from .errors import ContractError, ParseError, ShapeError
from .tensor import symmetric_eig

MISSING = ("", "NA")
EXPRESSION_FILE = "expression.csv"
RESPONSE_FILE = "response.csv"
FINGERPRINT_FILE = "fingerprints.csv"
META_FILE = "meta.json"
MAX_CELL_MISSING = 0.7


@dataclass
class RawScreen:
    expression: np.ndarray
    response: np.ndarray
    fingerprints: np.ndarray
    cell_ids: tuple
    drug_ids: tuple
    gene_ids: tuple = ()

    def __post_init__(self):
        self.expression = np.array(self.expression, dtype=np.float64)
        self.response = np.array(self.response, dtype=np.float64)
        self.fingerprints = np.array(self.fingerprints, dtype=np.float64)
        self.cell_ids, self.drug_ids = tuple(self.cell_ids), tuple(self.drug_ids)
        n, g = self.expression.shape
        if not self.gene_ids:
            self.gene_ids = tuple(f"gene_{j}" for j in range(g))
        self.gene_ids = tuple(self.gene_ids)
        k = len(self.drug_ids)
        if self.response.shape != (n, k):
            raise ShapeError(f"response is {self.response.shape}, expected ({n}, {k})")
        if self.fingerprints.ndim != 2 or self.fingerprints.shape[0] != k:
            raise ShapeError(f"fingerprints have {self.fingerprints.shape[0]} rows for {k} drugs")
        if len(self.cell_ids) != n or len(self.gene_ids) != g:
            raise ShapeError("id lists do not match the expression matrix")
        if not np.all(np.isfinite(self.expression)):
            raise ContractError("expression must be fully observed")
        if not np.all(np.isin(self.fingerprints, (0.0, 1.0))):
            raise ContractError("fingerprints must be 0/1")

    @property
    def missing_fraction(self) -> float:
        return float(np.mean(np.isnan(self.response))) if self.response.size else 0.0


@dataclass
class PcaResult:
    scores: np.ndarray
    components: np.ndarray       # (G, d1), unit columns
    explained: np.ndarray        # variance fraction per component
    mean: np.ndarray


@dataclass
class PreparedScreen:
    contexts: np.ndarray
    responses: np.ndarray
    actions: ActionSet
    cell_ids: tuple
    meta: dict = field(default_factory=dict)

    def environment(self, seed: int = 0, name: Optional[str] = None) -> Environment:
        return make_tabular_replay(self.contexts, self.responses, self.actions, seed,
                                   name=name or self.meta.get("name", "screen"))


def filter_missing(raw: RawScreen, max_cell_missing: float = MAX_CELL_MISSING) -> RawScreen:
    """Drop cells with more than 70% missing responses, then drugs with any gap."""
    miss = np.isnan(raw.response)
    keep_cells = ~(miss.mean(axis=1) > max_cell_missing) if raw.response.shape[1] else \
        np.ones(len(raw.cell_ids), dtype=bool)
    keep_drugs = ~miss[keep_cells].any(axis=0)
    return RawScreen(raw.expression[keep_cells], raw.response[np.ix_(keep_cells, keep_drugs)],
                     raw.fingerprints[keep_drugs],
                     [c for c, k in zip(raw.cell_ids, keep_cells) if k],
                     [d for d, k in zip(raw.drug_ids, keep_drugs) if k], raw.gene_ids)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if vecs.size == 0:
        return vecs
    lead = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])]
    return vecs * np.where(lead < 0, -1.0, 1.0)


def pca_project(matrix, d1: int) -> PcaResult:
    """Project centred rows onto the top ``d1`` principal components.

    Uses the G x G covariance when G <= N and the N x N Gram matrix otherwise.
    Directions with zero variance get zero loadings and zero scores.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {x.shape}")
    n, g = x.shape
    if not 1 <= d1 <= min(n, g):
        raise ContractError(f"d1 must lie in [1, {min(n, g)}], got {d1}")
    mean = x.mean(axis=0)
    xc = x - mean
    denom = max(n - 1, 1)
    total = float(np.sum(xc * xc)) / denom
    if g <= n:
        vals, vecs = symmetric_eig(xc.T @ xc / denom)
        vals, vecs = np.clip(vals[:d1], 0.0, None), vecs[:, :d1]
    else:
        vals, u = symmetric_eig(xc @ xc.T / denom)
        vals, u = np.clip(vals[:d1], 0.0, None), u[:, :d1]
        floor = 1e-12 * max(total, 1e-300)
        live = vals > floor
        vecs = np.zeros((g, d1))
        vecs[:, live] = xc.T @ u[:, live] / np.sqrt(vals[live] * denom)
    vecs = _fix_signs(vecs)
    explained = vals / total if total > 0 else np.zeros_like(vals)
    return PcaResult(xc @ vecs, vecs, explained, mean)


def minmax_scale(matrix, axis: int = 0, tol: float = 1e-12) -> np.ndarray:
    """Scale each column (``axis=0``) or row (``axis=1``) to [0, 1].

    Constant slices, up to a relative ``tol``, map to 0.5.
    """
    x = np.asarray(matrix, dtype=np.float64)
    lo = x.min(axis=axis, keepdims=True)
    hi = x.max(axis=axis, keepdims=True)
    span = hi - lo
    flat = span <= tol * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    out = (x - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, np.clip(out, 0.0, 1.0))


def prepare(raw: RawScreen, d1: int = 500, negate_response: bool = False,
            name: str = "screen") -> PreparedScreen:
    """Filter, project and scale a raw screen.

    ``d1`` is clamped to ``min(N - 1, G)`` since centred data has rank at most
    N - 1. Components are ordered by their variance after scaling, so running
    ``prepare`` on its own output reproduces it.
    """
    kept = filter_missing(raw)
    n, g = kept.expression.shape
    if n < 2 or not kept.drug_ids:
        raise ContractError(f"only {n} cells and {len(kept.drug_ids)} drugs survive filtering")
    d_eff = max(1, min(d1, n - 1, g))
    pca = pca_project(kept.expression, d_eff)
    contexts = minmax_scale(pca.scores)
    order = np.argsort(-contexts.var(axis=0), kind="stable")
    contexts = contexts[:, order]
    resp = -kept.response if negate_response else kept.response
    responses = minmax_scale(resp)
    meta = {
        "name": name,
        "cells_in": len(raw.cell_ids),
        "drugs_in": len(raw.drug_ids),
        "dropped_cells": [c for c in raw.cell_ids if c not in set(kept.cell_ids)],
        "dropped_drugs": [d for d in raw.drug_ids if d not in set(kept.drug_ids)],
        "max_cell_missing": MAX_CELL_MISSING,
        "d1_requested": int(d1),
        "d1": int(d_eff),
        "variance_explained": [float(v) for v in pca.explained[order]],
        "negate_response": bool(negate_response),
    }
    return PreparedScreen(contexts, responses, ActionSet(kept.fingerprints, kept.drug_ids),
                          kept.cell_ids, meta)


def _read_table(path: Path, key: str, allow_missing: bool):
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, None, f"cannot open: {exc.strerror}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise ParseError(path, 1, "missing header row")
        if header[0].strip() != key:
            raise ParseError(path, 1, f"first column must be {key!r}, got {header[0]!r}")
        cols = tuple(h.strip() for h in header[1:])
        if len(set(cols)) != len(cols):
            raise ParseError(path, 1, "duplicate column names")
        ids, rows = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            values = []
            for cell in row[1:]:
                cell = cell.strip()
                if cell in MISSING:
                    if not allow_missing:
                        raise ParseError(path, line, "missing value not allowed here")
                    values.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(path, line, f"not a number: {cell!r}") from None
                if not np.isfinite(v):
                    raise ParseError(path, line, f"non-finite value {cell!r}")
                values.append(v)
            ident = row[0].strip()
            if ident in ids:
                raise ParseError(path, line, f"duplicate id {ident!r}")
            ids.append(ident)
            rows.append((line, values))
    return cols, ids, rows


def load_screen(directory=None, expression=None, response=None, fingerprints=None) -> RawScreen:
    """Read the three CSV files of a screen, from ``directory`` or explicit paths."""
    base = Path(directory) if directory is not None else None
    paths = [Path(p) if p is not None else (base / f if base is not None else None)
             for p, f in ((expression, EXPRESSION_FILE), (response, RESPONSE_FILE),
                          (fingerprints, FINGERPRINT_FILE))]
    if any(p is None for p in paths):
        raise ContractError("give a directory or all three file paths")
    e_path, r_path, f_path = paths

    genes, cells, e_rows = _read_table(e_path, "cell_id", allow_missing=False)
    drugs, r_cells, r_rows = _read_table(r_path, "cell_id", allow_missing=True)
    bits, f_drugs, f_rows = _read_table(f_path, "drug_id", allow_missing=False)

    for line, values in f_rows:
        if any(v not in (0.0, 1.0) for v in values):
            raise ParseError(f_path, line, "fingerprint bits must be 0 or 1")
    known = set(cells)
    for c, (line, _) in zip(r_cells, r_rows):
        if c not in known:
            raise ParseError(r_path, line, f"cell {c!r} has no row in {e_path.name}")
    index = {c: i for i, c in enumerate(r_cells)}
    for c, (line, _) in zip(cells, e_rows):
        if c not in index:
            raise ParseError(e_path, line, f"cell {c!r} has no row in {r_path.name}")
    if set(drugs) != set(f_drugs) or len(drugs) != len(f_drugs):
        missing = sorted(set(drugs) ^ set(f_drugs))
        raise ParseError(f_path, None, f"drug ids do not match {r_path.name}: {missing}")

    resp = np.array([r_rows[index[c]][1] for c in cells]).reshape(len(cells), len(drugs))
    f_index = {d: i for i, d in enumerate(f_drugs)}
    fps = np.array([f_rows[f_index[d]][1] for d in drugs]).reshape(len(drugs), len(bits))
    expr = np.array([v for _, v in e_rows]).reshape(len(cells), len(genes))
    return RawScreen(expr, resp, fps, cells, drugs, genes)


def _write_table(path: Path, key: str, cols: Sequence[str], ids: Sequence[str], values):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([key, *cols])
        for ident, row in zip(ids, values):
            writer.writerow([ident, *("NA" if np.isnan(v) else repr(float(v)) for v in row)])


def write_screen(raw: RawScreen, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / EXPRESSION_FILE, "cell_id", raw.gene_ids, raw.cell_ids, raw.expression)
    _write_table(out / RESPONSE_FILE, "cell_id", raw.drug_ids, raw.cell_ids, raw.response)
    _write_table(out / FINGERPRINT_FILE, "drug_id", [f"bit_{j}" for j in range(raw.fingerprints.shape[1])],
                 raw.drug_ids, raw.fingerprints)
    return out


def as_raw(prepared: PreparedScreen) -> RawScreen:
    genes = [f"pc_{j + 1}" for j in range(prepared.contexts.shape[1])]
    return RawScreen(prepared.contexts, prepared.responses, prepared.actions.features,
                     prepared.cell_ids, prepared.actions.ids, genes)


def save_prepared(prepared: PreparedScreen, directory) -> Path:
    """Write the prepared tables in the raw layout plus ``meta.json``."""
    out = write_screen(as_raw(prepared), directory)
    with open(out / META_FILE, "w", encoding="utf-8") as handle:
        json.dump(prepared.meta, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return out


def load_prepared(directory) -> PreparedScreen:
    raw = load_screen(directory)
    if np.isnan(raw.response).any():
        raise ContractError(f"{directory}: prepared responses must be fully observed")
    if raw.expression.min() < 0 or raw.expression.max() > 1 or \
            raw.response.min() < 0 or raw.response.max() > 1:
        raise ContractError(f"{directory}: prepared tables must lie in [0, 1]")
    meta_path = Path(directory) / META_FILE
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return PreparedScreen(raw.expression, raw.response, ActionSet(raw.fingerprints, raw.drug_ids),
                          raw.cell_ids, meta)


def screen_from_environment(env: Environment) -> RawScreen:
    """Emit a synthetic environment's hidden tables as a raw screen."""
    return RawScreen(env.contexts, env.rewards, env.actions.features,
                     [f"cell_{i}" for i in range(env.contexts.shape[0])], env.actions.ids)
