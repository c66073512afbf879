"""User holdings: ingestion, yearly sub-datasets and the 8:1:1 split."""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CoverageError, DataError, EmptyDataError, ParseError
from .market_stats import MarketStats, ReturnsPanel, estimate_moments, open_input

logger = logging.getLogger(__name__)


class InteractionMatrix:
    """Binary ``m x n`` user-item holdings stored as CSR.

    ``user_ids`` and ``item_ids`` map row/column indices to external ids.
    Rows may be empty only for split products (test/validation); matrices
    built by :func:`from_pairs` never have empty rows.
    """

    def __init__(self, matrix, user_ids, item_ids):
        mat = sp.csr_matrix(matrix, dtype=np.float64)
        mat.sum_duplicates()
        mat.data[:] = 1.0
        mat.eliminate_zeros()
        mat.sort_indices()
        self.matrix = mat
        self.user_ids = tuple(str(u) for u in user_ids)
        self.item_ids = tuple(str(i) for i in item_ids)
        if mat.shape != (len(self.user_ids), len(self.item_ids)):
            raise DataError(f"matrix shape {mat.shape} does not match id maps")

    @classmethod
    def from_pairs(cls, pairs, user_ids=None, item_ids=None, min_holdings: int = 1):
        """Build from ``(user_id, item_id)`` pairs.

        Without explicit id maps, ids are sorted lexicographically. Users with
        fewer than ``min_holdings`` distinct items are dropped.
        """
        pairs = set((str(u), str(i)) for u, i in pairs)
        per_user: dict[str, set] = {}
        for u, i in pairs:
            per_user.setdefault(u, set()).add(i)
        keep = {u for u, items in per_user.items() if len(items) >= min_holdings}
        dropped = len(per_user) - len(keep)
        if dropped:
            logger.info("dropped %d users with fewer than %d holdings", dropped, min_holdings)
        if not keep:
            raise EmptyDataError("no users left after filtering")
        if user_ids is None:
            user_ids = sorted(keep)
        else:
            user_ids = [u for u in user_ids if u in keep]
        if item_ids is None:
            item_ids = sorted({i for u, i in pairs if u in keep})
        uidx = {u: k for k, u in enumerate(user_ids)}
        iidx = {i: k for k, i in enumerate(item_ids)}
        rows, cols = [], []
        for u, i in pairs:
            if u in uidx and i in iidx:
                rows.append(uidx[u])
                cols.append(iidx[i])
        mat = sp.csr_matrix(
            (np.ones(len(rows)), (np.array(rows, dtype=int), np.array(cols, dtype=int))),
            shape=(len(user_ids), len(item_ids)),
        )
        return cls(mat, user_ids, item_ids)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def items_of(self, u: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[u]:m.indptr[u + 1]]

    def item_sets(self) -> list[np.ndarray]:
        return [self.items_of(u) for u in range(self.m)]

    def counts(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def pairs(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return list(zip(coo.row[order].tolist(), coo.col[order].tolist()))

    def dense_rows(self, lo: int, hi: int) -> np.ndarray:
        return self.matrix[lo:hi].toarray()

    def with_matrix(self, matrix) -> "InteractionMatrix":
        return InteractionMatrix(matrix, self.user_ids, self.item_ids)

    def __add__(self, other: "InteractionMatrix") -> "InteractionMatrix":
        if other.shape != self.shape:
            raise DataError("cannot combine interaction matrices of different shapes")
        return self.with_matrix(self.matrix + other.matrix)

    @property
    def shape(self):
        return self.matrix.shape

    def __repr__(self):
        return f"InteractionMatrix(m={self.m}, n={self.n}, nnz={self.nnz})"


@dataclass(frozen=True)
class SubDataset:
    train: InteractionMatrix
    test: InteractionMatrix
    validation: InteractionMatrix
    stats: MarketStats
    expost_panel: ReturnsPanel
    year_label: int

    @property
    def full(self) -> InteractionMatrix:
        return self.train + self.test + self.validation


def load_holdings(source, min_holdings: int = 1) -> InteractionMatrix:
    """Read a ``user_id,item_id`` CSV snapshot."""
    pairs = []
    with open_input(source) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDataError(f"{source} is empty")
        if [h.strip() for h in header] != ["user_id", "item_id"]:
            raise ParseError(f"expected header user_id,item_id, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", line=lineno)
            u, i = row[0].strip(), row[1].strip()
            if not u or not i:
                raise ParseError("empty user or item id", line=lineno)
            pairs.append((u, i))
    if not pairs:
        raise EmptyDataError(f"{source} has no data rows")
    return InteractionMatrix.from_pairs(pairs, min_holdings=min_holdings)


def write_holdings_csv(data: InteractionMatrix, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "item_id"])
        for u, i in data.pairs():
            writer.writerow([data.user_ids[u], data.item_ids[i]])


def load_holdings_dir(directory, min_holdings: int = 1) -> dict[int, InteractionMatrix]:
    """Load every ``holdings_<year>.csv`` in a directory."""
    out = {}
    if not Path(directory).is_dir():
        raise DataError(f"holdings directory {directory} does not exist")
    for path in sorted(Path(directory).glob("holdings_*.csv")):
        try:
            year = int(path.stem.split("_", 1)[1])
        except ValueError:
            continue
        out[year] = load_holdings(path, min_holdings=min_holdings)
    if not out:
        raise EmptyDataError(f"no holdings_<year>.csv files in {directory}")
    return out


def _user_rng(seed: int, user_id: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, zlib.crc32(user_id.encode("utf-8"))]))


def split_dataset(full: InteractionMatrix, ratios=(8, 1, 1), seed: int = 0):
    """Per-user random train/test/validation split.

    Test and validation each receive ``floor(h * r / sum(ratios))`` of a
    user's ``h`` holdings and train keeps the rest; users with fewer than
    three holdings go entirely to train. Randomness is keyed on the user id,
    so the partition does not depend on row order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise DataError(f"invalid split ratios {ratios}")
    total = sum(ratios)
    parts = [([], []) for _ in range(3)]
    for u in range(full.m):
        items = full.items_of(u)
        h = items.size
        if h < 3:
            n_test = n_val = 0
        else:
            n_test = int(np.floor(h * ratios[1] / total))
            n_val = int(np.floor(h * ratios[2] / total))
            # keep at least one train entry
            while n_test + n_val >= h:
                if n_val >= n_test and n_val > 0:
                    n_val -= 1
                else:
                    n_test -= 1
        # order by external item id before shuffling so the draw is layout-free
        ordered = items[np.argsort([full.item_ids[i] for i in items], kind="stable")]
        perm = _user_rng(seed, full.user_ids[u]).permutation(h)
        shuffled = ordered[perm]
        chunks = (shuffled[n_test + n_val:], shuffled[:n_test], shuffled[n_test:n_test + n_val])
        for (rows, cols), chunk in zip(parts, chunks):
            rows.extend([u] * chunk.size)
            cols.extend(chunk.tolist())
    out = []
    for rows, cols in parts:
        mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=full.shape)
        out.append(full.with_matrix(mat))
    return tuple(out)


def build_yearly(
    holdings_by_year: dict,
    returns: ReturnsPanel,
    year: int,
    est_years: int = 5,
    post_years: int = 5,
    *,
    seed: int = 0,
    ratios=(8, 1, 1),
    min_holdings: int = 1,
    annualize: bool = False,
    diagonal_loading: float | None = None,
) -> SubDataset:
    """Assemble the sub-dataset for holdings reported at the end of ``year``.

    Moments come from years ``year-est_years+1 .. year`` and the ex-post panel
    covers ``year+1 .. year+post_years``. The item universe is every item of
    ``returns`` (the panel is complete by construction); held items missing
    from ``returns`` are dropped with a warning.
    """
    if year not in holdings_by_year:
        raise CoverageError(f"no holdings snapshot for year {year}")
    if est_years < 1 or post_years < 0:
        raise DataError("est_years must be >= 1 and post_years >= 0")
    snapshot = holdings_by_year[year]
    years = set(returns.years().tolist()) if returns.n_periods else set()
    need = set(range(year - est_years + 1, year + post_years + 1))
    missing_years = sorted(need - years)
    if missing_years:
        raise CoverageError(f"returns do not cover years {missing_years}", missing=missing_years)

    universe = set(returns.item_ids)
    held = set(snapshot.item_ids[i] for i in np.unique(snapshot.matrix.indices))
    uncovered = sorted(held - universe)
    if uncovered:
        logger.warning("dropping %d held items without return coverage: %s", len(uncovered), uncovered[:10])
    pairs = [
        (snapshot.user_ids[u], snapshot.item_ids[i])
        for u, i in snapshot.pairs()
        if snapshot.item_ids[i] in universe
    ]
    if not pairs:
        raise CoverageError("no held item has return coverage", missing=uncovered)
    full = InteractionMatrix.from_pairs(pairs, item_ids=returns.item_ids, min_holdings=min_holdings)

    est_panel = returns.select_years(year - est_years + 1, year)
    stats = estimate_moments(est_panel, annualize=annualize, diagonal_loading=diagonal_loading)
    expost = returns.select_years(year + 1, year + post_years)
    train, test, validation = split_dataset(full, ratios, seed)
    return SubDataset(train, test, validation, stats, expost, int(year))
