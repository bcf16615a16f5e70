//! Continuous-coordinate plumbing: cell-center grids, 4-neighbor local
//! ensembles with area-ratio weights, and the generic ensemble query that
//! both the semantic and appearance decoders are built on.

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, SairError};

/// A point in the normalized image domain, components in [-1, 1].
/// `y` runs along image rows, `x` along columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coord {
    pub y: f64,
    pub x: f64,
}

impl Coord {
    pub fn new(y: f64, x: f64) -> Self {
        Coord { y, x }
    }

    pub fn is_finite(&self) -> bool {
        self.y.is_finite() && self.x.is_finite()
    }

    pub fn in_unit_square(&self) -> bool {
        self.is_finite() && self.y.abs() <= 1.0 && self.x.abs() <= 1.0
    }
}

/// Cell-center coordinate convention over an H×W latent grid:
/// `coord(i, j) = (-1 + (2i+1)/H, -1 + (2j+1)/W)`.
/// Every center is strictly inside (-1, 1)².
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordinateGrid {
    height: usize,
    width: usize,
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SairError::InvalidArgument(format!(
                "coordinate grid dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(CoordinateGrid { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn coord(&self, i: usize, j: usize) -> Coord {
        debug_assert!(i < self.height && j < self.width);
        Coord {
            y: -1.0 + (2.0 * i as f64 + 1.0) / self.height as f64,
            x: -1.0 + (2.0 * j as f64 + 1.0) / self.width as f64,
        }
    }

    /// Row-major list of all cell centers.
    pub fn centers(&self) -> Vec<Coord> {
        let mut out = Vec::with_capacity(self.cell_count());
        for i in 0..self.height {
            for j in 0..self.width {
                out.push(self.coord(i, j));
            }
        }
        out
    }

    /// Extent of one cell in normalized coordinates.
    pub fn cell_size(&self) -> [f64; 2] {
        [2.0 / self.height as f64, 2.0 / self.width as f64]
    }
}

pub fn make_coordinate_grid(height: usize, width: usize) -> Result<CoordinateGrid> {
    CoordinateGrid::new(height, width)
}

/// The four latent cells surrounding a query, with area-ratio weights.
///
/// Weights form a simplex (ω ≥ 0, Σω = 1). Offsets are `(p − q_center)`
/// scaled componentwise by (H, W) so they are resolution-independent.
#[derive(Debug, Clone)]
pub struct LocalNeighborhood {
    pub query: Coord,
    /// Grid indices (row, col), clamped at borders; duplicates permitted.
    pub cells: [[usize; 2]; 4],
    pub centers: [Coord; 4],
    pub offsets: [[f64; 2]; 4],
    pub weights: [f64; 4],
}

/// Neighbor pair and weights along one axis.
///
/// `u` is the query in cell units (centers at integers). Interior weights
/// reduce to the 1-d bilinear coefficients; at borders the pair clamps onto
/// the edge cell and degenerate spans split the weight evenly, which keeps
/// the simplex exact under duplication.
fn axis_neighbors(u: f64, len: usize) -> ([usize; 2], [f64; 2]) {
    let last = (len - 1) as f64;
    let lo = u.floor();
    let i0 = lo.clamp(0.0, last) as usize;
    let i1 = (lo + 1.0).clamp(0.0, last) as usize;
    let d0 = (u - i1 as f64).abs();
    let d1 = (u - i0 as f64).abs();
    let sum = d0 + d1;
    if sum < 1e-12 {
        ([i0, i1], [0.5, 0.5])
    } else {
        ([i0, i1], [d0 / sum, d1 / sum])
    }
}

pub fn build_neighborhood(grid: &CoordinateGrid, p: Coord) -> Result<LocalNeighborhood> {
    if !p.in_unit_square() {
        return Err(SairError::InvalidArgument(format!(
            "query ({}, {}) outside [-1,1]^2",
            p.y, p.x
        )));
    }
    let h = grid.height() as f64;
    let w = grid.width() as f64;
    // Cell units: centers sit at integer positions 0..H-1.
    let u = (p.y + 1.0) / 2.0 * h - 0.5;
    let v = (p.x + 1.0) / 2.0 * w - 0.5;
    let (rows, wu) = axis_neighbors(u, grid.height());
    let (cols, wv) = axis_neighbors(v, grid.width());

    let mut cells = [[0usize; 2]; 4];
    let mut centers = [Coord::new(0.0, 0.0); 4];
    let mut offsets = [[0.0f64; 2]; 4];
    let mut weights = [0.0f64; 4];
    let mut k = 0;
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &c) in cols.iter().enumerate() {
            let center = grid.coord(r, c);
            cells[k] = [r, c];
            centers[k] = center;
            offsets[k] = [(p.y - center.y) * h, (p.x - center.x) * w];
            // Area ratio of the rectangle spanned by p and the cell diagonal
            // to this one, factored per axis.
            weights[k] = wu[ri] * wv[ci];
            k += 1;
        }
    }
    Ok(LocalNeighborhood {
        query: p,
        cells,
        centers,
        offsets,
        weights,
    })
}

/// A set of continuous queries against one latent grid, with prebuilt
/// neighborhoods and optional per-query cell-size hints.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    grid: CoordinateGrid,
    queries: Vec<Coord>,
    neighborhoods: Vec<LocalNeighborhood>,
    cell_sizes: Option<Vec<[f64; 2]>>,
}

impl QueryBatch {
    pub fn build(grid: CoordinateGrid, queries: Vec<Coord>) -> Result<Self> {
        let mut neighborhoods = Vec::with_capacity(queries.len());
        for &p in &queries {
            neighborhoods.push(build_neighborhood(&grid, p)?);
        }
        Ok(QueryBatch {
            grid,
            queries,
            neighborhoods,
            cell_sizes: None,
        })
    }

    /// Queries at every pixel center of an `out_h`×`out_w` raster, with
    /// neighborhoods on `grid`. Row-major, so the result of a dense query
    /// reshapes directly into an image.
    pub fn dense(grid: CoordinateGrid, out_h: usize, out_w: usize) -> Result<Self> {
        let out = CoordinateGrid::new(out_h, out_w)?;
        QueryBatch::build(grid, out.centers())
    }

    /// Attach one cell-size hint (normalized units) to every query.
    pub fn with_cell_size(mut self, cell: [f64; 2]) -> Self {
        self.cell_sizes = Some(vec![cell; self.queries.len()]);
        self
    }

    pub fn grid(&self) -> CoordinateGrid {
        self.grid
    }

    pub fn queries(&self) -> &[Coord] {
        &self.queries
    }

    pub fn neighborhoods(&self) -> &[LocalNeighborhood] {
        &self.neighborhoods
    }

    pub fn cell_sizes(&self) -> Option<&[[f64; 2]]> {
        self.cell_sizes.as_deref()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Device-side form of one or more `QueryBatch`es against a shared grid,
/// flattened for gather-style evaluation over batched feature maps.
///
/// `indices` address rows of a `[batch·H·W, channels]` feature matrix.
#[derive(Debug)]
pub struct EnsembleIndex {
    grid: CoordinateGrid,
    batch_size: usize,
    query_count: usize,
    /// u32 `[query_count · 4]`, flat cell ids including the batch offset.
    pub indices: Tensor,
    /// `[query_count, 4, 1]`, the simplex weights.
    pub weights: Tensor,
    /// `[query_count · 4, 2]`, resolution-scaled offsets.
    pub offsets: Tensor,
    /// `[query_count · 4, 2]` cell-size hints, when the batches carry them.
    pub cells: Option<Tensor>,
}

impl EnsembleIndex {
    /// One `QueryBatch` per batch element; all batches must target the same
    /// grid shape and agree on whether they carry cell hints.
    pub fn new(batches: &[&QueryBatch], dtype: DType, device: &Device) -> Result<Self> {
        let Some(first) = batches.first() else {
            return Err(SairError::InvalidArgument(
                "ensemble index needs at least one query batch".into(),
            ));
        };
        let grid = first.grid();
        let with_cells = first.cell_sizes().is_some();
        let total: usize = batches.iter().map(|b| b.len()).sum();

        let mut indices = Vec::with_capacity(total * 4);
        let mut weights = Vec::with_capacity(total * 4);
        let mut offsets = Vec::with_capacity(total * 8);
        let mut cells = Vec::with_capacity(if with_cells { total * 8 } else { 0 });
        for (b, batch) in batches.iter().enumerate() {
            if batch.grid() != grid {
                return Err(SairError::shape(
                    "ensemble index",
                    format!("{}x{} grid", grid.height(), grid.width()),
                    format!("{}x{}", batch.grid().height(), batch.grid().width()),
                ));
            }
            if batch.cell_sizes().is_some() != with_cells {
                return Err(SairError::InvalidArgument(
                    "mixed cell-size hints across query batches".into(),
                ));
            }
            let base = (b * grid.cell_count()) as u32;
            for (qi, n) in batch.neighborhoods().iter().enumerate() {
                for k in 0..4 {
                    let [r, c] = n.cells[k];
                    indices.push(base + (r * grid.width() + c) as u32);
                    weights.push(n.weights[k]);
                    offsets.extend_from_slice(&n.offsets[k]);
                    if with_cells {
                        cells.extend_from_slice(&batch.cell_sizes().unwrap()[qi]);
                    }
                }
            }
        }

        let to = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(EnsembleIndex {
            grid,
            batch_size: batches.len(),
            query_count: total,
            indices: Tensor::from_vec(indices, total * 4, device)?,
            weights: to(weights, &[total, 4, 1])?,
            offsets: to(offsets, &[total * 4, 2])?,
            cells: if with_cells {
                Some(to(cells, &[total * 4, 2])?)
            } else {
                None
            },
        })
    }

    /// Replicate a single query batch across `batch_size` feature maps.
    pub fn shared(
        batch_size: usize,
        batch: &QueryBatch,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let refs = vec![batch; batch_size];
        EnsembleIndex::new(&refs, dtype, device)
    }

    pub fn grid(&self) -> CoordinateGrid {
        self.grid
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }
}

/// Area-weighted local ensemble (the continuous-query primitive):
/// `output[i] = Σ_{q ∈ N_i} ω_q · decode(features[q], offset(p_i, q))`.
///
/// `features` is `[batch·H·W, channels]`, row-major per map. `decode` maps
/// `([n·4, channels], [n·4, 2] offsets, optional [n·4, 2] cell hints)` to
/// `[n·4, out]` and may close over network parameters; the whole pipeline
/// stays differentiable.
pub fn local_ensemble_query<F>(
    features: &Tensor,
    index: &EnsembleIndex,
    decode: F,
) -> Result<Tensor>
where
    F: Fn(&Tensor, &Tensor, Option<&Tensor>) -> Result<Tensor>,
{
    let expected = index.batch_size() * index.grid().cell_count();
    let (rows, _channels) = features.dims2()?;
    if rows != expected {
        return Err(SairError::shape(
            "local ensemble features",
            format!("{expected} rows"),
            format!("{rows} rows"),
        ));
    }
    let gathered = features.index_select(&index.indices, 0)?;
    let decoded = decode(&gathered, &index.offsets, index.cells.as_ref())?;
    let (drows, out_dim) = decoded.dims2()?;
    if drows != index.query_count() * 4 {
        return Err(SairError::shape(
            "local ensemble decode",
            format!("{} rows", index.query_count() * 4),
            format!("{drows} rows"),
        ));
    }
    let decoded = decoded.reshape((index.query_count(), 4, out_dim))?;
    Ok(decoded.broadcast_mul(&index.weights)?.sum(1)?)
}

/// Decode stub that passes feature vectors through untouched, turning the
/// ensemble into plain interpolation.
pub fn identity_decode(
    features: &Tensor,
    _offsets: &Tensor,
    _cells: Option<&Tensor>,
) -> Result<Tensor> {
    Ok(features.clone())
}
