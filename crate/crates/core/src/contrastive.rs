//! Spatial contrastive loss, similarity-weighted feature smoothing, global
//! propagation loss, and their additive combination.
//!
//! All values are forward scalars plus exact analytic gradients with respect
//! to both feature grids and the smoothing transform. Cosines follow the
//! zero-vector convention: `cos(x, y)` with a zero-norm argument is 0 and so
//! is its gradient, which keeps every expression finite without epsilons in
//! the math itself.

use serde::Serialize;

use crate::grid::FeatureGrid;
use crate::viewgeom::CorrespondenceSet;
use crate::{Error, Result};

/// Loss hyperparameters: softmax temperature and the propagation weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", format!("{} must be > 0", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid(
                "alpha",
                format!("{} must be >= 0", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Per-cell linear map applied inside the smoothing sum, a square
/// channel-to-channel matrix (the 1x1 convolution of the smoothing step).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothingTransform {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub matrix: Vec<f64>,
}

impl SmoothingTransform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self { dim, matrix }
    }

    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::ShapeMismatch {
                context: "smoothing transform",
                expected: format!("{} values", dim * dim),
                got: format!("{}", matrix.len()),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "smoothing transform".into(),
            });
        }
        Ok(Self { dim, matrix })
    }

    /// y = M x
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.dim {
            let row = &self.matrix[r * self.dim..(r + 1) * self.dim];
            y[r] = row.iter().zip(x).map(|(m, v)| m * v).sum();
        }
    }

    /// y = M^T x
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for r in 0..self.dim {
            let row = &self.matrix[r * self.dim..(r + 1) * self.dim];
            for (yc, m) in y.iter_mut().zip(row) {
                *yc += m * x[r];
            }
        }
    }
}

/// Forward values and gradients of one combined-loss evaluation.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub l_spatial: f64,
    pub l_glopro: f64,
    pub l_total: f64,
    /// Cells with a nonempty positive set, summed over both directions.
    pub counted_cells: usize,
    pub grad_a: FeatureGrid,
    pub grad_b: FeatureGrid,
    /// Row-major C x C gradient for the smoothing transform.
    pub grad_g: Vec<f64>,
}

/// Unit-normalized copy of a grid plus the original norms.
struct Normalized {
    cells: usize,
    channels: usize,
    unit: Vec<f64>,
    norm: Vec<f64>,
}

impl Normalized {
    fn build(grid: &FeatureGrid) -> Self {
        let cells = grid.cells();
        let channels = grid.channels;
        let mut unit = vec![0.0; cells * channels];
        let mut norm = vec![0.0; cells];
        for i in 0..cells {
            let x = grid.cell(i);
            let n = crate::grid::norm(x);
            norm[i] = n;
            if n > 0.0 {
                for (u, &v) in unit[i * channels..(i + 1) * channels].iter_mut().zip(x) {
                    *u = v / n;
                }
            }
        }
        Self {
            cells,
            channels,
            unit,
            norm,
        }
    }

    fn unit_cell(&self, i: usize) -> &[f64] {
        &self.unit[i * self.channels..(i + 1) * self.channels]
    }
}

/// cos between every cell of `a` and every cell of `b`, row-major (a, b).
fn cosine_matrix(a: &Normalized, b: &Normalized) -> Vec<f64> {
    let mut out = vec![0.0; a.cells * b.cells];
    for i in 0..a.cells {
        if a.norm[i] == 0.0 {
            continue;
        }
        let ua = a.unit_cell(i);
        for j in 0..b.cells {
            if b.norm[j] == 0.0 {
                continue;
            }
            out[i * b.cells + j] = crate::grid::dot(ua, b.unit_cell(j));
        }
    }
    out
}

/// Accumulate `scale * d cos(x_i, y_j) / d x_i` into `out` given unit vectors
/// and norms. No-op when either norm is zero.
fn add_cosine_grad(
    out: &mut [f64],
    scale: f64,
    unit_x: &[f64],
    norm_x: f64,
    unit_y: &[f64],
    cos: f64,
) {
    if norm_x == 0.0 || scale == 0.0 {
        return;
    }
    for c in 0..out.len() {
        out[c] += scale * (unit_y[c] - cos * unit_x[c]) / norm_x;
    }
}

fn check_pair(f_a: &FeatureGrid, f_b: &FeatureGrid, corr: &CorrespondenceSet) -> Result<()> {
    if (f_a.rows, f_a.cols) != corr.grid_shape_a || (f_b.rows, f_b.cols) != corr.grid_shape_b {
        return Err(Error::ShapeMismatch {
            context: "correspondence grids",
            expected: format!("{:?} / {:?}", corr.grid_shape_a, corr.grid_shape_b),
            got: format!(
                "{:?} / {:?}",
                (f_a.rows, f_a.cols),
                (f_b.rows, f_b.cols)
            ),
        });
    }
    if f_a.channels != f_b.channels {
        return Err(Error::ShapeMismatch {
            context: "feature channels",
            expected: format!("{}", f_a.channels),
            got: format!("{}", f_b.channels),
        });
    }
    if !corr.has_positives() {
        return Err(Error::NoPositivePairs);
    }
    Ok(())
}

/// Cells with a nonempty positive set, both directions (view A plus view B).
pub fn counted_cells(corr: &CorrespondenceSet) -> usize {
    let counted_a = corr.positives.iter().filter(|p| !p.is_empty()).count();
    let mut has_b = vec![false; corr.cells_b()];
    for pos in &corr.positives {
        for &j in pos {
            has_b[j as usize] = true;
        }
    }
    counted_a + has_b.iter().filter(|&&b| b).count()
}

/// Spatial contrastive loss over a correspondence set, averaged over both
/// view directions, with exact gradients for both grids.
///
/// Per counted cell the term is a softmax cross-entropy over cosine logits:
/// `-log( sum_P e^{cos/tau} / (sum_P e^{cos/tau} + sum_N e^{cos/tau}) )`.
/// Cells with an empty positive set contribute nothing and are excluded from
/// the per-direction mean.
pub fn spatial_contrastive_loss(
    f_a: &FeatureGrid,
    f_b: &FeatureGrid,
    corr: &CorrespondenceSet,
    cfg: &LossConfig,
) -> Result<(f64, FeatureGrid, FeatureGrid)> {
    cfg.validate()?;
    check_pair(f_a, f_b, corr)?;
    let na = Normalized::build(f_a);
    let nb = Normalized::build(f_b);
    let (n_a, n_b) = (na.cells, nb.cells);
    let cos = cosine_matrix(&na, &nb);

    let mut is_pos = vec![false; n_a * n_b];
    for (i, pos) in corr.positives.iter().enumerate() {
        for &j in pos {
            is_pos[i * n_b + j as usize] = true;
        }
    }
    let counted_a = corr.positives.iter().filter(|p| !p.is_empty()).count();
    let mut b_counted = vec![false; n_b];
    for pos in &corr.positives {
        for &j in pos {
            b_counted[j as usize] = true;
        }
    }
    let counted_b = b_counted.iter().filter(|&&f| f).count();

    // d value / d s_ij, where s_ij = cos_ij / tau
    let mut g = vec![0.0; n_a * n_b];
    let mut value = 0.0;

    // direction A -> B: softmax over each row
    let row_w = 0.5 / counted_a as f64;
    for i in 0..n_a {
        if corr.positives[i].is_empty() {
            continue;
        }
        let row = &cos[i * n_b..(i + 1) * n_b];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / cfg.tau;
        let mut sum_all = 0.0;
        let mut sum_pos = 0.0;
        for j in 0..n_b {
            let e = (row[j] / cfg.tau - m).exp();
            sum_all += e;
            if is_pos[i * n_b + j] {
                sum_pos += e;
            }
        }
        value += row_w * (sum_all.ln() - sum_pos.ln());
        for j in 0..n_b {
            let e = (row[j] / cfg.tau - m).exp();
            g[i * n_b + j] += row_w * e / sum_all;
            if is_pos[i * n_b + j] {
                g[i * n_b + j] -= row_w * e / sum_pos;
            }
        }
    }

    // direction B -> A: softmax over each column, same logits transposed
    let col_w = 0.5 / counted_b as f64;
    for j in 0..n_b {
        if !b_counted[j] {
            continue;
        }
        let m = (0..n_a)
            .map(|i| cos[i * n_b + j])
            .fold(f64::NEG_INFINITY, f64::max)
            / cfg.tau;
        let mut sum_all = 0.0;
        let mut sum_pos = 0.0;
        for i in 0..n_a {
            let e = (cos[i * n_b + j] / cfg.tau - m).exp();
            sum_all += e;
            if is_pos[i * n_b + j] {
                sum_pos += e;
            }
        }
        value += col_w * (sum_all.ln() - sum_pos.ln());
        for i in 0..n_a {
            let e = (cos[i * n_b + j] / cfg.tau - m).exp();
            g[i * n_b + j] += col_w * e / sum_all;
            if is_pos[i * n_b + j] {
                g[i * n_b + j] -= col_w * e / sum_pos;
            }
        }
    }

    // chain through the cosines into both grids
    let mut grad_a = FeatureGrid::zeros(f_a.rows, f_a.cols, f_a.channels, f_a.provenance);
    let mut grad_b = FeatureGrid::zeros(f_b.rows, f_b.cols, f_b.channels, f_b.provenance);
    for i in 0..n_a {
        for j in 0..n_b {
            let gval = g[i * n_b + j] / cfg.tau;
            if gval == 0.0 {
                continue;
            }
            let c = cos[i * n_b + j];
            add_cosine_grad(
                grad_a.cell_mut(i),
                gval,
                na.unit_cell(i),
                na.norm[i],
                nb.unit_cell(j),
                c,
            );
            add_cosine_grad(
                grad_b.cell_mut(j),
                gval,
                nb.unit_cell(j),
                nb.norm[j],
                na.unit_cell(i),
                c,
            );
        }
    }
    Ok((value, grad_a, grad_b))
}

/// Similarity-weighted feature smoothing: every cell becomes the sum over all
/// cells of the same view of `max(cos(x_i, x_j), 0)^2 * g(x_j)`, including
/// the self term. The sum is deliberately unnormalized.
pub fn smooth_features(f: &FeatureGrid, g: &SmoothingTransform) -> Result<FeatureGrid> {
    if g.dim != f.channels {
        return Err(Error::ShapeMismatch {
            context: "smoothing transform",
            expected: format!("dim {}", f.channels),
            got: format!("dim {}", g.dim),
        });
    }
    let n = Normalized::build(f);
    let cos = cosine_matrix(&n, &n);
    let c = f.channels;
    let mut projected = vec![0.0; f.cells() * c];
    for j in 0..f.cells() {
        g.apply(f.cell(j), &mut projected[j * c..(j + 1) * c]);
    }
    let mut out = FeatureGrid::zeros(f.rows, f.cols, c, f.provenance);
    for i in 0..f.cells() {
        let cell = out.cell_mut(i);
        for j in 0..f.cells() {
            let w = cos[i * f.cells() + j].max(0.0).powi(2);
            if w == 0.0 {
                continue;
            }
            for (o, p) in cell.iter_mut().zip(&projected[j * c..(j + 1) * c]) {
                *o += w * p;
            }
        }
    }
    Ok(out)
}

/// Smoothing state reused by the propagation loss backward pass.
struct Smoothed {
    norm: Normalized,
    cos: Vec<f64>,
    /// m_i = sum_j w_ij x_j (pre-transform weighted sums), row-major.
    weighted: Vec<f64>,
    smooth_norm: Vec<f64>,
    smooth_unit: Vec<f64>,
}

fn smooth_for_backward(f: &FeatureGrid, g: &SmoothingTransform) -> Smoothed {
    let norm = Normalized::build(f);
    let cos = cosine_matrix(&norm, &norm);
    let n = f.cells();
    let c = f.channels;
    let mut weighted = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..n {
            let w = cos[i * n + j].max(0.0).powi(2);
            if w == 0.0 {
                continue;
            }
            let x = f.cell(j);
            for (m, &v) in weighted[i * c..(i + 1) * c].iter_mut().zip(x) {
                *m += w * v;
            }
        }
    }
    let mut smooth = vec![0.0; c];
    let mut smooth_norm = vec![0.0; n];
    let mut smooth_unit = vec![0.0; n * c];
    for i in 0..n {
        g.apply(&weighted[i * c..(i + 1) * c], &mut smooth);
        let nn = crate::grid::norm(&smooth);
        smooth_norm[i] = nn;
        if nn > 0.0 {
            for (u, &v) in smooth_unit[i * c..(i + 1) * c].iter_mut().zip(&smooth) {
                *u = v / nn;
            }
        }
    }
    Smoothed {
        norm,
        cos,
        weighted,
        smooth_norm,
        smooth_unit,
    }
}

/// Backpropagate `d_smooth` (gradient at the smoothed vectors) through the
/// smoothing of `f`, accumulating into `grad_f` and `grad_g`.
fn smoothing_backward(
    f: &FeatureGrid,
    g: &SmoothingTransform,
    state: &Smoothed,
    d_smooth: &[f64],
    grad_f: &mut FeatureGrid,
    grad_g: &mut [f64],
) {
    let n = f.cells();
    let c = f.channels;
    let mut gt_d = vec![0.0; c];
    for i in 0..n {
        let d = &d_smooth[i * c..(i + 1) * c];
        if d.iter().all(|&v| v == 0.0) {
            continue;
        }
        // s_i = G m_i: gradient into the matrix is the outer product with m_i
        let m_i = &state.weighted[i * c..(i + 1) * c];
        for r in 0..c {
            for q in 0..c {
                grad_g[r * c + q] += d[r] * m_i[q];
            }
        }
        g.apply_transpose(d, &mut gt_d);
        for k in 0..n {
            let w = state.cos[i * n + k].max(0.0);
            let w2 = w * w;
            // direct path through g(x_k)
            if w2 != 0.0 {
                let cell = grad_f.cell_mut(k);
                for (o, &t) in cell.iter_mut().zip(&gt_d) {
                    *o += w2 * t;
                }
            }
            // weight path: w = relu(cos)^2 depends on x_i and x_k
            if w != 0.0 {
                let dw = crate::grid::dot(&gt_d, f.cell(k));
                let dc = 2.0 * w * dw;
                let cos_ik = state.cos[i * n + k];
                let (unit_i, unit_k) = (state.norm.unit_cell(i), state.norm.unit_cell(k));
                add_cosine_grad(
                    grad_f.cell_mut(i),
                    dc,
                    unit_i,
                    state.norm.norm[i],
                    unit_k,
                    cos_ik,
                );
                add_cosine_grad(
                    grad_f.cell_mut(k),
                    dc,
                    unit_k,
                    state.norm.norm[k],
                    unit_i,
                    cos_ik,
                );
            }
        }
    }
}

/// Global propagation loss: for every positive pair (i, j) accumulate
/// `-cos(smooth_a_i, b_j) - cos(smooth_b_j, a_i)` and average over pairs.
/// Smoothing happens within each view; gradients flow through the weights,
/// the transform and both grids exactly.
pub fn global_propagation_loss(
    f_a: &FeatureGrid,
    f_b: &FeatureGrid,
    corr: &CorrespondenceSet,
    g: &SmoothingTransform,
) -> Result<(f64, FeatureGrid, FeatureGrid, Vec<f64>)> {
    check_pair(f_a, f_b, corr)?;
    if g.dim != f_a.channels {
        return Err(Error::ShapeMismatch {
            context: "smoothing transform",
            expected: format!("dim {}", f_a.channels),
            got: format!("dim {}", g.dim),
        });
    }
    let c = f_a.channels;
    let state_a = smooth_for_backward(f_a, g);
    let state_b = smooth_for_backward(f_b, g);
    let pairs = corr.positive_pairs() as f64;
    let scale = 1.0 / pairs;

    let mut value = 0.0;
    let mut grad_a = FeatureGrid::zeros(f_a.rows, f_a.cols, c, f_a.provenance);
    let mut grad_b = FeatureGrid::zeros(f_b.rows, f_b.cols, c, f_b.provenance);
    let mut d_smooth_a = vec![0.0; f_a.cells() * c];
    let mut d_smooth_b = vec![0.0; f_b.cells() * c];

    for (i, pos) in corr.positives.iter().enumerate() {
        for &j in pos {
            let j = j as usize;
            // -cos(smooth_a_i, b_j)
            let cos1 = if state_a.smooth_norm[i] > 0.0 && state_b.norm.norm[j] > 0.0 {
                crate::grid::dot(
                    &state_a.smooth_unit[i * c..(i + 1) * c],
                    state_b.norm.unit_cell(j),
                )
            } else {
                0.0
            };
            add_cosine_grad(
                &mut d_smooth_a[i * c..(i + 1) * c],
                -scale,
                &state_a.smooth_unit[i * c..(i + 1) * c],
                state_a.smooth_norm[i],
                state_b.norm.unit_cell(j),
                cos1,
            );
            add_cosine_grad(
                grad_b.cell_mut(j),
                -scale,
                state_b.norm.unit_cell(j),
                state_b.norm.norm[j],
                &state_a.smooth_unit[i * c..(i + 1) * c],
                cos1,
            );
            // -cos(smooth_b_j, a_i)
            let cos2 = if state_b.smooth_norm[j] > 0.0 && state_a.norm.norm[i] > 0.0 {
                crate::grid::dot(
                    &state_b.smooth_unit[j * c..(j + 1) * c],
                    state_a.norm.unit_cell(i),
                )
            } else {
                0.0
            };
            add_cosine_grad(
                &mut d_smooth_b[j * c..(j + 1) * c],
                -scale,
                &state_b.smooth_unit[j * c..(j + 1) * c],
                state_b.smooth_norm[j],
                state_a.norm.unit_cell(i),
                cos2,
            );
            add_cosine_grad(
                grad_a.cell_mut(i),
                -scale,
                state_a.norm.unit_cell(i),
                state_a.norm.norm[i],
                &state_b.smooth_unit[j * c..(j + 1) * c],
                cos2,
            );
            value -= scale * (cos1 + cos2);
        }
    }

    let mut grad_g = vec![0.0; c * c];
    smoothing_backward(f_a, g, &state_a, &d_smooth_a, &mut grad_a, &mut grad_g);
    smoothing_backward(f_b, g, &state_b, &d_smooth_b, &mut grad_b, &mut grad_g);
    Ok((value, grad_a, grad_b, grad_g))
}

/// Combined pretraining loss `l_spatial + alpha * l_glopro`, gradients summed
/// accordingly. The propagation term is always evaluated (the report carries
/// it even at `alpha = 0`), but its gradients are scaled by `alpha`.
pub fn combined_loss(
    f_a: &FeatureGrid,
    f_b: &FeatureGrid,
    corr: &CorrespondenceSet,
    g: &SmoothingTransform,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let (l_spatial, mut grad_a, mut grad_b) = spatial_contrastive_loss(f_a, f_b, corr, cfg)?;
    let (l_glopro, gp_a, gp_b, gp_g) = global_propagation_loss(f_a, f_b, corr, g)?;
    for (o, v) in grad_a.values.iter_mut().zip(&gp_a.values) {
        *o += cfg.alpha * v;
    }
    for (o, v) in grad_b.values.iter_mut().zip(&gp_b.values) {
        *o += cfg.alpha * v;
    }
    let grad_g: Vec<f64> = gp_g.iter().map(|v| cfg.alpha * v).collect();
    Ok(LossReport {
        l_spatial,
        l_glopro,
        l_total: l_spatial + cfg.alpha * l_glopro,
        counted_cells: counted_cells(corr),
        grad_a,
        grad_b,
        grad_g,
    })
}
