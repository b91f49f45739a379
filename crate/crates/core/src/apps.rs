//! Task generators and ground-truth oracles for operator-learning runs.
//!
//! Input fields are log-normal: i.i.d. standard normals on a coarse periodic
//! grid, trigonometric interpolation onto the target grid, pointwise
//! exponential. The reference task maps such a positive potential to the
//! diagonal of the inverse of the shifted periodic Laplacian; the oracle
//! assembles the central-difference operator densely and reads the diagonal
//! of its inverse off a Cholesky factorization. A synthetic `smoke` task
//! (pointwise nonlinearity of a fixed periodic convolution) is included as a
//! fast training sanity check; it does not correspond to a reference
//! problem.

use crate::rng::Stream;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AppsError {
    CoarseExceedsGrid { coarse: usize, grid: usize },
    GridTooLarge { grid: usize, max: usize },
    NonPositivePotential { index: usize, value: f64 },
    SingularOperator,
    EmptyDataset,
    BadTask(String),
    BadLength { expected: usize, got: usize },
}

impl fmt::Display for AppsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppsError::CoarseExceedsGrid { coarse, grid } => {
                write!(f, "coarse grid {coarse} exceeds target grid {grid}")
            }
            AppsError::GridTooLarge { grid, max } => {
                write!(f, "grid {grid} exceeds the dense-oracle cap {max}")
            }
            AppsError::NonPositivePotential { index, value } => {
                write!(f, "potential must be strictly positive; sample entry {index} is {value}")
            }
            AppsError::SingularOperator => write!(f, "operator is numerically singular"),
            AppsError::EmptyDataset => write!(f, "dataset must contain at least one sample"),
            AppsError::BadTask(name) => write!(f, "unknown task '{name}'"),
            AppsError::BadLength { expected, got } => {
                write!(f, "field length {got} does not match grid size {expected}")
            }
        }
    }
}

impl std::error::Error for AppsError {}

/// One input/target pair over the periodic grid, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Potential to diagonal of the inverse shifted Laplacian, 1D.
    Green1d,
    /// Same map on a 2D grid.
    Green2d,
    /// Pointwise nonlinearity of a fixed periodic convolution; synthetic.
    Smoke,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Green1d => "green1d",
            TaskKind::Green2d => "green2d",
            TaskKind::Smoke => "smoke",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind, AppsError> {
        match s {
            "green1d" => Ok(TaskKind::Green1d),
            "green2d" => Ok(TaskKind::Green2d),
            "smoke" => Ok(TaskKind::Smoke),
            other => Err(AppsError::BadTask(other.to_string())),
        }
    }

    pub fn dim(self) -> usize {
        match self {
            TaskKind::Green2d => 2,
            _ => 1,
        }
    }
}

/// Generated samples plus the descriptor that reproduces them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub grid: usize,
    pub coarse: usize,
    pub seed: u64,
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.task.dim()
    }

    /// Flat field length per sample.
    pub fn field_len(&self) -> usize {
        self.grid.pow(self.dim() as u32)
    }
}

/// Trigonometric interpolation of periodic samples onto `n` points. The
/// interpolant reproduces the samples at the coarse points; for even `m` the
/// highest mode is split evenly between its two frequencies, which keeps the
/// result real and the coarse points exact.
pub fn interpolate_periodic(coarse: &[f64], n: usize) -> Vec<f64> {
    let m = coarse.len();
    debug_assert!(m >= 1 && n >= m);
    let tau = std::f64::consts::TAU;
    // real DFT of the coarse samples
    let kmax = m / 2;
    let mut cos_c = vec![0.0; kmax + 1];
    let mut sin_c = vec![0.0; kmax + 1];
    for k in 0..=kmax {
        let mut a = 0.0;
        let mut b = 0.0;
        for (j, z) in coarse.iter().enumerate() {
            let ang = tau * (k * j) as f64 / m as f64;
            a += z * ang.cos();
            b += z * ang.sin();
        }
        cos_c[k] = a;
        sin_c[k] = b;
    }
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let x = i as f64 / n as f64;
        let mut acc = cos_c[0];
        for k in 1..=kmax {
            let ang = tau * k as f64 * x;
            let weight = if 2 * k == m { 1.0 } else { 2.0 };
            acc += weight * (cos_c[k] * ang.cos() + sin_c[k] * ang.sin());
        }
        *o = acc / m as f64;
    }
    out
}

/// Draw `coarse^dim` i.i.d. standard normals, interpolate onto the
/// `grid^dim` points, exponentiate. Strictly positive output.
pub fn sample_field(
    dim: usize,
    grid: usize,
    coarse: usize,
    rng: &mut Stream,
) -> Result<Vec<f64>, AppsError> {
    let normals = rng.normal_vec(coarse.pow(dim as u32));
    sample_field_from_coarse(dim, grid, &normals)
}

/// Deterministic tail of [`sample_field`]: interpolate the given coarse
/// values and exponentiate. Exposed so tests can drive known coarse fields.
pub fn sample_field_from_coarse(
    dim: usize,
    grid: usize,
    coarse_values: &[f64],
) -> Result<Vec<f64>, AppsError> {
    match dim {
        1 => {
            let m = coarse_values.len();
            if m > grid {
                return Err(AppsError::CoarseExceedsGrid { coarse: m, grid });
            }
            let mut field = interpolate_periodic(coarse_values, grid);
            for v in field.iter_mut() {
                *v = v.exp();
            }
            Ok(field)
        }
        _ => {
            let total = coarse_values.len();
            let m = (total as f64).sqrt().round() as usize;
            if m * m != total {
                return Err(AppsError::BadLength { expected: m * m, got: total });
            }
            if m > grid {
                return Err(AppsError::CoarseExceedsGrid { coarse: m, grid });
            }
            // separable interpolation: rows first, then columns
            let mut rows = vec![0.0; m * grid];
            for r in 0..m {
                let row = interpolate_periodic(&coarse_values[r * m..(r + 1) * m], grid);
                rows[r * grid..(r + 1) * grid].copy_from_slice(&row);
            }
            let mut field = vec![0.0; grid * grid];
            let mut column = vec![0.0; m];
            for c in 0..grid {
                for r in 0..m {
                    column[r] = rows[r * grid + c];
                }
                let col = interpolate_periodic(&column, grid);
                for r in 0..grid {
                    field[r * grid + c] = col[r].exp();
                }
            }
            Ok(field)
        }
    }
}

/// Dense-oracle caps: the diagonal-of-the-inverse computation factorizes a
/// full matrix, so grids are limited.
pub const MAX_GREEN_GRID_1D: usize = 1024;
pub const MAX_GREEN_GRID_2D: usize = 32;

/// In-place lower-triangular Cholesky factorization.
fn cholesky(a: &mut [f64], n: usize) -> Result<(), AppsError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(AppsError::SingularOperator);
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }
    // zero the strict upper triangle so the factor is clean
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Diagonal of the inverse from the Cholesky factor: the squared norm of
/// each forward-substitution column.
fn inverse_diagonal(l: &[f64], n: usize) -> Vec<f64> {
    let mut diag = vec![0.0; n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        for yk in y[i..n].iter_mut() {
            *yk = 0.0;
        }
        y[i] = 1.0 / l[i * n + i];
        for k in (i + 1)..n {
            let mut s = 0.0;
            for j in i..k {
                s += l[k * n + j] * y[j];
            }
            y[k] = -s / l[k * n + k];
        }
        diag[i] = y[i..n].iter().map(|v| v * v).sum();
    }
    diag
}

/// Ground truth for the diagonal task: assemble the periodic
/// central-difference operator `(1/h^2) * stencil + diag(v)` with
/// `h = 1/grid` (three-point stencil in 1D, five-point in 2D) and return the
/// diagonal of its dense inverse.
pub fn green_diag_oracle(v: &[f64], dim: usize, grid: usize) -> Result<Vec<f64>, AppsError> {
    let n = grid.pow(dim as u32);
    if v.len() != n {
        return Err(AppsError::BadLength { expected: n, got: v.len() });
    }
    let max = if dim == 1 { MAX_GREEN_GRID_1D } else { MAX_GREEN_GRID_2D };
    if grid > max {
        return Err(AppsError::GridTooLarge { grid, max });
    }
    for (i, &x) in v.iter().enumerate() {
        if !(x > 0.0) {
            return Err(AppsError::NonPositivePotential { index: i, value: x });
        }
    }
    let inv_h2 = (grid * grid) as f64;
    let mut h = vec![0.0; n * n];
    match dim {
        1 => {
            for i in 0..n {
                h[i * n + i] = 2.0 * inv_h2 + v[i];
                let right = (i + 1) % n;
                let left = (i + n - 1) % n;
                h[i * n + right] += -inv_h2;
                h[i * n + left] += -inv_h2;
            }
        }
        _ => {
            for r in 0..grid {
                for c in 0..grid {
                    let i = r * grid + c;
                    h[i * n + i] = 4.0 * inv_h2 + v[i];
                    let neighbors = [
                        ((r + 1) % grid) * grid + c,
                        ((r + grid - 1) % grid) * grid + c,
                        r * grid + (c + 1) % grid,
                        r * grid + (c + grid - 1) % grid,
                    ];
                    for nb in neighbors {
                        h[i * n + nb] += -inv_h2;
                    }
                }
            }
        }
    }
    cholesky(&mut h, n)?;
    Ok(inverse_diagonal(&h, n))
}

/// Closed form for a constant potential: average of the reciprocal stencil
/// eigenvalues.
pub fn green_diag_constant(dim: usize, grid: usize, c: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let inv_h2 = (grid * grid) as f64;
    match dim {
        1 => {
            let mut sum = 0.0;
            for k in 0..grid {
                let lam = inv_h2 * (2.0 - 2.0 * (tau * k as f64 / grid as f64).cos());
                sum += 1.0 / (lam + c);
            }
            sum / grid as f64
        }
        _ => {
            let mut sum = 0.0;
            for k1 in 0..grid {
                for k2 in 0..grid {
                    let lam = inv_h2
                        * (4.0
                            - 2.0 * (tau * k1 as f64 / grid as f64).cos()
                            - 2.0 * (tau * k2 as f64 / grid as f64).cos());
                    sum += 1.0 / (lam + c);
                }
            }
            sum / (grid * grid) as f64
        }
    }
}

/// The synthetic smoke map: periodic three-tap smoothing then tanh.
pub fn smoke_target(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let s = 0.25 * v[(i + n - 1) % n] + 0.5 * v[i] + 0.25 * v[(i + 1) % n];
        out[i] = s.tanh();
    }
    out
}

fn generate_sample(task: TaskKind, grid: usize, coarse: usize, stream: &mut Stream)
    -> Result<TaskSample, AppsError> {
    let dim = task.dim();
    let input = sample_field(dim, grid, coarse, stream)?;
    let target = match task {
        TaskKind::Green1d | TaskKind::Green2d => green_diag_oracle(&input, dim, grid)?,
        TaskKind::Smoke => smoke_target(&input),
    };
    Ok(TaskSample { input, target })
}

/// Generate a dataset. Sample `idx` (train first, then test) is drawn from
/// the derived stream `(seed, idx)`, so the output is independent of
/// scheduling; `threads > 1` parallelizes over samples.
pub fn make_dataset(
    task: TaskKind,
    grid: usize,
    coarse: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    threads: usize,
) -> Result<Dataset, AppsError> {
    if n_train + n_test == 0 {
        return Err(AppsError::EmptyDataset);
    }
    let total = n_train + n_test;
    let threads = threads.max(1).min(total);
    let mut samples: Vec<Option<TaskSample>> = vec![None; total];
    if threads == 1 {
        for (idx, slot) in samples.iter_mut().enumerate() {
            let mut stream = Stream::derive(seed, idx as u64);
            *slot = Some(generate_sample(task, grid, coarse, &mut stream)
                .map_err(|e| tag_sample_error(e, idx))?);
        }
    } else {
        let chunk = total.div_ceil(threads);
        let results: Vec<Result<Vec<(usize, TaskSample)>, AppsError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        scope.spawn(move || {
                            let lo = t * chunk;
                            let hi = ((t + 1) * chunk).min(total);
                            let mut out = Vec::with_capacity(hi.saturating_sub(lo));
                            for idx in lo..hi {
                                let mut stream = Stream::derive(seed, idx as u64);
                                let s = generate_sample(task, grid, coarse, &mut stream)
                                    .map_err(|e| tag_sample_error(e, idx))?;
                                out.push((idx, s));
                            }
                            Ok(out)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
        for r in results {
            for (idx, s) in r? {
                samples[idx] = Some(s);
            }
        }
    }
    let mut all: Vec<TaskSample> = samples.into_iter().map(|s| s.expect("filled")).collect();
    let test = all.split_off(n_train);
    Ok(Dataset { task, grid, coarse, seed, train: all, test })
}

fn tag_sample_error(e: AppsError, idx: usize) -> AppsError {
    match e {
        AppsError::NonPositivePotential { value, .. } => {
            AppsError::NonPositivePotential { index: idx, value }
        }
        other => other,
    }
}

/// Relative l2 error of a prediction against the reference.
pub fn relative_l2(pred: &[f64], target: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = target.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
