//! Minimizers for perturbed objectives and the distributed DP
//! gradient-descent neural-network classifier.
//!
//! The quadratic solve symmetrizes the noised degree-2 array, escalates a
//! ridge term when the system is near-singular, and flags saddle points.
//! The NN path clips per-example gradients to a fixed L2 norm (so the
//! averaged gradient has sensitivity 2C/N_s) and supports non-private,
//! conventional, and correlated-noise aggregation of site gradients.

use crate::error::{CapeError, Result};
use crate::field::QuantizationSpec;
use crate::functional::{evaluate_objective, objective_gradient, PerturbedObjective};
use crate::privacy::{gaussian_tau, PrivacyBudget, Sensitivity};
use crate::rng::StreamSeed;
use crate::secure_agg::generate_zero_sum_noise;
use crate::transcript::Transcript;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian elimination with partial pivoting; `None` when singular.
fn linear_solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    debug_assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut rhs = b.clone();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if pivot < 1e-12 * scale {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap((col, k), (pivot_row, k));
            }
            rhs.swap(col, pivot_row);
        }
        for r in col + 1..n {
            let f = m[(r, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[(r, k)] -= f * m[(col, k)];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for r in (0..n).rev() {
        let mut acc = rhs[r];
        for k in r + 1..n {
            acc -= m[(r, k)] * x[k];
        }
        x[r] = acc / m[(r, r)];
    }
    Some(x)
}

/// True when the symmetric matrix is positive definite (Cholesky succeeds).
fn is_positive_definite(a: &Array2<f64>) -> bool {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return false;
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    true
}

#[derive(Debug, Clone)]
pub struct QuadraticSolveResult {
    pub w_hat: Array1<f64>,
    pub regularizer_used: f64,
    /// Set when ridge escalation was needed or the (unregularized) surrogate
    /// is indefinite at the solution (saddle point).
    pub condition_flag: bool,
}

/// Minimize l0 + l1.w + w^T l2 w by solving
/// (sym(l2) + ridge I) w = -l1 / 2. When the regularized matrix is not
/// positive definite (noise can make the perturbed surrogate indefinite,
/// whose stationary point is an unbounded saddle), the ridge escalates
/// geometrically until the surrogate is convex.
pub fn minimize_quadratic(obj: &PerturbedObjective, ridge: f64) -> Result<QuadraticSolveResult> {
    if ridge < 0.0 {
        return Err(CapeError::InvalidParameter("ridge must be nonnegative".into()));
    }
    let c = &obj.coeffs;
    let d = c.dim();
    let sym = (&c.l2 + &c.l2.t()) / 2.0;
    let max_abs = sym.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = (sym.diag().sum() / d as f64).abs().max(max_abs).max(1e-12);
    let neg_half_l1 = c.l1.mapv(|v| -v / 2.0);

    let mut schedule = vec![ridge];
    let mut r = 1e-8 * scale;
    while r <= 1e4 * scale {
        if r > ridge {
            schedule.push(r);
        }
        r *= 4.0;
    }
    for &r in &schedule {
        let mut m = sym.clone();
        for i in 0..d {
            m[(i, i)] += r;
        }
        if !is_positive_definite(&m) {
            continue;
        }
        if let Some(w_hat) = linear_solve(&m, &neg_half_l1) {
            let condition_flag = r > ridge || !is_positive_definite(&sym);
            return Ok(QuadraticSolveResult { w_hat, regularizer_used: r, condition_flag });
        }
    }
    Err(CapeError::InvalidParameter(
        "quadratic system singular even after ridge escalation".into(),
    ))
}

/// Fixed-step gradient descent with early stop at small gradient norm.
/// Errors when the loss increases for 10 consecutive iterations.
pub fn gradient_descent<F, G>(
    loss: F,
    grad: G,
    w0: Array1<f64>,
    step: f64,
    iters: usize,
    tol: f64,
) -> Result<Array1<f64>>
where
    F: Fn(&Array1<f64>) -> f64,
    G: Fn(&Array1<f64>) -> Array1<f64>,
{
    if !(step > 0.0) {
        return Err(CapeError::InvalidParameter("step must be positive".into()));
    }
    let mut w = w0;
    let mut prev_loss = loss(&w);
    let mut rising = 0usize;
    for it in 0..iters {
        let g = grad(&w);
        if g.dot(&g).sqrt() < tol {
            break;
        }
        w = &w - &(g * step);
        let l = loss(&w);
        if l > prev_loss {
            rising += 1;
            if rising >= 10 {
                return Err(CapeError::Divergence(it));
            }
        } else {
            rising = 0;
        }
        prev_loss = l;
    }
    Ok(w)
}

/// Minimize a perturbed quadratic objective by gradient descent (used for
/// the logistic surrogate; cross-checks the closed-form solver).
pub fn gradient_descent_objective(
    obj: &PerturbedObjective,
    w0: Array1<f64>,
    step: f64,
    iters: usize,
    tol: f64,
) -> Result<Array1<f64>> {
    gradient_descent(
        |w| evaluate_objective(obj, w).expect("dims checked"),
        |w| objective_gradient(obj, w).expect("dims checked"),
        w0,
        step,
        iters,
        tol,
    )
}

/// Two-layer binary classifier: y_hat = sigmoid(w2 . relu(W1 x + b1) + b2).
#[derive(Debug, Clone, PartialEq)]
pub struct NNParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl NNParams {
    /// Seeded symmetric-uniform init scaled by fan-in.
    pub fn init(d: usize, hidden: usize, seed: &StreamSeed) -> Self {
        let mut rng = seed.stream(&[0x171]);
        let lim1 = 1.0 / (d as f64).sqrt();
        let lim2 = 1.0 / (hidden as f64).sqrt();
        let mut w1 = Array2::zeros((hidden, d));
        w1.map_inplace(|v| *v = rng.gen_range(-lim1..lim1));
        let w2 = Array1::from_iter((0..hidden).map(|_| rng.gen_range(-lim2..lim2)));
        Self { w1, b1: Array1::zeros(hidden), w2, b2: 0.0 }
    }

    pub fn n_weights(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    fn to_flat(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.n_weights());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.push(self.b2);
        Array1::from(v)
    }

    fn from_flat(&self, flat: &Array1<f64>) -> Self {
        let (h, d) = self.w1.dim();
        let mut it = flat.iter().cloned();
        let w1 = Array2::from_shape_vec((h, d), (&mut it).take(h * d).collect()).unwrap();
        let b1 = Array1::from_iter((&mut it).take(h));
        let w2 = Array1::from_iter((&mut it).take(h));
        let b2 = it.next().unwrap();
        Self { w1, b1, w2, b2 }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub z1: Array2<f64>,
    pub a1: Array2<f64>,
    pub y_hat: Array1<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn nn_forward(params: &NNParams, x: &Array2<f64>) -> Result<ForwardCache> {
    if x.ncols() != params.w1.ncols() {
        return Err(CapeError::DimensionMismatch(format!(
            "input dim {} vs weight dim {}",
            x.ncols(),
            params.w1.ncols()
        )));
    }
    let z1 = x.dot(&params.w1.t()) + &params.b1;
    let a1 = z1.mapv(|v| v.max(0.0));
    let y_hat = a1.dot(&params.w2).mapv(|z| sigmoid(z + params.b2));
    Ok(ForwardCache { z1, a1, y_hat })
}

#[derive(Debug, Clone)]
pub struct NNGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl NNGrads {
    fn to_flat(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + self.b1.len() + self.w2.len() + 1);
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.push(self.b2);
        Array1::from(v)
    }
}

/// Exact gradient of the average cross-entropy over the batch.
pub fn nn_backward(
    params: &NNParams,
    cache: &ForwardCache,
    x: &Array2<f64>,
    y: &Array1<f64>,
) -> NNGrads {
    let n = x.nrows() as f64;
    // dL/dz2 per sample, already averaged
    let dz2 = (&cache.y_hat - y) / n;
    let gw2 = cache.a1.t().dot(&dz2);
    let gb2 = dz2.sum();
    // dz1[n,h] = dz2[n] * w2[h] * relu'(z1[n,h])
    let mut dz1 = Array2::zeros(cache.z1.dim());
    for ((r, c), v) in dz1.indexed_iter_mut() {
        if cache.z1[(r, c)] > 0.0 {
            *v = dz2[r] * params.w2[c];
        }
    }
    let gw1 = dz1.t().dot(x);
    let gb1 = dz1.sum_axis(Axis(0));
    NNGrads { w1: gw1, b1: gb1, w2: gw2, b2: gb2 }
}

/// Average cross-entropy loss of the batch.
pub fn nn_loss(y_hat: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let eps = 1e-12;
    y_hat
        .iter()
        .zip(y.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / y.len() as f64
}

/// Percent of samples where round(y_hat) matches the label.
pub fn nn_accuracy(params: &NNParams, x: &Array2<f64>, y: &Array1<f64>) -> Result<f64> {
    let cache = nn_forward(params, x)?;
    let correct = cache
        .y_hat
        .iter()
        .zip(y.iter())
        .filter(|(&p, &t)| (p.round() - t).abs() < 0.5)
        .count();
    Ok(100.0 * correct as f64 / y.len() as f64)
}

/// Per-example L2 clipping bound; the averaged clipped gradient then has
/// sensitivity 2C/N_s between neighboring local datasets.
#[derive(Debug, Clone, Copy)]
pub struct GradientClipSpec {
    pub clip_norm: f64,
}

impl GradientClipSpec {
    pub fn new(clip_norm: f64) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(CapeError::InvalidParameter("clip norm must be positive".into()));
        }
        Ok(Self { clip_norm })
    }

    pub fn sensitivity(&self, n_s: usize) -> f64 {
        2.0 * self.clip_norm / n_s as f64
    }
}

/// Batch gradient with per-example clipping to `clip.clip_norm`.
///
/// Per-example layer gradients are rank-one (outer products), so the
/// per-example norm is computed from vector norms without materializing
/// the per-example tensors:
/// ||g_n||^2 = dz2_n^2 (||a1_n||^2 + 1) + ||dz1_n||^2 (||x_n||^2 + 1).
pub fn nn_clipped_gradient(
    params: &NNParams,
    x: &Array2<f64>,
    y: &Array1<f64>,
    clip: GradientClipSpec,
) -> Result<NNGrads> {
    let cache = nn_forward(params, x)?;
    let n = x.nrows();
    let dz2 = &cache.y_hat - y; // per-example, unaveraged
    let mut dz1 = Array2::zeros(cache.z1.dim());
    for ((r, c), v) in dz1.indexed_iter_mut() {
        if cache.z1[(r, c)] > 0.0 {
            *v = dz2[r] * params.w2[c];
        }
    }
    // per-example scale factors
    let mut scaled_dz2 = dz2.clone();
    let mut scaled_dz1 = dz1.clone();
    for r in 0..n {
        let a1_sq = cache.a1.row(r).dot(&cache.a1.row(r));
        let x_sq = x.row(r).dot(&x.row(r));
        let dz1_sq = dz1.row(r).dot(&dz1.row(r));
        let norm = (dz2[r] * dz2[r] * (a1_sq + 1.0) + dz1_sq * (x_sq + 1.0)).sqrt();
        let scale = if norm > clip.clip_norm { clip.clip_norm / norm } else { 1.0 };
        debug_assert!(norm * scale <= clip.clip_norm * (1.0 + 1e-9));
        scaled_dz2[r] *= scale;
        for c in 0..dz1.ncols() {
            scaled_dz1[(r, c)] *= scale;
        }
    }
    let nf = n as f64;
    Ok(NNGrads {
        w1: scaled_dz1.t().dot(x) / nf,
        b1: scaled_dz1.sum_axis(Axis(0)) / nf,
        w2: cache.a1.t().dot(&scaled_dz2) / nf,
        b2: scaled_dz2.sum() / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdMode {
    NonPriv,
    Conv,
    Cape,
}

#[derive(Debug, Clone)]
pub struct DpGdConfig {
    pub hidden: usize,
    pub lr: f64,
    pub iters: usize,
    pub clip: GradientClipSpec,
    /// `None` disables noise (tau = 0) in conv/cape modes.
    pub budget_per_iter: Option<PrivacyBudget>,
    pub mode: GdMode,
    pub threshold_t: usize,
    /// Record the accuracy trace every this many iterations (and at the end).
    pub record_every: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRecord {
    pub iter: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Distributed DP gradient descent over symmetric sites. Each site clips
/// and averages its local per-example gradients, adds mode-specific noise
/// to the flattened gradient vector, and the aggregator averages the site
/// gradients and takes one step.
pub fn distributed_dp_gd(
    sites: &[(Array2<f64>, Array1<f64>)],
    test: (&Array2<f64>, &Array1<f64>),
    cfg: &DpGdConfig,
    seed: &StreamSeed,
) -> Result<(NNParams, Vec<TraceRecord>)> {
    if sites.is_empty() {
        return Err(CapeError::EmptyData("no sites".into()));
    }
    let s = sites.len();
    let d = sites[0].0.ncols();
    let n_s = sites[0].0.nrows();
    if sites.iter().any(|(x, _)| x.nrows() != n_s || x.ncols() != d) {
        return Err(CapeError::InvalidParameter(
            "distributed GD requires the symmetric setting".into(),
        ));
    }
    let mut params = NNParams::init(d, cfg.hidden, seed);
    let p = params.n_weights();
    let tau = match (cfg.mode, cfg.budget_per_iter) {
        (GdMode::NonPriv, _) | (_, None) => 0.0,
        (_, Some(budget)) => {
            gaussian_tau(Sensitivity::l2(cfg.clip.sensitivity(n_s))?, budget)?.tau
        }
    };
    let qspec = QuantizationSpec::production(tau.max(1.0));
    let active = vec![true; s];
    let mut trace = Vec::new();

    for it in 0..cfg.iters {
        // correlated zero-sum noise for this iteration, one vector per site
        let zs = if cfg.mode == GdMode::Cape && tau > 0.0 {
            let mut transcript = Transcript::new();
            Some(generate_zero_sum_noise(
                tau,
                s,
                cfg.threshold_t,
                p,
                &qspec,
                seed,
                it as u64,
                &active,
                &mut transcript,
            )?)
        } else {
            None
        };
        let mut agg = Array1::<f64>::zeros(p);
        for (i, (x, y)) in sites.iter().enumerate() {
            let g = nn_clipped_gradient(&params, x, y, cfg.clip)?;
            let mut flat = g.to_flat();
            match cfg.mode {
                GdMode::NonPriv => {}
                GdMode::Conv => {
                    if tau > 0.0 {
                        let normal = Normal::new(0.0, tau).expect("valid tau");
                        let mut rng = seed.stream(&[i as u64, it as u64, 0xad]);
                        flat.map_inplace(|v| *v += normal.sample(&mut rng));
                    }
                }
                GdMode::Cape => {
                    if let Some(zs) = &zs {
                        let e = zs.per_site[i].as_ref().unwrap();
                        for (v, &ei) in flat.iter_mut().zip(e) {
                            *v += ei;
                        }
                        let tau_g = tau / (s as f64).sqrt();
                        let normal = Normal::new(0.0, tau_g).expect("valid tau_g");
                        let mut rng = seed.stream(&[i as u64, it as u64, 0x6d]);
                        flat.map_inplace(|v| *v += normal.sample(&mut rng));
                    }
                }
            }
            agg += &flat;
        }
        agg /= s as f64;
        let new_flat = &params.to_flat() - &(agg * cfg.lr);
        params = params.from_flat(&new_flat);

        if it % cfg.record_every == 0 || it + 1 == cfg.iters {
            let (mut loss_acc, mut acc_acc) = (0.0, 0.0);
            for (x, y) in sites {
                let cache = nn_forward(&params, x)?;
                loss_acc += nn_loss(&cache.y_hat, y);
                acc_acc += nn_accuracy(&params, x, y)?;
            }
            trace.push(TraceRecord {
                iter: it,
                train_loss: loss_acc / s as f64,
                train_acc: acc_acc / s as f64,
                test_acc: nn_accuracy(&params, test.0, test.1)?,
            });
        }
    }
    Ok((params, trace))
}
