//! Loss models and data: synthetic generators for the quadratic and
//! phase-retrieval test problems, a logistic model for real-data runs,
//! minibatch plumbing, and file loaders.
//!
//! All three models expose the same two operations — minibatch loss and
//! minibatch gradient — where the gradient is always the batch MEAN, so a
//! given learning rate means the same thing at batch size 1 and 25.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vector::ParamVector;

mod idx;
mod tabular;

pub use idx::load_idx;
pub use tabular::{label_median, load_csv};

/// A fixed design matrix with labels, plus the generating optimum and
/// noise variance when the data is synthetic.
#[derive(Debug, Clone)]
pub struct Dataset {
    xs: Vec<f64>,
    ys: Vec<f64>,
    n: usize,
    p: usize,
    /// θ⋆ for synthetic data; absent for loaded files.
    pub optimum: Option<ParamVector>,
    /// E[ε²] of the synthetic label noise; absent when not applicable.
    pub noise_variance: Option<f64>,
}

impl Dataset {
    /// Assemble a dataset from row-major features and labels.
    pub fn from_rows(xs: Vec<f64>, ys: Vec<f64>, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidArgument("feature dimension 0".into()));
        }
        if ys.is_empty() || xs.len() != ys.len() * p {
            return Err(Error::InvalidArgument(format!(
                "feature buffer {} does not factor as {} rows x {} columns",
                xs.len(),
                ys.len(),
                p
            )));
        }
        let n = ys.len();
        Ok(Self {
            xs,
            ys,
            n,
            p,
            optimum: None,
            noise_variance: None,
        })
    }

    /// Number of examples N.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Feature dimension p.
    pub fn dim(&self) -> usize {
        self.p
    }

    /// Feature row i.
    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.p..(i + 1) * self.p]
    }

    /// Label i.
    pub fn y(&self, i: usize) -> f64 {
        self.ys[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.ys
    }

    /// Empirical second-moment matrix H = (1/N) Σ xᵢxᵢ⊤.
    pub fn empirical_hessian(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.p, self.p);
        for i in 0..self.n {
            let x = self.x(i);
            for (r, xr) in x.iter().enumerate() {
                for (c, xc) in x.iter().enumerate() {
                    h[(r, c)] += xr * xc;
                }
            }
        }
        h / self.n as f64
    }

    /// The least-squares solution θ̂ = (X⊤X)⁻¹X⊤y — the empirical
    /// minimizer of the quadratic loss on this dataset.
    pub fn least_squares_solution(&self) -> Result<ParamVector> {
        let mut h = DMatrix::zeros(self.p, self.p);
        let mut b = DVector::zeros(self.p);
        for i in 0..self.n {
            let x = self.x(i);
            for (r, xr) in x.iter().enumerate() {
                b[r] += xr * self.ys[i];
                for (c, xc) in x.iter().enumerate() {
                    h[(r, c)] += xr * xc;
                }
            }
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::DegenerateInput("singular design matrix".into()))?;
        let sol = chol.solve(&b);
        ParamVector::new(sol.iter().copied().collect())
    }
}

/// Which loss the model applies to its dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// ℓ(θ; x, y) = ½(y − x⊤θ)².
    Quadratic,
    /// ℓ(θ; x, y) = ¼((x⊤θ)² − y)².
    PhaseRetrieval,
    /// Binary cross-entropy with y ∈ {0, 1}.
    Logistic,
}

/// A loss applied to a dataset.
#[derive(Debug, Clone)]
pub struct LossModel {
    pub kind: LossKind,
    pub dataset: Dataset,
}

impl LossModel {
    pub fn new(kind: LossKind, dataset: Dataset) -> Self {
        Self { kind, dataset }
    }
}

/// Indices of one minibatch; never empty, all within the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    indices: Vec<usize>,
}

impl MiniBatch {
    pub fn new(indices: Vec<usize>, dataset_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset_len) {
            return Err(Error::InvalidArgument(format!(
                "minibatch index {bad} outside dataset of {dataset_len} rows"
            )));
        }
        Ok(Self { indices })
    }

    /// Every index of the dataset, in order (the full-batch case).
    pub fn full(dataset_len: usize) -> Self {
        Self {
            indices: (0..dataset_len).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The shared synthetic optimum: θ⋆ᵢ = (−1)ⁱ·2·exp(−0.7·i) for i = 1..p,
/// a geometrically decaying alternating profile (θ⋆₁ ≈ −0.9932,
/// θ⋆₂ ≈ 0.4932, …).
pub fn synthetic_optimum(p: usize) -> ParamVector {
    ParamVector::from_fn(p, |j| {
        let i = (j + 1) as f64;
        let sign = if (j + 1) % 2 == 0 { 1.0 } else { -1.0 };
        sign * 2.0 * (-0.7 * i).exp()
    })
}

/// Linear-regression data: x ~ N(0, I_p), y = x⊤θ⋆ + ε with
/// ε ~ N(0, noise_sd²). The optimum and noise variance are recorded.
pub fn gen_quadratic(p: usize, n: usize, noise_sd: f64, rng: &mut RngStream) -> Result<Dataset> {
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument("p and N must be positive".into()));
    }
    if !(noise_sd > 0.0) {
        return Err(Error::InvalidArgument("noise_sd must be positive".into()));
    }
    let optimum = synthetic_optimum(p);
    let mut xs = vec![0.0; n * p];
    rng.fill_standard_normal(&mut xs);
    let ys = (0..n)
        .map(|i| {
            let row = &xs[i * p..(i + 1) * p];
            let mean: f64 = row
                .iter()
                .zip(optimum.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            mean + rng.normal(noise_sd)
        })
        .collect();
    Ok(Dataset {
        xs,
        ys,
        n,
        p,
        optimum: Some(optimum),
        noise_variance: Some(noise_sd * noise_sd),
    })
}

/// Phase-retrieval data: x ~ N(0, I_p), y = (x⊤θ⋆)², noiseless, with the
/// same θ⋆ profile as the quadratic generator. The loss cannot tell θ⋆
/// from −θ⋆.
pub fn gen_phase_retrieval(p: usize, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument("p and N must be positive".into()));
    }
    let optimum = synthetic_optimum(p);
    let mut xs = vec![0.0; n * p];
    rng.fill_standard_normal(&mut xs);
    let ys = (0..n)
        .map(|i| {
            let row = &xs[i * p..(i + 1) * p];
            let ip: f64 = row
                .iter()
                .zip(optimum.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            ip * ip
        })
        .collect();
    Ok(Dataset {
        xs,
        ys,
        n,
        p,
        optimum: Some(optimum),
        noise_variance: Some(0.0),
    })
}

/// Synthetic binary-logistic data: x ~ N(0, I_p) and
/// y ~ Bernoulli(sigmoid(x⊤(scale·θ⋆))). `scale` controls class overlap;
/// larger scale means a sharper decision boundary and lower Bayes error.
pub fn gen_logistic(p: usize, n: usize, scale: f64, rng: &mut RngStream) -> Result<Dataset> {
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument("p and N must be positive".into()));
    }
    let optimum = synthetic_optimum(p).scale(scale);
    let mut xs = vec![0.0; n * p];
    rng.fill_standard_normal(&mut xs);
    let ys = (0..n)
        .map(|i| {
            let row = &xs[i * p..(i + 1) * p];
            let z: f64 = row
                .iter()
                .zip(optimum.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            let u: f64 = rand::Rng::gen(rng);
            f64::from(u < sigmoid(z))
        })
        .collect();
    Ok(Dataset {
        xs,
        ys,
        n,
        p,
        optimum: Some(optimum),
        noise_variance: None,
    })
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean per-example gradient over the minibatch.
///
/// Per example: quadratic → −(y − x⊤θ)x; phase retrieval →
/// ((x⊤θ)² − y)(x⊤θ)x; logistic → (sigmoid(x⊤θ) − y)x.
pub fn stochastic_gradient(
    model: &LossModel,
    theta: &ParamVector,
    batch: &MiniBatch,
) -> Result<ParamVector> {
    let p = model.dataset.dim();
    if theta.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: theta.dim(),
        });
    }
    let mut grad = vec![0.0; p];
    for &i in batch.indices() {
        let x = model.dataset.x(i);
        let y = model.dataset.y(i);
        let z: f64 = x.iter().zip(theta.as_slice()).map(|(a, b)| a * b).sum();
        let coeff = match model.kind {
            LossKind::Quadratic => z - y,
            LossKind::PhaseRetrieval => (z * z - y) * z,
            LossKind::Logistic => sigmoid(z) - y,
        };
        for (g, xv) in grad.iter_mut().zip(x) {
            *g += coeff * xv;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= inv;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::divergence(0, "non-finite gradient"));
    }
    ParamVector::new(grad)
}

/// Mean per-example loss over the minibatch.
pub fn loss(model: &LossModel, theta: &ParamVector, batch: &MiniBatch) -> Result<f64> {
    let p = model.dataset.dim();
    if theta.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: theta.dim(),
        });
    }
    let mut total = 0.0;
    for &i in batch.indices() {
        let x = model.dataset.x(i);
        let y = model.dataset.y(i);
        let z: f64 = x.iter().zip(theta.as_slice()).map(|(a, b)| a * b).sum();
        total += match model.kind {
            LossKind::Quadratic => 0.5 * (y - z) * (y - z),
            LossKind::PhaseRetrieval => {
                let r = z * z - y;
                0.25 * r * r
            }
            // max(z,0) − y·z + ln(1 + e^{−|z|}) is the overflow-safe form
            // of −[y ln σ(z) + (1−y) ln(1−σ(z))].
            LossKind::Logistic => z.max(0.0) - y * z + (-z.abs()).exp().ln_1p(),
        };
    }
    let v = total / batch.len() as f64;
    if !v.is_finite() {
        return Err(Error::divergence(0, "non-finite loss"));
    }
    Ok(v)
}

/// One epoch of minibatches: a fresh random permutation of 0..N split
/// into ⌈N/batch_size⌉ consecutive chunks, so each index appears exactly
/// once per epoch and the last batch carries the remainder.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Result<Vec<MiniBatch>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} not in 1..={n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(perm
        .chunks(batch_size)
        .map(|c| MiniBatch {
            indices: c.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_model(p: usize, n: usize, seed: u64) -> LossModel {
        let mut rng = RngStream::new(seed, 0);
        LossModel::new(
            LossKind::Quadratic,
            gen_quadratic(p, n, 1.0, &mut rng).unwrap(),
        )
    }

    #[test]
    fn synthetic_optimum_matches_profile() {
        let t = synthetic_optimum(20);
        assert!((t[0] - (-0.993_170_607_582_819)).abs() < 1e-9, "{}", t[0]);
        assert!((t[1] - 0.493_193_927_883_213).abs() < 1e-9, "{}", t[1]);
        assert!(t[2] < 0.0 && t[3] > 0.0);
    }

    #[test]
    fn zero_noise_limit_recovers_linear_labels() {
        let mut rng = RngStream::new(3, 0);
        let d = gen_quadratic(1, 1, 1e-12, &mut rng).unwrap();
        let t = d.optimum.as_ref().unwrap();
        assert!((d.y(0) - d.x(0)[0] * t[0]).abs() < 1e-9);
    }

    #[test]
    fn quadratic_noise_has_zero_mean() {
        let mut rng = RngStream::new(11, 0);
        let n = 100_000;
        let d = gen_quadratic(5, n, 1.0, &mut rng).unwrap();
        let t = d.optimum.as_ref().unwrap();
        let mean_resid: f64 = (0..n)
            .map(|i| {
                let fit: f64 = d.x(i).iter().zip(t.as_slice()).map(|(a, b)| a * b).sum();
                d.y(i) - fit
            })
            .sum::<f64>()
            / n as f64;
        // LLN band: 3·noise_sd/√N
        assert!(mean_resid.abs() < 3.0 / (n as f64).sqrt(), "{mean_resid}");
    }

    #[test]
    fn phase_retrieval_labels_nonnegative_and_optimum_lossless() {
        let mut rng = RngStream::new(5, 0);
        let d = gen_phase_retrieval(6, 50, &mut rng).unwrap();
        assert!(d.labels().iter().all(|&y| y >= 0.0));

        let t = d.optimum.clone().unwrap();
        let neg = t.scale(-1.0);
        let model = LossModel::new(LossKind::PhaseRetrieval, d);
        let full = MiniBatch::full(model.dataset.len());
        assert_eq!(loss(&model, &t, &full).unwrap(), 0.0);
        assert_eq!(loss(&model, &neg, &full).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_gradient_vanishes_at_optimum_without_noise() {
        // Construct noiseless labels directly.
        let mut rng = RngStream::new(7, 0);
        let mut d = gen_quadratic(4, 30, 1.0, &mut rng).unwrap();
        let t = d.optimum.clone().unwrap();
        for i in 0..d.len() {
            let fit: f64 = d.x(i).iter().zip(t.as_slice()).map(|(a, b)| a * b).sum();
            d.ys[i] = fit;
        }
        let model = LossModel::new(LossKind::Quadratic, d);
        let g = stochastic_gradient(&model, &t, &MiniBatch::full(model.dataset.len())).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn full_batch_gradient_is_mean_of_singles() {
        let model = quad_model(5, 16, 13);
        let theta = ParamVector::from_fn(5, |i| 0.1 * i as f64);
        let full = stochastic_gradient(&model, &theta, &MiniBatch::full(16)).unwrap();
        let mut acc = ParamVector::zeros(5);
        for i in 0..16 {
            let g =
                stochastic_gradient(&model, &theta, &MiniBatch::new(vec![i], 16).unwrap())
                    .unwrap();
            acc = acc.add(&g).unwrap();
        }
        let mean = acc.scale(1.0 / 16.0);
        assert!(full.sub(&mean).unwrap().norm() < 1e-12);
    }

    #[test]
    fn phase_retrieval_gradient_hand_value() {
        // p=1, x=1, θ=2, y=1: ((4−1)·2)·1 = 6.
        let d = Dataset::from_rows(vec![1.0], vec![1.0], 1).unwrap();
        let model = LossModel::new(LossKind::PhaseRetrieval, d);
        let g = stochastic_gradient(
            &model,
            &ParamVector::new(vec![2.0]).unwrap(),
            &MiniBatch::full(1),
        )
        .unwrap();
        assert_eq!(g[0], 6.0);
    }

    #[test]
    fn quadratic_loss_hand_value() {
        let d = Dataset::from_rows(vec![1.0], vec![3.0], 1).unwrap();
        let model = LossModel::new(LossKind::Quadratic, d);
        let l = loss(
            &model,
            &ParamVector::new(vec![1.0]).unwrap(),
            &MiniBatch::full(1),
        )
        .unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn logistic_loss_at_zero_is_ln2() {
        let d = Dataset::from_rows(vec![1.0, -2.0, 0.5, 1.5], vec![1.0, 0.0], 2).unwrap();
        let model = LossModel::new(LossKind::Logistic, d);
        let l = loss(
            &model,
            &ParamVector::zeros(2),
            &MiniBatch::full(2),
        )
        .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn epoch_batches_partition_every_index() {
        let mut rng = RngStream::new(2, 0);
        let batches = epoch_batches(5, 2, &mut rng).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(
            batches.iter().map(MiniBatch::len).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices().to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn epoch_batches_deterministic_per_stream() {
        let a = epoch_batches(50, 7, &mut RngStream::new(9, 4)).unwrap();
        let b = epoch_batches(50, 7, &mut RngStream::new(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergent_theta_reports_divergence() {
        // x⊤θ = 2·10³⁰⁸ overflows, so the sample gradient is non-finite.
        let data = Dataset::from_rows(vec![2.0, 0.0, 0.0], vec![0.0], 3).unwrap();
        let model = LossModel::new(LossKind::Quadratic, data);
        let huge = ParamVector::new(vec![1e308, 0.0, 0.0]).unwrap();
        let e = stochastic_gradient(&model, &huge, &MiniBatch::full(1)).unwrap_err();
        assert!(e.is_divergence());
    }

    #[test]
    fn least_squares_solution_beats_generator_optimum_in_sample() {
        let model = quad_model(5, 200, 21);
        let ls = model.dataset.least_squares_solution().unwrap();
        let full = MiniBatch::full(model.dataset.len());
        let l_ls = loss(&model, &ls, &full).unwrap();
        let l_star = loss(&model, model.dataset.optimum.as_ref().unwrap(), &full).unwrap();
        assert!(l_ls <= l_star);
    }

    #[test]
    fn logistic_generator_labels_track_margin() {
        let mut rng = RngStream::new(31, 0);
        let d = gen_logistic(20, 20_000, 3.0, &mut rng).unwrap();
        let t = d.optimum.clone().unwrap();
        // Accuracy of the Bayes rule sign(x⊤θ⋆) should be well above chance.
        let correct = (0..d.len())
            .filter(|&i| {
                let z: f64 = d.x(i).iter().zip(t.as_slice()).map(|(a, b)| a * b).sum();
                (z >= 0.0) == (d.y(i) == 1.0)
            })
            .count();
        let acc = correct as f64 / d.len() as f64;
        assert!(acc > 0.8, "bayes accuracy {acc}");
    }
}
