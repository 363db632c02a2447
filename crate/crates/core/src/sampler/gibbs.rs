//! Conjugate full conditionals for `σ⁻²`, `μ` and `Σ⁻¹`.

use nalgebra::{Cholesky, SMatrix};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use super::{design_matrix, Hyperpriors, Mat6, Mat8, SamplerError, Vec6, Vec8};
use crate::efficacy::CovariatePair;

/// Shape and rate of `σ⁻² | ·`: `(a + N/2, b + SSR/2)`.
pub fn sigma_conditional(ssr: f64, n_obs: usize, hyper: &Hyperpriors) -> (f64, f64) {
    (hyper.a + 0.5 * n_obs as f64, hyper.b + 0.5 * ssr)
}

pub fn gibbs_sigma<R: Rng + ?Sized>(ssr: f64, n_obs: usize, hyper: &Hyperpriors, rng: &mut R) -> f64 {
    let (shape, rate) = sigma_conditional(ssr, n_obs, hyper);
    Gamma::new(shape, 1.0 / rate).expect("shape and rate are positive").sample(rng)
}

/// `N(V(Λ⁻¹η + Σ W_iᵀΣ⁻¹θ_i), V)` with `V⁻¹ = Λ⁻¹ + Σ W_iᵀΣ⁻¹W_i`.
#[derive(Debug, Clone)]
pub struct MuConditional {
    pub mean: Vec8,
    precision: Cholesky<f64, nalgebra::Const<8>>,
}

impl MuConditional {
    pub fn covariance(&self) -> Mat8 {
        self.precision.inverse()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec8 {
        let z = Vec8::from_fn(|_, _| rng.sample(StandardNormal));
        let x = self.precision.l().transpose().solve_upper_triangular(&z).expect("Cholesky factor has a positive diagonal");
        self.mean + x
    }
}

fn inverse_spd<const D: usize>(m: &SMatrix<f64, D, D>, what: &'static str) -> Result<SMatrix<f64, D, D>, SamplerError> {
    let inv = m.cholesky().ok_or_else(|| not_pd(m, what))?.inverse();
    Ok(0.5 * (inv + inv.transpose()))
}

fn not_pd<const D: usize>(m: &SMatrix<f64, D, D>, what: &'static str) -> SamplerError {
    let eig = nalgebra::DMatrix::from_column_slice(D, D, m.as_slice()).symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    SamplerError::NotPositiveDefinite { what, detail: format!("eigenvalues in [{lo:e}, {hi:e}], condition {:e}", hi / lo) }
}

pub fn mu_conditional(
    thetas: &[[f64; 6]],
    covariates: &[CovariatePair],
    sigma_inv: &Mat6,
    hyper: &Hyperpriors,
) -> Result<MuConditional, SamplerError> {
    assert_eq!(thetas.len(), covariates.len());
    let lambda_inv = inverse_spd(&hyper.lambda, "Lambda")?;
    let mut prec = lambda_inv;
    let mut rhs = lambda_inv * hyper.eta;
    for (theta, &w) in thetas.iter().zip(covariates) {
        let d = design_matrix(w);
        let dt_p = d.transpose() * sigma_inv;
        prec += dt_p * d;
        rhs += dt_p * Vec6::from(*theta);
    }
    let prec = 0.5 * (prec + prec.transpose());
    let chol = prec.cholesky().ok_or_else(|| not_pd(&prec, "mu posterior precision"))?;
    let mean = chol.solve(&rhs);
    Ok(MuConditional { mean, precision: chol })
}

pub fn gibbs_mu<R: Rng + ?Sized>(
    thetas: &[[f64; 6]],
    covariates: &[CovariatePair],
    sigma_inv: &Mat6,
    hyper: &Hyperpriors,
    rng: &mut R,
) -> Result<Vec8, SamplerError> {
    Ok(mu_conditional(thetas, covariates, sigma_inv, hyper)?.sample(rng))
}

/// Degrees of freedom and scale of `Σ⁻¹ | ·`: `(ν + n, (Ω⁻¹ + Σ b_i b_iᵀ)⁻¹)`.
pub fn big_sigma_conditional(
    thetas: &[[f64; 6]],
    covariates: &[CovariatePair],
    mu: &Vec8,
    hyper: &Hyperpriors,
) -> Result<(f64, Mat6), SamplerError> {
    assert_eq!(thetas.len(), covariates.len());
    let mut s = inverse_spd(&hyper.omega, "Omega")?;
    for (theta, &w) in thetas.iter().zip(covariates) {
        let b = Vec6::from(*theta) - design_matrix(w) * mu;
        s += b * b.transpose();
    }
    Ok((hyper.nu + thetas.len() as f64, inverse_spd(&s, "Sigma^-1 posterior scale inverse")?))
}

/// Bartlett decomposition: `LAAᵀLᵀ` with `scale = LLᵀ`, so the mean is `df · scale`.
pub fn sample_wishart<const D: usize, R: Rng + ?Sized>(
    df: f64,
    scale: &SMatrix<f64, D, D>,
    rng: &mut R,
) -> Result<SMatrix<f64, D, D>, SamplerError> {
    if !(df > (D - 1) as f64) {
        return Err(SamplerError::Hyper(format!("Wishart degrees of freedom {df} must exceed {}", D - 1)));
    }
    let l = scale.cholesky().ok_or_else(|| not_pd(scale, "Wishart scale"))?.l();
    let mut a = SMatrix::<f64, D, D>::zeros();
    for j in 0..D {
        let chi: f64 = ChiSquared::new(df - j as f64).expect("positive degrees of freedom").sample(rng);
        a[(j, j)] = chi.sqrt();
        for i in j + 1..D {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let w = la * la.transpose();
    Ok(0.5 * (w + w.transpose()))
}

/// Draws `Σ⁻¹` and returns `(Σ, Σ⁻¹)`.
pub fn gibbs_big_sigma<R: Rng + ?Sized>(
    thetas: &[[f64; 6]],
    covariates: &[CovariatePair],
    mu: &Vec8,
    hyper: &Hyperpriors,
    rng: &mut R,
) -> Result<(Mat6, Mat6), SamplerError> {
    let (df, scale) = big_sigma_conditional(thetas, covariates, mu, hyper)?;
    let prec = sample_wishart(df, &scale, rng)?;
    let sigma = inverse_spd(&prec, "sampled Sigma^-1")?;
    if sigma.cholesky().is_none() {
        return Err(not_pd(&sigma, "sampled Sigma"));
    }
    Ok((sigma, prec))
}
