//! Actor-critic MLP: shared ReLU trunk, tanh-squashed Gaussian mean head with
//! a state-independent log-std, and a scalar value head. Forward and backward
//! passes are written out by hand over batched ndarray GEMMs.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::envs::{ACT_DIM, OBS_DIM};

pub const STD_FLOOR: f64 = 1e-3;
pub const LOG_STD_INIT: f64 = -std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite parameters")]
    NonFinite,
}

/// Named array inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ArraySpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All weights in one contiguous vector; weight matrices are stored
/// `(fan_in, fan_out)` row-major so a batch forward is `X · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub obs_dim: usize,
    pub hidden: usize,
    pub act_dim: usize,
    pub data: Vec<f64>,
}

fn layout(obs: usize, h: usize, act: usize) -> Vec<ArraySpec> {
    let shapes: [(&'static str, Vec<usize>); 9] = [
        ("w1", vec![obs, h]),
        ("b1", vec![h]),
        ("w2", vec![h, h]),
        ("b2", vec![h]),
        ("w_mu", vec![h, act]),
        ("b_mu", vec![act]),
        ("w_v", vec![h, 1]),
        ("b_v", vec![1]),
        ("log_std", vec![act]),
    ];
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let spec = ArraySpec { name, offset, shape };
            offset += spec.len();
            spec
        })
        .collect()
}

macro_rules! views {
    ($get:ident, $get_mut:ident, $idx:expr, 2) => {
        pub fn $get(&self) -> ArrayView2<'_, f64> {
            let sp = &self.specs()[$idx];
            ArrayView2::from_shape((sp.shape[0], sp.shape[1]), &self.data[sp.offset..sp.offset + sp.len()])
                .expect("layout")
        }
        pub fn $get_mut(&mut self) -> ArrayViewMut2<'_, f64> {
            let sp = self.specs()[$idx].clone();
            ArrayViewMut2::from_shape((sp.shape[0], sp.shape[1]), &mut self.data[sp.offset..sp.offset + sp.len()])
                .expect("layout")
        }
    };
    ($get:ident, $get_mut:ident, $idx:expr, 1) => {
        pub fn $get(&self) -> ArrayView1<'_, f64> {
            let sp = &self.specs()[$idx];
            ArrayView1::from(&self.data[sp.offset..sp.offset + sp.len()])
        }
        pub fn $get_mut(&mut self) -> ArrayViewMut1<'_, f64> {
            let sp = self.specs()[$idx].clone();
            ArrayViewMut1::from(&mut self.data[sp.offset..sp.offset + sp.len()])
        }
    };
}

impl MlpParams {
    pub fn zeros(obs_dim: usize, hidden: usize, act_dim: usize) -> Self {
        let n: usize = layout(obs_dim, hidden, act_dim).iter().map(ArraySpec::len).sum();
        Self { obs_dim, hidden, act_dim, data: vec![0.0; n] }
    }

    /// Same shapes, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.obs_dim, self.hidden, self.act_dim)
    }

    /// Orthogonal initialization: gain √2 on the trunk, 0.01 on both heads,
    /// zero biases and log-std at ln 0.5.
    pub fn init(obs_dim: usize, hidden: usize, act_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(obs_dim, hidden, act_dim);
        let sqrt2 = std::f64::consts::SQRT_2;
        p.w1_mut().assign(&orthogonal(obs_dim, hidden, sqrt2, rng));
        p.w2_mut().assign(&orthogonal(hidden, hidden, sqrt2, rng));
        p.w_mu_mut().assign(&orthogonal(hidden, act_dim, 0.01, rng));
        p.w_v_mut().assign(&orthogonal(hidden, 1, 0.01, rng));
        p.log_std_mut().fill(LOG_STD_INIT);
        p
    }

    pub fn specs(&self) -> Vec<ArraySpec> {
        layout(self.obs_dim, self.hidden, self.act_dim)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    views!(w1, w1_mut, 0, 2);
    views!(b1, b1_mut, 1, 1);
    views!(w2, w2_mut, 2, 2);
    views!(b2, b2_mut, 3, 1);
    views!(w_mu, w_mu_mut, 4, 2);
    views!(b_mu, b_mu_mut, 5, 1);
    views!(w_v, w_v_mut, 6, 2);
    views!(b_v, b_v_mut, 7, 1);
    views!(log_std, log_std_mut, 8, 1);

    /// Bias the mean head so the initial mean action equals `action`.
    pub fn set_action_bias(&mut self, action: &[f64]) {
        for (b, a) in self.b_mu_mut().iter_mut().zip(action) {
            *b = a.clamp(-0.999, 0.999).atanh();
        }
    }

    pub fn std(&self) -> Array1<f64> {
        self.log_std().mapv(|l| l.exp().max(STD_FLOOR))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, other: &Self) -> Result<(), PolicyError> {
        if (self.obs_dim, self.hidden, self.act_dim) != (other.obs_dim, other.hidden, other.act_dim) {
            return Err(PolicyError::Shape("parameter sets differ in shape".into()));
        }
        Ok(())
    }
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let (m, n) = (rows.max(cols), rows.min(cols));
    let g = nalgebra::DMatrix::<f64>::from_fn(m, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix so the distribution is uniform over orthogonal matrices
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyOutput {
    pub mean: [f64; ACT_DIM],
    pub std: [f64; ACT_DIM],
    pub value: f64,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    /// Squashed mean, `(batch, act_dim)`.
    pub mean: Array2<f64>,
    pub value: Array1<f64>,
}

fn affine(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut z = x.dot(w);
    z += b;
    z
}

pub fn forward_batch(params: &MlpParams, x: ArrayView2<f64>) -> Result<ForwardCache, PolicyError> {
    if x.ncols() != params.obs_dim {
        return Err(PolicyError::Shape(format!(
            "observation width {} != {}",
            x.ncols(),
            params.obs_dim
        )));
    }
    let mut h1 = affine(&x, &params.w1(), &params.b1());
    h1.mapv_inplace(|v| v.max(0.0));
    let mut h2 = affine(&h1.view(), &params.w2(), &params.b2());
    h2.mapv_inplace(|v| v.max(0.0));
    let mut mean = affine(&h2.view(), &params.w_mu(), &params.b_mu());
    mean.mapv_inplace(f64::tanh);
    let value = affine(&h2.view(), &params.w_v(), &params.b_v()).column(0).to_owned();
    Ok(ForwardCache { x: x.to_owned(), h1, h2, mean, value })
}

pub fn forward(params: &MlpParams, obs: &[f64]) -> Result<GaussianPolicyOutput, PolicyError> {
    if obs.len() != params.obs_dim || params.act_dim != ACT_DIM {
        return Err(PolicyError::Shape(format!("observation length {}", obs.len())));
    }
    let x = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| PolicyError::Shape(e.to_string()))?;
    let c = forward_batch(params, x)?;
    let mut mean = [0.0; ACT_DIM];
    let mut std = [0.0; ACT_DIM];
    for (i, s) in params.std().iter().enumerate() {
        mean[i] = c.mean[(0, i)];
        std[i] = *s;
    }
    Ok(GaussianPolicyOutput { mean, std, value: c.value[0] })
}

/// Exact diagonal-Gaussian log density.
pub fn log_prob(action: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(std)
        .map(|((a, m), s)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI
        })
        .sum()
}

/// Σ (ln σ + ½ ln 2πe)
pub fn entropy(std: &[f64]) -> f64 {
    std.iter().map(|s| s.ln() + 0.5 + HALF_LN_2PI).sum()
}

pub fn sample(out: &GaussianPolicyOutput, rng: &mut impl Rng) -> ([f64; ACT_DIM], f64) {
    let mut a = [0.0; ACT_DIM];
    for i in 0..ACT_DIM {
        let e: f64 = StandardNormal.sample(rng);
        a[i] = out.mean[i] + out.std[i] * e;
    }
    let lp = log_prob(&a, &out.mean, &out.std);
    (a, lp)
}

/// Reverse pass. `d_mean` is dL/d(squashed mean) `(batch, act)`, `d_value`
/// is dL/dV `(batch)`, `d_log_std` is the direct gradient on the log-std
/// (already summed over the batch). Returns dL/dθ.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    d_mean: ArrayView2<f64>,
    d_value: ArrayView1<f64>,
    d_log_std: ArrayView1<f64>,
) -> Result<MlpParams, PolicyError> {
    let b = cache.x.nrows();
    if d_mean.dim() != (b, params.act_dim) || d_value.len() != b || d_log_std.len() != params.act_dim {
        return Err(PolicyError::Shape("upstream gradient shapes".into()));
    }
    let mut g = params.zeros_like();

    // tanh'
    let d_mu_pre = &d_mean * &cache.mean.mapv(|m| 1.0 - m * m);
    let d_v = d_value.insert_axis(Axis(1));

    g.w_mu_mut().assign(&cache.h2.t().dot(&d_mu_pre));
    g.b_mu_mut().assign(&d_mu_pre.sum_axis(Axis(0)));
    g.w_v_mut().assign(&cache.h2.t().dot(&d_v));
    g.b_v_mut().assign(&d_v.sum_axis(Axis(0)));

    let mut d_h2 = d_mu_pre.dot(&params.w_mu().t());
    d_h2 += &d_v.dot(&params.w_v().t());
    d_h2.zip_mut_with(&cache.h2, |d, &h| {
        if h <= 0.0 {
            *d = 0.0
        }
    });
    g.w2_mut().assign(&cache.h1.t().dot(&d_h2));
    g.b2_mut().assign(&d_h2.sum_axis(Axis(0)));

    let mut d_h1 = d_h2.dot(&params.w2().t());
    d_h1.zip_mut_with(&cache.h1, |d, &h| {
        if h <= 0.0 {
            *d = 0.0
        }
    });
    g.w1_mut().assign(&cache.x.t().dot(&d_h1));
    g.b1_mut().assign(&d_h1.sum_axis(Axis(0)));

    // the std floor clips the gradient below it
    let ls = params.log_std().to_owned();
    let mut gl = g.log_std_mut();
    for i in 0..ls.len() {
        gl[i] = if ls[i].exp() > STD_FLOOR { d_log_std[i] } else { 0.0 };
    }
    Ok(g)
}

/// Batched mean actions for a set of observations (rows).
pub fn mean_actions(params: &MlpParams, x: ArrayView2<f64>) -> Result<Array2<f64>, PolicyError> {
    Ok(forward_batch(params, x)?.mean)
}

/// Observation batch as a `(n, OBS_DIM)` matrix.
pub fn obs_matrix(obs: &[[f64; OBS_DIM]]) -> Array2<f64> {
    let mut m = Array2::zeros((obs.len(), OBS_DIM));
    for (i, o) in obs.iter().enumerate() {
        m.slice_mut(s![i, ..]).assign(&ArrayView1::from(o));
    }
    m
}
