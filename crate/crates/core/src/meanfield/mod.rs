//! Mean-field dynamics of weight correlations under gradient descent.
//!
//! `M^phi(C) = E[phi(x1) phi(x2)] / E[phi(x1)^2]` for a pair of Gaussians
//! with common variance `Q` and correlation `C`, and `M_Q^phi(Q) = E[phi(x)^2]`.
//! The recursion tracks forward/backward weight correlations `C_f`, `C_b` and
//! the accumulated variances `Q_f`, `Q_b` as updates are added to the weights.

mod quadrature;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use quadrature::Quadrature;

use crate::metrics::{backward_correlation, forward_correlation};
use crate::nn::{softmax_cross_entropy, Mechanisms, Mode, Network, NnError, NodeKind};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanFieldError {
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("correlation {0} outside [-1, 1]")]
    CorrelationOutOfRange(f64),
    #[error("variance mix has zero total weight")]
    ZeroWeight,
    #[error("{0:?} has no derivative map")]
    NoDerivative(Activation),
    #[error("quadrature too coarse: {0}")]
    Coarse(String),
    #[error("step index must be at least 1")]
    BadStep,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MeanFieldError>;

/// Activations and the derivative maps the recursion needs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Identity,
    /// Heaviside step, the derivative of ReLU.
    Step,
    /// Derivative of LeakyReLU.
    LeakyStep {
        slope: f64,
    },
    /// `1 - tanh^2`.
    TanhPrime,
    /// Constant one, the derivative of the identity.
    Unit,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyStep { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::TanhPrime => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Unit => 1.0,
        }
    }

    pub fn derivative(self) -> Result<Activation> {
        match self {
            Activation::Relu => Ok(Activation::Step),
            Activation::LeakyRelu { slope } => Ok(Activation::LeakyStep { slope }),
            Activation::Tanh => Ok(Activation::TanhPrime),
            Activation::Identity => Ok(Activation::Unit),
            other => Err(MeanFieldError::NoDerivative(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub phi: Activation,
    #[serde(default)]
    pub quadrature: Quadrature,
}

impl ActivationMap {
    pub fn new(phi: Activation, quadrature: Quadrature) -> Result<Self> {
        match quadrature {
            Quadrature::Gauss { order } if order < 16 => {
                return Err(MeanFieldError::Coarse(format!("order {order} < 16")))
            }
            Quadrature::MonteCarlo { samples, .. } if samples < 100_000 => {
                return Err(MeanFieldError::Coarse(format!("{samples} samples < 100000")))
            }
            _ => {}
        }
        Ok(Self { phi, quadrature })
    }

    /// Default Gauss rule.
    pub fn gauss(phi: Activation) -> Self {
        Self {
            phi,
            quadrature: Quadrature::default(),
        }
    }

    /// The same quadrature applied to `phi'`.
    pub fn derivative(&self) -> Result<Self> {
        Ok(Self {
            phi: self.phi.derivative()?,
            quadrature: self.quadrature,
        })
    }
}

fn check_q(q: f64) -> Result<()> {
    if q < 0.0 || q.is_nan() {
        return Err(MeanFieldError::NegativeVariance(q));
    }
    Ok(())
}

fn check_c(c: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&c) {
        return Err(MeanFieldError::CorrelationOutOfRange(c));
    }
    Ok(())
}

/// `E[phi(x)^2]` for `x ~ N(0, q)`.
pub fn map_q(map: &ActivationMap, q: f64) -> Result<f64> {
    check_q(q)?;
    let phi = map.phi;
    Ok(quadrature::univariate(map.quadrature, q, |x| {
        let v = phi.eval(x);
        v * v
    }))
}

/// Normalised correlation map `M^phi(c)` at variance `q`.
pub fn map_c(map: &ActivationMap, c: f64, q: f64) -> Result<f64> {
    check_c(c)?;
    check_q(q)?;
    if q == 0.0 {
        return Err(MeanFieldError::NegativeVariance(q));
    }
    let phi = map.phi;
    let f = |x: f64| phi.eval(x);
    let num = quadrature::bivariate(map.quadrature, q, c, f, f);
    // Same rule at c = 1, so that M(1) is exactly one for the Gauss rule.
    let den = quadrature::bivariate(map.quadrature, q, 1.0, f, f);
    Ok(num / den)
}

/// Slopes of the correlation maps: `M_b' = d/dC M^phi` and `M_f' = d/dC M^phi'`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSlopes {
    pub m_b_prime: f64,
    pub m_f_prime: f64,
    /// True when a one-sided difference was used because `C ± h` left [-1, 1].
    pub one_sided: bool,
}

pub const DERIV_STEP: f64 = 1e-5;

fn slope(map: &ActivationMap, c: f64, q: f64) -> Result<(f64, bool)> {
    let h = DERIV_STEP;
    if c + h > 1.0 {
        Ok(((map_c(map, c, q)? - map_c(map, c - h, q)?) / h, true))
    } else if c - h < -1.0 {
        Ok(((map_c(map, c + h, q)? - map_c(map, c, q)?) / h, true))
    } else {
        Ok(((map_c(map, c + h, q)? - map_c(map, c - h, q)?) / (2.0 * h), false))
    }
}

pub fn map_c_deriv(map: &ActivationMap, c: f64, q: f64) -> Result<MapSlopes> {
    check_c(c)?;
    let (m_b_prime, a) = slope(map, c, q)?;
    let (m_f_prime, b) = slope(&map.derivative()?, c, q)?;
    Ok(MapSlopes {
        m_b_prime,
        m_f_prime,
        one_sided: a || b,
    })
}

/// `M^phi'(C) M^phi(C) - C`.
pub fn fixed_point_residual(c_f: f64, map: &ActivationMap, q: f64) -> Result<f64> {
    Ok(map_c(&map.derivative()?, c_f, q)? * map_c(map, c_f, q)? - c_f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    pub t: u64,
    pub c_f: f64,
    pub c_b: f64,
    pub q_f: f64,
    pub q_b: f64,
    pub q_df: f64,
    pub q_db: f64,
    pub eta: f64,
    /// Power of `eta` in the variance updates (1 or 2).
    pub lr_exponent: u32,
}

impl MeanFieldState {
    pub fn new(c_f: f64, c_b: f64, q_f: f64, q_b: f64, eta: f64) -> Self {
        Self {
            t: 0,
            c_f,
            c_b,
            q_f,
            q_b,
            q_df: 0.0,
            q_db: 0.0,
            eta,
            lr_exponent: 1,
        }
    }
}

/// One update of the correlation recursion.
pub fn step(state: &MeanFieldState, map: &ActivationMap) -> Result<MeanFieldState> {
    let s = state;
    check_c(s.c_f)?;
    check_c(s.c_b)?;
    check_q(s.q_f)?;
    check_q(s.q_b)?;
    let dmap = map.derivative()?;
    let lr = s.eta.powi(s.lr_exponent as i32);
    let q_db = lr * map_q(map, s.q_f)?;
    let q_df = lr * s.q_b * map_q(&dmap, s.q_f)?;
    let c_df = s.c_b * map_c(&dmap, s.c_f, s.q_f)?;
    let c_db = map_c(map, s.c_f, s.q_f)?;
    let wf = s.q_f + q_df;
    let wb = s.q_b + q_db;
    if wf == 0.0 || wb == 0.0 {
        return Err(MeanFieldError::ZeroWeight);
    }
    let c_f = ((s.q_f * s.c_f + q_df * c_df) / wf).clamp(-1.0, 1.0);
    let c_b = ((s.q_b * s.c_b + q_db * c_db) / wb).clamp(-1.0, 1.0);
    Ok(MeanFieldState {
        t: s.t + 1,
        c_f,
        c_b,
        q_f: wf,
        q_b: wb,
        q_df,
        q_db,
        ..*s
    })
}

/// States `0..=steps` starting from `state`.
pub fn trajectory(state: &MeanFieldState, map: &ActivationMap, steps: usize) -> Result<Vec<MeanFieldState>> {
    let mut out = vec![*state];
    for _ in 0..steps {
        let next = step(out.last().expect("non-empty"), map)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Eigenvalues are complex; both fields hold their common modulus.
    pub complex: bool,
    /// Row-major `[[d C_f/d C_f, d C_f/d C_b], [d C_b/d C_f, d C_b/d C_b]]`.
    pub jacobian: [[f64; 2]; 2],
}

/// Eigenvalues of the linearised recursion around a fixed point at step `t`.
pub fn stability_eigenvalues(t: u64, c_b: f64, m_f: f64, m_f_prime: f64, m_b_prime: f64) -> Result<Eigenpair> {
    if t < 1 {
        return Err(MeanFieldError::BadStep);
    }
    let inv = 1.0 / t as f64;
    let jacobian = [
        [1.0 - inv * (1.0 - c_b * m_f_prime), inv * m_f],
        [inv * m_b_prime, 1.0 - inv],
    ];
    let a = c_b * m_f_prime;
    let disc = 0.25 * a * a + m_b_prime * m_f;
    let centre = 1.0 + inv * (0.5 * a - 1.0);
    if disc >= 0.0 {
        let r = inv * disc.sqrt();
        Ok(Eigenpair {
            lambda1: centre + r,
            lambda2: centre - r,
            complex: false,
            jacobian,
        })
    } else {
        let modulus = (centre * centre - inv * inv * disc).sqrt();
        Ok(Eigenpair {
            lambda1: modulus,
            lambda2: modulus,
            complex: true,
            jacobian,
        })
    }
}

/// Correlations of one gradient step's weight update, per weight layer:
/// `(layer id, C_df, C_db)`.
pub fn empirical_update_correlations(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    mech: &Mechanisms,
) -> Result<Vec<(String, f64, f64)>> {
    let pass = net.forward(batch, Mode::Train, mech)?;
    let (_, dl) = softmax_cross_entropy(&pass.logits, labels)?;
    let grads = net.backward(&pass, &dl, mech)?;
    let mut out = Vec::new();
    for node in net.nodes() {
        if !matches!(node.kind, NodeKind::Conv | NodeKind::Dense) {
            continue;
        }
        let g = &grads.params[node.weight.expect("weight layer")];
        let (Ok(cf), Ok(cb)) = (forward_correlation(g), backward_correlation(g)) else {
            continue;
        };
        out.push((node.id, cf, cb));
    }
    Ok(out)
}
