use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Result;
use crate::meanfield::{
    fixed_point_residual, map_c, map_c_deriv, stability_eigenvalues, trajectory, Activation, ActivationMap,
    MeanFieldState, Quadrature,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub activations: Vec<Activation>,
    pub c0: Vec<f64>,
    pub q0: f64,
    pub eta: f64,
    pub t_max: usize,
    pub quadrature: Quadrature,
    /// Rows with `|residual|` at most this are treated as fixed points and
    /// get a stability eigenvalue.
    pub fixed_point_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            activations: vec![Activation::Relu, Activation::Identity],
            c0: vec![0.9, 0.99, 0.999, 1.0],
            q0: 1.0,
            eta: 0.1,
            t_max: 100,
            quadrature: Quadrature::default(),
            fixed_point_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub activation: String,
    pub c0: f64,
    pub t: u64,
    pub c_f: f64,
    pub c_b: f64,
    pub q_f: f64,
    pub q_b: f64,
    pub residual: f64,
    pub lambda1: Option<f64>,
}

pub fn activation_name(a: Activation) -> String {
    match a {
        Activation::Relu => "relu".into(),
        Activation::LeakyRelu { slope } => format!("leaky_relu({slope})"),
        Activation::Tanh => "tanh".into(),
        Activation::Identity => "identity".into(),
        Activation::Step => "step".into(),
        Activation::LeakyStep { slope } => format!("leaky_step({slope})"),
        Activation::TanhPrime => "tanh_prime".into(),
        Activation::Unit => "unit".into(),
    }
}

/// Trajectories from `C_f = C_b = c0` and `Q_f = Q_b = q0` for every pair
/// in the grid, `t_max + 1` rows each.
pub fn run_meanfield_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &phi in &cfg.activations {
        let map = ActivationMap::new(phi, cfg.quadrature)?;
        let dmap = map.derivative()?;
        for &c0 in &cfg.c0 {
            let start = MeanFieldState::new(c0, c0, cfg.q0, cfg.q0, cfg.eta);
            for s in trajectory(&start, &map, cfg.t_max)? {
                let residual = fixed_point_residual(s.c_f, &map, s.q_f)?;
                let lambda1 = if residual.abs() <= cfg.fixed_point_tol {
                    let m_f = map_c(&dmap, s.c_f, s.q_f)?;
                    let slopes = map_c_deriv(&map, s.c_f, s.q_f)?;
                    Some(stability_eigenvalues(s.t.max(1), s.c_b, m_f, slopes.m_f_prime, slopes.m_b_prime)?.lambda1)
                } else {
                    None
                };
                rows.push(SweepRow {
                    activation: activation_name(phi),
                    c0,
                    t: s.t,
                    c_f: s.c_f,
                    c_b: s.c_b,
                    q_f: s.q_f,
                    q_b: s.q_b,
                    residual,
                    lambda1,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "activation",
        "c0",
        "t",
        "c_f",
        "c_b",
        "q_f",
        "q_b",
        "residual",
        "lambda1",
    ])?;
    for r in rows {
        w.write_record([
            r.activation.clone(),
            format!("{}", r.c0),
            r.t.to_string(),
            format!("{}", r.c_f),
            format!("{}", r.c_b),
            format!("{}", r.q_f),
            format!("{}", r.q_b),
            format!("{}", r.residual),
            r.lambda1.map(|l| format!("{l}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| super::HarnessError::Io(e.to_string()))?;
    Ok(())
}
