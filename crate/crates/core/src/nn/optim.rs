use super::network::{Gradients, Network};
use super::{NnError, Result};

/// Heavy-ball momentum SGD: `v <- mu v + g`, `w <- w - lr v`.
pub fn sgd_momentum_step(net: &mut Network, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    if grads.params.len() != net.params().len() {
        return Err(NnError::Shape("gradient count does not match parameters".into()));
    }
    let p = net.precision();
    for (param, g) in net.params_mut().iter_mut().zip(&grads.params) {
        if g.shape() != param.value.shape() {
            return Err(NnError::Shape(format!("gradient shape for {}", param.name)));
        }
        for ((w, v), gv) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(param.velocity.data_mut())
            .zip(g.data())
        {
            *v = p.round(p.round(momentum * *v) + gv);
            *w = p.round(*w - p.round(lr * *v));
        }
        if !param.value.all_finite() {
            return Err(NnError::NonFinite(param.name.clone()));
        }
    }
    net.advance_step();
    Ok(())
}

/// Piecewise-constant schedule: `base * factor^k` where `k` counts the
/// milestones at or below `epoch`.
pub fn lr_schedule(epoch: usize, base: f64, milestones: &[usize], factor: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base * factor.powi(k as i32)
}
