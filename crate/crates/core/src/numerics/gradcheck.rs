use super::graph::{Graph, Var};
use super::ops::RoundMode;
use super::tensor::RealTensor;
use crate::error::Result;

/// Seed handed to every graph built by [`grad_check`], so stochastic pieces of
/// `f` (sampled noise, dropout masks) are identical across perturbations.
const CHECK_SEED: u64 = 0x5eed;

fn eval_loss<F>(f: &F, params: &[RealTensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(RoundMode::Surrogate, CHECK_SEED);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Tape gradients and central differences, flattened over every parameter element.
fn gradient_pairs<F>(f: &F, params: &[RealTensor], eps: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(RoundMode::Surrogate, CHECK_SEED);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut pairs = Vec::new();
    let mut probe: Vec<RealTensor> = params.to_vec();
    for (pi, (var, p)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(*var, p.shape());
        for i in 0..p.len() {
            let orig = p.data()[i];
            probe[pi].data_mut()[i] = orig + eps;
            let up = eval_loss(f, &probe)?;
            probe[pi].data_mut()[i] = orig - eps;
            let down = eval_loss(f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            pairs.push((analytic.data()[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(pairs)
}

/// Largest relative disagreement between tape gradients and central
/// differences, `|a - n| / max(1e-8, |a| + |n|)`, over every parameter element.
///
/// Rounding runs in [`RoundMode::Surrogate`], i.e. the straight-through
/// surrogate the tape actually differentiates.
pub fn grad_check<F>(f: F, params: &[RealTensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(gradient_pairs(&f, params, eps)?
        .into_iter()
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// `||a - n|| / max(||a||, ||n||)` over the whole gradient vector. Unlike the
/// elementwise check it is not dominated by entries whose true value sits
/// below the difference quotient's roundoff floor (about `|loss| * 1e-16 / eps`).
pub fn grad_check_global<F>(f: F, params: &[RealTensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let pairs = gradient_pairs(&f, params, eps)?;
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut pairs.iter().map(|(a, n)| a - n));
    let scale = norm(&mut pairs.iter().map(|p| p.0)).max(norm(&mut pairs.iter().map(|p| p.1)));
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}
