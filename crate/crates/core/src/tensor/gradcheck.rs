//! Central finite-difference gradient oracle (64-bit).
//!
//! The oracle only ever calls the forward pass, so it stays independent of
//! every backward rule it is used to check.

use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor for relative errors; gradients smaller than this are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone)]
pub enum Coordinates {
    All,
    /// Explicit `(input index, flat element index)` pairs.
    Only(Vec<(usize, usize)>),
}

/// Compares backward gradients of `f` against central differences with
/// step `eps`. `f` must build a scalar loss from the given leaves.
pub fn check<Fun>(
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &Coordinates,
    f: Fun,
) -> Result<GradCheckReport, TensorError>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &leaves)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &leaves)?;
        Ok(g.value(loss).item())
    };

    let pairs: Vec<(usize, usize)> = match coords {
        Coordinates::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Coordinates::Only(p) => p.clone(),
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    for &(i, j) in &pairs {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i].data()[j], numeric);
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked: pairs.len(),
    })
}
