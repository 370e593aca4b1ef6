//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(input, element)` where it occurred.
    pub worst: (usize, usize),
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `h` for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut eval = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar output".into()));
        }
        let v = g.value(out).item();
        if !want_grad {
            return Ok((v, Vec::new()));
        }
        g.backward(out)?;
        let grads = ids
            .iter()
            .zip(values)
            .map(|(&id, t)| g.grad(id).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        Ok((v, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (i, (t, grads)) in inputs.iter().zip(&analytic).enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let x = t.data()[k];
            probe[i].data_mut()[k] = x + h;
            let (up, _) = eval(&probe, false)?;
            probe[i].data_mut()[k] = x - h;
            let (down, _) = eval(&probe, false)?;
            probe[i].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.max_rel_err {
                worst = GradCheck {
                    max_rel_err: err,
                    worst: (i, k),
                };
            }
        }
    }
    Ok(worst)
}

/// `Σ out ⊙ w` for a fixed pseudo-random `w`, turning any output into a
/// scalar whose gradient exercises every element.
pub fn random_projection(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}
