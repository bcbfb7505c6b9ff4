//! Finite-difference verification of reverse-mode gradients.

use crate::array::DenseArray;
use crate::diffcore::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Compare the AD gradient of a scalar-valued function against central finite
/// differences at `point`. The function receives a fresh graph with a leaf
/// named `"x"` already bound to the point and must return a scalar node.
///
/// Returns `max_i |ad_i - fd_i| / (|fd_i| + 1e-8)`.
pub fn grad_check<F>(f: F, point: &DenseArray, fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf("x", point.clone())?;
    let out = f(&mut g, x)?;
    if g.value(out).len() != 1 {
        return Err(Error::InvalidArgument(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite {
            context: "grad_check function value".into(),
        });
    }
    g.mark_output("f", out);

    let grads = g.backward(out, &DenseArray::scalar(1.0))?;
    let ad = grads
        .wrt_leaf("x")
        .cloned()
        .unwrap_or_else(|| DenseArray::zeros(point.shape()));

    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += fd_step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= fd_step;

        let fp = eval_at(&mut g, &plus)?;
        let fm = eval_at(&mut g, &minus)?;
        let fd = (fp - fm) / (2.0 * fd_step);
        let rel = (ad.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    // Restore the original binding so the graph is left at `point`.
    eval_at(&mut g, point)?;
    Ok(max_rel)
}

fn eval_at(g: &mut Graph, x: &DenseArray) -> Result<f64> {
    let mut leaves = BTreeMap::new();
    leaves.insert("x".to_string(), x.clone());
    let out = g.forward(&leaves)?;
    let v = out["f"].item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check function value".into(),
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = 0.5 ||x||^2 -> grad = x; central FD is exact for quadratics.
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &DenseArray::from_vec(vec![1.0, -2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn tanh_network_matches_fd() {
        let err = grad_check(
            |g, x| {
                let w = g.constant(
                    DenseArray::new(vec![2, 3], vec![0.3, -0.1, 0.7, 0.2, 0.5, -0.4]).unwrap(),
                );
                let h = g.matmul(w, x)?;
                let t = g.tanh(h);
                Ok(g.sum(t))
            },
            &DenseArray::from_vec(vec![0.1, -0.2, 0.3]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn non_scalar_rejected() {
        let res = grad_check(|_, x| Ok(x), &DenseArray::from_vec(vec![1.0, 2.0]), 1e-5);
        assert!(res.is_err());
    }
}
