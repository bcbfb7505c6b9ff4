//! Declarative constraint sets: equality and inequality residual blocks with
//! Jacobian access, plus the feasibility-violation metric used throughout
//! evaluation.

use crate::array::DenseArray;
use crate::diffcore::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg;
use serde::{Deserialize, Serialize};

/// Scalar-or-vector bound, broadcast over the ambient space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bound {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Bound {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Bound::Scalar(v) => *v,
            Bound::Vector(v) => v[i],
        }
    }

    fn check_len(&self, dim: usize, what: &str) -> Result<()> {
        if let Bound::Vector(v) = self {
            if v.len() != dim {
                return Err(Error::InvalidConfig(format!(
                    "{what} bound has {} entries, ambient dim is {dim}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Equality residual block h(x) = 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EqualityBlock {
    /// h(x) = A x - b. Pinning rows are identity rows with prescribed values.
    Affine { a: DenseArray, b: DenseArray },
    /// h(x) = sum_i x_i^2 - target (one row).
    QuadraticMass { target: f64 },
    /// Identity-row pins whose target values are filled from a reference
    /// sample via [`ConstraintSet::bind_reference`].
    PinToReference { indices: Vec<usize> },
}

impl EqualityBlock {
    pub fn rows(&self) -> usize {
        match self {
            EqualityBlock::Affine { a, .. } => a.shape()[0],
            EqualityBlock::QuadraticMass { .. } => 1,
            EqualityBlock::PinToReference { indices } => indices.len(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            EqualityBlock::Affine { a, b } => {
                if a.shape().len() != 2 || a.shape()[1] != dim || b.len() != a.shape()[0] {
                    return Err(Error::InvalidConfig(format!(
                        "affine block: A {:?}, b {:?}, ambient dim {dim}",
                        a.shape(),
                        b.shape()
                    )));
                }
            }
            EqualityBlock::QuadraticMass { .. } => {}
            EqualityBlock::PinToReference { indices } => {
                if indices.iter().any(|&i| i >= dim) {
                    return Err(Error::InvalidConfig(
                        "pin index out of ambient range".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            EqualityBlock::Affine { a, b } => {
                let m = a.shape()[0];
                let d = a.shape()[1];
                let mut r = linalg::matvec(a.data(), x, m, d);
                for (ri, bi) in r.iter_mut().zip(b.data()) {
                    *ri -= bi;
                }
                Ok(r)
            }
            EqualityBlock::QuadraticMass { target } => {
                let s: f64 = x.iter().map(|v| v * v).sum();
                Ok(vec![s - target])
            }
            EqualityBlock::PinToReference { .. } => Err(Error::InvalidArgument(
                "pin block is unbound; call bind_reference first".into(),
            )),
        }
    }

    /// Dense Jacobian rows, shape (rows x dim).
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            EqualityBlock::Affine { a, .. } => Ok(a.data().to_vec()),
            EqualityBlock::QuadraticMass { .. } => Ok(x.iter().map(|v| 2.0 * v).collect()),
            EqualityBlock::PinToReference { .. } => Err(Error::InvalidArgument(
                "pin block is unbound; call bind_reference first".into(),
            )),
        }
    }

    /// Record h(x) on the graph; returns a node of shape [rows].
    pub fn residual_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            EqualityBlock::Affine { a, b } => {
                let an = g.constant(a.clone());
                let bn = g.constant(b.clone());
                let ax = g.matmul(an, x)?;
                g.sub(ax, bn)
            }
            EqualityBlock::QuadraticMass { target } => {
                let sq = g.mul(x, x)?;
                let s = g.sum(sq);
                Ok(g.add_scalar(s, -target))
            }
            EqualityBlock::PinToReference { .. } => Err(Error::InvalidArgument(
                "pin block is unbound; call bind_reference first".into(),
            )),
        }
    }

    /// Record the Jacobian J(x) on the graph; returns a node of shape
    /// [rows, dim].
    pub fn jacobian_graph(&self, g: &mut Graph, x: NodeId, dim: usize) -> Result<NodeId> {
        match self {
            EqualityBlock::Affine { a, .. } => Ok(g.constant(a.clone())),
            EqualityBlock::QuadraticMass { .. } => {
                let row = g.scale(x, 2.0);
                g.reshape(row, &[1, dim])
            }
            EqualityBlock::PinToReference { .. } => Err(Error::InvalidArgument(
                "pin block is unbound; call bind_reference first".into(),
            )),
        }
    }
}

/// Inequality residual block g(x) <= 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InequalityBlock {
    /// Elementwise box: rows x - upper <= 0 and lower - x <= 0.
    Box { lower: Bound, upper: Bound },
}

impl InequalityBlock {
    pub fn rows(&self, dim: usize) -> usize {
        match self {
            InequalityBlock::Box { .. } => 2 * dim,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            InequalityBlock::Box { lower, upper } => {
                lower.check_len(dim, "lower")?;
                upper.check_len(dim, "upper")?;
                for i in 0..dim {
                    if lower.at(i) > upper.at(i) {
                        return Err(Error::InvalidConfig(format!(
                            "box bounds inverted at coordinate {i}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        match self {
            InequalityBlock::Box { lower, upper } => {
                let mut r = Vec::with_capacity(2 * x.len());
                for (i, &v) in x.iter().enumerate() {
                    r.push(v - upper.at(i));
                }
                for (i, &v) in x.iter().enumerate() {
                    r.push(lower.at(i) - v);
                }
                r
            }
        }
    }

    /// Record g(x) on the graph.
    pub fn residual_graph(&self, g: &mut Graph, x: NodeId, dim: usize) -> Result<NodeId> {
        match self {
            InequalityBlock::Box { lower, upper } => {
                let lo: Vec<f64> = (0..dim).map(|i| lower.at(i)).collect();
                let up: Vec<f64> = (0..dim).map(|i| upper.at(i)).collect();
                let lo = g.constant(DenseArray::from_vec(lo));
                let up = g.constant(DenseArray::from_vec(up));
                let over = g.sub(x, up)?;
                let under = g.sub(lo, x)?;
                g.concat(&[over, under])
            }
        }
    }
}

/// Count/porosity constraint: exactly floor(k*n) grayscale-reduced entries
/// must fall strictly below the threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountThreshold {
    /// Target fraction in (0,1).
    pub k: f64,
    pub threshold: f64,
    /// Grayscale weights for multichannel inputs; `[1.0]` for single-channel.
    pub reduction: Vec<f64>,
}

impl CountThreshold {
    pub fn new(k: f64, threshold: f64, reduction: Vec<f64>) -> Self {
        CountThreshold {
            k,
            threshold,
            reduction,
        }
    }

    /// Channel-reduce to grayscale. Single-weight reductions treat the whole
    /// array as one channel; otherwise the leading axis is the channel axis
    /// and must match the weight count.
    pub fn reduce(&self, x: &DenseArray) -> Result<Vec<f64>> {
        if self.reduction.len() == 1 {
            return Ok(x.data().iter().map(|&v| v * self.reduction[0]).collect());
        }
        let c = self.reduction.len();
        if x.shape().is_empty() || x.shape()[0] != c || x.len() % c != 0 {
            return Err(Error::ShapeMismatch {
                context: "count reduction".into(),
                expected: vec![c],
                got: x.shape().to_vec(),
            });
        }
        let per = x.len() / c;
        let mut gray = vec![0.0; per];
        for ch in 0..c {
            let w = self.reduction[ch];
            for j in 0..per {
                gray[j] += w * x.data()[ch * per + j];
            }
        }
        Ok(gray)
    }

    /// Number of reduced entries strictly below the threshold.
    pub fn count_below(&self, x: &DenseArray) -> Result<usize> {
        let gray = self.reduce(x)?;
        Ok(gray.iter().filter(|&&v| v < self.threshold).count())
    }

    /// The discretized target count floor(k*n).
    pub fn target_count(&self, x: &DenseArray) -> Result<usize> {
        let n = if self.reduction.len() == 1 {
            x.len()
        } else {
            x.len() / self.reduction.len()
        };
        let kn = self.k * n as f64;
        if kn < 1.0 || kn > (n - 1) as f64 {
            return Err(Error::InvalidArgument(format!(
                "count target k*n = {kn:.3} outside [1, n-1]"
            )));
        }
        Ok(kn.floor() as usize)
    }

    pub fn is_feasible(&self, x: &DenseArray) -> Result<bool> {
        Ok(self.count_below(x)? == self.target_count(x)?)
    }
}

/// Intersection of equality, inequality, and count constraint blocks on a
/// fixed ambient space. Immutable after construction; all operations are
/// pure.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ConstraintSet {
    pub ambient_dim: usize,
    #[serde(default)]
    pub equalities: Vec<EqualityBlock>,
    #[serde(default)]
    pub inequalities: Vec<InequalityBlock>,
    #[serde(default)]
    pub counts: Vec<CountThreshold>,
}

impl ConstraintSet {
    pub fn empty(ambient_dim: usize) -> Self {
        ConstraintSet {
            ambient_dim,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn with_equality(mut self, block: EqualityBlock) -> Self {
        self.equalities.push(block);
        self
    }

    pub fn with_inequality(mut self, block: InequalityBlock) -> Self {
        self.inequalities.push(block);
        self
    }

    pub fn with_count(mut self, block: CountThreshold) -> Self {
        self.counts.push(block);
        self
    }

    pub fn is_unconstrained(&self) -> bool {
        self.equalities.is_empty() && self.inequalities.is_empty() && self.counts.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.equalities {
            b.validate(self.ambient_dim)?;
        }
        for b in &self.inequalities {
            b.validate(self.ambient_dim)?;
        }
        for c in &self.counts {
            if c.k <= 0.0 || c.k >= 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "count fraction k = {} outside (0,1)",
                    c.k
                )));
            }
        }
        Ok(())
    }

    pub fn has_pins(&self) -> bool {
        self.equalities
            .iter()
            .any(|b| matches!(b, EqualityBlock::PinToReference { .. }))
    }

    /// Resolve `PinToReference` blocks into concrete affine pins (identity
    /// rows with b taken from `reference`).
    pub fn bind_reference(&self, reference: &DenseArray) -> Result<ConstraintSet> {
        if reference.len() != self.ambient_dim {
            return Err(Error::ShapeMismatch {
                context: "bind_reference".into(),
                expected: vec![self.ambient_dim],
                got: reference.shape().to_vec(),
            });
        }
        let mut out = self.clone();
        for block in out.equalities.iter_mut() {
            if let EqualityBlock::PinToReference { indices } = block {
                let m = indices.len();
                let d = self.ambient_dim;
                let mut a = DenseArray::zeros(&[m, d]);
                let mut b = DenseArray::zeros(&[m]);
                for (row, &idx) in indices.iter().enumerate() {
                    a.data_mut()[row * d + idx] = 1.0;
                    b.data_mut()[row] = reference.data()[idx];
                }
                *block = EqualityBlock::Affine { a, b };
            }
        }
        Ok(out)
    }

    pub fn total_equality_rows(&self) -> usize {
        self.equalities.iter().map(|b| b.rows()).sum()
    }

    fn check_dim(&self, x: &DenseArray) -> Result<()> {
        if x.len() != self.ambient_dim {
            return Err(Error::ShapeMismatch {
                context: "constraint input".into(),
                expected: vec![self.ambient_dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Concatenated equality and inequality residuals in declaration order.
    pub fn residual(&self, x: &DenseArray) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(x)?;
        let mut h = Vec::new();
        for b in &self.equalities {
            h.extend(b.residual(x.data())?);
        }
        let mut g = Vec::new();
        for b in &self.inequalities {
            g.extend(b.residual(x.data()));
        }
        Ok((h, g))
    }

    /// Feasibility-violation metric: mean squared equality residual plus mean
    /// squared positive part of inequality residuals, plus a 0/1 indicator
    /// per count block.
    pub fn violation(&self, x: &DenseArray) -> Result<f64> {
        let (h, g) = self.residual(x)?;
        let mut cv = 0.0;
        if !h.is_empty() {
            cv += h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64;
        }
        if !g.is_empty() {
            cv += g.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>() / g.len() as f64;
        }
        for c in &self.counts {
            if !c.is_feasible(x)? {
                cv += 1.0;
            }
        }
        Ok(cv)
    }

    /// Stacked equality Jacobian, shape (total rows x ambient_dim). Count
    /// blocks are nondifferentiable and never part of this stack.
    pub fn jacobian(&self, x: &DenseArray) -> Result<DenseArray> {
        self.check_dim(x)?;
        let m = self.total_equality_rows();
        let d = self.ambient_dim;
        let mut data = Vec::with_capacity(m * d);
        for b in &self.equalities {
            data.extend(b.jacobian(x.data())?);
        }
        DenseArray::new(vec![m, d], data)
    }

    /// Record the stacked equality residual on the graph (shape [m]).
    pub fn residual_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let parts: Vec<NodeId> = self
            .equalities
            .iter()
            .map(|b| b.residual_graph(g, x))
            .collect::<Result<_>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts)
        }
    }

    /// Record the stacked equality Jacobian on the graph (shape [m, d]).
    pub fn jacobian_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let d = self.ambient_dim;
        let parts: Vec<NodeId> = self
            .equalities
            .iter()
            .map(|b| b.jacobian_graph(g, x, d))
            .collect::<Result<_>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            let flat = g.concat(&parts)?;
            g.reshape(flat, &[self.total_equality_rows(), d])
        }
    }

    /// Equality Jacobian extracted from the AD graph one row at a time.
    /// Test oracle for the analytic `jacobian`.
    pub fn jacobian_ad(&self, x: &DenseArray) -> Result<DenseArray> {
        self.check_dim(x)?;
        let mut g = Graph::new();
        let xn = g.leaf("x", x.clone())?;
        let h = self.residual_graph(&mut g, xn)?;
        let m = g.value(h).len();
        let d = self.ambient_dim;
        let mut data = Vec::with_capacity(m * d);
        for row in 0..m {
            let mut seed = DenseArray::zeros(&[m]);
            seed.data_mut()[row] = 1.0;
            let grads = g.backward(h, &seed)?;
            match grads.wrt_leaf("x") {
                Some(gr) => data.extend_from_slice(gr.data()),
                None => data.extend(std::iter::repeat(0.0).take(d)),
            }
        }
        DenseArray::new(vec![m, d], data)
    }

    /// Short stable identifier of the constraint declaration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).unwrap_or_default();
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_set() -> ConstraintSet {
        // x1 + x2 = 0
        ConstraintSet::empty(2).with_equality(EqualityBlock::Affine {
            a: DenseArray::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            b: DenseArray::from_vec(vec![0.0]),
        })
    }

    #[test]
    fn affine_residual_on_hyperplane() {
        let set = line_set();
        let (h, _) = set.residual(&DenseArray::from_vec(vec![1.0, -1.0])).unwrap();
        assert_eq!(h, vec![0.0]);
    }

    #[test]
    fn quadratic_mass_residual() {
        let set = ConstraintSet::empty(2)
            .with_equality(EqualityBlock::QuadraticMass { target: 2.0 });
        let (h, _) = set.residual(&DenseArray::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(h, vec![0.0]);
    }

    #[test]
    fn count_exact_fraction_feasible() {
        let ct = CountThreshold::new(0.5, 0.0, vec![1.0]);
        let x = DenseArray::from_vec(vec![-1.0, 1.0]);
        assert!(ct.is_feasible(&x).unwrap());
        let set = ConstraintSet::empty(2).with_count(ct);
        assert_eq!(set.violation(&x).unwrap(), 0.0);
    }

    #[test]
    fn violation_mean_of_squares() {
        let set = ConstraintSet::empty(2).with_equality(EqualityBlock::Affine {
            a: DenseArray::eye(2),
            b: DenseArray::from_vec(vec![0.0, 0.0]),
        });
        let cv = set.violation(&DenseArray::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(cv, 12.5);
    }

    #[test]
    fn count_indicator_is_binary() {
        // fraction 0.60 below threshold vs target 0.6251 on 256 pixels -> 1.0
        let ct = CountThreshold::new(0.6251, 0.0, vec![1.0]);
        let mut data = vec![1.0; 256];
        for v in data.iter_mut().take(154) {
            *v = -1.0;
        }
        let x = DenseArray::new(vec![16, 16], data).unwrap();
        let set = ConstraintSet::empty(256).with_count(ct);
        assert_eq!(set.violation(&x).unwrap(), 1.0);
    }

    #[test]
    fn jacobian_affine_is_a() {
        let set = line_set();
        let j = set.jacobian(&DenseArray::from_vec(vec![0.3, 0.7])).unwrap();
        assert_eq!(j.shape(), &[1, 2]);
        assert_eq!(j.data(), &[1.0, 1.0]);
    }

    #[test]
    fn jacobian_quadratic_is_2x() {
        let set = ConstraintSet::empty(3)
            .with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let j = set
            .jacobian(&DenseArray::from_vec(vec![1.0, -2.0, 0.5]))
            .unwrap();
        assert_eq!(j.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn violation_invariant_under_block_permutation() {
        let a = ConstraintSet::empty(2)
            .with_equality(EqualityBlock::Affine {
                a: DenseArray::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
                b: DenseArray::from_vec(vec![1.0]),
            })
            .with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let b = ConstraintSet::empty(2)
            .with_equality(EqualityBlock::QuadraticMass { target: 1.0 })
            .with_equality(EqualityBlock::Affine {
                a: DenseArray::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
                b: DenseArray::from_vec(vec![1.0]),
            });
        let x = DenseArray::from_vec(vec![0.3, -0.9]);
        assert_eq!(a.violation(&x).unwrap(), b.violation(&x).unwrap());
    }

    #[test]
    fn bind_reference_resolves_pins() {
        let set = ConstraintSet::empty(4)
            .with_equality(EqualityBlock::PinToReference { indices: vec![0, 2] });
        let reference = DenseArray::from_vec(vec![9.0, 0.0, 7.0, 0.0]);
        let bound = set.bind_reference(&reference).unwrap();
        let (h, _) = bound.residual(&reference).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        let (h, _) = bound
            .residual(&DenseArray::from_vec(vec![8.0, 0.0, 7.0, 0.0]))
            .unwrap();
        assert_eq!(h, vec![-1.0, 0.0]);
    }

    #[test]
    fn unbound_pin_errors() {
        let set = ConstraintSet::empty(2)
            .with_equality(EqualityBlock::PinToReference { indices: vec![0] });
        assert!(set.residual(&DenseArray::from_vec(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn ad_jacobian_matches_analytic() {
        let set = ConstraintSet::empty(3)
            .with_equality(EqualityBlock::Affine {
                a: DenseArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, -1.0, 0.5]).unwrap(),
                b: DenseArray::from_vec(vec![0.1, 0.2]),
            })
            .with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let x = DenseArray::from_vec(vec![0.4, -0.6, 1.1]);
        let analytic = set.jacobian(&x).unwrap();
        let ad = set.jacobian_ad(&x).unwrap();
        for (a, b) in analytic.data().iter().zip(ad.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
