//! Lie-bracket rank tests: plain accessibility of the unperturbed system and
//! the lifted sufficient condition on `(f, Df + Dfᵀ)` for the mean/covariance
//! system.
//!
//! Brackets of brackets are differentiated numerically by central
//! differences of the bracket field itself, so each nesting level costs one
//! finite-difference layer. Ranks are certified from below only: a family
//! that does not reach the target dimension is inconclusive, not
//! inaccessible.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{ControlVector, DynamicsModel, StateVector};
use crate::error::{check_dim, Error, Result};

/// Relative step of the nested central differences.
pub const BRACKET_FD_STEP: f64 = 1e-4;
/// Default relative singular-value threshold.
pub const DEFAULT_TOL_SV: f64 = 1e-6;

type EvalFn = dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync;

/// A smooth vector field on `Rⁿ` with an optional exact Jacobian.
#[derive(Clone)]
pub struct VectorFieldHandle {
    dim: usize,
    eval: Arc<EvalFn>,
    jac: Option<Arc<JacFn>>,
    label: String,
}

impl std::fmt::Debug for VectorFieldHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorFieldHandle")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl VectorFieldHandle {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        eval: impl Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            eval: Arc::new(eval),
            jac: None,
            label: label.into(),
        }
    }

    pub fn with_jacobian(mut self, jac: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    /// `x -> f(x, u)` for a fixed control; uses the model Jacobian.
    pub fn from_model<M: DynamicsModel + 'static>(model: Arc<M>, u: ControlVector, label: impl Into<String>) -> Result<Self> {
        check_dim("control sample", model.control_dim(), u.dim())?;
        let n = model.state_dim();
        let (m1, u1) = (model.clone(), u.0.clone());
        let (m2, u2) = (model, u.0);
        Ok(Self::new(n, label, move |x| {
            let mut out = DVector::zeros(n);
            m1.drift(x, &u1, &mut out)?;
            Ok(out)
        })
        .with_jacobian(move |x| {
            let mut out = DMatrix::zeros(n, n);
            m2.jacobian(x, &u2, &mut out)?;
            Ok(out)
        }))
    }

    /// Constant field.
    pub fn constant(c: DVector<f64>, label: impl Into<String>) -> Self {
        let n = c.len();
        Self::new(n, label, move |_| Ok(c.clone())).with_jacobian(move |_| Ok(DMatrix::zeros(n, n)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("vector field point", self.dim, x.len())?;
        let v = (self.eval)(x)?;
        check_dim("vector field value", self.dim, v.len())?;
        if !v.iter().all(|e| e.is_finite()) {
            return Err(Error::NonFinite(format!("field {}", self.label)));
        }
        Ok(v)
    }

    /// Exact Jacobian when available, central differences otherwise.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let j = match &self.jac {
            Some(jac) => {
                check_dim("vector field point", self.dim, x.len())?;
                jac(x)?
            }
            None => self.fd_jacobian(x)?,
        };
        if !j.iter().all(|e| e.is_finite()) {
            return Err(Error::NonFinite(format!("Jacobian of {}", self.label)));
        }
        Ok(j)
    }

    fn fd_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim;
        let mut out = DMatrix::zeros(n, n);
        let mut xp = x.clone();
        for j in 0..n {
            let h = BRACKET_FD_STEP * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            let fp = self.eval(&xp)?;
            xp[j] = x[j] - h;
            let fm = self.eval(&xp)?;
            xp[j] = x[j];
            out.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        Ok(out)
    }

    /// `self - other`.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        check_dim("field difference", self.dim, other.dim)?;
        let (a, b) = (self.clone(), other.clone());
        let mut out = Self::new(self.dim, format!("{}−{}", self.label, other.label), move |x| Ok(a.eval(x)? - b.eval(x)?));
        if self.jac.is_some() && other.jac.is_some() {
            let (a, b) = (self.clone(), other.clone());
            out = out.with_jacobian(move |x| Ok(a.jacobian(x)? - b.jacobian(x)?));
        }
        Ok(out)
    }

    /// `[self, other]` as a new field; its Jacobian is numerical.
    pub fn bracket(&self, other: &Self) -> Result<Self> {
        check_dim("Lie bracket", self.dim, other.dim)?;
        let (a, b) = (self.clone(), other.clone());
        let label = format!("[{},{}]", self.label, other.label);
        Ok(Self::new(self.dim, label, move |x| lie_bracket(&a, &b, x)))
    }
}

/// `ξ -> S⁻¹ f(S ξ, u)` for `S = diag(scale)`.
///
/// Lie brackets commute with linear changes of coordinates, so every rank in
/// this module is the same for the scaled and the original system in exact
/// arithmetic. Numerically, nondimensional coordinates keep the singular
/// values of physically different entries comparable.
#[derive(Debug, Clone)]
pub struct ScaledModel<M> {
    pub inner: M,
    scale: DVector<f64>,
}

impl<M: DynamicsModel> ScaledModel<M> {
    pub fn new(inner: M, scale: &[f64]) -> Result<Self> {
        check_dim("state scale", inner.state_dim(), scale.len())?;
        if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidArgument("state scale must be positive".into()));
        }
        Ok(Self {
            inner,
            scale: DVector::from_column_slice(scale),
        })
    }

    pub fn to_physical(&self, xi: &DVector<f64>) -> DVector<f64> {
        xi.component_mul(&self.scale)
    }

    pub fn to_scaled(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_div(&self.scale)
    }
}

impl<M: DynamicsModel> DynamicsModel for ScaledModel<M> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }
    fn drift(&self, xi: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        self.inner.drift(&self.to_physical(xi), u, out)?;
        out.component_div_assign(&self.scale);
        Ok(())
    }
    fn jacobian(&self, xi: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        self.inner.jacobian(&self.to_physical(xi), u, out)?;
        let n = self.scale.len();
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] *= self.scale[j] / self.scale[i];
            }
        }
        Ok(())
    }
    fn dispersion(&self, xi: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        self.inner.dispersion(&self.to_physical(xi), u, out)?;
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row /= self.scale[i];
        }
        Ok(())
    }
    fn has_analytic_jacobian(&self) -> bool {
        self.inner.has_analytic_jacobian()
    }
}

/// `[f1, f2](x) = Df2(x) f1(x) − Df1(x) f2(x)`.
pub fn lie_bracket(f1: &VectorFieldHandle, f2: &VectorFieldHandle, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("Lie bracket", f1.dim(), f2.dim())?;
    let v1 = f1.eval(x)?;
    let v2 = f2.eval(x)?;
    Ok(f2.jacobian(x)? * v1 - f1.jacobian(x)? * v2)
}

/// Pairwise differences `f_{u_i} − f_{u_j}` plus right-nested brackets
/// `[f_{i_1}, [f_{i_2}, … [f_{i_{k-1}}, f_{i_k}]]]` for `2 ≤ k ≤ depth`.
///
/// The family at a given depth contains the family at every smaller depth,
/// and adding control samples only appends generators.
pub fn generate_ideal<M: DynamicsModel + 'static>(
    model: Arc<M>,
    control_samples: &[ControlVector],
    depth: usize,
) -> Result<Vec<VectorFieldHandle>> {
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("bracket depth must be at least 2, got {depth}")));
    }
    let base = control_samples
        .iter()
        .enumerate()
        .map(|(i, u)| VectorFieldHandle::from_model(model.clone(), u.clone(), format!("f_u{}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    ideal_from_fields(&base, depth)
}

/// Same as [`generate_ideal`] for an explicit family `F`.
pub fn ideal_from_fields(base: &[VectorFieldHandle], depth: usize) -> Result<Vec<VectorFieldHandle>> {
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("bracket depth must be at least 2, got {depth}")));
    }
    let mut out = Vec::new();
    for j in 0..base.len() {
        for i in 0..j {
            out.push(base[i].difference(&base[j])?);
        }
    }
    let mut layer = Vec::new();
    for j in 0..base.len() {
        for i in 0..j {
            layer.push(base[i].bracket(&base[j])?);
        }
    }
    out.extend(layer.iter().cloned());
    for _ in 3..=depth {
        let mut next = Vec::with_capacity(base.len() * layer.len());
        for inner in &layer {
            for f in base {
                next.push(f.bracket(inner)?);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    Ok(out)
}

/// Result of one lifted rank test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanReport {
    pub point: Vec<f64>,
    pub lifted_dim: usize,
    /// `n + n(n+1)/2`.
    pub target_dim: usize,
    pub generators_used: Vec<String>,
    /// Descending.
    pub singular_values: Vec<f64>,
}

impl SpanReport {
    pub fn is_full(&self) -> bool {
        self.lifted_dim == self.target_dim
    }

    /// Full rank certifies the condition; anything else is inconclusive
    /// because the generator family is truncated.
    pub fn verdict(&self) -> &'static str {
        if self.is_full() {
            "satisfied"
        } else {
            "inconclusive"
        }
    }
}

/// `(h; vech(S))` with `S = Dh + Dhᵀ`, off-diagonal entries scaled by `√2`.
pub fn lifted_vector(h: &VectorFieldHandle, x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.dim();
    let v = h.eval(x)?;
    let d = h.jacobian(x)?;
    let mut out = DVector::zeros(n + n * (n + 1) / 2);
    out.rows_mut(0, n).copy_from(&v);
    let mut k = n;
    for j in 0..n {
        for i in j..n {
            let s = d[(i, j)] + d[(j, i)];
            out[k] = if i == j { s } else { std::f64::consts::SQRT_2 * s };
            k += 1;
        }
    }
    Ok(out)
}

/// Number of singular values above `tol_sv · σ_max`, and the spectrum.
pub fn numerical_rank(columns: &[DVector<f64>], rows: usize, tol_sv: f64) -> Result<(usize, Vec<f64>)> {
    if columns.is_empty() {
        return Err(Error::InvalidArgument("empty generator set".into()));
    }
    if !(tol_sv > 0.0) {
        return Err(Error::InvalidArgument(format!("singular value tolerance must be positive, got {tol_sv}")));
    }
    for c in columns {
        check_dim("generator", rows, c.len())?;
    }
    let m = DMatrix::from_columns(columns);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = if smax > 0.0 {
        sv.iter().filter(|s| **s > tol_sv * smax).count()
    } else {
        0
    };
    Ok((rank, sv))
}

/// Lifted rank of an explicit generator family at `point`.
pub fn lifted_rank_of(fields: &[VectorFieldHandle], point: &StateVector, tol_sv: f64) -> Result<SpanReport> {
    if !point.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rank test point".into()));
    }
    let n = point.dim();
    let target_dim = n + n * (n + 1) / 2;
    let columns = fields
        .par_iter()
        .map(|h| lifted_vector(h, point))
        .collect::<Result<Vec<_>>>()?;
    let (lifted_dim, singular_values) = numerical_rank(&columns, target_dim, tol_sv)?;
    Ok(SpanReport {
        point: point.iter().copied().collect(),
        lifted_dim,
        target_dim,
        generators_used: fields.iter().map(|h| h.label().to_string()).collect(),
        singular_values,
    })
}

/// Lifted rank of the ideal generated by `model` at the given controls.
pub fn lifted_rank<M: DynamicsModel + 'static>(
    model: Arc<M>,
    point: &StateVector,
    control_samples: &[ControlVector],
    depth: usize,
    tol_sv: f64,
) -> Result<SpanReport> {
    check_dim("rank test point", model.state_dim(), point.dim())?;
    let fields = generate_ideal(model, control_samples, depth)?;
    lifted_rank_of(&fields, point, tol_sv)
}

/// Rank of `{h(point) : h ∈ I(F)}` in `Rⁿ`.
pub fn plain_rank_of(fields: &[VectorFieldHandle], point: &StateVector, tol_sv: f64) -> Result<usize> {
    let columns = fields
        .par_iter()
        .map(|h| h.eval(point))
        .collect::<Result<Vec<_>>>()?;
    Ok(numerical_rank(&columns, point.dim(), tol_sv)?.0)
}

pub fn plain_rank<M: DynamicsModel + 'static>(
    model: Arc<M>,
    point: &StateVector,
    control_samples: &[ControlVector],
    depth: usize,
    tol_sv: f64,
) -> Result<usize> {
    check_dim("rank test point", model.state_dim(), point.dim())?;
    let fields = generate_ideal(model, control_samples, depth)?;
    plain_rank_of(&fields, point, tol_sv)
}

/// `n` Latin-hypercube samples in the box `[lo, hi]`: each coordinate hits
/// every one of the `n` strata exactly once.
pub fn latin_hypercube<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: &[f64], hi: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_dim("sampling box", lo.len(), hi.len())?;
    if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::InvalidArgument("sampling box has an empty side".into()));
    }
    let mut out = vec![vec![0.0; lo.len()]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for (d, (l, h)) in lo.iter().zip(hi).enumerate() {
        for i in (1..n).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (row, s) in out.iter_mut().zip(&strata) {
            let t = (*s as f64 + rng.random::<f64>()) / n as f64;
            row[d] = l + t * (h - l);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brockett_fields() -> (VectorFieldHandle, VectorFieldHandle) {
        let f1 = VectorFieldHandle::new(3, "f1", |x| Ok(DVector::from_vec(vec![1.0, 0.0, -x[1]])));
        let f2 = VectorFieldHandle::new(3, "f2", |x| Ok(DVector::from_vec(vec![0.0, 1.0, x[0]])));
        (f1, f2)
    }

    #[test]
    fn brockett_bracket_is_vertical() {
        let (f1, f2) = brockett_fields();
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let b = lie_bracket(&f1, &f2, &x).unwrap();
        assert!((b - DVector::from_vec(vec![0.0, 0.0, 2.0])).amax() < 1e-8);
    }

    #[test]
    fn self_bracket_and_constant_fields_vanish() {
        let (f1, _) = brockett_fields();
        let x = DVector::from_vec(vec![0.7, 0.1, -0.4]);
        assert!(lie_bracket(&f1, &f1, &x).unwrap().amax() < 1e-10);
        let c1 = VectorFieldHandle::constant(DVector::from_vec(vec![1.0, 2.0, 3.0]), "c1");
        let c2 = VectorFieldHandle::constant(DVector::from_vec(vec![0.0, -1.0, 4.0]), "c2");
        assert_eq!(lie_bracket(&c1, &c2, &x).unwrap().amax(), 0.0);
    }

    #[test]
    fn brockett_plain_rank_is_three() {
        let (f1, f2) = brockett_fields();
        let x = StateVector::from(vec![0.2, 0.5, -0.3]);
        let fields = vec![f1.clone(), f2.clone(), f1.bracket(&f2).unwrap()];
        assert_eq!(plain_rank_of(&fields, &x, DEFAULT_TOL_SV).unwrap(), 3);
        assert_eq!(plain_rank_of(&fields[..1], &x, DEFAULT_TOL_SV).unwrap(), 1);
    }

    #[test]
    fn zero_dynamics_have_zero_lifted_rank() {
        let z = VectorFieldHandle::constant(DVector::zeros(2), "0");
        let r = lifted_rank_of(&[z], &StateVector::from(vec![1.0, 2.0]), DEFAULT_TOL_SV).unwrap();
        assert_eq!(r.lifted_dim, 0);
        assert_eq!(r.target_dim, 5);
        assert_eq!(r.verdict(), "inconclusive");
    }

    #[test]
    fn depth_below_two_is_rejected() {
        let (f1, f2) = brockett_fields();
        assert!(ideal_from_fields(&[f1, f2], 1).is_err());
        assert!(numerical_rank(&[], 3, 1e-6).is_err());
    }

    #[test]
    fn single_field_gives_empty_span() {
        let (f1, _) = brockett_fields();
        let ideal = ideal_from_fields(&[f1], 2).unwrap();
        assert!(ideal.is_empty());
    }

    #[test]
    fn lifted_vector_weights_off_diagonal() {
        // h(x) = (x1, 0): Dh + Dhᵀ has a single off-diagonal pair of ones.
        let h = VectorFieldHandle::new(2, "h", |x| Ok(DVector::from_vec(vec![x[1], 0.0])));
        let v = lifted_vector(&h, &DVector::from_vec(vec![0.0, 3.0])).unwrap();
        assert!((v[0] - 3.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-9 && v[4].abs() < 1e-9);
        assert!((v[3] - std::f64::consts::SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn latin_hypercube_hits_every_stratum() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let s = latin_hypercube(&mut rng, 10, &[0.0, -1.0], &[1.0, 1.0]).unwrap();
        for d in 0..2 {
            let (lo, w) = if d == 0 { (0.0, 1.0) } else { (-1.0, 2.0) };
            let mut hit = [false; 10];
            for row in &s {
                hit[((row[d] - lo) / w * 10.0).floor() as usize] = true;
            }
            assert!(hit.iter().all(|h| *h));
        }
    }
}
