//! Numerical check of the exact-linearizability conditions for single-input
//! input-affine systems `ẏ = f(y) + g(y) v`.
//!
//! With `[f, g] = (∂g/∂y) f − (∂f/∂y) g`, `ad⁰g = g` and
//! `adᵏ⁺¹g = [f, adᵏg]`, the system is exactly linearizable around a region
//! when `{ad⁰g, …, adⁿ⁻¹g}` is linearly independent there and
//! `{ad⁰g, …, adⁿ⁻²g}` is involutive. Both conditions are evaluated at
//! sampled points only: a passing report is evidence on the sampled box,
//! not a proof.

mod expr;

pub use expr::{Expr, Func};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::ad::{AdError, Graph, NodeId, Tensor};

/// Printed with every report.
pub const SAMPLED_NOTE: &str =
    "conditions verified at sampled points of the box only; this is numerical evidence, not a proof";

#[derive(Debug, Error)]
pub enum LieError {
    #[error("cannot parse '{expr}': {msg}")]
    Parse { expr: String, msg: String },
    #[error("invalid system: {0}")]
    Invalid(String),
    #[error("unknown built-in system '{0}' (available: chain3, linear3, non-involutive, uncontrollable)")]
    UnknownFixture(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

type FieldFn = dyn Fn(&mut Graph, NodeId) -> Result<NodeId, AdError> + Send + Sync;

/// A vector field `ℝⁿ → ℝⁿ` that can be recorded on a graph.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    kind: FieldKind,
}

#[derive(Clone)]
enum FieldKind {
    Exprs(Vec<Expr>),
    Linear(Tensor),
    Constant(Tensor),
    Custom(Arc<FieldFn>),
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            FieldKind::Exprs(e) => format!("{e:?}"),
            FieldKind::Linear(m) => format!("linear {m:?}"),
            FieldKind::Constant(c) => format!("constant {c:?}"),
            FieldKind::Custom(_) => "custom".to_string(),
        };
        write!(f, "VectorField {{ dim: {}, {kind} }}", self.dim)
    }
}

impl VectorField {
    /// One expression per component, over `y1..y{n}`.
    pub fn parse(components: &[&str]) -> Result<Self, LieError> {
        let n = components.len();
        if n == 0 {
            return Err(LieError::Invalid("a field needs at least one component".into()));
        }
        let exprs = components.iter().map(|s| Expr::parse(s, n)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { dim: n, kind: FieldKind::Exprs(exprs) })
    }

    /// `y ↦ M y`.
    pub fn linear(m: &DMatrix<f64>) -> Result<Self, LieError> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(LieError::Invalid(format!(
                "linear field needs a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        // Stored transposed so that the row vector y maps to y Mᵀ = (M y)ᵀ.
        let mt = Tensor::new(n, n, (0..n * n).map(|k| m[(k % n, k / n)]).collect());
        Ok(Self { dim: n, kind: FieldKind::Linear(mt) })
    }

    /// `y ↦ c`.
    pub fn constant(c: &[f64]) -> Result<Self, LieError> {
        if c.is_empty() {
            return Err(LieError::Invalid("a field needs at least one component".into()));
        }
        Ok(Self { dim: c.len(), kind: FieldKind::Constant(Tensor::row(c)) })
    }

    /// A field given directly as a graph builder mapping a `1 × n` node to a
    /// `1 × n` node.
    pub fn custom<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&mut Graph, NodeId) -> Result<NodeId, AdError> + Send + Sync + 'static,
    {
        Self { dim, kind: FieldKind::Custom(Arc::new(f)) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn record(&self, g: &mut Graph, y: NodeId) -> Result<NodeId, AdError> {
        let out = match &self.kind {
            FieldKind::Exprs(es) => {
                let parts = es.iter().map(|e| e.record(g, y)).collect::<Result<Vec<_>, _>>()?;
                g.concat_cols(&parts)?
            }
            FieldKind::Linear(mt) => {
                let m = g.constant(mt.clone());
                g.matmul(y, m)?
            }
            FieldKind::Constant(c) => g.constant(c.clone()),
            FieldKind::Custom(f) => f(g, y)?,
        };
        if g.shape(out) != [1, self.dim] {
            return Err(AdError::Shape {
                op: "vector_field",
                node: out.index(),
                detail: format!("expected [1, {}], got {:?}", self.dim, g.shape(out)),
            });
        }
        Ok(out)
    }

    pub fn eval(&self, y: &[f64]) -> Result<DVector<f64>, LieError> {
        self.check_point(y)?;
        let mut g = Graph::new();
        let yn = g.input("y", Tensor::row(y));
        let out = self.record(&mut g, yn)?;
        Ok(DVector::from_row_slice(g.value(out).data()))
    }

    fn check_point(&self, y: &[f64]) -> Result<(), LieError> {
        if y.len() != self.dim {
            return Err(LieError::Invalid(format!("point has {} components, field has {}", y.len(), self.dim)));
        }
        Ok(())
    }
}

/// `ẏ = f(y) + g(y) v` with scalar input `v`.
#[derive(Clone, Debug)]
pub struct InputAffineSystem {
    pub name: String,
    pub f: VectorField,
    pub g: VectorField,
}

/// Text form of a system: one expression per component.
///
/// ```toml
/// name = "example"
/// f = ["y2 + y3^2", "y3", "0"]
/// g = ["0", "0", "1"]
///
/// [domain]          # optional sampling box
/// lower = [-1.0, -1.0, -1.0]
/// upper = [1.0, 1.0, 1.0]
/// ```
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    #[serde(default)]
    name: Option<String>,
    f: Vec<String>,
    g: Vec<String>,
    #[serde(default)]
    domain: Option<SampleBox>,
}

impl InputAffineSystem {
    pub fn new(name: &str, f: VectorField, g: VectorField) -> Result<Self, LieError> {
        if f.dim() != g.dim() {
            return Err(LieError::Invalid(format!("f has {} components, g has {}", f.dim(), g.dim())));
        }
        Ok(Self { name: name.to_string(), f, g })
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    /// Parses the TOML text form; returns the system and its optional box.
    pub fn from_toml_str(text: &str) -> Result<(Self, Option<SampleBox>), LieError> {
        let file: SystemFile = toml::from_str(text).map_err(|e| LieError::Invalid(e.to_string()))?;
        if file.f.len() != file.g.len() {
            return Err(LieError::Invalid(format!("f has {} components, g has {}", file.f.len(), file.g.len())));
        }
        let f: Vec<&str> = file.f.iter().map(String::as_str).collect();
        let g: Vec<&str> = file.g.iter().map(String::as_str).collect();
        let sys =
            Self::new(file.name.as_deref().unwrap_or("custom"), VectorField::parse(&f)?, VectorField::parse(&g)?)?;
        if let Some(b) = &file.domain {
            b.validate(sys.dim())?;
        }
        Ok((sys, file.domain))
    }

    /// Built-in systems:
    /// - `chain3`: triple integrator, `f = (y2, y3, 0)`, `g = (0, 0, 1)`;
    /// - `linear3`: controllable companion form with constant `g = e3`;
    /// - `non-involutive`: `f = (y2 + y3², y3, 0)`, `g = (0, 0, 1)`, full rank
    ///   but `[g, [f, g]] = (−2, 0, 0)` leaves `span{g, [f, g]}`;
    /// - `uncontrollable`: `f = −y`, `g = (1, 1, 1)`, every bracket parallel to `g`.
    pub fn fixture(name: &str) -> Result<Self, LieError> {
        let (f, g): (Vec<&str>, Vec<&str>) = match name {
            "chain3" => (vec!["y2", "y3", "0"], vec!["0", "0", "1"]),
            "linear3" => (vec!["y2", "y3", "-y1 - 2*y2 - 3*y3"], vec!["0", "0", "1"]),
            "non-involutive" => (vec!["y2 + y3^2", "y3", "0"], vec!["0", "0", "1"]),
            "uncontrollable" => (vec!["-y1", "-y2", "-y3"], vec!["1", "1", "1"]),
            other => return Err(LieError::UnknownFixture(other.to_string())),
        };
        Self::new(name, VectorField::parse(&f)?, VectorField::parse(&g)?)
    }

    pub const FIXTURES: [&'static str; 4] = ["chain3", "linear3", "non-involutive", "uncontrollable"];
}

/// Axis-aligned sampling box.
#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SampleBox {
    /// `[−r, r]ⁿ`.
    pub fn symmetric(n: usize, r: f64) -> Self {
        Self { lower: vec![-r; n], upper: vec![r; n] }
    }

    pub fn validate(&self, n: usize) -> Result<(), LieError> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LieError::Invalid(format!(
                "box has {}/{} bounds for a {n}-dimensional system",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(LieError::Invalid(format!("box bound {i} is not a finite interval: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| if lo == hi { lo } else { rng.gen_range(lo..=hi) })
            .collect()
    }
}

/// `(J v)ᵀ` from the Jacobian rows of a field and a `1 × n` node `v`.
fn jvp(g: &mut Graph, rows: &[NodeId], v: NodeId) -> Result<NodeId, AdError> {
    let parts = rows
        .iter()
        .map(|&r| {
            let p = g.mul(r, v)?;
            g.sum(p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    g.concat_cols(&parts)
}

/// `[a, b] = J_b a − J_a b` as a differentiable node.
fn bracket_node(g: &mut Graph, a: NodeId, ja: &[NodeId], b: NodeId, jb: &[NodeId]) -> Result<NodeId, AdError> {
    let t1 = jvp(g, jb, a)?;
    let t2 = jvp(g, ja, b)?;
    g.sub(t1, t2)
}

/// Nested brackets `ad⁰g … adᵏg` recorded on one graph, together with the
/// Jacobian rows of `ad⁰g … adᵏ⁻¹g`.
struct Tower {
    graph: Graph,
    ads: Vec<NodeId>,
    jacs: Vec<Vec<NodeId>>,
}

fn tower(sys_f: &VectorField, sys_g: &VectorField, k: usize, y: &[f64]) -> Result<Tower, LieError> {
    sys_f.check_point(y)?;
    sys_g.check_point(y)?;
    let mut graph = Graph::new();
    let yn = graph.variable("y", Tensor::row(y));
    let f = sys_f.record(&mut graph, yn)?;
    let jf = graph.jacobian_rows(f, yn)?;
    let mut ads = vec![sys_g.record(&mut graph, yn)?];
    let mut jacs = Vec::with_capacity(k);
    for level in 0..k {
        let a = ads[level];
        let ja = graph.jacobian_rows(a, yn)?;
        ads.push(bracket_node(&mut graph, f, &jf, a, &ja)?);
        jacs.push(ja);
    }
    Ok(Tower { graph, ads, jacs })
}

fn row_vector(g: &Graph, id: NodeId) -> Result<DVector<f64>, LieError> {
    let v = DVector::from_row_slice(g.value(id).data());
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(AdError::NonFinite { op: "lie_bracket", node: id.index() }.into())
    }
}

fn jacobian_matrix(g: &Graph, rows: &[NodeId]) -> Result<DMatrix<f64>, LieError> {
    let n = rows.len();
    let mut j = DMatrix::zeros(n, n);
    for (i, &r) in rows.iter().enumerate() {
        j.set_row(i, &row_vector(g, r)?.transpose());
    }
    Ok(j)
}

/// `[f, g](y) = (∂g/∂y) f(y) − (∂f/∂y) g(y)`.
pub fn lie_bracket(f: &VectorField, g: &VectorField, y: &[f64]) -> Result<DVector<f64>, LieError> {
    if f.dim() != g.dim() {
        return Err(LieError::Invalid(format!("f has {} components, g has {}", f.dim(), g.dim())));
    }
    f.check_point(y)?;
    let mut graph = Graph::new();
    let yn = graph.variable("y", Tensor::row(y));
    let fv = f.record(&mut graph, yn)?;
    let gv = g.record(&mut graph, yn)?;
    let jf = graph.jacobian_rows(fv, yn)?;
    let jg = graph.jacobian_rows(gv, yn)?;
    let b = bracket_node(&mut graph, fv, &jf, gv, &jg)?;
    row_vector(&graph, b)
}

/// `adᵏ_f g (y)`, with `ad⁰_f g = g` and `adᵏ⁺¹_f g = [f, adᵏ_f g]`; the
/// intermediate brackets stay differentiable so each level is exact.
pub fn ad_power(f: &VectorField, g: &VectorField, k: usize, y: &[f64]) -> Result<DVector<f64>, LieError> {
    if f.dim() != g.dim() {
        return Err(LieError::Invalid(format!("f has {} components, g has {}", f.dim(), g.dim())));
    }
    let t = tower(f, g, k, y)?;
    row_vector(&t.graph, t.ads[k])
}

#[derive(Clone, Debug, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckOptions {
    pub samples: usize,
    /// Rank test: `σ_min > rank_tol · σ_max`.
    pub rank_tol: f64,
    /// Involutivity test: relative residual `< involutivity_tol`.
    pub involutivity_tol: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { samples: 100, rank_tol: 1e-6, involutivity_tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    FailRank,
    FailInvolutive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::FailRank => "fail-rank",
            Verdict::FailInvolutive => "fail-involutive",
        })
    }
}

/// Involutivity residual of `[adⁱg, adʲg]` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketResidual {
    pub i: usize,
    pub j: usize,
    /// Distance of the bracket from `span{ad⁰g … adⁿ⁻²g}`, relative to the
    /// magnitude of the two terms forming the bracket.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub y: Vec<f64>,
    /// Singular values of `[ad⁰g … adⁿ⁻¹g]`, descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub involutivity: Vec<BracketResidual>,
}

impl SampleReport {
    /// `σ_min / σ_max` (0 when every bracket vanishes).
    pub fn sigma_ratio(&self) -> f64 {
        let max = self.singular_values.first().copied().unwrap_or(0.0);
        let min = self.singular_values.last().copied().unwrap_or(0.0);
        if max > 0.0 {
            min / max
        } else {
            0.0
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.involutivity.iter().map(|r| r.residual).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub system: String,
    pub dim: usize,
    pub domain: SampleBox,
    pub options: CheckOptions,
    pub samples: Vec<SampleReport>,
    pub verdict: Verdict,
}

impl CheckReport {
    /// Re-evaluates the stored measurements at other tolerances.
    pub fn verdict_with(&self, rank_tol: f64, involutivity_tol: f64) -> Verdict {
        if self.samples.iter().any(|s| !(s.sigma_ratio() > rank_tol)) {
            Verdict::FailRank
        } else if self.samples.iter().any(|s| !(s.max_residual() < involutivity_tol)) {
            Verdict::FailInvolutive
        } else {
            Verdict::Pass
        }
    }

    pub fn worst_sigma_ratio(&self) -> f64 {
        self.samples.iter().map(SampleReport::sigma_ratio).fold(f64::INFINITY, f64::min)
    }

    pub fn worst_residual(&self) -> f64 {
        self.samples.iter().map(SampleReport::max_residual).fold(0.0, f64::max)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "system: {} (n = {})", self.system, self.dim)?;
        writeln!(f, "samples: {} (seed {})", self.samples.len(), self.options.seed)?;
        writeln!(
            f,
            "rank: min sigma_min/sigma_max = {:.3e} (threshold {:.1e})",
            self.worst_sigma_ratio(),
            self.options.rank_tol
        )?;
        writeln!(
            f,
            "involutivity: max relative residual = {:.3e} (threshold {:.1e})",
            self.worst_residual(),
            self.options.involutivity_tol
        )?;
        writeln!(f, "verdict: {}", self.verdict)?;
        write!(f, "note: {SAMPLED_NOTE}")
    }
}

/// Evaluates both conditions at `opts.samples` uniform points of `domain`.
pub fn check_linearizable(
    sys: &InputAffineSystem,
    domain: &SampleBox,
    opts: &CheckOptions,
) -> Result<CheckReport, LieError> {
    let n = sys.dim();
    domain.validate(n)?;
    if opts.samples == 0 {
        return Err(LieError::Invalid("at least one sample is required".into()));
    }
    if !(opts.rank_tol >= 0.0 && opts.involutivity_tol >= 0.0) {
        return Err(LieError::Invalid("tolerances must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let points: Vec<Vec<f64>> = (0..opts.samples).map(|_| domain.sample(&mut rng)).collect();
    let samples = points.into_iter().map(|y| check_point(sys, y, opts.rank_tol)).collect::<Result<Vec<_>, _>>()?;
    let mut report = CheckReport {
        system: sys.name.clone(),
        dim: n,
        domain: domain.clone(),
        options: opts.clone(),
        samples,
        verdict: Verdict::Pass,
    };
    report.verdict = report.verdict_with(opts.rank_tol, opts.involutivity_tol);
    Ok(report)
}

fn check_point(sys: &InputAffineSystem, y: Vec<f64>, rank_tol: f64) -> Result<SampleReport, LieError> {
    let n = sys.dim();
    let t = tower(&sys.f, &sys.g, n - 1, &y)?;
    let cols = t.ads.iter().map(|&a| row_vector(&t.graph, a)).collect::<Result<Vec<_>, _>>()?;
    let d = DMatrix::from_columns(&cols);
    let mut sv: Vec<f64> = d.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| smax > 0.0 && s > rank_tol * smax).count();

    let mut involutivity = Vec::new();
    if n >= 2 {
        let k = n - 1;
        let basis = orthonormal_basis(&DMatrix::from_columns(&cols[..k]), rank_tol);
        let jacs = t.jacs[..k].iter().map(|r| jacobian_matrix(&t.graph, r)).collect::<Result<Vec<_>, _>>()?;
        for i in 0..k {
            for j in i + 1..k {
                let b = &jacs[j] * &cols[i] - &jacs[i] * &cols[j];
                let scale = jacs[j].norm() * cols[i].norm() + jacs[i].norm() * cols[j].norm();
                let off = &b - &basis * (basis.transpose() * &b);
                let residual = if scale > 0.0 { off.norm() / scale } else { 0.0 };
                involutivity.push(BracketResidual { i, j, residual });
            }
        }
    }
    Ok(SampleReport { y, singular_values: sv, rank, involutivity })
}

/// Left singular vectors of `d` whose singular values exceed `tol · σ_max`.
fn orthonormal_basis(d: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let svd = d.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&i| smax > 0.0 && svd.singular_values[i] > tol * smax).collect();
    DMatrix::from_fn(d.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

#[cfg(test)]
mod tests;
