//! Adapter modules (LoRA and Kronecker) and checkpoints that group them by
//! attachment site.
//!
//! Orientation conventions used everywhere, including on disk:
//!
//! * LoRA: `up` is `(out × rank)`, `down` is `(rank × in)`, delta = `up · down`
//!   with no extra scaling.
//! * Kronecker: `a` is `(m × n)`, `b` is `(k/m × d/n)`, delta = `a ⊗ b`.
//! * Dense: a materialized delta, produced by delta-space composition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

/// Standard deviation of the randomly initialized factor of a fresh adapter.
pub const INIT_STDDEV: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixRole {
    Key,
    Query,
    Value,
    Projection,
}

impl MatrixRole {
    pub const ALL: [MatrixRole; 4] = [
        MatrixRole::Key,
        MatrixRole::Query,
        MatrixRole::Value,
        MatrixRole::Projection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixRole::Key => "key",
            MatrixRole::Query => "query",
            MatrixRole::Value => "value",
            MatrixRole::Projection => "projection",
        }
    }
}

impl FromStr for MatrixRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" => Ok(MatrixRole::Key),
            "query" => Ok(MatrixRole::Query),
            "value" => Ok(MatrixRole::Value),
            "projection" => Ok(MatrixRole::Projection),
            other => Err(Error::Parse(format!("unknown matrix role {other:?}"))),
        }
    }
}

/// An attachment site: one attention matrix of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub layer: usize,
    pub role: MatrixRole,
}

impl SiteId {
    pub fn new(layer: usize, role: MatrixRole) -> Self {
        Self { layer, role }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.role.as_str())
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed site id {s:?}"));
        let (layer, role) = s.split_once('.').ok_or_else(bad)?;
        let layer = layer
            .strip_prefix("layer")
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad)?;
        Ok(SiteId::new(layer, role.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    down: Matrix,
    up: Matrix,
}

impl LoraModule {
    pub fn new(down: Matrix, up: Matrix) -> Result<Self> {
        if down.rows() != up.cols() {
            return Err(Error::ShapeMismatch {
                op: "lora rank (down.rows vs up.cols)",
                left: down.shape(),
                right: up.shape(),
            });
        }
        Ok(Self { down, up })
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerModule {
    a: Matrix,
    b: Matrix,
}

impl KroneckerModule {
    pub fn new(a: Matrix, b: Matrix) -> Self {
        Self { a, b }
    }

    /// Builds the factor shapes for a `(k × d)` weight split into `(m, n)` blocks.
    pub fn factor_shapes(k: usize, d: usize, m: usize, n: usize) -> Result<((usize, usize), (usize, usize))> {
        if m == 0 || n == 0 || k % m != 0 || d % n != 0 {
            return Err(Error::InvalidArgument(format!(
                "kronecker blocks (m, n)=({m}, {n}) do not divide weight {k}x{d}"
            )));
        }
        Ok(((m, n), (k / m, d / n)))
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Lora,
    Kronecker,
    Dense,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Kronecker => "kronecker",
            AdapterKind::Dense => "dense",
        }
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "kronecker" => Ok(AdapterKind::Kronecker),
            "dense" => Ok(AdapterKind::Dense),
            other => Err(Error::Parse(format!("unknown adapter kind {other:?}"))),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterModule {
    Lora(LoraModule),
    Kronecker(KroneckerModule),
    Dense(Matrix),
}

impl AdapterModule {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterModule::Lora(_) => AdapterKind::Lora,
            AdapterModule::Kronecker(_) => AdapterKind::Kronecker,
            AdapterModule::Dense(_) => AdapterKind::Dense,
        }
    }

    /// Trainable factors in storage order: (down, up), (a, b) or (delta).
    pub fn factors(&self) -> Vec<&Matrix> {
        match self {
            AdapterModule::Lora(m) => vec![&m.down, &m.up],
            AdapterModule::Kronecker(m) => vec![&m.a, &m.b],
            AdapterModule::Dense(d) => vec![d],
        }
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AdapterModule::Lora(m) => vec![&mut m.down, &mut m.up],
            AdapterModule::Kronecker(m) => vec![&mut m.a, &mut m.b],
            AdapterModule::Dense(d) => vec![d],
        }
    }

    pub fn factor_shapes(&self) -> Vec<(usize, usize)> {
        self.factors().iter().map(|m| m.shape()).collect()
    }

    /// Rebuilds a module of `kind` from factors in storage order.
    pub fn from_factors(kind: AdapterKind, mut factors: Vec<Matrix>) -> Result<Self> {
        let expected = match kind {
            AdapterKind::Dense => 1,
            _ => 2,
        };
        if factors.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{kind} module needs {expected} factors, got {}",
                factors.len()
            )));
        }
        Ok(match kind {
            AdapterKind::Dense => AdapterModule::Dense(factors.pop().expect("one factor")),
            AdapterKind::Lora => {
                let up = factors.pop().expect("two factors");
                let down = factors.pop().expect("two factors");
                AdapterModule::Lora(LoraModule::new(down, up)?)
            }
            AdapterKind::Kronecker => {
                let b = factors.pop().expect("two factors");
                let a = factors.pop().expect("two factors");
                AdapterModule::Kronecker(KroneckerModule::new(a, b))
            }
        })
    }

    pub fn delta_shape(&self) -> (usize, usize) {
        match self {
            AdapterModule::Lora(m) => (m.up.rows(), m.down.cols()),
            AdapterModule::Kronecker(m) => (m.a.rows() * m.b.rows(), m.a.cols() * m.b.cols()),
            AdapterModule::Dense(d) => d.shape(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.factors().iter().map(|m| m.len()).sum()
    }

    pub fn materialize_delta(&self) -> Result<Matrix> {
        match self {
            AdapterModule::Lora(m) => m.up.matmul(&m.down),
            AdapterModule::Kronecker(m) => m.a.kronecker(&m.b),
            AdapterModule::Dense(d) => Ok(d.clone()),
        }
    }

    pub fn apply_to_weights(&self, base: &Matrix) -> Result<Matrix> {
        let delta = self.materialize_delta()?;
        if delta.shape() != base.shape() {
            return Err(Error::ShapeMismatch {
                op: "apply_to_weights (base vs delta)",
                left: base.shape(),
                right: delta.shape(),
            });
        }
        base.add(&delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Task,
    Lm,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Task => "task",
            Objective::Lm => "lm",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(Objective::Task),
            "lm" => Ok(Objective::Lm),
            other => Err(Error::Parse(format!("unknown objective {other:?}"))),
        }
    }
}

/// One operand of a composition, identified by its role in the recipe and
/// its payload fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct OperandRef {
    pub role: String,
    pub fingerprint: String,
}

/// How a composed checkpoint was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub mode: String,
    pub lambda: Option<f64>,
    pub space: String,
    pub operands: Vec<OperandRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub language_tag: String,
    pub objective: Objective,
    pub base_model_fingerprint: String,
    pub training_steps: u64,
    pub provenance: Option<Provenance>,
}

impl CheckpointMeta {
    pub fn new(language_tag: impl Into<String>, objective: Objective, base_model_fingerprint: impl Into<String>) -> Self {
        Self {
            language_tag: language_tag.into(),
            objective,
            base_model_fingerprint: base_model_fingerprint.into(),
            training_steps: 0,
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    kind: AdapterKind,
    modules: BTreeMap<SiteId, AdapterModule>,
    pub meta: CheckpointMeta,
}

/// Outcome of [`checkpoint_compatible`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compatibility {
    pub diagnostics: Vec<String>,
}

impl Compatibility {
    pub fn is_compatible(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_compatible() {
            Ok(())
        } else {
            Err(Error::Incompatible(self.diagnostics))
        }
    }
}

impl AdapterCheckpoint {
    /// Validates that every module has `kind` and that modules sharing a
    /// matrix role share factor shapes.
    pub fn new(kind: AdapterKind, modules: BTreeMap<SiteId, AdapterModule>, meta: CheckpointMeta) -> Result<Self> {
        let mut role_shapes: BTreeMap<MatrixRole, Vec<(usize, usize)>> = BTreeMap::new();
        for (site, module) in &modules {
            if module.kind() != kind {
                return Err(Error::Consistency(format!(
                    "site {site} holds a {} module in a {kind} checkpoint",
                    module.kind()
                )));
            }
            let shapes = module.factor_shapes();
            match role_shapes.get(&site.role) {
                Some(prev) if *prev != shapes => {
                    return Err(Error::Consistency(format!(
                        "site {site} has factor shapes {shapes:?}, other {} sites have {prev:?}",
                        site.role.as_str()
                    )))
                }
                Some(_) => {}
                None => {
                    role_shapes.insert(site.role, shapes);
                }
            }
        }
        Ok(Self { kind, modules, meta })
    }

    /// A fresh LoRA adapter that is an exact no-op: `up` is zero and `down`
    /// is seeded-normal with [`INIT_STDDEV`].
    pub fn init_lora(sites: &[(SiteId, (usize, usize))], rank: usize, seed: u64, meta: CheckpointMeta) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("lora rank must be positive".into()));
        }
        let mut modules = BTreeMap::new();
        for (i, &(site, (out_dim, in_dim))) in sites.iter().enumerate() {
            let down = Matrix::seeded_normal(rank, in_dim, site_seed(seed, i), INIT_STDDEV);
            let up = Matrix::zeros(out_dim, rank);
            modules.insert(site, AdapterModule::Lora(LoraModule::new(down, up)?));
        }
        Self::new(AdapterKind::Lora, modules, meta)
    }

    /// A fresh Kronecker adapter: `a` is zero, `b` seeded-normal.
    pub fn init_kronecker(sites: &[(SiteId, (usize, usize))], m: usize, n: usize, seed: u64, meta: CheckpointMeta) -> Result<Self> {
        let mut modules = BTreeMap::new();
        for (i, &(site, (k, d))) in sites.iter().enumerate() {
            let ((am, an), (br, bc)) = KroneckerModule::factor_shapes(k, d, m, n)?;
            let a = Matrix::zeros(am, an);
            let b = Matrix::seeded_normal(br, bc, site_seed(seed, i), INIT_STDDEV);
            modules.insert(site, AdapterModule::Kronecker(KroneckerModule::new(a, b)));
        }
        Self::new(AdapterKind::Kronecker, modules, meta)
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn modules(&self) -> &BTreeMap<SiteId, AdapterModule> {
        &self.modules
    }

    pub fn module(&self, site: &SiteId) -> Option<&AdapterModule> {
        self.modules.get(site)
    }

    pub(crate) fn modules_mut(&mut self) -> impl Iterator<Item = (&SiteId, &mut AdapterModule)> {
        self.modules.iter_mut()
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteId> {
        self.modules.keys()
    }

    pub fn parameter_count(&self) -> usize {
        self.modules.values().map(AdapterModule::parameter_count).sum()
    }

    /// Factor entries in storage order, used for flat parameter views.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.modules
            .values()
            .flat_map(|m| m.factors().into_iter().flat_map(|f| f.data().iter().copied()))
            .collect()
    }

    /// Same module contents; metadata is ignored.
    pub fn same_payload(&self, other: &AdapterCheckpoint) -> bool {
        self.kind == other.kind
            && self.modules.len() == other.modules.len()
            && self.modules.iter().zip(&other.modules).all(|((sa, ma), (sb, mb))| {
                sa == sb
                    && ma.factors().iter().zip(mb.factors()).all(|(fa, fb)| {
                        fa.shape() == fb.shape()
                            && fa.data().iter().zip(fb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                    })
            })
    }
}

fn site_seed(seed: u64, index: usize) -> u64 {
    SplitMix64::derive(seed, 0xADA0 + index as u64).next_u64()
}

pub fn checkpoint_compatible(a: &AdapterCheckpoint, b: &AdapterCheckpoint) -> Compatibility {
    let mut diagnostics = Vec::new();
    if a.kind != b.kind {
        diagnostics.push(format!("kind mismatch: {} vs {}", a.kind, b.kind));
    }
    if a.meta.base_model_fingerprint != b.meta.base_model_fingerprint {
        diagnostics.push(format!(
            "base model fingerprint mismatch: {} vs {}",
            a.meta.base_model_fingerprint, b.meta.base_model_fingerprint
        ));
    }
    let sa: BTreeSet<_> = a.modules.keys().collect();
    let sb: BTreeSet<_> = b.modules.keys().collect();
    for site in sa.difference(&sb) {
        diagnostics.push(format!("site {site} missing from second checkpoint"));
    }
    for site in sb.difference(&sa) {
        diagnostics.push(format!("site {site} missing from first checkpoint"));
    }
    for site in sa.intersection(&sb) {
        let (ma, mb) = (&a.modules[*site], &b.modules[*site]);
        let (fa, fb) = (ma.factor_shapes(), mb.factor_shapes());
        if fa != fb {
            diagnostics.push(format!("shape mismatch at {site}: {fa:?} vs {fb:?}"));
        }
    }
    Compatibility { diagnostics }
}

/// Checks all operands pairwise against the first one.
pub fn all_compatible(operands: &[&AdapterCheckpoint]) -> Result<()> {
    let Some((first, rest)) = operands.split_first() else {
        return Err(Error::InvalidArgument("no operands".into()));
    };
    let diagnostics: Vec<String> = rest
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            checkpoint_compatible(first, c)
                .diagnostics
                .into_iter()
                .map(move |d| format!("operand {}: {d}", i + 1))
        })
        .collect();
    Compatibility { diagnostics }.into_result()
}
