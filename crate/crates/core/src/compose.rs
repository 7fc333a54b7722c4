//! Language and task arithmetic over adapter checkpoints.
//!
//! Five recipes, all element-wise:
//!
//! | mode                            | result                                   |
//! |---------------------------------|------------------------------------------|
//! | `lang_task_add`                 | `λ·task_S + (1−λ)·lm_T`                  |
//! | `lang_task_add_subtract`        | `λ·task_S + (1−λ)·(lm_T − lm_S)`         |
//! | `task_add_all` / `task_add_related` | `mean(task_S1 … task_SL)`            |
//! | `lang_task_add_subtract_related`| `λ·mean(tasks) + (1−λ)·(lm_T − mean(lm_S))` |
//!
//! Arithmetic runs either on the stored factors (`factor` space, default) or
//! on the materialized weight deltas (`delta` space, producing a dense
//! checkpoint). For LoRA the two differ because the delta is a product.
//!
//! Convex combinations are exact at the endpoints and wherever both
//! operands hold the same value; averages sum operands in fingerprint order,
//! so the result does not depend on argument order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::adapter::{
    all_compatible, AdapterCheckpoint, AdapterKind, AdapterModule, CheckpointMeta, Objective, OperandRef,
    Provenance, SiteId,
};
use crate::ckpt::checkpoint_fingerprint;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Space {
    #[default]
    Factor,
    Delta,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Factor => "factor",
            Space::Delta => "delta",
        }
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factor" => Ok(Space::Factor),
            "delta" => Ok(Space::Delta),
            other => Err(Error::Parse(format!("unknown arithmetic space {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    LangTaskAdd,
    LangTaskAddSubtract,
    TaskAddAll,
    TaskAddRelated,
    LangTaskAddSubtractRelated,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::LangTaskAdd,
        Mode::LangTaskAddSubtract,
        Mode::TaskAddAll,
        Mode::TaskAddRelated,
        Mode::LangTaskAddSubtractRelated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LangTaskAdd => "lang_task_add",
            Mode::LangTaskAddSubtract => "lang_task_add_subtract",
            Mode::TaskAddAll => "task_add_all",
            Mode::TaskAddRelated => "task_add_related",
            Mode::LangTaskAddSubtractRelated => "lang_task_add_subtract_related",
        }
    }

    /// Whether the recipe is weighted by λ. Plain task averages are not.
    pub fn takes_lambda(self) -> bool {
        !matches!(self, Mode::TaskAddAll | Mode::TaskAddRelated)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown composition mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recipe {
    pub mode: Mode,
    pub lambda: Option<f64>,
    pub space: Space,
}

impl Recipe {
    pub fn new(mode: Mode, lambda: Option<f64>, space: Space) -> Result<Self> {
        match (mode.takes_lambda(), lambda) {
            (true, Some(l)) => check_lambda(l)?,
            (true, None) => return Err(Error::InvalidArgument(format!("{mode} requires a lambda"))),
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(format!("{mode} is an unweighted mean and takes no lambda")))
            }
            (false, None) => {}
        }
        Ok(Self { mode, lambda, space })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.mode, Some(lambda), self.space)
    }

    pub fn apply(&self, ops: &Operands<'_>) -> Result<AdapterCheckpoint> {
        let lambda = self.lambda.unwrap_or(f64::NAN);
        match self.mode {
            Mode::LangTaskAdd => compose_add(ops.single_task()?, ops.lm_target()?, lambda, self.space),
            Mode::LangTaskAddSubtract => {
                compose_add_subtract(ops.single_task()?, ops.lm_target()?, ops.single_lm_source()?, lambda, self.space)
            }
            Mode::TaskAddAll | Mode::TaskAddRelated => {
                let mut out = compose_task_average(&ops.tasks, self.space)?;
                if let Some(p) = out.meta.provenance.as_mut() {
                    p.mode = self.mode.as_str().to_string();
                }
                Ok(out)
            }
            Mode::LangTaskAddSubtractRelated => {
                compose_add_subtract_related(&ops.tasks, &ops.lm_sources, ops.lm_target()?, lambda, self.space)
            }
        }
    }
}

/// Named operand slots of a recipe.
#[derive(Debug, Clone, Default)]
pub struct Operands<'a> {
    pub tasks: Vec<&'a AdapterCheckpoint>,
    pub lm_target: Option<&'a AdapterCheckpoint>,
    pub lm_sources: Vec<&'a AdapterCheckpoint>,
}

impl<'a> Operands<'a> {
    fn single_task(&self) -> Result<&'a AdapterCheckpoint> {
        match self.tasks.as_slice() {
            [t] => Ok(t),
            other => Err(Error::InvalidArgument(format!("recipe needs exactly one task operand, got {}", other.len()))),
        }
    }

    fn single_lm_source(&self) -> Result<&'a AdapterCheckpoint> {
        match self.lm_sources.as_slice() {
            [s] => Ok(s),
            other => Err(Error::InvalidArgument(format!(
                "recipe needs exactly one source language operand, got {}",
                other.len()
            ))),
        }
    }

    fn lm_target(&self) -> Result<&'a AdapterCheckpoint> {
        self.lm_target
            .ok_or_else(|| Error::InvalidArgument("recipe needs a target language operand".into()))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Per-site tensors the arithmetic runs on: factors, or one materialized delta.
struct Lifted {
    kind: AdapterKind,
    sites: BTreeMap<SiteId, Vec<Matrix>>,
}

impl Lifted {
    fn new(ckpt: &AdapterCheckpoint, space: Space) -> Result<Self> {
        let (kind, sites) = match space {
            Space::Factor => (
                ckpt.kind(),
                ckpt.modules()
                    .iter()
                    .map(|(s, m)| (*s, m.factors().into_iter().cloned().collect()))
                    .collect(),
            ),
            Space::Delta => (
                AdapterKind::Dense,
                ckpt.modules()
                    .iter()
                    .map(|(s, m)| Ok((*s, vec![m.materialize_delta()?])))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self { kind, sites })
    }

    fn zip_with(&self, other: &Lifted, f: impl Fn(f64, f64) -> f64) -> Lifted {
        let sites = self
            .sites
            .iter()
            .map(|(site, factors)| {
                let rhs = &other.sites[site];
                let combined = factors
                    .iter()
                    .zip(rhs)
                    .map(|(a, b)| {
                        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                        Matrix::from_vec(a.rows(), a.cols(), data).expect("compatible shapes")
                    })
                    .collect();
                (*site, combined)
            })
            .collect();
        Lifted { kind: self.kind, sites }
    }

    /// `λ·self + (1−λ)·other`, exact at λ ∈ {0, 1} and where entries agree.
    fn lerp(&self, other: &Lifted, lambda: f64) -> Lifted {
        let mu = 1.0 - lambda;
        self.zip_with(other, |a, b| {
            if lambda == 1.0 || a == b {
                a
            } else if lambda == 0.0 {
                b
            } else {
                lambda * a + mu * b
            }
        })
    }

    fn minus(&self, other: &Lifted) -> Lifted {
        self.zip_with(other, |a, b| a - b)
    }

    /// Uniform mean, summing in the given order; a single operand is returned as is.
    fn mean(items: &[Lifted]) -> Lifted {
        let (first, rest) = items.split_first().expect("nonempty");
        if rest.is_empty() {
            return Lifted {
                kind: first.kind,
                sites: first.sites.clone(),
            };
        }
        let n = items.len() as f64;
        let sites = first
            .sites
            .iter()
            .map(|(site, factors)| {
                let combined = factors
                    .iter()
                    .enumerate()
                    .map(|(fi, f0)| {
                        let data = (0..f0.len())
                            .map(|i| {
                                let v0 = f0.data()[i];
                                let others = rest.iter().map(|l| l.sites[site][fi].data()[i]);
                                if others.clone().all(|v| v == v0) {
                                    v0
                                } else {
                                    (v0 + others.sum::<f64>()) / n
                                }
                            })
                            .collect();
                        Matrix::from_vec(f0.rows(), f0.cols(), data).expect("same shape")
                    })
                    .collect();
                (*site, combined)
            })
            .collect();
        Lifted { kind: first.kind, sites }
    }

    fn into_checkpoint(self, meta: CheckpointMeta) -> Result<AdapterCheckpoint> {
        let modules = self
            .sites
            .into_iter()
            .map(|(site, factors)| {
                if factors.iter().any(|f| !f.is_finite()) {
                    return Err(Error::NonFinite(format!("composition overflowed at {site}")));
                }
                Ok((site, AdapterModule::from_factors(self.kind, factors)?))
            })
            .collect::<Result<_>>()?;
        AdapterCheckpoint::new(self.kind, modules, meta)
    }
}

fn operand_refs(role: &str, ckpts: &[&AdapterCheckpoint]) -> Result<Vec<OperandRef>> {
    ckpts
        .iter()
        .map(|c| {
            Ok(OperandRef {
                role: role.to_string(),
                fingerprint: checkpoint_fingerprint(c)?,
            })
        })
        .collect()
}

fn composed_meta(
    mode: Mode,
    lambda: Option<f64>,
    space: Space,
    language_tag: String,
    like: &AdapterCheckpoint,
    operands: Vec<OperandRef>,
) -> CheckpointMeta {
    let mut meta = CheckpointMeta::new(language_tag, Objective::Task, like.meta.base_model_fingerprint.clone());
    meta.provenance = Some(Provenance {
        mode: mode.as_str().to_string(),
        lambda,
        space: space.as_str().to_string(),
        operands,
    });
    meta
}

/// Sorts operands by payload fingerprint so sums are order independent.
fn sorted_by_fingerprint<'a>(ckpts: &[&'a AdapterCheckpoint]) -> Result<Vec<&'a AdapterCheckpoint>> {
    let mut keyed = ckpts
        .iter()
        .map(|c| Ok((checkpoint_fingerprint(c)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, c)| c).collect())
}

fn average_lifted(ckpts: &[&AdapterCheckpoint], space: Space) -> Result<Lifted> {
    let lifted = sorted_by_fingerprint(ckpts)?
        .into_iter()
        .map(|c| Lifted::new(c, space))
        .collect::<Result<Vec<_>>>()?;
    Ok(Lifted::mean(&lifted))
}

/// `λ·task_s + (1−λ)·lm_t`.
pub fn compose_add(task_s: &AdapterCheckpoint, lm_t: &AdapterCheckpoint, lambda: f64, space: Space) -> Result<AdapterCheckpoint> {
    check_lambda(lambda)?;
    all_compatible(&[task_s, lm_t])?;
    let out = Lifted::new(task_s, space)?.lerp(&Lifted::new(lm_t, space)?, lambda);
    let mut operands = operand_refs("task", &[task_s])?;
    operands.extend(operand_refs("lm_target", &[lm_t])?);
    let meta = composed_meta(Mode::LangTaskAdd, Some(lambda), space, lm_t.meta.language_tag.clone(), task_s, operands);
    out.into_checkpoint(meta)
}

/// `λ·task_s + (1−λ)·(lm_t − lm_s)`.
pub fn compose_add_subtract(
    task_s: &AdapterCheckpoint,
    lm_t: &AdapterCheckpoint,
    lm_s: &AdapterCheckpoint,
    lambda: f64,
    space: Space,
) -> Result<AdapterCheckpoint> {
    check_lambda(lambda)?;
    all_compatible(&[task_s, lm_t, lm_s])?;
    let language = Lifted::new(lm_t, space)?.minus(&Lifted::new(lm_s, space)?);
    let out = Lifted::new(task_s, space)?.lerp(&language, lambda);
    let mut operands = operand_refs("task", &[task_s])?;
    operands.extend(operand_refs("lm_target", &[lm_t])?);
    operands.extend(operand_refs("lm_source", &[lm_s])?);
    let meta = composed_meta(
        Mode::LangTaskAddSubtract,
        Some(lambda),
        space,
        lm_t.meta.language_tag.clone(),
        task_s,
        operands,
    );
    out.into_checkpoint(meta)
}

/// Uniform mean of task adapters. Carries no λ.
pub fn compose_task_average(tasks: &[&AdapterCheckpoint], space: Space) -> Result<AdapterCheckpoint> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("task average needs at least one checkpoint".into()));
    }
    all_compatible(tasks)?;
    let out = average_lifted(tasks, space)?;
    let tag = tasks
        .iter()
        .map(|c| c.meta.language_tag.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let meta = composed_meta(Mode::TaskAddAll, None, space, tag, tasks[0], operand_refs("task", tasks)?);
    out.into_checkpoint(meta)
}

/// `λ·mean(tasks) + (1−λ)·(lm_t − mean(lms_source))`.
pub fn compose_add_subtract_related(
    tasks: &[&AdapterCheckpoint],
    lms_source: &[&AdapterCheckpoint],
    lm_t: &AdapterCheckpoint,
    lambda: f64,
    space: Space,
) -> Result<AdapterCheckpoint> {
    check_lambda(lambda)?;
    if tasks.is_empty() || lms_source.is_empty() {
        return Err(Error::InvalidArgument(
            "related add-subtract needs nonempty task and source language lists".into(),
        ));
    }
    let mut everything: Vec<&AdapterCheckpoint> = tasks.to_vec();
    everything.extend_from_slice(lms_source);
    everything.push(lm_t);
    all_compatible(&everything)?;

    let task_mean = average_lifted(tasks, space)?;
    let source_mean = average_lifted(lms_source, space)?;
    let out = task_mean.lerp(&Lifted::new(lm_t, space)?.minus(&source_mean), lambda);
    let mut operands = operand_refs("task", tasks)?;
    operands.extend(operand_refs("lm_target", &[lm_t])?);
    operands.extend(operand_refs("lm_source", lms_source)?);
    let meta = composed_meta(
        Mode::LangTaskAddSubtractRelated,
        Some(lambda),
        space,
        lm_t.meta.language_tag.clone(),
        tasks[0],
        operands,
    );
    out.into_checkpoint(meta)
}

/// Re-runs the recipe recorded in `ckpt`'s provenance, resolving operands by
/// fingerprint through `lookup`.
pub fn recompose<'a>(
    ckpt: &AdapterCheckpoint,
    lookup: impl Fn(&str) -> Option<&'a AdapterCheckpoint>,
) -> Result<AdapterCheckpoint> {
    let p = ckpt
        .meta
        .provenance
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no composition record".into()))?;
    let recipe = Recipe::new(p.mode.parse()?, p.lambda, p.space.parse()?)?;
    let mut ops = Operands::default();
    for op in &p.operands {
        let c = lookup(&op.fingerprint)
            .ok_or_else(|| Error::InvalidArgument(format!("operand {} not found", op.fingerprint)))?;
        match op.role.as_str() {
            "task" => ops.tasks.push(c),
            "lm_target" => ops.lm_target = Some(c),
            "lm_source" => ops.lm_sources.push(c),
            other => return Err(Error::Parse(format!("unknown operand role {other:?}"))),
        }
    }
    recipe.apply(&ops)
}

/// Default λ grid: 0.0, 0.1, …, 1.0.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best_lambda: f64,
    pub best_score: f64,
    /// `(λ, score)` in grid order.
    pub table: Vec<(f64, f64)>,
}

/// Picks the λ maximizing `score` over `grid`. Ties go to the larger λ.
pub fn select_lambda(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    let table = grid
        .iter()
        .map(|&l| Ok((l, score(l)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = table[0];
    for &(l, s) in &table[1..] {
        if s.is_nan() {
            continue;
        }
        if best.1.is_nan() || s > best.1 || (s == best.1 && l > best.0) {
            best = (l, s);
        }
    }
    Ok(SweepResult {
        best_lambda: best.0,
        best_score: best.1,
        table,
    })
}

/// Evaluates `template` at every λ in `grid` on the validation scorer
/// (higher is better) and returns the best λ.
pub fn lambda_sweep(
    template: &Recipe,
    operands: &Operands<'_>,
    grid: &[f64],
    mut validation_score: impl FnMut(&AdapterCheckpoint) -> Result<f64>,
) -> Result<SweepResult> {
    if !template.mode.takes_lambda() {
        return Err(Error::InvalidArgument(format!("{} has no lambda to sweep", template.mode)));
    }
    select_lambda(grid, |l| validation_score(&template.with_lambda(l)?.apply(operands)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{KroneckerModule, LoraModule, MatrixRole};

    /// One site, LoRA rank 1 on a 1×1 weight: a single entry per factor.
    fn scalar(down: f64, up: f64, tag: &str) -> AdapterCheckpoint {
        let mut modules = BTreeMap::new();
        modules.insert(
            SiteId::new(0, MatrixRole::Query),
            AdapterModule::Lora(
                LoraModule::new(Matrix::from_rows(&[&[down]]), Matrix::from_rows(&[&[up]])).unwrap(),
            ),
        );
        AdapterCheckpoint::new(AdapterKind::Lora, modules, CheckpointMeta::new(tag, Objective::Task, "base")).unwrap()
    }

    fn up_of(c: &AdapterCheckpoint) -> f64 {
        c.modules().values().next().unwrap().factors()[1].get(0, 0)
    }

    fn random(seed: u64) -> AdapterCheckpoint {
        let sites: Vec<_> = MatrixRole::ALL.iter().map(|&r| (SiteId::new(0, r), (6, 6))).collect();
        let mut c = AdapterCheckpoint::init_lora(&sites, 2, seed, CheckpointMeta::new("x", Objective::Lm, "base")).unwrap();
        for (i, (_, m)) in c.modules_mut().enumerate() {
            for (j, f) in m.factors_mut().into_iter().enumerate() {
                *f = Matrix::seeded_normal(f.rows(), f.cols(), seed * 100 + (i * 2 + j) as u64, 1.0);
            }
        }
        c
    }

    #[test]
    fn add_endpoints_and_midpoint() {
        let (t, l) = (random(1), random(2));
        assert!(compose_add(&t, &l, 1.0, Space::Factor).unwrap().same_payload(&t));
        assert!(compose_add(&t, &l, 0.0, Space::Factor).unwrap().same_payload(&l));
        let r = compose_add(&scalar(2.0, 2.0, "en"), &scalar(4.0, 4.0, "pt"), 0.5, Space::Factor).unwrap();
        assert_eq!(up_of(&r), 3.0);
        assert_eq!(r.meta.language_tag, "pt");
        assert!(compose_add(&t, &l, 1.5, Space::Factor).is_err());
        assert!(compose_add(&t, &l, -0.1, Space::Factor).is_err());
        assert!(compose_add(&t, &l, f64::NAN, Space::Factor).is_err());
    }

    #[test]
    fn add_subtract_cases() {
        let (t, lt, ls) = (random(1), random(2), random(3));
        assert!(compose_add_subtract(&t, &lt, &ls, 1.0, Space::Factor).unwrap().same_payload(&t));

        let cancelled = compose_add_subtract(&t, &lt, &lt, 0.4, Space::Factor).unwrap();
        let scaled: Vec<f64> = t.flat_parameters().iter().map(|v| 0.4 * v).collect();
        assert_eq!(cancelled.flat_parameters(), scaled);

        let r = compose_add_subtract(&scalar(2.0, 2.0, "en"), &scalar(4.0, 4.0, "pt"), &scalar(1.0, 1.0, "en"), 0.5, Space::Factor)
            .unwrap();
        assert_eq!(up_of(&r), 2.5);
    }

    #[test]
    fn average_cases() {
        let t = random(4);
        assert!(compose_task_average(&[&t], Space::Factor).unwrap().same_payload(&t));
        let r = compose_task_average(&[&scalar(1.0, 1.0, "a"), &scalar(3.0, 3.0, "b")], Space::Factor).unwrap();
        assert_eq!(up_of(&r), 2.0);
        assert_eq!(r.meta.provenance.as_ref().unwrap().lambda, None);
        assert!(compose_task_average(&[], Space::Factor).is_err());

        let mut modules = BTreeMap::new();
        modules.insert(
            SiteId::new(0, MatrixRole::Query),
            AdapterModule::Kronecker(KroneckerModule::new(Matrix::zeros(1, 1), Matrix::zeros(1, 1))),
        );
        let kron = AdapterCheckpoint::new(AdapterKind::Kronecker, modules, CheckpointMeta::new("k", Objective::Task, "base")).unwrap();
        assert!(matches!(
            compose_task_average(&[&scalar(1.0, 1.0, "a"), &kron], Space::Factor),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn related_cases() {
        let (t1, t2, s1, s2, lt) = (random(1), random(2), random(3), random(4), random(5));
        let one = compose_add_subtract_related(&[&t1], &[&s1], &lt, 0.3, Space::Factor).unwrap();
        let direct = compose_add_subtract(&t1, &lt, &s1, 0.3, Space::Factor).unwrap();
        assert!(one.same_payload(&direct));

        let full_task = compose_add_subtract_related(&[&t1, &t2], &[&s1, &s2], &lt, 1.0, Space::Factor).unwrap();
        assert!(full_task.same_payload(&compose_task_average(&[&t1, &t2], Space::Factor).unwrap()));

        let r = compose_add_subtract_related(
            &[&scalar(2.0, 2.0, "a"), &scalar(4.0, 4.0, "b")],
            &[&scalar(1.0, 1.0, "a"), &scalar(3.0, 3.0, "b")],
            &scalar(4.0, 4.0, "t"),
            0.5,
            Space::Factor,
        )
        .unwrap();
        assert_eq!(up_of(&r), 2.5);
        assert!(compose_add_subtract_related(&[], &[&s1], &lt, 0.5, Space::Factor).is_err());
    }

    #[test]
    fn recipes_validate_lambda_usage() {
        assert!(Recipe::new(Mode::TaskAddAll, Some(0.5), Space::Factor).is_err());
        assert!(Recipe::new(Mode::TaskAddRelated, None, Space::Factor).is_ok());
        assert!(Recipe::new(Mode::LangTaskAdd, None, Space::Factor).is_err());
        assert!(Recipe::new(Mode::LangTaskAdd, Some(2.0), Space::Factor).is_err());
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn delta_space_produces_dense() {
        let (t, l) = (random(1), random(2));
        let r = compose_add(&t, &l, 1.0, Space::Delta).unwrap();
        assert_eq!(r.kind(), AdapterKind::Dense);
        for (site, m) in r.modules() {
            assert_eq!(m.materialize_delta().unwrap(), t.module(site).unwrap().materialize_delta().unwrap());
        }
    }

    #[test]
    fn sweep_rules() {
        let r = select_lambda(&[0.3], |_| Ok(-5.0)).unwrap();
        assert_eq!(r.best_lambda, 0.3);
        let r = select_lambda(&[0.2, 0.8], Ok).unwrap();
        assert_eq!(r.best_lambda, 0.8);
        let r = select_lambda(&[0.4, 0.6, 0.5], |l| Ok(if l == 0.5 { 0.0 } else { 1.0 })).unwrap();
        assert_eq!(r.best_lambda, 0.6);
        let r = select_lambda(&[0.6, 0.4], |_| Ok(1.0)).unwrap();
        assert_eq!(r.best_lambda, 0.6);
        assert!(select_lambda(&[], |_| Ok(0.0)).is_err());
        assert!(select_lambda(&[1.2], |_| Ok(0.0)).is_err());
        assert_eq!(default_lambda_grid().len(), 11);
    }

    #[test]
    fn lambda_sweep_over_recipe() {
        let (t, l) = (random(1), random(2));
        let target = t.flat_parameters();
        let template = Recipe::new(Mode::LangTaskAdd, Some(0.5), Space::Factor).unwrap();
        let ops = Operands {
            tasks: vec![&t],
            lm_target: Some(&l),
            lm_sources: vec![],
        };
        // Score = -distance to task adapter; best is λ=1.
        let r = lambda_sweep(&template, &ops, &default_lambda_grid(), |c| {
            Ok(-c.flat_parameters().iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>())
        })
        .unwrap();
        assert_eq!(r.best_lambda, 1.0);
        assert_eq!(r.table.len(), 11);

        let avg = Recipe::new(Mode::TaskAddAll, None, Space::Factor).unwrap();
        assert!(lambda_sweep(&avg, &ops, &[0.5], |_| Ok(0.0)).is_err());
    }
}
