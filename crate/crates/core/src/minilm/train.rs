//! Adapter training by plain SGD over a frozen base.

use super::corpus::{Dataset, DatasetKind};
use super::model::{log_softmax_in_place, AdapterPath, MiniLm};
use crate::adapter::{AdapterCheckpoint, AdapterModule, MatrixRole, Objective};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

pub const DEFAULT_STEPS: u64 = 500;
pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;
pub const DEFAULT_BATCH_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    /// `Lm` trains with the prefix-LM objective, `Task` on summaries.
    pub objective: Objective,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSpec {
    pub fn new(objective: Objective, steps: u64, learning_rate: f64, batch_size: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate} must be finite and non-negative")));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(Self {
            objective,
            steps,
            learning_rate,
            batch_size,
            seed,
        })
    }

    pub fn with_defaults(objective: Objective, seed: u64) -> Self {
        Self {
            objective,
            steps: DEFAULT_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: AdapterCheckpoint,
    /// Mean batch loss per step, measured before that step's update.
    pub loss_curve: Vec<f64>,
}

pub fn dataset_kind_for(objective: Objective) -> DatasetKind {
    match objective {
        Objective::Lm => DatasetKind::Unlabeled,
        Objective::Task => DatasetKind::Task,
    }
}

/// One scored sequence: tokens at positions `from..` are predicted.
pub(crate) struct Scored {
    pub tokens: Vec<u32>,
    pub from: usize,
}

/// Summed negative log-likelihood and scored-token count, plus gradients of
/// the mean with respect to each site's effective weight.
pub(crate) fn loss_and_site_grads(
    model: &MiniLm,
    adapter: Option<&AdapterCheckpoint>,
    batch: &[Scored],
    want_grads: bool,
) -> Result<(f64, usize, Vec<[Matrix; 4]>)> {
    let w = model.resolve(adapter, AdapterPath::Merged)?;
    let vocab = model.config().vocab_size;
    let count: usize = batch.iter().map(|s| s.tokens.len().saturating_sub(s.from.max(1))).sum();
    let mut grads = model.zero_site_grads();
    let mut nll = 0.0;
    for s in batch {
        if s.tokens.len() > model.config().max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                s.tokens.len(),
                model.config().max_seq_len
            )));
        }
        if s.from.max(1) >= s.tokens.len() {
            continue;
        }
        let trace = model.run(&w, &s.tokens);
        let mut dlogits = vec![0.0; s.tokens.len() * vocab];
        for j in s.from.max(1)..s.tokens.len() {
            let mut row = trace.logits[(j - 1) * vocab..j * vocab].to_vec();
            log_softmax_in_place(&mut row);
            let target = s.tokens[j] as usize;
            nll -= row[target];
            if want_grads {
                let d = &mut dlogits[(j - 1) * vocab..j * vocab];
                for (dv, lp) in d.iter_mut().zip(&row) {
                    *dv = lp.exp() / count as f64;
                }
                d[target] -= 1.0 / count as f64;
            }
        }
        if want_grads {
            model.backward(&w, &trace, &dlogits, &mut grads);
        }
    }
    Ok((nll, count, grads))
}

fn role_grad(grads: &[[Matrix; 4]], layer: usize, role: MatrixRole) -> &Matrix {
    let idx = match role {
        MatrixRole::Key => 0,
        MatrixRole::Query => 1,
        MatrixRole::Value => 2,
        MatrixRole::Projection => 3,
    };
    &grads[layer][idx]
}

/// Chain rule from `∂L/∂Δ` to the factors, in storage order.
pub(crate) fn factor_gradients(module: &AdapterModule, g: &Matrix) -> Result<Vec<Matrix>> {
    match module {
        AdapterModule::Lora(lora) => Ok(vec![
            lora.up().transpose().matmul(g)?,
            g.matmul(&lora.down().transpose())?,
        ]),
        AdapterModule::Kronecker(kron) => {
            let (a, b) = (kron.a(), kron.b());
            let (p, q) = b.shape();
            let mut da = Matrix::zeros(a.rows(), a.cols());
            let mut db = Matrix::zeros(p, q);
            for i in 0..a.rows() {
                for j in 0..a.cols() {
                    let mut acc = 0.0;
                    for r in 0..p {
                        for s in 0..q {
                            let gv = g.get(i * p + r, j * q + s);
                            acc += gv * b.get(r, s);
                            db.set(r, s, db.get(r, s) + gv * a.get(i, j));
                        }
                    }
                    da.set(i, j, acc);
                }
            }
            Ok(vec![da, db])
        }
        AdapterModule::Dense(_) => Ok(vec![g.clone()]),
    }
}

/// Analytic gradient of the mean loss for every adapter factor, in
/// checkpoint storage order.
pub(crate) fn adapter_gradients(
    model: &MiniLm,
    adapter: &AdapterCheckpoint,
    batch: &[Scored],
) -> Result<(f64, Vec<Vec<Matrix>>)> {
    let (nll, count, grads) = loss_and_site_grads(model, Some(adapter), batch, true)?;
    let loss = if count == 0 { 0.0 } else { nll / count as f64 };
    let per_site = adapter
        .modules()
        .iter()
        .map(|(site, m)| factor_gradients(m, role_grad(&grads, site.layer, site.role)))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, per_site))
}

pub fn train_adapter(model: &MiniLm, spec: &TrainSpec, dataset: &Dataset, init: AdapterCheckpoint) -> Result<TrainOutcome> {
    let want = dataset_kind_for(spec.objective);
    if dataset.kind() != want {
        return Err(Error::InvalidArgument(format!(
            "{} objective needs a {want} dataset, got {}",
            spec.objective.as_str(),
            dataset.kind()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    model.check_adapter(&init)?;
    let mut adapter = init;
    let mut rng = SplitMix64::derive(spec.seed, 0x7EA1);
    let mut loss_curve = Vec::with_capacity(spec.steps as usize);
    for _ in 0..spec.steps {
        let batch: Vec<Scored> = (0..spec.batch_size)
            .map(|_| {
                let (tokens, from) = dataset.examples()[rng.below(dataset.len())].sequence();
                let from = match spec.objective {
                    Objective::Lm if tokens.len() >= 2 => 1 + rng.below(tokens.len() - 1),
                    _ => from,
                };
                Scored { tokens, from }
            })
            .collect();
        let (loss, grads) = adapter_gradients(model, &adapter, &batch)?;
        loss_curve.push(loss);
        for ((_, module), site_grads) in adapter.modules_mut().zip(&grads) {
            for (f, g) in module.factors_mut().into_iter().zip(site_grads) {
                for (p, d) in f.data_mut().iter_mut().zip(g.data()) {
                    *p -= spec.learning_rate * d;
                }
            }
        }
        if let Some((_, m)) = adapter.modules().iter().find(|(_, m)| !m.factors().iter().all(|f| f.is_finite())) {
            return Err(Error::NonFinite(format!("training diverged ({} factor)", m.kind())));
        }
    }
    adapter.meta.objective = spec.objective;
    adapter.meta.training_steps += spec.steps;
    Ok(TrainOutcome { adapter, loss_curve })
}

/// Deterministic scoring of a whole dataset: summaries for task data, every
/// next token for unlabeled text.
pub(crate) fn full_batch(dataset: &Dataset) -> Vec<Scored> {
    dataset
        .examples()
        .iter()
        .map(|e| {
            let (tokens, from) = e.sequence();
            Scored { tokens, from }
        })
        .collect()
}

/// Largest relative disagreement between the analytic gradient and central
/// differences on `n_params` sampled adapter parameters.
pub fn finite_difference_check(
    model: &MiniLm,
    adapter: &AdapterCheckpoint,
    dataset: &Dataset,
    n_params: usize,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let batch = full_batch(dataset);
    let (_, grads) = adapter_gradients(model, adapter, &batch)?;
    let flat_grads: Vec<f64> = grads.iter().flatten().flat_map(|m| m.data().iter().copied()).collect();
    let picks = sample_parameters(flat_grads.len(), n_params, seed);
    let loss_at = |index: usize, delta: f64| -> Result<f64> {
        let mut probe = adapter.clone();
        let mut offset = 0;
        'outer: for (_, m) in probe.modules_mut() {
            for f in m.factors_mut() {
                if index < offset + f.len() {
                    f.data_mut()[index - offset] += delta;
                    break 'outer;
                }
                offset += f.len();
            }
        }
        let (nll, count, _) = loss_and_site_grads(model, Some(&probe), &batch, false)?;
        Ok(if count == 0 { 0.0 } else { nll / count as f64 })
    };
    let mut worst: f64 = 0.0;
    for i in picks {
        let fd = (loss_at(i, epsilon)? - loss_at(i, -epsilon)?) / (2.0 * epsilon);
        let ga = flat_grads[i];
        let err = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Distinct parameter indices, deterministic in `seed`.
pub fn sample_parameters(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    SplitMix64::derive(seed, 0xFD).shuffle(&mut idx);
    idx.truncate(n);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::CheckpointMeta;
    use crate::minilm::corpus::{generate_corpus, Example, SyntheticLanguage};
    use crate::minilm::model::MiniLmConfig;

    fn setup() -> (MiniLm, Dataset) {
        let m = MiniLm::new(MiniLmConfig::with_seed(1)).unwrap();
        let lang = SyntheticLanguage::root("a", 64, 5);
        let d = generate_corpus(&lang, DatasetKind::Task, 4, 2).unwrap();
        (m, d)
    }

    fn perturbed(mut a: AdapterCheckpoint, seed: u64) -> AdapterCheckpoint {
        for (i, (_, m)) in a.modules_mut().enumerate() {
            for (j, f) in m.factors_mut().into_iter().enumerate() {
                *f = Matrix::seeded_normal(f.rows(), f.cols(), seed + (10 * i + j) as u64, 0.2);
            }
        }
        a
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, d) = setup();
        let meta = CheckpointMeta::new("a", Objective::Task, m.fingerprint());
        let lora = perturbed(AdapterCheckpoint::init_lora(&m.site_shapes(), 4, 3, meta.clone()).unwrap(), 7);
        let kron = perturbed(AdapterCheckpoint::init_kronecker(&m.site_shapes(), 2, 2, 3, meta).unwrap(), 9);
        for a in [&lora, &kron] {
            let err = finite_difference_check(&m, a, &d, 32, 1e-4, 1).unwrap();
            assert!(err <= 1e-3, "{err}");
        }
    }

    #[test]
    fn masked_summaries_give_zero_error() {
        let (m, _) = setup();
        let d = Dataset::new(
            DatasetKind::Task,
            vec![Example::Task {
                document: vec![2, 3, 4],
                summary: vec![],
            }],
        )
        .unwrap();
        let meta = CheckpointMeta::new("a", Objective::Task, m.fingerprint());
        let a = perturbed(AdapterCheckpoint::init_lora(&m.site_shapes(), 4, 3, meta).unwrap(), 7);
        assert_eq!(finite_difference_check(&m, &a, &d, 32, 1e-4, 1).unwrap(), 0.0);
    }

    #[test]
    fn parameter_sample_is_deterministic() {
        assert_eq!(sample_parameters(1000, 32, 4), sample_parameters(1000, 32, 4));
        assert_ne!(sample_parameters(1000, 32, 4), sample_parameters(1000, 32, 5));
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let (m, d) = setup();
        let meta = CheckpointMeta::new("a", Objective::Task, m.fingerprint());
        let init = AdapterCheckpoint::init_lora(&m.site_shapes(), 4, 3, meta).unwrap();
        let spec = TrainSpec::new(Objective::Task, 1, 0.0, 4, 1).unwrap();
        let out = train_adapter(&m, &spec, &d, init.clone()).unwrap();
        assert!(out.adapter.same_payload(&init));
        assert_eq!(out.loss_curve.len(), 1);
    }

    #[test]
    fn objective_must_match_dataset() {
        let (m, d) = setup();
        let meta = CheckpointMeta::new("a", Objective::Lm, m.fingerprint());
        let init = AdapterCheckpoint::init_lora(&m.site_shapes(), 4, 3, meta).unwrap();
        let spec = TrainSpec::with_defaults(Objective::Lm, 1);
        assert!(train_adapter(&m, &spec, &d, init).is_err());
        assert!(TrainSpec::new(Objective::Lm, 0, 0.1, 1, 0).is_err());
    }
}
