//! Scoring adapters on datasets.

use std::fmt;
use std::str::FromStr;

use super::corpus::{Dataset, DatasetKind, Example, SyntheticLanguage};
use super::model::{AdapterPath, MiniLm, FIRST_CONTENT, SEP};
use super::train::{full_batch, loss_and_site_grads};
use crate::adapter::AdapterCheckpoint;
use crate::error::{Error, Result};
use crate::metrics::rouge2_f1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    CrossEntropy,
    Rouge2,
    TargetLanguageRate,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::CrossEntropy => "cross_entropy",
            Metric::Rouge2 => "rouge2",
            Metric::TargetLanguageRate => "target_language_rate",
        }
    }

    /// Whether larger values are better.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::CrossEntropy)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "xent" => Ok(Metric::CrossEntropy),
            "rouge2" => Ok(Metric::Rouge2),
            "target_language_rate" | "lang-rate" => Ok(Metric::TargetLanguageRate),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Greedily extends `prompt` by `n` tokens. Ties go to the lowest id.
pub fn greedy_decode(model: &MiniLm, adapter: Option<&AdapterCheckpoint>, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
    let w = model.resolve(adapter, AdapterPath::Merged)?;
    let vocab = model.config().vocab_size;
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if seq.len() >= model.config().max_seq_len {
            return Err(Error::InvalidArgument("decoding would exceed max_seq_len".into()));
        }
        let trace = model.run(&w, &seq);
        let last = &trace.logits[(seq.len() - 1) * vocab..seq.len() * vocab];
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        seq.push(best as u32);
        out.push(best as u32);
    }
    Ok(out)
}

/// Greedy summaries of the same length as each reference.
pub fn decode_summaries(model: &MiniLm, adapter: Option<&AdapterCheckpoint>, dataset: &Dataset) -> Result<Vec<Vec<u32>>> {
    require_task(dataset, "decoding")?;
    dataset
        .examples()
        .iter()
        .map(|e| {
            let Example::Task { document, summary } = e else { unreachable!() };
            let mut prompt = document.clone();
            prompt.push(SEP);
            greedy_decode(model, adapter, &prompt, summary.len())
        })
        .collect()
}

fn require_task(dataset: &Dataset, what: &str) -> Result<()> {
    if dataset.kind() != DatasetKind::Task {
        return Err(Error::InvalidArgument(format!("{what} needs a task dataset")));
    }
    Ok(())
}

/// Mean per-example ROUGE-2 F1.
pub fn mean_rouge2(outputs: &[Vec<u32>], references: &[Vec<u32>]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    outputs.iter().zip(references).map(|(o, r)| rouge2_f1(o, r)).sum::<f64>() / outputs.len() as f64
}

/// Fraction of non-reserved output tokens inside the language's image of the
/// base content range. Zero when nothing non-reserved was produced.
pub fn target_language_rate(outputs: &[Vec<u32>], language: &SyntheticLanguage) -> f64 {
    let image = language.base_image();
    let (mut inside, mut total) = (0usize, 0usize);
    for &t in outputs.iter().flatten() {
        if t < FIRST_CONTENT {
            continue;
        }
        total += 1;
        if image.get(t as usize).copied().unwrap_or(false) {
            inside += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

/// Mean token negative log-likelihood over the scored positions.
pub fn cross_entropy(model: &MiniLm, adapter: Option<&AdapterCheckpoint>, dataset: &Dataset) -> Result<f64> {
    let (nll, count, _) = loss_and_site_grads(model, adapter, &full_batch(dataset), false)?;
    Ok(if count == 0 { 0.0 } else { nll / count as f64 })
}

pub fn evaluate(
    model: &MiniLm,
    adapter: Option<&AdapterCheckpoint>,
    dataset: &Dataset,
    metric: Metric,
    language: Option<&SyntheticLanguage>,
) -> Result<f64> {
    match metric {
        Metric::CrossEntropy => cross_entropy(model, adapter, dataset),
        Metric::Rouge2 => {
            let outputs = decode_summaries(model, adapter, dataset)?;
            Ok(mean_rouge2(&outputs, &references(dataset)))
        }
        Metric::TargetLanguageRate => {
            let language = language
                .ok_or_else(|| Error::InvalidArgument("target_language_rate needs a target language".into()))?;
            Ok(target_language_rate(&decode_summaries(model, adapter, dataset)?, language))
        }
    }
}

pub fn references(dataset: &Dataset) -> Vec<Vec<u32>> {
    dataset
        .examples()
        .iter()
        .map(|e| match e {
            Example::Task { summary, .. } => summary.clone(),
            Example::Text(t) => t.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilm::corpus::generate_corpus;
    use crate::minilm::model::MiniLmConfig;

    #[test]
    fn forced_reference_scores_one() {
        let lang = SyntheticLanguage::root("a", 64, 1);
        let d = generate_corpus(&lang, DatasetKind::Task, 6, 3).unwrap();
        assert_eq!(mean_rouge2(&references(&d), &references(&d)), 1.0);
    }

    #[test]
    fn identity_language_rate_is_one() {
        let id = SyntheticLanguage::identity("id", 64);
        let d = generate_corpus(&id, DatasetKind::Task, 6, 3).unwrap();
        assert_eq!(target_language_rate(&references(&d), &id), 1.0);
    }

    #[test]
    fn metric_needs_matching_dataset() {
        let m = MiniLm::new(MiniLmConfig::default()).unwrap();
        let lang = SyntheticLanguage::root("a", 64, 1);
        let d = generate_corpus(&lang, DatasetKind::Unlabeled, 2, 3).unwrap();
        assert!(evaluate(&m, None, &d, Metric::Rouge2, None).is_err());
        assert!(evaluate(&m, None, &d, Metric::CrossEntropy, None).unwrap() > 0.0);
        let t = generate_corpus(&lang, DatasetKind::Task, 2, 3).unwrap();
        assert!(evaluate(&m, None, &t, Metric::TargetLanguageRate, None).is_err());
    }

    #[test]
    fn model_own_decode_scores_one() {
        let m = MiniLm::new(MiniLmConfig::default()).unwrap();
        let lang = SyntheticLanguage::root("a", 64, 1);
        let d = generate_corpus(&lang, DatasetKind::Task, 3, 3).unwrap();
        let outs = decode_summaries(&m, None, &d).unwrap();
        let copied = Dataset::new(
            DatasetKind::Task,
            d.examples()
                .iter()
                .zip(outs)
                .map(|(e, o)| match e {
                    Example::Task { document, .. } => Example::Task {
                        document: document.clone(),
                        summary: o,
                    },
                    _ => unreachable!(),
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(evaluate(&m, None, &copied, Metric::Rouge2, None).unwrap(), 1.0);
    }
}
