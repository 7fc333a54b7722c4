//! End-to-end toy experiments: a synthetic language family, zero-shot
//! transfer by adapter arithmetic, and task averaging over related languages.

use super::corpus::{generate_corpus, Dataset, DatasetKind, SyntheticLanguage};
use super::eval::{cross_entropy, decode_summaries, target_language_rate};
use super::model::{MiniLm, MiniLmConfig};
use super::train::{train_adapter, TrainSpec, DEFAULT_BATCH_SIZE, DEFAULT_STEPS};
use crate::adapter::{AdapterCheckpoint, CheckpointMeta, Objective};
use crate::compose::{self, Mode, Operands, Recipe, Space};
use crate::error::{Error, Result};
use crate::lang::{select_related, Distance, DistanceTable, SelectionRule};
use crate::rng::SplitMix64;

pub const TARGET: &str = "tgt";
pub const SOURCE: &str = "src";
pub const RELATED: [&str; 2] = ["rel1", "rel2"];
pub const UNRELATED: [&str; 2] = ["unr1", "unr2"];

/// Fraction of base ids the source shares with the target.
pub const SOURCE_SHARED: f64 = 0.6;
pub const RELATED_SHARED: f64 = 0.75;
const SISTER_SHARED: f64 = 0.75;
/// Tree hops that map to geographic distance 1.
const MAX_HOPS: f64 = 4.0;

/// Learning rate of the toy runs. Plain SGD at the production default moves
/// a 500-step adapter too little to measure anything.
pub const TOY_LEARNING_RATE: f64 = 1.0;

#[derive(Debug, Clone)]
struct Member {
    language: SyntheticLanguage,
    family: usize,
    depth: usize,
}

/// Two families. The target is a root with the source and two related
/// languages as children; the unrelated pair forms a second family.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    members: Vec<Member>,
}

impl ToyWorld {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self> {
        let s = |salt: u64| SplitMix64::derive(seed, salt).next_u64();
        let tgt = SyntheticLanguage::root(TARGET, vocab_size, s(1));
        let src = SyntheticLanguage::related(SOURCE, &tgt, SOURCE_SHARED, s(2))?;
        let rel1 = SyntheticLanguage::related(RELATED[0], &tgt, RELATED_SHARED, s(3))?;
        let rel2 = SyntheticLanguage::related(RELATED[1], &tgt, RELATED_SHARED, s(4))?;
        let unr1 = SyntheticLanguage::root(UNRELATED[0], vocab_size, s(5));
        let unr2 = SyntheticLanguage::related(UNRELATED[1], &unr1, SISTER_SHARED, s(6))?;
        let m = |language, family, depth| Member { language, family, depth };
        Ok(Self {
            members: vec![
                m(tgt, 0, 0),
                m(src, 0, 1),
                m(rel1, 0, 1),
                m(rel2, 0, 1),
                m(unr1, 1, 0),
                m(unr2, 1, 1),
            ],
        })
    }

    pub fn codes(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.language.code.as_str()).collect()
    }

    pub fn language(&self, code: &str) -> Result<&SyntheticLanguage> {
        self.members
            .iter()
            .find(|m| m.language.code == code)
            .map(|m| &m.language)
            .ok_or_else(|| Error::UnknownLanguage(code.into()))
    }

    /// Syntactic distance is the fraction of base ids two languages disagree
    /// on; geographic distance is family-tree hops over four, or 1 across
    /// families.
    pub fn distance_table(&self) -> DistanceTable {
        let mut table = DistanceTable::default();
        for a in &self.members {
            for b in &self.members {
                if a.language.code == b.language.code {
                    continue;
                }
                let syntactic = round6(1.0 - a.language.shared_fraction(&b.language));
                let geographic = if a.family != b.family {
                    1.0
                } else {
                    let hops = if a.depth == 0 || b.depth == 0 { a.depth + b.depth } else { 2 };
                    round6((hops as f64 / MAX_HOPS).min(1.0))
                };
                table.insert(&a.language.code, &b.language.code, Distance { syntactic, geographic });
            }
        }
        table
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub seed: u64,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rank: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub lambda_grid: Vec<f64>,
    pub space: Space,
}

impl ToyConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            steps: DEFAULT_STEPS,
            learning_rate: TOY_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            rank: 4,
            n_train: 256,
            n_validation: 128,
            n_test: 64,
            lambda_grid: compose::default_lambda_grid(),
            space: Space::Factor,
        }
    }

    fn salt(&self, salt: u64) -> u64 {
        SplitMix64::derive(self.seed, salt).next_u64()
    }
}

/// Base model, world and datasets shared by the toy runs of one seed.
pub struct ToySetup {
    pub config: ToyConfig,
    pub model: MiniLm,
    pub world: ToyWorld,
}

impl ToySetup {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let model = MiniLm::new(MiniLmConfig::with_seed(config.salt(0xBA5E)))?;
        let world = ToyWorld::new(model.config().vocab_size, config.salt(0x3041D))?;
        Ok(Self { config, model, world })
    }

    /// Training corpus of a language. Salts keep every (language, kind)
    /// stream independent.
    pub fn corpus(&self, code: &str, kind: DatasetKind, n: usize, split: u64) -> Result<Dataset> {
        let lang = self.world.language(code)?;
        let idx = self.world.codes().iter().position(|c| *c == code).expect("known code") as u64;
        let kind_salt = match kind {
            DatasetKind::Unlabeled => 0,
            DatasetKind::Task => 1,
        };
        generate_corpus(lang, kind, n, self.config.salt(0xDA7A + 16 * idx + 4 * split + kind_salt))
    }

    /// Every adapter in a run starts from one shared initialization, so that
    /// factor-space arithmetic compares adapters that moved from a common point.
    pub fn fresh_adapter(&self, code: &str) -> Result<AdapterCheckpoint> {
        let meta = CheckpointMeta::new(code, Objective::Lm, self.model.fingerprint());
        AdapterCheckpoint::init_lora(&self.model.site_shapes(), self.config.rank, self.config.salt(0x1417), meta)
    }

    pub fn train(&self, code: &str, objective: Objective) -> Result<AdapterCheckpoint> {
        let kind = match objective {
            Objective::Lm => DatasetKind::Unlabeled,
            Objective::Task => DatasetKind::Task,
        };
        let data = self.corpus(code, kind, self.config.n_train, 0)?;
        let spec = TrainSpec::new(
            objective,
            self.config.steps,
            self.config.learning_rate,
            self.config.batch_size,
            self.config.salt(0x7A1 + objective as u64),
        )?;
        Ok(train_adapter(&self.model, &spec, &data, self.fresh_adapter(code)?)?.adapter)
    }

    pub fn target_split(&self, split: u64) -> Result<Dataset> {
        let n = if split == 1 { self.config.n_validation } else { self.config.n_test };
        self.corpus(TARGET, DatasetKind::Task, n, split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub seed: u64,
    pub xent_task_only: f64,
    pub xent_add: f64,
    pub xent_add_subtract: f64,
    pub lambda_add: f64,
    pub lambda_add_subtract: f64,
    pub rate_task_only: f64,
    pub rate_add: f64,
    pub rate_add_subtract: f64,
    pub adapters: Vec<(String, AdapterCheckpoint)>,
}

impl TransferOutcome {
    pub fn xent_improved(&self) -> bool {
        self.xent_add_subtract <= self.xent_task_only
    }

    pub fn rate_improved(&self) -> bool {
        self.rate_add_subtract >= self.rate_task_only
    }
}

fn sweep(setup: &ToySetup, mode: Mode, ops: &Operands<'_>, validation: &Dataset) -> Result<(f64, AdapterCheckpoint)> {
    let template = Recipe::new(mode, Some(1.0), setup.config.space)?;
    let result = compose::lambda_sweep(&template, ops, &setup.config.lambda_grid, |c| {
        Ok(-cross_entropy(&setup.model, Some(c), validation)?)
    })?;
    let chosen = template.with_lambda(result.best_lambda)?.apply(ops)?;
    Ok((result.best_lambda, chosen))
}

/// Zero-shot transfer from the source to the target: task adapter alone,
/// add, and add-subtract with λ picked on held-out target data.
pub fn run_transfer(config: ToyConfig) -> Result<TransferOutcome> {
    let setup = ToySetup::new(config)?;
    let task_s = setup.train(SOURCE, Objective::Task)?;
    let lm_s = setup.train(SOURCE, Objective::Lm)?;
    let lm_t = setup.train(TARGET, Objective::Lm)?;
    let validation = setup.target_split(1)?;
    let test = setup.target_split(2)?;

    let ops = Operands {
        tasks: vec![&task_s],
        lm_target: Some(&lm_t),
        lm_sources: vec![&lm_s],
    };
    let (lambda_add, add) = sweep(&setup, Mode::LangTaskAdd, &ops, &validation)?;
    let (lambda_add_subtract, add_sub) = sweep(&setup, Mode::LangTaskAddSubtract, &ops, &validation)?;

    let target = setup.world.language(TARGET)?;
    let m = &setup.model;
    let rate = |a: &AdapterCheckpoint| -> Result<f64> { Ok(target_language_rate(&decode_summaries(m, Some(a), &test)?, target)) };
    Ok(TransferOutcome {
        seed: setup.config.seed,
        xent_task_only: cross_entropy(m, Some(&task_s), &test)?,
        xent_add: cross_entropy(m, Some(&add), &test)?,
        xent_add_subtract: cross_entropy(m, Some(&add_sub), &test)?,
        lambda_add,
        lambda_add_subtract,
        rate_task_only: rate(&task_s)?,
        rate_add: rate(&add)?,
        rate_add_subtract: rate(&add_sub)?,
        adapters: vec![
            ("task_src".into(), task_s),
            ("lm_src".into(), lm_s),
            ("lm_tgt".into(), lm_t),
            ("add".into(), add),
            ("add_subtract".into(), add_sub),
        ],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragingOutcome {
    pub seed: u64,
    pub selected: Vec<String>,
    pub xent_all: f64,
    pub xent_related: f64,
    pub rate_all: f64,
    pub rate_related: f64,
    pub adapters: Vec<(String, AdapterCheckpoint)>,
}

impl AveragingOutcome {
    pub fn related_wins(&self) -> bool {
        self.xent_related <= self.xent_all
    }
}

/// Task adapters for four source languages, averaged over all of them and
/// over the ones the selection rule calls related to the target.
pub fn run_task_averaging(config: ToyConfig) -> Result<AveragingOutcome> {
    let setup = ToySetup::new(config)?;
    let pool: Vec<&str> = RELATED.iter().chain(UNRELATED.iter()).copied().collect();
    let selection = select_related(TARGET, &pool, &SelectionRule::default(), &setup.world.distance_table())?;
    let tasks = pool
        .iter()
        .map(|c| Ok((c.to_string(), setup.train(c, Objective::Task)?)))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&AdapterCheckpoint> = tasks.iter().map(|(_, a)| a).collect();
    let related: Vec<&AdapterCheckpoint> = tasks
        .iter()
        .filter(|(c, _)| selection.languages.contains(c))
        .map(|(_, a)| a)
        .collect();
    let avg_all = compose::compose_task_average(&all, setup.config.space)?;
    let avg_related = compose::compose_task_average(&related, setup.config.space)?;
    let test = setup.target_split(2)?;
    let m = &setup.model;
    let target = setup.world.language(TARGET)?;
    let rate = |a: &AdapterCheckpoint| -> Result<f64> { Ok(target_language_rate(&decode_summaries(m, Some(a), &test)?, target)) };
    let mut adapters: Vec<(String, AdapterCheckpoint)> =
        tasks.iter().map(|(c, a)| (format!("task_{c}"), a.clone())).collect();
    let outcome = AveragingOutcome {
        seed: setup.config.seed,
        selected: selection.languages.clone(),
        xent_all: cross_entropy(m, Some(&avg_all), &test)?,
        xent_related: cross_entropy(m, Some(&avg_related), &test)?,
        rate_all: rate(&avg_all)?,
        rate_related: rate(&avg_related)?,
        adapters: Vec::new(),
    };
    adapters.push(("task_add_all".into(), avg_all));
    adapters.push(("task_add_related".into(), avg_related));
    Ok(AveragingOutcome { adapters, ..outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_distances_follow_the_tree() {
        let w = ToyWorld::new(64, 3).unwrap();
        let t = w.distance_table();
        let d = t.distance(TARGET, SOURCE).unwrap();
        assert!((d.syntactic - (1.0 - w.language(SOURCE).unwrap().shared_fraction(w.language(TARGET).unwrap()))).abs() < 1e-6);
        assert_eq!(d.geographic, 0.25);
        assert_eq!(t.distance(RELATED[0], RELATED[1]).unwrap().geographic, 0.5);
        assert_eq!(t.distance(TARGET, UNRELATED[1]).unwrap().geographic, 1.0);
        let pool: Vec<&str> = RELATED.iter().chain(UNRELATED.iter()).copied().collect();
        let sel = select_related(TARGET, &pool, &SelectionRule::default(), &t).unwrap();
        assert_eq!(sel.languages, vec!["rel1", "rel2"]);
        assert!(!sel.fallback);
    }
}
