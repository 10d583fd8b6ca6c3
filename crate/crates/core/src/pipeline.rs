//! End-to-end runs: optional search, retraining and evaluation for one
//! ablation variant, plus the config bundle the command line resolves.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{retrain, run_search, split_search_sets, BilevelConfig, ObjectiveConfig, SearchOutcome, SplitSpec, TrainOutcome};
use crate::data::{Dataset, DatasetConfig};
use crate::error::{NfsError, Result};
use crate::gates::DerivedGates;
use crate::eval::{evaluate, EvalProtocol, EvalReport, Metric};
use crate::net::{NetConfig, TwoStreamNet};
use crate::Real;

/// Everything a run depends on besides its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub net: NetConfig,
    pub bilevel: BilevelConfig,
    pub objective: ObjectiveConfig,
    pub protocol: EvalProtocol,
    pub metric: Metric,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DatasetConfig::default(),
            net: NetConfig::default(),
            bilevel: BilevelConfig::default(),
            objective: ObjectiveConfig::default(),
            protocol: EvalProtocol::infrared_to_visible(),
            metric: Metric::Cosine,
        }
    }
}

impl RunConfig {
    /// Keeps the classifier width in step with the training identities.
    pub fn resolved(mut self) -> Result<Self> {
        self.net.num_identities = self.data.n_train_ids as usize;
        self.net.input_height = self.data.render.height;
        self.net.input_width = self.data.render.width;
        self.net.validate()?;
        self.bilevel.validate()?;
        self.objective.contrastive.validate()?;
        Ok(self)
    }
}

/// Ablation switches: search gates (N) and the contrastive term (C).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub search: bool,
    pub contrastive: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant { search: false, contrastive: false },
        Variant { search: true, contrastive: false },
        Variant { search: false, contrastive: true },
        Variant { search: true, contrastive: true },
    ];

    pub fn name(&self) -> &'static str {
        match (self.search, self.contrastive) {
            (false, false) => "B",
            (true, false) => "B+N",
            (false, true) => "B+C",
            (true, true) => "B+N+C",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = NfsError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| NfsError::Config(format!("unknown variant {s}; expected B, B+N, B+C or B+N+C")))
    }
}

pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub split: Option<SplitSpec>,
    pub search: Option<SearchOutcome>,
    pub train: TrainOutcome,
    pub report: EvalReport,
    pub net: TwoStreamNet<Real>,
    pub seconds: f64,
}

/// Independent random streams of one run, all derived from its seed.
pub struct RunStreams {
    pub init: ChaCha8Rng,
    pub split_seed: u64,
    pub search: ChaCha8Rng,
    pub retrain: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || ChaCha8Rng::seed_from_u64(root.random());
        let init = next();
        let search = next();
        let retrain = next();
        let split_seed = root.random();
        Self {
            init,
            split_seed,
            search,
            retrain,
        }
    }
}

fn objective_for(config: &RunConfig, variant: Variant) -> ObjectiveConfig {
    ObjectiveConfig {
        use_contrastive: variant.contrastive,
        ..config.objective
    }
}

/// Splits the training images and searches gates on the configured
/// stages. Returns the network holding the derived gates.
pub fn search_phase(
    dataset: &Dataset,
    config: &RunConfig,
    use_contrastive: bool,
    seed: u64,
) -> Result<(TwoStreamNet<Real>, SplitSpec, SearchOutcome)> {
    if config.net.searched_stages.is_empty() {
        return Err(NfsError::Config("the search needs at least one stage".into()));
    }
    let mut streams = RunStreams::new(seed);
    let mut net = TwoStreamNet::init_params(&config.net, &mut streams.init)?;
    let split = split_search_sets(dataset, &dataset.manifest.train_indices(), streams.split_seed)?;
    let objective = objective_for(config, Variant { search: true, contrastive: use_contrastive });
    let outcome = run_search(&mut net, dataset, &split, &objective, &config.bilevel, &mut streams.search)?;
    Ok((net, split, outcome))
}

/// Trains from scratch on every training image. With `gates` the searched
/// stages are taken from the gate set; without, the network is ungated.
pub fn train_phase(
    dataset: &Dataset,
    config: &RunConfig,
    gates: Option<&DerivedGates>,
    use_contrastive: bool,
    seed: u64,
) -> Result<(TwoStreamNet<Real>, TrainOutcome)> {
    let mut streams = RunStreams::new(seed);
    let mut net_cfg = config.net.clone();
    net_cfg.searched_stages = gates.map(DerivedGates::stages).unwrap_or_default();
    let mut net = TwoStreamNet::init_params(&net_cfg, &mut streams.init)?;
    if let Some(g) = gates {
        net.set_derived_gates(g)?;
    }
    let objective = objective_for(config, Variant { search: gates.is_some(), contrastive: use_contrastive });
    let train_idx = dataset.manifest.train_indices();
    let outcome = retrain(&mut net, dataset, &train_idx, &objective, &config.bilevel, &mut streams.retrain)?;
    Ok((net, outcome))
}

/// Runs one variant: search (if enabled) on an 80/20 split of the training
/// images, retraining on all of them, then evaluation on the test split.
pub fn run_variant(dataset: &Dataset, config: &RunConfig, variant: Variant, seed: u64) -> Result<VariantRun> {
    let start = Instant::now();
    let (split, search) = if variant.search {
        let (_, split, outcome) = search_phase(dataset, config, variant.contrastive, seed)?;
        (Some(split), Some(outcome))
    } else {
        (None, None)
    };
    let gates = search.as_ref().map(|s| &s.derived);
    let (mut net, train) = train_phase(dataset, config, gates, variant.contrastive, seed)?;
    let (report, ..) = evaluate(&mut net, dataset, config.protocol, config.metric, seed)?;
    Ok(VariantRun {
        variant,
        seed,
        split,
        search,
        train,
        report,
        net,
        seconds: start.elapsed().as_secs_f64(),
    })
}
