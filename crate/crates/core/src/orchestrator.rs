//! The federated protocol: strategies, rounds, experiments and suites.
//!
//! Every experiment draws its randomness from two seeds derived from the
//! suite's master seed and the experiment's seed index:
//!
//! * the task seed `derive(master, [TASK, seed])` generates the domains, so
//!   every strategy, held-out domain and label count sees the same images;
//! * the run seed `derive(master, [seed])` initializes the global model and,
//!   through `derive(run, [CLIENT, k, ROUND, r])`, drives client `k` in round
//!   `r`.
//!
//! Neither depends on the strategy, so strategies are compared on paired runs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainingConfig};
use crate::domainsim::{make_task, DomainData, FederationTask, Sample};
use crate::dualteacher::{
    local_train_round, pseudo_label, ClientData, ClientReport, LocalHyper, LocalPlan, PseudoLabeling,
    StepTrace, ThresholdState,
};
use crate::evalmetrics::{evaluate, MetricReport};
use crate::math;
use crate::gaa::{aggregate, sample_count_weights, update_weights, AggregationState};
use crate::segnet::{predict, Architecture, ModelParams};
use crate::seed::{self, tag};
use crate::tensor::{Image, Mask};
use crate::{Error, Result};

/// Which components a run enables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    /// Generalization-aware aggregation instead of sample-count FedAvg.
    pub use_gaa: bool,
    /// Dual-teacher pseudo-label refinement; otherwise a single EMA teacher
    /// with a fixed confidence threshold.
    pub use_dr: bool,
    /// Perturbation-invariant alignment loss.
    pub use_pia: bool,
    /// Ignore unlabeled data.
    pub labeled_only: bool,
    /// Train on the ground truth of every sample.
    pub fully_labeled: bool,
    /// Train one client alone, without aggregation.
    pub local_only: bool,
}

const fn flags(gaa: bool, dr: bool, pia: bool) -> [bool; 3] {
    [gaa, dr, pia]
}

/// `(name, [gaa, dr, pia], labeled_only, fully_labeled, local_only)`.
const REGISTRY: &[(&str, [bool; 3], bool, bool, bool)] = &[
    ("fgasl", flags(true, true, true), false, false, false),
    ("fl-lower", flags(false, false, false), true, false, false),
    ("fl-upper", flags(false, false, false), false, true, false),
    ("fedavg-fixmatch", flags(false, false, false), false, false, false),
    ("gaa-only", flags(true, false, false), false, false, false),
    ("dr-only", flags(false, true, false), false, false, false),
    ("pia-only", flags(false, false, true), false, false, false),
    ("gaa-dr", flags(true, true, false), false, false, false),
    ("gaa-pia", flags(true, false, true), false, false, false),
    ("dr-pia", flags(false, true, true), false, false, false),
    ("local-labeled", flags(false, false, false), true, false, true),
    ("local-fixmatch", flags(false, false, false), false, false, true),
];

impl Strategy {
    /// Looks up a registered strategy.
    pub fn by_name(name: &str) -> Result<Strategy> {
        REGISTRY
            .iter()
            .find(|e| e.0 == name)
            .map(|&(name, [gaa, dr, pia], labeled_only, fully_labeled, local_only)| Strategy {
                name: name.to_string(),
                use_gaa: gaa,
                use_dr: dr,
                use_pia: pia,
                labeled_only,
                fully_labeled,
                local_only,
            })
            .ok_or_else(|| Error::Config(format!("unknown strategy `{name}`")))
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        REGISTRY.iter().map(|e| e.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fully_labeled && self.labeled_only {
            return Err(Error::Config(format!(
                "strategy `{}`: fully_labeled and labeled_only are exclusive",
                self.name
            )));
        }
        if self.local_only && self.use_gaa {
            return Err(Error::Config(format!(
                "strategy `{}`: local_only runs have no aggregation",
                self.name
            )));
        }
        Ok(())
    }

    fn uses_unlabeled(&self) -> bool {
        !self.labeled_only && !self.fully_labeled
    }

    pub fn local_plan(&self, cfg: &TrainingConfig) -> LocalPlan {
        let pseudo = match (self.uses_unlabeled(), self.use_dr) {
            (false, _) => PseudoLabeling::Off,
            (true, true) => PseudoLabeling::DualTeacher,
            (true, false) => PseudoLabeling::SingleTeacher {
                confidence: cfg.fixmatch_confidence,
            },
        };
        LocalPlan {
            pseudo,
            use_pia: self.use_pia,
        }
    }
}

/// Runs independent jobs and returns their results in job order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..n).map(f).collect()
    }
}

/// Labeled images held out from a client for validation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
}

impl LabeledSet {
    fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let (images, masks) = samples
            .into_iter()
            .filter_map(|s| s.mask.clone().map(|m| (s.image.clone(), m)))
            .unzip();
        LabeledSet { images, masks }
    }
}

/// A task laid out for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub arch: Architecture,
    pub clients: Vec<ClientData>,
    pub validation: LabeledSet,
    pub unseen: LabeledSet,
    pub unseen_domain: u32,
    pub steps_per_round: usize,
}

fn client_data(client_id: usize, domain: &DomainData, strategy: &Strategy, validation_fraction: f64) -> (ClientData, Vec<Sample>) {
    let holdout = math::floor(validation_fraction * domain.labeled.len() as f64) as usize;
    let keep = domain.labeled.len() - holdout;
    let (train, held) = domain.labeled.split_at(keep);
    let mut labeled: Vec<Sample> = train.to_vec();
    let mut unlabeled: Vec<&Sample> = Vec::new();
    if strategy.fully_labeled {
        let revealed = DomainData {
            spec: domain.spec.clone(),
            labeled: Vec::new(),
            unlabeled: domain.unlabeled.clone(),
        }
        .revealed();
        labeled.extend(revealed.labeled);
    } else if strategy.uses_unlabeled() {
        unlabeled.extend(&domain.unlabeled);
    }
    let sample_ids = labeled
        .iter()
        .chain(unlabeled.iter().copied())
        .map(|s| (s.domain_id, s.index))
        .collect();
    let data = ClientData {
        client_id,
        domain_id: domain.spec.domain_id,
        labeled_masks: labeled.iter().filter_map(|s| s.mask.clone()).collect(),
        labeled_images: labeled.into_iter().map(|s| s.image).collect(),
        unlabeled_images: unlabeled.into_iter().map(|s| s.image.clone()).collect(),
        sample_ids,
    };
    (data, held.to_vec())
}

/// Splits the task into client datasets, holds out validation images and
/// checks that no unseen-domain sample reaches a client.
pub fn prepare(task: &FederationTask, strategy: &Strategy, cfg: &TrainingConfig) -> Result<Federation> {
    strategy.validate()?;
    cfg.validate()?;
    let arch = Architecture::new(task.image_size, cfg.widths, task.num_classes)?;
    let domains: Vec<(usize, &DomainData)> = if strategy.local_only {
        let d = task.seen.get(cfg.local_domain).ok_or_else(|| {
            Error::field("training.local_domain", format!("only {} seen domains", task.seen.len()))
        })?;
        vec![(cfg.local_domain, d)]
    } else {
        task.seen.iter().enumerate().collect()
    };

    let mut clients = Vec::with_capacity(domains.len());
    let mut held = Vec::new();
    let mut longest = 0;
    for (k, d) in domains {
        let (data, h) = client_data(k, d, strategy, cfg.validation_fraction);
        if data.labeled_images.is_empty() {
            return Err(Error::Config(format!("client {k} has no labeled training images")));
        }
        let n_labeled = d.labeled.len() - h.len();
        longest = longest.max(
            n_labeled.div_ceil(cfg.batch_labeled).max(d.unlabeled.len().div_ceil(cfg.batch_unlabeled)),
        );
        held.extend(h);
        clients.push(data);
    }

    let unseen_domain = task.unseen.spec.domain_id;
    audit(&clients, unseen_domain)?;
    Ok(Federation {
        arch,
        clients,
        validation: LabeledSet::from_samples(&held),
        unseen: LabeledSet::from_samples(&task.unseen.labeled),
        unseen_domain,
        steps_per_round: longest,
    })
}

/// Fails if any client holds a sample of the unseen domain.
pub fn audit(clients: &[ClientData], unseen_domain: u32) -> Result<()> {
    for c in clients {
        if let Some(&(d, i)) = c.sample_ids.iter().find(|(d, _)| *d == unseen_domain) {
            return Err(Error::Config(format!(
                "client {} holds sample {i} of unseen domain {d}",
                c.client_id
            )));
        }
    }
    Ok(())
}

/// Everything that changes from round to round.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub global: ModelParams,
    pub aggregation: AggregationState,
    /// One running pseudo-label threshold per client.
    pub thresholds: Vec<ThresholdState>,
    /// The client model of a local-only run, carried across rounds.
    pub local: Option<ModelParams>,
}

impl FederationState {
    pub fn new(fed: &Federation, cfg: &TrainingConfig, seed: u64) -> Result<Self> {
        let k = fed.clients.len();
        let total_steps = cfg.rounds * fed.steps_per_round;
        Ok(FederationState {
            global: fed.arch.init(seed),
            aggregation: AggregationState::new(k, cfg.rounds, cfg.d, cfg.min_weight)?,
            thresholds: vec![ThresholdState::from_config(cfg, total_steps); k],
            local: None,
        })
    }

    /// The model a local-only run evaluates, else the global model.
    pub fn evaluated(&self) -> &ModelParams {
        self.local.as_ref().unwrap_or(&self.global)
    }
}

/// Client seed for round `round`.
pub fn client_seed(run_seed: u64, client: usize, round: usize) -> u64 {
    seed::derive(run_seed, &[tag::CLIENT, client as u64, tag::ROUND, round as u64])
}

/// One synchronous round: every client trains from the global model, then the
/// server re-weights and averages.
pub fn run_round<E: Executor>(
    fed: &Federation,
    strategy: &Strategy,
    cfg: &TrainingConfig,
    state: &FederationState,
    round: usize,
    run_seed: u64,
    executor: &E,
) -> Result<(FederationState, Vec<ClientReport>)> {
    if round >= cfg.rounds {
        return Err(Error::Config(format!("round {round} out of range for R = {}", cfg.rounds)));
    }
    let hyper = LocalHyper::from_config(cfg, fed.steps_per_round);
    let plan = strategy.local_plan(cfg);
    let start = state.evaluated();
    let results = executor.map(fed.clients.len(), |i| {
        let c = &fed.clients[i];
        local_train_round(
            &fed.arch,
            start,
            c,
            &hyper,
            plan,
            &state.thresholds[i],
            client_seed(run_seed, c.client_id, round),
        )
    });
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    for r in &reports {
        if !r.gap.is_finite() {
            return Err(Error::NonFiniteGap { client: r.client_id });
        }
    }

    let mut next = FederationState {
        thresholds: reports.iter().map(|r| r.threshold.clone()).collect(),
        ..state.clone()
    };
    if strategy.local_only {
        next.local = Some(reports[0].updated_params.clone());
        return Ok((next, reports));
    }
    let gaps: Vec<f64> = reports.iter().map(|r| r.gap).collect();
    if strategy.use_gaa {
        next.aggregation = update_weights(&state.aggregation, &gaps)?;
    } else {
        let counts: Vec<usize> = reports.iter().map(|r| r.n_samples).collect();
        next.aggregation.weights = sample_count_weights(&counts)?;
        next.aggregation.round += 1;
    }
    let models: Vec<&ModelParams> = reports.iter().map(|r| &r.updated_params).collect();
    next.global = aggregate(&models, &next.aggregation.weights)?;
    Ok((next, reports))
}

/// Argmax masks of a model on a set of images.
pub fn segment(arch: &Architecture, params: &ModelParams, images: &[Image]) -> Result<Vec<Mask>> {
    let refs: Vec<&Image> = images.iter().collect();
    predict(arch, params, &refs)?
        .iter()
        .map(|p| Mask::new(arch.image_size, pseudo_label(p)))
        .collect()
}

fn evaluate_on(arch: &Architecture, params: &ModelParams, set: &LabeledSet) -> Result<Option<MetricReport>> {
    if set.images.is_empty() {
        return Ok(None);
    }
    let preds = segment(arch, params, &set.images)?;
    evaluate(&preds, &set.masks, arch.num_classes).map(Some)
}

/// Unseen-domain metrics after `round` completed rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Mean Dice on the held-out labeled images of the seen domains.
    pub validation_dice: Option<f64>,
}

/// Aggregation weights and reported gaps of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAggregation {
    pub round: usize,
    pub client_ids: Vec<usize>,
    pub gaps: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub strategy: String,
    pub unseen_domain: u32,
    pub seed: u64,
    pub run_seed: u64,
    pub rounds: usize,
    /// Labeled images per seen domain before the validation holdout.
    pub labels_per_domain: Vec<usize>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub history: Vec<RoundMetrics>,
    pub final_metrics: Option<MetricReport>,
    pub aggregation: Vec<RoundAggregation>,
    /// Fingerprint of the final evaluated parameters.
    pub fingerprint: Option<u64>,
}

impl ExperimentRecord {
    pub fn final_dice(&self) -> Option<f64> {
        self.final_metrics.as_ref().map(|m| m.dice)
    }

    /// Identifies the record within a suite.
    pub fn key(&self) -> String {
        let labels = self.labels_per_domain.first().copied().unwrap_or(0);
        format!("{}_u{}_l{}_s{}", self.strategy, self.unseen_domain, labels, self.seed)
    }
}

/// One step trace row tagged with its round and client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub client_id: usize,
    #[serde(flatten)]
    pub step: StepTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub record: ExperimentRecord,
    pub traces: Vec<TraceRow>,
    /// Final evaluated model, absent when the run failed.
    pub model: Option<(Architecture, ModelParams)>,
}

/// Trains `strategy` for `cfg.rounds` rounds, evaluating on the unseen domain
/// every `cfg.eval_every` rounds and at the end.
pub fn run_experiment<E: Executor>(
    task: &FederationTask,
    strategy: &Strategy,
    cfg: &TrainingConfig,
    seed_index: u64,
    run_seed: u64,
    executor: &E,
) -> Result<ExperimentOutcome> {
    let fed = prepare(task, strategy, cfg)?;
    let mut state = FederationState::new(&fed, cfg, run_seed)?;
    let mut history = Vec::new();
    let mut aggregation = Vec::new();
    let mut traces = Vec::new();
    let record_metrics = |round: usize, params: &ModelParams| -> Result<(RoundMetrics, MetricReport)> {
        let m = evaluate_on(&fed.arch, params, &fed.unseen)?.ok_or(Error::Empty("unseen domain"))?;
        let validation_dice = evaluate_on(&fed.arch, params, &fed.validation)?.map(|v| v.dice);
        Ok((
            RoundMetrics {
                round,
                dice: m.dice,
                jaccard: m.jaccard,
                hd95: m.hd95,
                asd: m.asd,
                validation_dice,
            },
            m,
        ))
    };

    for round in 0..cfg.rounds {
        let (next, reports) = run_round(&fed, strategy, cfg, &state, round, run_seed, executor)?;
        state = next;
        aggregation.push(RoundAggregation {
            round: round + 1,
            client_ids: reports.iter().map(|r| r.client_id).collect(),
            gaps: reports.iter().map(|r| r.gap).collect(),
            weights: state.aggregation.weights.clone(),
        });
        for r in reports {
            traces.extend(r.loss_trace.into_iter().map(|step| TraceRow {
                round: round + 1,
                client_id: r.client_id,
                step,
            }));
        }
        if (round + 1) % cfg.eval_every == 0 && round + 1 < cfg.rounds {
            history.push(record_metrics(round + 1, state.evaluated())?.0);
        }
    }
    let (last, final_metrics) = record_metrics(cfg.rounds, state.evaluated())?;
    history.push(last);

    let params = state.evaluated().clone();
    Ok(ExperimentOutcome {
        record: ExperimentRecord {
            strategy: strategy.name.clone(),
            unseen_domain: fed.unseen_domain,
            seed: seed_index,
            run_seed,
            rounds: cfg.rounds,
            labels_per_domain: task.seen.iter().map(|d| d.labeled.len()).collect(),
            status: RunStatus::Completed,
            error: None,
            history,
            final_metrics: Some(final_metrics),
            aggregation,
            fingerprint: Some(params.fingerprint()),
        },
        traces,
        model: Some((fed.arch, params)),
    })
}

/// One cell of a suite's strategy × unseen domain × label count × seed grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteJob {
    pub strategy: String,
    /// Position of the held-out domain in the task's domain list.
    pub unseen: usize,
    /// Per-domain labeled count, or `None` to keep the task's counts.
    pub label_count: Option<usize>,
    pub seed: u64,
}

/// Seed from which a seed index's task is generated.
pub fn task_seed(master: u64, seed_index: u64) -> u64 {
    seed::derive(master, &[tag::TASK, seed_index])
}

/// Seed of the training randomness of a seed index.
pub fn run_seed(master: u64, seed_index: u64) -> u64 {
    seed::derive(master, &[seed_index])
}

/// Expands a suite into jobs, strategies varying slowest and seeds fastest.
pub fn plan_suite(config: &Config) -> Vec<SuiteJob> {
    let counts: Vec<Option<usize>> = if config.suite.label_counts.is_empty() {
        vec![None]
    } else {
        config.suite.label_counts.iter().copied().map(Some).collect()
    };
    let mut jobs = Vec::new();
    for s in &config.suite.strategies {
        for &u in &config.unseen_domains() {
            for &c in &counts {
                for &seed in &config.suite.seeds {
                    jobs.push(SuiteJob {
                        strategy: s.clone(),
                        unseen: u,
                        label_count: c,
                        seed,
                    });
                }
            }
        }
    }
    jobs
}

/// Runs one suite job. Failures are returned as failed records.
pub fn run_job<E: Executor>(config: &Config, job: &SuiteJob, executor: &E) -> ExperimentOutcome {
    let unseen_domain = config.task.domains.get(job.unseen).map_or(u32::MAX, |d| d.domain_id);
    let rs = run_seed(config.suite.master_seed, job.seed);
    let result = (|| {
        let strategy = Strategy::by_name(&job.strategy)?;
        let task_cfg = match job.label_count {
            Some(n) => config.task.clone().with_labels_per_domain(n),
            None => config.task.clone(),
        };
        let task = make_task(&task_cfg, job.unseen, task_seed(config.suite.master_seed, job.seed))?;
        run_experiment(&task, &strategy, &config.training, job.seed, rs, executor)
    })();
    result.unwrap_or_else(|e| ExperimentOutcome {
        record: ExperimentRecord {
            strategy: job.strategy.clone(),
            unseen_domain,
            seed: job.seed,
            run_seed: rs,
            rounds: config.training.rounds,
            labels_per_domain: job.label_count.map(|n| vec![n]).unwrap_or_default(),
            status: RunStatus::Failed,
            error: Some(e.to_string()),
            history: Vec::new(),
            final_metrics: None,
            aggregation: Vec::new(),
            fingerprint: None,
        },
        traces: Vec::new(),
        model: None,
    })
}

/// Runs every job of a suite. Jobs are isolated: one failure does not stop
/// the others.
pub fn run_suite<E: Executor>(config: &Config, executor: &E) -> Result<Vec<ExperimentOutcome>> {
    config.validate()?;
    let jobs = plan_suite(config);
    Ok(executor.map(jobs.len(), |i| run_job(config, &jobs[i], executor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domainsim::TaskConfig;

    fn tiny_task_config() -> TaskConfig {
        let mut t = TaskConfig::desk_scale();
        for d in &mut t.domains {
            d.image_size = 8;
            d.n_labeled = 4;
            d.n_unlabeled = 4;
        }
        t.eval_size = 4;
        t
    }

    fn tiny_training() -> TrainingConfig {
        TrainingConfig {
            rounds: 2,
            eval_every: 1,
            batch_labeled: 2,
            batch_unlabeled: 2,
            widths: [2, 2, 2],
            lr: 1e-2,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn registry_entries_validate() {
        for name in Strategy::names() {
            Strategy::by_name(name).unwrap().validate().unwrap();
        }
        assert!(Strategy::by_name("nope").is_err());
        let bad = Strategy {
            labeled_only: true,
            ..Strategy::by_name("fl-upper").unwrap()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn plans_follow_flags() {
        let cfg = TrainingConfig::default();
        let plan = |n| Strategy::by_name(n).unwrap().local_plan(&cfg);
        assert_eq!(plan("fgasl").pseudo, PseudoLabeling::DualTeacher);
        assert!(plan("fgasl").use_pia);
        assert_eq!(plan("fl-lower").pseudo, PseudoLabeling::Off);
        assert_eq!(plan("fl-upper").pseudo, PseudoLabeling::Off);
        assert_eq!(
            plan("fedavg-fixmatch").pseudo,
            PseudoLabeling::SingleTeacher { confidence: 0.95 }
        );
    }

    #[test]
    fn preparation_holds_out_and_audits() {
        let task = make_task(&tiny_task_config().with_labels_per_domain(10), 3, 1).unwrap();
        let cfg = tiny_training();
        let fed = prepare(&task, &Strategy::by_name("fgasl").unwrap(), &cfg).unwrap();
        assert_eq!(fed.clients.len(), 3);
        assert!(fed.clients.iter().all(|c| c.labeled_images.len() == 9 && c.unlabeled_images.len() == 4));
        assert_eq!(fed.validation.images.len(), 3);
        assert_eq!(fed.steps_per_round, 5);
        let lower = prepare(&task, &Strategy::by_name("fl-lower").unwrap(), &cfg).unwrap();
        assert!(lower.clients.iter().all(|c| c.unlabeled_images.is_empty()));
        assert_eq!(lower.steps_per_round, fed.steps_per_round);
        let upper = prepare(&task, &Strategy::by_name("fl-upper").unwrap(), &cfg).unwrap();
        assert!(upper.clients.iter().all(|c| c.labeled_images.len() == 13));
        let local = prepare(&task, &Strategy::by_name("local-fixmatch").unwrap(), &cfg).unwrap();
        assert_eq!(local.clients.len(), 1);

        let mut leaked = fed.clients.clone();
        leaked[1].sample_ids.push((fed.unseen_domain, 0));
        assert!(audit(&leaked, fed.unseen_domain).is_err());
    }

    #[test]
    fn fedavg_equal_clients_get_uniform_weights() {
        let task = make_task(&tiny_task_config(), 0, 2).unwrap();
        let cfg = tiny_training();
        let strategy = Strategy::by_name("fedavg-fixmatch").unwrap();
        let fed = prepare(&task, &strategy, &cfg).unwrap();
        let state = FederationState::new(&fed, &cfg, 3).unwrap();
        let (next, reports) = run_round(&fed, &strategy, &cfg, &state, 0, 3, &Sequential).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(next.aggregation.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn local_only_keeps_global() {
        let task = make_task(&tiny_task_config(), 0, 2).unwrap();
        let cfg = tiny_training();
        let strategy = Strategy::by_name("local-labeled").unwrap();
        let fed = prepare(&task, &strategy, &cfg).unwrap();
        let state = FederationState::new(&fed, &cfg, 3).unwrap();
        let (next, _) = run_round(&fed, &strategy, &cfg, &state, 0, 3, &Sequential).unwrap();
        assert_eq!(next.global, state.global);
        assert_ne!(next.evaluated(), &state.global);
    }

    #[test]
    fn round_index_is_checked() {
        let task = make_task(&tiny_task_config(), 0, 2).unwrap();
        let cfg = tiny_training();
        let strategy = Strategy::by_name("fl-lower").unwrap();
        let fed = prepare(&task, &strategy, &cfg).unwrap();
        let state = FederationState::new(&fed, &cfg, 3).unwrap();
        assert!(run_round(&fed, &strategy, &cfg, &state, 2, 3, &Sequential).is_err());
    }

    #[test]
    fn zero_rounds_evaluates_initial_model() {
        let task = make_task(&tiny_task_config(), 0, 2).unwrap();
        let cfg = TrainingConfig {
            rounds: 0,
            ..tiny_training()
        };
        let out = run_experiment(&task, &Strategy::by_name("fgasl").unwrap(), &cfg, 0, 9, &Sequential).unwrap();
        let arch = cfg.architecture(&tiny_task_config()).unwrap();
        assert_eq!(out.record.fingerprint, Some(arch.init(9).fingerprint()));
        assert_eq!(out.record.history.len(), 1);
        assert_eq!(out.record.history[0].round, 0);
    }

    #[test]
    fn suite_expands_and_isolates_failures() {
        let mut config = Config {
            task: tiny_task_config(),
            training: TrainingConfig {
                rounds: 1,
                ..tiny_training()
            },
            ..Config::default()
        };
        config.suite.strategies = vec!["fl-lower".into(), "missing".into()];
        config.suite.seeds = vec![0, 1, 2];
        assert_eq!(plan_suite(&config).len(), 2 * 4 * 3);
        config.suite.unseen = vec![1];
        config.suite.seeds = vec![0];
        let out = run_suite(&config, &Sequential).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].record.status, RunStatus::Completed);
        assert_eq!(out[1].record.status, RunStatus::Failed);
        assert!(out[1].record.error.as_ref().unwrap().contains("missing"));
    }

    #[test]
    fn seeds_do_not_depend_on_strategy() {
        assert_eq!(run_seed(5, 1), run_seed(5, 1));
        assert_ne!(run_seed(5, 1), run_seed(5, 2));
        assert_ne!(task_seed(5, 1), run_seed(5, 1));
    }
}
