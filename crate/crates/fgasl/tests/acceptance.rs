//! Acceptance checks. Each test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows up in plain `cargo test` output) and then
//! asserts on the same condition.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fgasl::core::config::Config;
use fgasl::core::domainsim::{make_task, TaskConfig};
use fgasl::core::dualteacher::{
    entropy_map, fuse_predictions, fused_uncertainty, labeled_quantile_threshold, local_train_round,
    pseudo_label, update_threshold, LocalHyper, ThresholdState,
};
use fgasl::core::evalmetrics::{asd, dice, hd95, jaccard};
use fgasl::core::gaa::{kl_divergence, predictive_kl_gap, reweight, update_weights, AggregationState};
use fgasl::core::orchestrator::{prepare, run_job, run_suite, ExperimentRecord, Strategy, SuiteJob};
use fgasl::core::segnet::{gradient, predict_batch, Architecture, ModelParams, Tape};
use fgasl::core::seed;
use fgasl::core::tensor::{Image, Mask, Tensor};
use fgasl::exec::Parallel;
use fgasl::results::{run_suite_to_dir, ResultsDir};

const ACCEPTANCE_CONFIG: &str = include_str!("../../../configs/acceptance.json");

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n} [{tag}] {title}: {detail}");
    assert!(pass, "criterion {n} failed: {detail}");
}

/// splitmix64, enough randomness for choosing test inputs.
struct Mix(u64);

impl Mix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

// ---- gradients ----

#[derive(Clone, Copy, Debug)]
enum Term {
    Supervised,
    Unsupervised,
    Perturbation,
}

struct GradCase {
    arch: Architecture,
    images: Tensor,
    labels: Vec<u8>,
    weights: Vec<f64>,
    dropout_seed: u64,
}

impl GradCase {
    fn new(seed: u64) -> Self {
        let arch = Architecture::small(8, 3);
        let mut rng = Mix(seed);
        let n = 2 * 64;
        let images = Tensor::from_vec([2, 1, 8, 8], (0..n).map(|_| rng.unit()).collect()).unwrap();
        let labels = (0..n).map(|_| rng.below(3) as u8).collect();
        let mut weights: Vec<f64> = (0..n).map(|_| f64::from(rng.unit() < 0.6)).collect();
        weights[0] = 1.0;
        GradCase {
            arch,
            images,
            labels,
            weights,
            dropout_seed: seed,
        }
    }

    fn eval(&self, params: &ModelParams, term: Term) -> (f64, Vec<f64>) {
        gradient(&self.arch, params, |tape: &mut Tape<'_>| {
            let x = tape.input(self.images.clone());
            match term {
                Term::Supervised => {
                    let mut none = seed::rng(0, &[]);
                    let out = tape.forward(x, None::<f64>.map(|p| (p, &mut none)))?;
                    tape.seg_loss(out.probs, self.labels.clone(), vec![1.0; self.labels.len()], 1.0)
                }
                Term::Unsupervised => {
                    let mut none = seed::rng(0, &[]);
                    let out = tape.forward(x, None::<f64>.map(|p| (p, &mut none)))?;
                    tape.seg_loss(out.probs, self.labels.clone(), self.weights.clone(), 1.0)
                }
                Term::Perturbation => {
                    let mut drop = seed::rng(self.dropout_seed, &[1]);
                    let out = tape.forward(x, Some((0.3, &mut drop)))?;
                    tape.mean_sq_diff(out.probs, out.probs_perturbed.expect("requested"))
                }
            }
        })
        .unwrap()
    }
}

/// Largest relative error over 50 random coordinates, with central
/// differences of step `h` and denominators floored at `floor`.
fn max_relative_error(seed: u64, term: Term) -> f64 {
    const H: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let case = GradCase::new(seed);
    let params = case.arch.init(seed);
    let (_, analytic) = case.eval(&params, term);
    let mut rng = Mix(seed ^ 0xA5A5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.below(params.len());
        let mut plus = params.clone();
        plus.values_mut()[i] += H;
        let mut minus = params.clone();
        minus.values_mut()[i] -= H;
        let numeric = (case.eval(&plus, term).0 - case.eval(&minus, term).0) / (2.0 * H);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn c1_gradient_suite() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for term in [Term::Supervised, Term::Unsupervised, Term::Perturbation] {
        let e = (1..=3).map(|s| max_relative_error(s, term)).fold(0.0, f64::max);
        parts.push(format!("{term:?} {e:.2e}"));
        worst = worst.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 60.0;
    verdict(1, "gradient suite", pass, &format!("max rel err {} (tol 1e-4), {secs:.1}s", parts.join(", ")));
}

// ---- aggregation ----

fn reference_weights(prev: &[f64], gaps: &[f64], dr: f64, floor: f64) -> Vec<f64> {
    let mu = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let mut max_dev = f64::NEG_INFINITY;
    for g in gaps {
        max_dev = max_dev.max(g - mu);
    }
    if gaps.iter().all(|g| *g == gaps[0]) {
        return prev.to_vec();
    }
    let raw: Vec<f64> = (0..gaps.len()).map(|i| ((gaps[i] - mu) * dr / max_dev + prev[i]).max(floor)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|a| a / total).collect()
}

#[test]
fn c2_aggregation_oracle_suite() {
    let mut rng = Mix(2024);
    let mut max_diff: f64 = 0.0;
    let mut invariants = true;
    for _ in 0..200 {
        let k = 2 + rng.below(5);
        let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.unit()).collect();
        let s: f64 = raw.iter().sum();
        let prev: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let gaps: Vec<f64> = (0..k).map(|_| rng.unit()).collect();
        let total = 2 + rng.below(100);
        let round = rng.below(total);
        let d = 0.01 + 0.4 * rng.unit();
        let mut state = AggregationState::new(k, total, d, 1e-3).unwrap();
        state.weights = prev.clone();
        state.round = round;
        let got = update_weights(&state, &gaps).unwrap();
        let dr = (1.0 - (round + 1) as f64 / total as f64) * d;
        let want = reference_weights(&prev, &gaps, dr, 1e-3);
        for (a, b) in got.weights.iter().zip(&want) {
            max_diff = max_diff.max((a - b).abs());
        }
        // Simplex, and pre-clamp direction of the largest and smallest gaps.
        let sum: f64 = got.weights.iter().sum();
        invariants &= (sum - 1.0).abs() <= 1e-9 && got.weights.iter().all(|&w| w > 0.0);
        let mu = gaps.iter().sum::<f64>() / k as f64;
        let hi = (0..k).max_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
        let lo = (0..k).min_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
        invariants &= gaps[hi] - mu >= 0.0 && gaps[lo] - mu <= 0.0;
        // Equal gaps leave the weights exactly as they were.
        invariants &= update_weights(&state, &vec![gaps[0]; k]).unwrap().weights == prev;
    }
    // Clamp: a raw weight below the floor is raised to it before normalizing.
    let clamp = reweight(&[0.05, 0.95], &[0.0, 1.0], 0.2, 1e-3).unwrap();
    let clamp_ok = (clamp[0] - 0.001 / 1.151).abs() < 1e-12
        && (clamp[1] - 1.15 / 1.151).abs() < 1e-12
        && (clamp[0] - 0.000869).abs() < 5e-7
        && (clamp[1] - 0.999131).abs() < 5e-7;
    let three = reweight(&[1.0 / 3.0; 3], &[0.3, 0.1, 0.2], 0.1, 1e-3).unwrap();
    let three_ok = three
        .iter()
        .zip([0.43333333333333335, 0.23333333333333334, 1.0 / 3.0])
        .all(|(a, b)| (a - b).abs() < 1e-12);
    let pass = max_diff <= 1e-12 && invariants && clamp_ok && three_ok;
    verdict(
        2,
        "aggregation oracle suite",
        pass,
        &format!(
            "200 instances max |diff| {max_diff:.1e} (tol 1e-12), invariants {invariants}, worked examples {}",
            clamp_ok && three_ok
        ),
    );
}

// ---- predictive gap ----

/// Parameters that predict `probs` at every pixel regardless of the input.
fn constant_model(arch: &Architecture, probs: &[f64]) -> ModelParams {
    let mut p = arch.init(0);
    p.values_mut().fill(0.0);
    let bias = p.manifest().layer("head.bias").unwrap().clone();
    for (c, &v) in probs.iter().enumerate() {
        p.values_mut()[bias.offset + c] = v.ln();
    }
    p
}

#[test]
fn c3_predictive_gap_suite() {
    let arch = Architecture::small(8, 3);
    let mut rng = Mix(3);
    let images: Vec<Image> = (0..4).map(|_| Image::new(8, (0..64).map(|_| rng.unit()).collect()).unwrap()).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let mut identical_zero = true;
    let mut min_gap = f64::INFINITY;
    for s in 0..20 {
        let a = arch.init(s);
        let b = arch.init(s + 100);
        identical_zero &= predictive_kl_gap(&arch, &a, &a, &refs).unwrap() == 0.0;
        min_gap = min_gap.min(predictive_kl_gap(&arch, &a, &b, &refs).unwrap());
    }
    for _ in 0..1000 {
        let p: Vec<f64> = (0..3).map(|_| rng.unit()).collect();
        let q: Vec<f64> = (0..3).map(|_| rng.unit() * rng.unit()).collect();
        let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
        let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
        let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
        min_gap = min_gap.min(kl_divergence(&p, &q));
    }
    let arch2 = Architecture::small(8, 2);
    let global = constant_model(&arch2, &[0.5, 0.5]);
    let local = constant_model(&arch2, &[0.9, 0.1]);
    let one = Image::new(8, vec![0.5; 64]).unwrap();
    let hand = predictive_kl_gap(&arch2, &global, &local, &[&one]).unwrap();
    let closed = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    let pass = identical_zero && min_gap >= -1e-9 && (hand - 0.510826).abs() <= 1e-6 && (hand - closed).abs() <= 1e-6;
    verdict(
        3,
        "predictive gap suite",
        pass,
        &format!("identical -> 0: {identical_zero}, min gap {min_gap:.3e} (>= -1e-9), hand case {hand:.7} (0.510826 +- 1e-6)"),
    );
}

// ---- dual teacher ----

#[test]
fn c4_dual_teacher_suite() {
    // Threshold smoothing against its closed form.
    let mut ema_err: f64 = 0.0;
    for &(v, pi, n) in &[(0.7, 0.9, 1usize), (0.7, 0.9, 25), (1.3, 0.5, 10), (0.2, 0.99, 300)] {
        let mut s = ThresholdState::new(pi, 0.15, 0.3, n, 1e-8).with_initial(0.0);
        for _ in 0..n {
            s = update_threshold(&s, v);
        }
        ema_err = ema_err.max((s.t_un - v * (1.0 - f64::powi(pi, n as i32))).abs());
    }

    // Fraction of labeled pixels under the quantile threshold against δ(step).
    let arch = Architecture::small(16, 3);
    let mut rng = Mix(4);
    let batch = Tensor::from_vec([4, 1, 16, 16], (0..4 * 256).map(|_| rng.unit()).collect()).unwrap();
    let mut state = ThresholdState::new(0.9, 0.15, 0.3, 20, 1e-8);
    let mut track_err: f64 = 0.0;
    let mut order_step = 0.0;
    let mut fusion_ok = true;
    for step in 0..20 {
        let probs = predict_batch(&arch, &arch.init(step), &batch).unwrap();
        let ent = entropy_map(&probs, state.epsilon);
        let t_lb = labeled_quantile_threshold(&ent, &state).unwrap();
        let frac = ent.iter().filter(|&&e| e <= t_lb).count() as f64 / ent.len() as f64;
        order_step = 1.0 / ent.len() as f64;
        track_err = track_err.max((frac - state.delta()).abs());
        state = update_threshold(&state, t_lb);

        // Equal teachers: fusion is the identity element-wise.
        let fused = fuse_predictions(&probs, &probs).unwrap();
        fusion_ok &= fused.data() == probs.data()
            && fused_uncertainty(&probs, &probs, 1e-8).unwrap() == ent
            && pseudo_label(&fused) == pseudo_label(&probs);
    }

    // A client round leaves the global model, which seeds the static
    // teacher, untouched while the student moves.
    let mut task_cfg = TaskConfig::desk_scale();
    for d in &mut task_cfg.domains {
        d.n_labeled = 4;
        d.n_unlabeled = 8;
    }
    let task = make_task(&task_cfg, 3, 11).unwrap();
    let cfg = Config::default().training;
    let fgasl = Strategy::by_name("fgasl").unwrap();
    let fed = prepare(&task, &fgasl, &cfg).unwrap();
    let global = fed.arch.init(5);
    let before = global.fingerprint();
    let hyper = LocalHyper::from_config(&cfg, 3);
    let report = local_train_round(
        &fed.arch,
        &global,
        &fed.clients[0],
        &hyper,
        fgasl.local_plan(&cfg),
        &ThresholdState::from_config(&cfg, 3),
        9,
    )
    .unwrap();
    let static_ok = global.fingerprint() == before && report.updated_params.fingerprint() != before;

    let pass = ema_err <= 1e-9 && track_err <= order_step && fusion_ok && static_ok;
    verdict(
        4,
        "dual-teacher suite",
        pass,
        &format!(
            "EMA closed-form err {ema_err:.1e} (tol 1e-9), acceptance-vs-delta err {track_err:.2e} (tol {order_step:.2e}), equal-teacher fusion {fusion_ok}, static teacher unchanged {static_ok}"
        ),
    );
}

// ---- metrics ----

fn blob_mask(rng: &mut Mix, size: usize) -> Mask {
    let mut m = Mask::empty(size);
    for class in 1..3u8 {
        for _ in 0..2 {
            let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
            let (y0, x0) = (2 + rng.below(size - 12), 2 + rng.below(size - 12));
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    m.set(y, x, class);
                }
            }
        }
    }
    m
}

fn shifted(m: &Mask, dy: usize, dx: usize) -> Mask {
    let s = m.size();
    let mut out = Mask::empty(s);
    for y in 0..s - dy {
        for x in 0..s - dx {
            out.set(y + dy, x + dx, m.get(y, x));
        }
    }
    out
}

#[test]
fn c5_metric_suite() {
    let mut rng = Mix(5);
    let mut identity_err: f64 = 0.0;
    let mut symmetric = true;
    let mut translation = true;
    for _ in 0..100 {
        let a = blob_mask(&mut rng, 32);
        let b = blob_mask(&mut rng, 32);
        let (dy, dx) = (rng.below(2), rng.below(2));
        let (a2, b2) = (shifted(&a, dy, dx), shifted(&b, dy, dx));
        for class in 1..3 {
            let d = dice(&a, &b, class).unwrap();
            let j = jaccard(&a, &b, class).unwrap();
            identity_err = identity_err.max((j - d / (2.0 - d)).abs());
            for f in [hd95, asd] {
                let v = f(&a, &b, class).unwrap();
                symmetric &= v.to_bits() == f(&b, &a, class).unwrap().to_bits();
                translation &= v.to_bits() == f(&a2, &b2, class).unwrap().to_bits();
            }
        }
    }
    let mut p = Mask::empty(4);
    p.set(0, 0, 1);
    p.set(0, 1, 1);
    let mut g = Mask::empty(4);
    g.set(0, 0, 1);
    let hand_overlap = (dice(&p, &g, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12 && jaccard(&p, &g, 1).unwrap() == 0.5;
    let mut p = Mask::empty(4);
    p.set(0, 0, 1);
    let mut g = Mask::empty(4);
    g.set(3, 0, 1);
    let hand_distance = hd95(&p, &g, 1).unwrap() == 3.0 && asd(&p, &g, 1).unwrap() == 3.0;
    let pass = identity_err <= 1e-12 && symmetric && translation && hand_overlap && hand_distance;
    verdict(
        5,
        "metric suite",
        pass,
        &format!(
            "Dice-Jaccard err {identity_err:.1e} (tol 1e-12), symmetry {symmetric}, translation {translation}, hand examples {}",
            hand_overlap && hand_distance
        ),
    );
}

// ---- end to end ----

fn acceptance_config() -> Config {
    serde_json::from_str(ACCEPTANCE_CONFIG).expect("acceptance config parses")
}

struct SuiteRun {
    records: Vec<ExperimentRecord>,
    elapsed: Duration,
}

fn run(config: &Config) -> SuiteRun {
    let start = Instant::now();
    let exec = Parallel::new(None).unwrap();
    let records = run_suite(config, &exec).unwrap().into_iter().map(|o| o.record).collect();
    SuiteRun {
        records,
        elapsed: start.elapsed(),
    }
}

fn main_suite() -> &'static SuiteRun {
    static RUN: OnceLock<SuiteRun> = OnceLock::new();
    RUN.get_or_init(|| run(&acceptance_config()))
}

fn label_suite() -> &'static SuiteRun {
    static RUN: OnceLock<SuiteRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut config = acceptance_config();
        config.suite.strategies = vec!["fgasl".into()];
        config.suite.label_counts = vec![5, 20];
        run(&config)
    })
}

fn mean_dice<'a>(records: impl IntoIterator<Item = &'a ExperimentRecord>) -> f64 {
    let v: Vec<f64> = records.into_iter().map(|r| r.final_dice().expect("completed run")).collect();
    assert!(!v.is_empty());
    v.iter().sum::<f64>() / v.len() as f64
}

fn strategy_mean(records: &[ExperimentRecord], name: &str) -> f64 {
    mean_dice(records.iter().filter(|r| r.strategy == name))
}

/// The budget is stated for four cores; scale it to the cores available.
fn time_budget() -> Duration {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    Duration::from_secs(30 * 60 * 4 / cores as u64)
}

#[test]
fn c6_directional_replication() {
    let suite = main_suite();
    let failed: Vec<_> = suite.records.iter().filter(|r| r.final_dice().is_none()).map(|r| r.key()).collect();
    assert!(failed.is_empty(), "failed runs: {failed:?}");
    let m = |s| strategy_mean(&suite.records, s);
    let (lower, upper, fixmatch, full) = (m("fl-lower"), m("fl-upper"), m("fedavg-fixmatch"), m("fgasl"));
    let ablations = [("gaa-only", m("gaa-only")), ("dr-only", m("dr-only")), ("pia-only", m("pia-only"))];
    let bracket = lower <= full && full <= upper;
    let margin = full - fixmatch >= 0.02;
    let components = ablations.iter().all(|&(_, v)| full >= v);
    let budget = time_budget();
    let in_time = suite.elapsed <= budget;
    let abl: Vec<String> = ablations.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
    verdict(
        6,
        "directional replication",
        bracket && margin && components && in_time,
        &format!(
            "mean unseen Dice: fl-lower {lower:.4} <= fgasl {full:.4} <= fl-upper {upper:.4} ({bracket}); \
             fgasl - fedavg-fixmatch {:.2} pts >= 2 ({margin}); ablations {} ({components}); \
             {:.0}s of {:.0}s budget",
            100.0 * (full - fixmatch),
            abl.join(", "),
            suite.elapsed.as_secs_f64(),
            budget.as_secs_f64()
        ),
    );
}

#[test]
fn c7_label_count_sweep() {
    let ten = main_suite().records.iter().filter(|r| r.strategy == "fgasl");
    let sweep = &label_suite().records;
    let at = |n: usize| mean_dice(sweep.iter().filter(|r| r.labels_per_domain.iter().all(|&c| c == n)));
    let (five, ten, twenty) = (at(5), mean_dice(ten), at(20));
    let pass = five <= ten && ten <= twenty;
    verdict(
        7,
        "label-count sweep",
        pass,
        &format!("fgasl mean unseen Dice at 5/10/20 labels: {five:.4} <= {ten:.4} <= {twenty:.4}"),
    );
}

fn dir_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["records", "traces", "checkpoints"] {
        let mut entries: Vec<_> = std::fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn c8_determinism() {
    // A small suite written twice, compared file by file.
    let mut config = acceptance_config();
    config.suite.strategies = vec!["fgasl".into(), "fedavg-fixmatch".into()];
    config.suite.seeds = vec![0, 1];
    config.training.rounds = 2;
    config.training.eval_every = 1;
    let tmp = tempfile::tempdir().unwrap();
    let exec = Parallel::new(None).unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let dir = ResultsDir::new(tmp.path().join(name));
        run_suite_to_dir(&config, &dir, &exec).unwrap();
        trees.push(dir_bytes(&dir.root));
    }
    let files = trees[0].len();
    let same_files = files > 0 && trees[0] == trees[1];

    // One job of the full suite rerun on its own, against the suite's record.
    let full = acceptance_config();
    let job = SuiteJob {
        strategy: "fl-lower".into(),
        unseen: full.suite.unseen[0],
        label_count: None,
        seed: full.suite.seeds[0],
    };
    let again = run_job(&full, &job, &exec).record;
    let original = main_suite()
        .records
        .iter()
        .find(|r| r.key() == again.key())
        .expect("job in suite");
    let same_record = serde_json::to_string(original).unwrap() == serde_json::to_string(&again).unwrap();
    verdict(
        8,
        "determinism",
        same_files && same_record,
        &format!("{files} result files identical across reruns: {same_files}; rerun of {} identical: {same_record}", again.key()),
    );
}
