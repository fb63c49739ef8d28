//! Client-side local training.
//!
//! Each step combines three losses on the student:
//!
//! * `l_s`: cross-entropy plus Dice on a weakly augmented labeled batch;
//! * `l_u`: the same loss between pseudo-labels and the student's prediction
//!   on a strongly augmented view of a weakly augmented unlabeled batch,
//!   restricted to accepted pixels;
//! * `l_perturb`: mean squared difference between the clean decode and a
//!   decode from channel-dropped encoder features, on both batches.
//!
//! With dual-teacher refinement the pseudo-labels come from the average of a
//! frozen copy of the round's global model and an EMA of the student, and a
//! pixel is accepted when the mean of the two teachers' entropies is at most
//! a running threshold. That threshold is an exponential moving average of
//! a ramped quantile of the student's entropies on the labeled batch.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FilterGranularity, TrainingConfig};
use crate::evalmetrics::quantile_sorted;
use crate::gaa::predictive_kl_gap;
use crate::math;
use crate::segnet::{predict_batch, Adam, Architecture, ForwardOutput, ModelParams, StrongTransform, Tape, WeakTransform};
use crate::seed::{self, tag};
use crate::tensor::{Image, Mask, Tensor};
use crate::{Error, Result};

/// The frozen and EMA teachers of one client round.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub static_params: ModelParams,
    pub dynamic_params: ModelParams,
    pub ema_decay: f64,
}

impl TeacherState {
    /// Both teachers start from the round's global model.
    pub fn new(global: &ModelParams, ema_decay: f64) -> Self {
        TeacherState {
            static_params: global.clone(),
            dynamic_params: global.clone(),
            ema_decay,
        }
    }

    /// `θ_d ← π₁·θ_d + (1 − π₁)·θ_student`.
    pub fn ema_update(&mut self, student: &ModelParams) -> Result<()> {
        self.dynamic_params.check_compatible(student)?;
        let pi = self.ema_decay;
        if pi == 0.0 {
            self.dynamic_params.values_mut().copy_from_slice(student.values());
            return Ok(());
        }
        // Written as a step toward the student so that equal inputs are a
        // fixed point in floating point too.
        for (d, s) in self.dynamic_params.values_mut().iter_mut().zip(student.values()) {
            *d += (1.0 - pi) * (s - *d);
        }
        Ok(())
    }
}

/// Element-wise mean of two distribution maps.
pub fn fuse_predictions(p_static: &Tensor, p_dynamic: &Tensor) -> Result<Tensor> {
    if p_static.shape() != p_dynamic.shape() {
        return Err(Error::dims(p_static.shape(), p_dynamic.shape()));
    }
    let data = p_static
        .data()
        .iter()
        .zip(p_dynamic.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Tensor::from_vec(p_static.shape(), data)
}

/// Per-pixel argmax in `[batch, h, w]` order; ties go to the lowest class.
pub fn pseudo_label(p: &Tensor) -> Vec<u8> {
    let [n, c, h, w] = p.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let item = p.item(b);
        for i in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if item[ch * plane + i] > item[best * plane + i] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Per-pixel largest class probability.
fn max_prob(p: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = p.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let item = p.item(b);
        for i in 0..plane {
            out.push((0..c).map(|ch| item[ch * plane + i]).fold(0.0, f64::max));
        }
    }
    out
}

/// Per-pixel `−Σ_c p_c ln(p_c + ε)` in `[batch, h, w]` order.
pub fn entropy_map(p: &Tensor, epsilon: f64) -> Vec<f64> {
    let [n, c, h, w] = p.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let item = p.item(b);
        for i in 0..plane {
            let mut e = 0.0;
            for ch in 0..c {
                let v = item[ch * plane + i];
                e -= v * math::ln(v + epsilon);
            }
            out.push(e);
        }
    }
    out
}

/// Mean of the two teachers' per-pixel entropies.
pub fn fused_uncertainty(p_static: &Tensor, p_dynamic: &Tensor, epsilon: f64) -> Result<Vec<f64>> {
    if p_static.shape() != p_dynamic.shape() {
        return Err(Error::dims(p_static.shape(), p_dynamic.shape()));
    }
    let a = entropy_map(p_static, epsilon);
    let b = entropy_map(p_dynamic, epsilon);
    Ok(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
}

/// Running uncertainty threshold and its quantile schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub t_un: f64,
    /// Exponential smoothing factor.
    pub smoothing: f64,
    pub delta_start: f64,
    pub delta_end: f64,
    pub step: usize,
    pub total_steps: usize,
    pub epsilon: f64,
    /// False until the first update, which adopts its target directly.
    pub initialized: bool,
}

impl ThresholdState {
    pub fn new(smoothing: f64, delta_start: f64, delta_end: f64, total_steps: usize, epsilon: f64) -> Self {
        ThresholdState {
            t_un: 0.0,
            smoothing,
            delta_start,
            delta_end,
            step: 0,
            total_steps,
            epsilon,
            initialized: false,
        }
    }

    /// A state whose next update smooths from `t_un`.
    pub fn with_initial(mut self, t_un: f64) -> Self {
        self.t_un = t_un;
        self.initialized = true;
        self
    }

    pub fn from_config(cfg: &TrainingConfig, total_steps: usize) -> Self {
        Self::new(cfg.pi2, cfg.delta_start, cfg.delta_end, total_steps, cfg.entropy_epsilon)
    }

    /// Quantile level at the current step, ramped linearly.
    pub fn delta(&self) -> f64 {
        let frac = if self.total_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.total_steps as f64).min(1.0)
        };
        self.delta_start + (self.delta_end - self.delta_start) * frac
    }
}

/// The `δ(step)`-quantile of the labeled batch's entropies.
pub fn labeled_quantile_threshold(entropies: &[f64], state: &ThresholdState) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::Empty("labeled entropies"));
    }
    let mut v = entropies.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, state.delta()).expect("non-empty"))
}

/// `T_un ← π₂·T_un + (1 − π₂)·T_lb` and advances the step counter.
pub fn update_threshold(state: &ThresholdState, t_lb: f64) -> ThresholdState {
    let t_lb = t_lb.max(0.0);
    let t_un = if state.initialized {
        state.smoothing * state.t_un + (1.0 - state.smoothing) * t_lb
    } else {
        t_lb
    };
    ThresholdState {
        t_un: t_un.max(0.0),
        step: state.step + 1,
        initialized: true,
        ..state.clone()
    }
}

/// Pixels whose uncertainty is at most `t_un`. With image granularity an
/// image is accepted or rejected as a whole by its mean uncertainty.
pub fn acceptance_mask(uncertainty: &[f64], t_un: f64, granularity: FilterGranularity, plane: usize) -> Vec<bool> {
    match granularity {
        FilterGranularity::Pixel => uncertainty.iter().map(|&u| u <= t_un).collect(),
        FilterGranularity::Image => uncertainty
            .chunks(plane)
            .flat_map(|img| {
                let ok = img.iter().sum::<f64>() / img.len() as f64 <= t_un;
                core::iter::repeat_n(ok, img.len())
            })
            .collect(),
    }
}

/// Consistency loss between pseudo-labels and the student's prediction on the
/// strong view, over accepted pixels only.
pub fn unsupervised_loss(pseudo_labels: &[u8], accept: &[bool], probs_strong: &Tensor, eta: f64) -> Result<f64> {
    let weights: Vec<f64> = accept.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    Ok(crate::segnet::loss::masked_seg_loss(probs_strong, pseudo_labels, &weights)?.total(eta))
}

/// Alignment loss between clean and perturbed decodes of a labeled and an
/// unlabeled batch.
pub fn perturbation_loss(labeled: &ForwardOutput, unlabeled: &ForwardOutput) -> Result<f64> {
    let mut total = 0.0;
    for out in [labeled, unlabeled] {
        let pert = out.probs_perturbed.as_ref().ok_or(Error::MissingPerturbation)?;
        total += crate::segnet::loss::mean_sq_diff(out.probs.data(), pert.data());
    }
    Ok(total)
}

/// How pseudo-labels are produced for unlabeled images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PseudoLabeling {
    /// No unlabeled loss.
    Off,
    /// EMA teacher alone, accepting pixels whose top probability reaches
    /// `confidence`.
    SingleTeacher { confidence: f64 },
    /// Static plus dynamic teacher with the adaptive entropy threshold.
    DualTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPlan {
    pub pseudo: PseudoLabeling,
    pub use_pia: bool,
}

/// Local hyperparameters of one client round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub pi1: f64,
    pub eta: f64,
    pub dropout_p: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub granularity: FilterGranularity,
    pub steps: usize,
}

impl LocalHyper {
    pub fn from_config(cfg: &TrainingConfig, steps: usize) -> Self {
        LocalHyper {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            pi1: cfg.pi1,
            eta: cfg.eta,
            dropout_p: cfg.dropout_p,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            batch_labeled: cfg.batch_labeled,
            batch_unlabeled: cfg.batch_unlabeled,
            granularity: cfg.filter,
            steps,
        }
    }
}

/// The training data a client may see: labeled pairs and unlabeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub domain_id: u32,
    pub labeled_images: Vec<Image>,
    pub labeled_masks: Vec<Mask>,
    pub unlabeled_images: Vec<Image>,
    /// `(domain id, sample index)` of every training sample, for audits.
    pub sample_ids: Vec<(u32, usize)>,
}

impl ClientData {
    pub fn n_samples(&self) -> usize {
        self.labeled_images.len() + self.unlabeled_images.len()
    }

    fn all_images(&self) -> Vec<&Image> {
        self.labeled_images.iter().chain(&self.unlabeled_images).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub perturbation: f64,
    pub accepted_fraction: f64,
    pub t_un: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub updated_params: ModelParams,
    /// Mean predictive KL between the round's global model and the update.
    pub gap: f64,
    pub n_samples: usize,
    pub loss_trace: Vec<StepTrace>,
    pub threshold: ThresholdState,
}

/// Cycles through shuffled indices; draws with replacement when the pool is
/// smaller than the batch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let n = self.order.len();
        if n < batch {
            return (0..batch).map(|_| self.rng.random_range(0..n)).collect();
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == n {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `hyper.steps` optimizer steps from `global` and reports the updated
/// model and its predictive gap.
pub fn local_train_round(
    arch: &Architecture,
    global: &ModelParams,
    data: &ClientData,
    hyper: &LocalHyper,
    plan: LocalPlan,
    threshold: &ThresholdState,
    seed: u64,
) -> Result<ClientReport> {
    arch.check_params(global)?;
    if data.labeled_images.is_empty() {
        return Err(Error::Empty("client has no labeled images"));
    }
    if data.labeled_images.len() != data.labeled_masks.len() {
        return Err(Error::dims(data.labeled_images.len(), data.labeled_masks.len()));
    }
    let abort = |e: Error| Error::ClientAborted {
        client: data.client_id,
        reason: e.to_string(),
    };

    let ssl = plan.pseudo != PseudoLabeling::Off && !data.unlabeled_images.is_empty();
    let mut student = global.clone();
    let mut teachers = TeacherState::new(global, hyper.pi1);
    let mut threshold = threshold.clone();
    let mut adam = Adam::new(student.len(), hyper.lr, hyper.beta1, hyper.beta2);
    let mut labeled_sampler = BatchSampler::new(data.labeled_images.len(), seed::rng(seed, &[tag::LABELED_BATCH]));
    let mut unlabeled_sampler = BatchSampler::new(
        data.unlabeled_images.len().max(1),
        seed::rng(seed, &[tag::UNLABELED_BATCH]),
    );
    let mut trace = Vec::with_capacity(hyper.steps);
    let plane = arch.image_size * arch.image_size;

    for step in 0..hyper.steps {
        let step_seed = seed::derive(seed, &[tag::STEP, step as u64]);

        // Labeled batch.
        let idx = labeled_sampler.next(hyper.batch_labeled);
        let mut li = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len() * plane);
        for (j, &i) in idx.iter().enumerate() {
            let t = WeakTransform::sample(&mut seed::rng(step_seed, &[tag::WEAK_LABELED, j as u64]));
            li.push(t.apply_image(&data.labeled_images[i]));
            labels.extend_from_slice(t.apply_mask(&data.labeled_masks[i]).labels());
        }

        let mut tape = Tape::new(arch, &student)?;
        let xl = tape.input(Tensor::from_images(&li)?);
        let mut drop_l = seed::rng(step_seed, &[tag::DROPOUT_LABELED]);
        let out_l = tape.forward(xl, plan.use_pia.then_some((hyper.dropout_p, &mut drop_l)))?;
        let n_l = labels.len();
        let l_s = tape.seg_loss(out_l.probs, labels, vec![1.0; n_l], hyper.eta)?;
        let l_s = tape.named(l_s, "l_s");

        let mut terms = vec![(l_s, 1.0)];
        let mut accepted_fraction = 0.0;
        let mut perturb_terms = Vec::new();
        if let Some(p) = out_l.probs_perturbed {
            perturb_terms.push((out_l.probs, p));
        }

        if plan.pseudo == PseudoLabeling::DualTeacher && ssl {
            let ent = entropy_map(&tape.tensor(out_l.probs), threshold.epsilon);
            let t_lb = labeled_quantile_threshold(&ent, &threshold)?;
            threshold = update_threshold(&threshold, t_lb);
        }

        if ssl {
            let idx = unlabeled_sampler.next(hyper.batch_unlabeled);
            let mut weak = Vec::with_capacity(idx.len());
            let mut strong = Vec::with_capacity(idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let t = WeakTransform::sample(&mut seed::rng(step_seed, &[tag::WEAK_UNLABELED, j as u64]));
                let w = t.apply_image(&data.unlabeled_images[i]);
                let st = StrongTransform::sample(&mut seed::rng(step_seed, &[tag::STRONG, j as u64]));
                strong.push(st.apply_image(&w));
                weak.push(w);
            }
            let weak_batch = Tensor::from_images(&weak)?;
            let (pseudo, accept) = match plan.pseudo {
                PseudoLabeling::DualTeacher => {
                    let ps = predict_batch(arch, &teachers.static_params, &weak_batch)?;
                    let pd = predict_batch(arch, &teachers.dynamic_params, &weak_batch)?;
                    let fused = fuse_predictions(&ps, &pd)?;
                    let u = fused_uncertainty(&ps, &pd, threshold.epsilon)?;
                    (
                        pseudo_label(&fused),
                        acceptance_mask(&u, threshold.t_un, hyper.granularity, plane),
                    )
                }
                PseudoLabeling::SingleTeacher { confidence } => {
                    let pd = predict_batch(arch, &teachers.dynamic_params, &weak_batch)?;
                    let accept = max_prob(&pd).into_iter().map(|m| m >= confidence).collect();
                    (pseudo_label(&pd), accept)
                }
                PseudoLabeling::Off => unreachable!("ssl implies pseudo-labeling"),
            };
            accepted_fraction = accept.iter().filter(|&&a| a).count() as f64 / accept.len() as f64;
            let weights = accept.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();

            let xs = tape.input(Tensor::from_images(&strong)?);
            let out_s = tape.forward::<ChaCha8Rng>(xs, None)?;
            let l_u = tape.seg_loss(out_s.probs, pseudo, weights, hyper.eta)?;
            terms.push((tape.named(l_u, "l_u"), hyper.lambda1));

            if plan.use_pia {
                let xw = tape.input(weak_batch);
                let mut drop_u = seed::rng(step_seed, &[tag::DROPOUT_UNLABELED]);
                let out_w = tape.forward(xw, Some((hyper.dropout_p, &mut drop_u)))?;
                perturb_terms.push((out_w.probs, out_w.probs_perturbed.expect("requested")));
            }
        }

        if !perturb_terms.is_empty() {
            let parts: Vec<_> = perturb_terms
                .iter()
                .map(|&(a, b)| tape.mean_sq_diff(a, b).map(|v| (v, 1.0)))
                .collect::<Result<_>>()?;
            let l_p = tape.linear(&parts);
            terms.push((tape.named(l_p, "l_perturb"), hyper.lambda2));
        }

        let total = tape.linear(&terms);
        let value = |i: usize| terms.get(i).map_or(0.0, |&(v, _)| tape.scalar(v));
        let (sup, unsup, pert) = match (ssl, terms.len()) {
            (true, 3) => (value(0), value(1), value(2)),
            (true, _) => (value(0), value(1), 0.0),
            (false, 2) => (value(0), 0.0, value(1)),
            _ => (value(0), 0.0, 0.0),
        };
        if !tape.scalar(total).is_finite() {
            let term = [("l_s", sup), ("l_u", unsup), ("l_perturb", pert)]
                .into_iter()
                .find(|(_, v)| !v.is_finite())
                .map_or("loss", |(n, _)| n);
            return Err(abort(Error::NonFinite { term: term.into() }));
        }
        let grads = tape.backward(total);
        drop(tape);
        adam.step(student.values_mut(), &grads);
        teachers.ema_update(&student)?;

        trace.push(StepTrace {
            step,
            supervised: sup,
            unsupervised: unsup,
            perturbation: pert,
            accepted_fraction,
            t_un: threshold.t_un,
        });
    }

    let gap = predictive_kl_gap(arch, global, &student, &data.all_images()).map_err(abort)?;
    Ok(ClientReport {
        client_id: data.client_id,
        updated_params: student,
        gap,
        n_samples: if ssl { data.n_samples() } else { data.labeled_images.len() },
        loss_trace: trace,
        threshold,
    })
}
