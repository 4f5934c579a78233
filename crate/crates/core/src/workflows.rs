//! Applications of an early-step quality probe: prompt gating, seed
//! selection over partial trajectories, and preference-pair mining.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::cost::{CostLedger, CostModel, LedgerEntry, FULL_GENERATION, PARTIAL_TRAJECTORY, PROBE_PREDICTION};
use crate::data::{AttentionStack, Image, QualityLabel};
use crate::error::{bail, Error, Result};
use crate::eval::{median, Predictor};
use crate::format::fnv1a64;
use crate::probe::quantile;
use crate::rng::Rng;
use crate::testbed::scene::{SceneObject, SceneSpec};
use crate::testbed::toy::{toy_run, ToyModel};
use crate::testbed::score::score_image;

/// A text-to-image generator whose trajectories can be cut short.
pub trait Generator {
    fn total_steps(&self) -> u32;

    /// Runs the first `t0` denoising steps and returns the stack captured at step `t0`.
    fn partial(&self, prompt: &SceneSpec, seed: u64, t0: u32) -> Result<AttentionStack>;

    /// Runs all steps and returns the final image with its ground-truth label.
    fn full(&self, prompt: &SceneSpec, seed: u64) -> Result<(Image, QualityLabel)>;
}

/// [`Generator`] over a trained toy diffusion model, labelled by the
/// programmatic scorer.
#[derive(Debug, Clone, Copy)]
pub struct ToyGenerator<'a> {
    pub model: &'a ToyModel,
    pub total_steps: u32,
}

impl Generator for ToyGenerator<'_> {
    fn total_steps(&self) -> u32 {
        self.total_steps
    }

    fn partial(&self, prompt: &SceneSpec, seed: u64, t0: u32) -> Result<AttentionStack> {
        let mut run = toy_run(self.model, prompt, seed, self.total_steps, &[t0], Some(t0))?;
        Ok(run.stacks.remove(0))
    }

    fn full(&self, prompt: &SceneSpec, seed: u64) -> Result<(Image, QualityLabel)> {
        let run = toy_run(self.model, prompt, seed, self.total_steps, &[], None)?;
        let image = run.image.ok_or_else(|| Error::Generation("full run produced no image".into()))?;
        let label = score_image(&image, prompt)?;
        Ok((image, label))
    }
}

/// Proposes alternative phrasings of a prompt.
pub trait Rewriter {
    fn rewrite(&self, prompt: &SceneSpec, n: usize) -> Result<Vec<SceneSpec>>;
}

/// Deterministic stand-in for an LLM rewriter: keeps every object's content
/// and redraws its placement with extra clearance between objects and from
/// the canvas border.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedPlacement {
    pub seed: u64,
    /// Required gap (pixels) between object rims and from the border.
    pub clearance: f32,
    pub attempts: usize,
}

impl Default for RelaxedPlacement {
    fn default() -> Self {
        Self { seed: 0, clearance: 2.0, attempts: 500 }
    }
}

impl RelaxedPlacement {
    fn place(&self, prompt: &SceneSpec, rng: &mut Rng) -> Option<SceneSpec> {
        let (h, w) = (prompt.height as f64, prompt.width as f64);
        let mut placed: Vec<SceneObject> = Vec::with_capacity(prompt.objects.len());
        for o in &prompt.objects {
            let margin = (o.radius + self.clearance) as f64;
            if 2.0 * margin > w || 2.0 * margin > h {
                return None;
            }
            let spot = (0..self.attempts).find_map(|_| {
                let cx = ((rng.range(margin, w - margin) * 10.0).round() / 10.0) as f32;
                let cy = ((rng.range(margin, h - margin) * 10.0).round() / 10.0) as f32;
                let clear = placed.iter().all(|p| {
                    ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() >= p.radius + o.radius + self.clearance
                });
                clear.then_some((cx, cy))
            })?;
            placed.push(SceneObject { cx: spot.0, cy: spot.1, ..o.clone() });
        }
        SceneSpec::new(prompt.height, prompt.width, placed).ok()
    }
}

impl Rewriter for RelaxedPlacement {
    fn rewrite(&self, prompt: &SceneSpec, n: usize) -> Result<Vec<SceneSpec>> {
        let base = self.seed ^ fnv1a64(prompt.text().as_bytes());
        (0..n as u64)
            .map(|k| {
                let mut rng = Rng::new(base.wrapping_add(k));
                self.place(prompt, &mut rng).ok_or_else(|| {
                    Error::Rewrite(format!("no relaxed placement found for {:?}", prompt.text()))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateAction {
    Keep,
    Rewrite,
}

impl GateAction {
    /// The gate rule: rewrite only when the prediction falls strictly below `tau`.
    pub fn decide(predicted: f64, tau: f64) -> Self {
        if predicted < tau {
            GateAction::Rewrite
        } else {
            GateAction::Keep
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub prompt: SceneSpec,
    pub tau: f64,
    pub seed: u64,
    pub predicted: f64,
    pub action: GateAction,
    /// Best-predicted rewrite and its prediction, when one was produced.
    pub rewritten: Option<(SceneSpec, f64)>,
    /// Rewriter or candidate failure; the original prompt stays usable.
    pub error: Option<String>,
}

impl GateDecision {
    /// The prompt to generate from: the rewrite if any, else the original.
    pub fn effective_prompt(&self) -> &SceneSpec {
        self.rewritten.as_ref().map(|(p, _)| p).unwrap_or(&self.prompt)
    }
}

/// Number of rewrite candidates scored per gated prompt.
pub const REWRITE_CANDIDATES: usize = 4;

fn checked_t0(t0: u32, total: u32) -> Result<()> {
    if t0 == 0 || 2 * t0 > total {
        bail!(Argument, "capture step {t0} must lie in 1..={} (at most half of {total} steps)", total / 2);
    }
    Ok(())
}

fn predict_at<G, P>(generator: &G, probe: &P, prompt: &SceneSpec, seed: u64, t0: u32) -> Result<f64>
where
    G: Generator + ?Sized,
    P: Predictor + ?Sized,
{
    let q = probe.predict(&generator.partial(prompt, seed, t0)?)?;
    if !q.is_finite() {
        bail!(Domain, "probe returned non-finite prediction {q}");
    }
    Ok(q)
}

/// Predicts `prompt`'s quality from a `t0`-step partial run at a fixed
/// `seed` and, below `tau`, replaces it with the best-predicted of
/// [`REWRITE_CANDIDATES`] rewrites.
#[allow(clippy::too_many_arguments)]
pub fn gate_prompt<G, P, R>(
    prompt: &SceneSpec,
    generator: &G,
    probe: &P,
    tau: f64,
    rewriter: &R,
    seed: u64,
    t0: u32,
) -> Result<GateDecision>
where
    G: Generator + ?Sized,
    P: Predictor + ?Sized,
    R: Rewriter + ?Sized,
{
    if !tau.is_finite() {
        bail!(Argument, "gate threshold must be finite, got {tau}");
    }
    checked_t0(t0, generator.total_steps())?;
    let predicted = predict_at(generator, probe, prompt, seed, t0)?;
    let action = GateAction::decide(predicted, tau);
    let mut decision =
        GateDecision { prompt: prompt.clone(), tau, seed, predicted, action, rewritten: None, error: None };
    if action == GateAction::Keep {
        return Ok(decision);
    }
    let candidates = match rewriter.rewrite(prompt, REWRITE_CANDIDATES) {
        Ok(c) if !c.is_empty() => c,
        Ok(_) => {
            decision.error = Some("rewriter returned no candidates".to_string());
            return Ok(decision);
        }
        Err(e) => {
            decision.error = Some(e.to_string());
            return Ok(decision);
        }
    };
    let mut failures = Vec::new();
    for cand in candidates {
        match predict_at(generator, probe, &cand, seed, t0) {
            Ok(q) => {
                if decision.rewritten.as_ref().map_or(true, |(_, best)| q > *best) {
                    decision.rewritten = Some((cand, q));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        decision.error = Some(failures.join("; "));
    }
    Ok(decision)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub prompt_id: String,
    /// `(seed, predicted score)` for every seed whose partial run succeeded, in input order.
    pub candidates: Vec<(u64, f64)>,
    pub chosen: u64,
    pub image: Image,
    pub realized: QualityLabel,
    pub warnings: Vec<String>,
    pub ledger: CostLedger,
}

impl SelectionResult {
    pub fn chosen_prediction(&self) -> f64 {
        self.candidates.iter().find(|(s, _)| *s == self.chosen).map(|c| c.1).unwrap_or(f64::NAN)
    }
}

/// Index of the highest score; ties go to the lowest seed.
pub fn argmax_seed(candidates: &[(u64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(seed, q)) in candidates.iter().enumerate() {
        best = match best {
            Some(b) => {
                let (bs, bq) = candidates[b];
                if q > bq || (q == bq && seed < bs) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
            None => Some(i),
        };
    }
    best
}

/// Best-of-N over partial trajectories: predicts each seed's quality after
/// `t0` steps and fully generates only the winner.
pub fn select_seed<G, P>(
    prompt: &SceneSpec,
    seeds: &[u64],
    generator: &G,
    probe: &P,
    t0: u32,
    cost: &CostModel,
) -> Result<SelectionResult>
where
    G: Generator + ?Sized,
    P: Predictor + ?Sized,
{
    if seeds.is_empty() {
        bail!(Argument, "need at least one candidate seed");
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        bail!(Argument, "candidate seeds must be distinct");
    }
    checked_t0(t0, generator.total_steps())?;
    let mut candidates = Vec::with_capacity(seeds.len());
    let mut warnings = Vec::new();
    for &seed in seeds {
        match predict_at(generator, probe, prompt, seed, t0) {
            Ok(q) => candidates.push((seed, q)),
            Err(e) => warnings.push(format!("seed {seed} excluded: {e}")),
        }
    }
    let Some(best) = argmax_seed(&candidates) else {
        return Err(Error::Generation(format!("all {} candidate seeds failed", seeds.len())));
    };
    let chosen = candidates[best].0;
    let (image, realized) = generator.full(prompt, chosen)?;

    let mut ledger = CostLedger::new("guided seed selection");
    ledger.push(LedgerEntry::new(FULL_GENERATION, 1, cost.full_gen_flops, cost.full_gen_latency));
    ledger.push(LedgerEntry::new(
        PARTIAL_TRAJECTORY,
        seeds.len() as u64,
        cost.partial_flops(t0),
        cost.partial_latency(t0),
    ));
    ledger.push(LedgerEntry::new(
        PROBE_PREDICTION,
        candidates.len() as u64,
        cost.probe_pred_flops,
        cost.probe_pred_latency,
    ));
    Ok(SelectionResult { prompt_id: prompt.prompt_id(), candidates, chosen, image, realized, warnings, ledger })
}

/// One trajectory with its predicted (or, for accounting, true) quality.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrajectory {
    pub prompt_id: String,
    pub seed: u64,
    pub score: f64,
}

impl ScoredTrajectory {
    pub fn new(prompt_id: impl Into<String>, seed: u64, score: f64) -> Self {
        Self { prompt_id: prompt_id.into(), seed, score }
    }
}

/// Positive and negative sets, as indices into the mined records.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub theta_pos: f64,
    pub theta_neg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub seed_pos: u64,
    pub seed_neg: u64,
    pub score_pos: f64,
    pub score_neg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedPairs {
    pub set: PairSet,
    pub pairs: Vec<PreferencePair>,
    /// Why no pairs came out, when none did.
    pub diagnostic: Option<String>,
}

/// Splits records into `D⁺` (score ≥ θ⁺) and `D⁻` (score ≤ θ⁻), discarding
/// the band between, and pairs them within each prompt. Pairs are ordered
/// by prompt id, then positive seed, then negative seed. With θ⁺ = θ⁻ a
/// record sitting exactly on the threshold is discarded, keeping the sets
/// disjoint.
pub fn mine_pairs(records: &[ScoredTrajectory], theta_pos: f64, theta_neg: f64) -> Result<MinedPairs> {
    if !theta_pos.is_finite() || !theta_neg.is_finite() {
        bail!(Argument, "thresholds must be finite");
    }
    if theta_pos < theta_neg {
        bail!(Argument, "positive threshold {theta_pos} is below negative threshold {theta_neg}");
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        bail!(Argument, "record ({}, {}) has non-finite score", r.prompt_id, r.seed);
    }
    let mut set = PairSet { positive: Vec::new(), negative: Vec::new(), theta_pos, theta_neg };
    for (i, r) in records.iter().enumerate() {
        let hi = r.score >= theta_pos;
        let lo = r.score <= theta_neg;
        match (hi, lo) {
            (true, false) => set.positive.push(i),
            (false, true) => set.negative.push(i),
            _ => {}
        }
    }
    let mut pairs = Vec::new();
    for &p in &set.positive {
        for &n in &set.negative {
            let (rp, rn) = (&records[p], &records[n]);
            if rp.prompt_id == rn.prompt_id {
                pairs.push(PreferencePair {
                    prompt_id: rp.prompt_id.clone(),
                    seed_pos: rp.seed,
                    seed_neg: rn.seed,
                    score_pos: rp.score,
                    score_neg: rn.score,
                });
            }
        }
    }
    pairs.sort_by(|a, b| (&a.prompt_id, a.seed_pos, a.seed_neg).cmp(&(&b.prompt_id, b.seed_pos, b.seed_neg)));
    let diagnostic = if set.positive.is_empty() {
        Some(format!("no record scored at or above {theta_pos}"))
    } else if set.negative.is_empty() {
        Some(format!("no record scored at or below {theta_neg}"))
    } else if pairs.is_empty() {
        Some("positive and negative records never share a prompt".to_string())
    } else {
        None
    };
    Ok(MinedPairs { set, pairs, diagnostic })
}

/// Default workflow thresholds derived from a reference set of predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tau: f64,
    pub theta_pos: f64,
    pub theta_neg: f64,
}

impl Thresholds {
    /// τ at the median, θ⁺ and θ⁻ at the 70th and 30th percentiles.
    pub fn from_predictions(predictions: &[f64]) -> Result<Self> {
        if predictions.is_empty() || predictions.iter().any(|q| !q.is_finite()) {
            bail!(Argument, "thresholds need a nonempty set of finite predictions");
        }
        Ok(Self {
            tau: median(predictions)?,
            theta_pos: quantile(predictions, 0.7),
            theta_neg: quantile(predictions, 0.3),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub n: usize,
    /// Population variance of the true labels.
    pub variance: f64,
    pub frac_high: f64,
    pub frac_low: f64,
    /// Records that land in at least one same-prompt (x⁺, x⁻) pair under the true labels.
    pub usable: usize,
    pub usable_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSampleReport {
    pub filtered: BatchSummary,
    pub unfiltered: BatchSummary,
    /// `filtered.usable_fraction / unfiltered.usable_fraction`; `None` when
    /// the unfiltered batch has no usable records.
    pub usable_ratio: Option<f64>,
}

fn summarize(batch: &[ScoredTrajectory], theta_pos: f64, theta_neg: f64) -> Result<BatchSummary> {
    if batch.is_empty() {
        bail!(Argument, "cannot summarize an empty batch");
    }
    let n = batch.len();
    let mean = batch.iter().map(|r| r.score).sum::<f64>() / n as f64;
    let variance = batch.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / n as f64;
    let mined = mine_pairs(batch, theta_pos, theta_neg)?;
    let mut used = alloc::vec![false; n];
    for &p in &mined.set.positive {
        for &q in &mined.set.negative {
            if batch[p].prompt_id == batch[q].prompt_id {
                used[p] = true;
                used[q] = true;
            }
        }
    }
    let usable = used.iter().filter(|&&u| u).count();
    Ok(BatchSummary {
        n,
        variance,
        frac_high: mined.set.positive.len() as f64 / n as f64,
        frac_low: mined.set.negative.len() as f64 / n as f64,
        usable,
        usable_fraction: usable as f64 / n as f64,
    })
}

/// Compares a probe-filtered batch with the unfiltered one it came from.
/// Scores in both batches must be true labels.
pub fn effective_sample_report(
    filtered: &[ScoredTrajectory],
    unfiltered: &[ScoredTrajectory],
    theta_pos: f64,
    theta_neg: f64,
) -> Result<EffectiveSampleReport> {
    let filtered = summarize(filtered, theta_pos, theta_neg)?;
    let unfiltered = summarize(unfiltered, theta_pos, theta_neg)?;
    let usable_ratio =
        (unfiltered.usable_fraction > 0.0).then(|| filtered.usable_fraction / unfiltered.usable_fraction);
    Ok(EffectiveSampleReport { filtered, unfiltered, usable_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{StackMeta, StackShape};
    use alloc::vec;
    use core::cell::RefCell;

    /// Generator whose "attention" carries a per-seed score in its first cell.
    struct Scripted {
        scores: Vec<(u64, f64)>,
        fail: Vec<u64>,
        full_calls: RefCell<Vec<u64>>,
        partial_calls: RefCell<usize>,
    }

    impl Scripted {
        fn new(scores: &[(u64, f64)]) -> Self {
            Self { scores: scores.to_vec(), fail: vec![], full_calls: RefCell::new(vec![]), partial_calls: RefCell::new(0) }
        }
    }

    fn stack_with(value: f32, seed: u64) -> AttentionStack {
        let shape = StackShape::new(1, 1, 2, 2);
        let mut meta = StackMeta::anonymous(shape);
        meta.seed = seed;
        AttentionStack::new(meta, shape, vec![value, 0.0, 0.0, 0.0]).unwrap()
    }

    impl Generator for Scripted {
        fn total_steps(&self) -> u32 {
            25
        }
        fn partial(&self, _: &SceneSpec, seed: u64, _: u32) -> Result<AttentionStack> {
            *self.partial_calls.borrow_mut() += 1;
            if self.fail.contains(&seed) {
                return Err(Error::Generation(format!("seed {seed} crashed")));
            }
            let q = self.scores.iter().find(|s| s.0 == seed).map(|s| s.1).unwrap_or(0.0);
            Ok(stack_with(q as f32, seed))
        }
        fn full(&self, _: &SceneSpec, seed: u64) -> Result<(Image, QualityLabel)> {
            self.full_calls.borrow_mut().push(seed);
            let q = self.scores.iter().find(|s| s.0 == seed).map(|s| s.1).unwrap_or(0.0);
            Ok((Image::blank(2, 2), QualityLabel::new("test", q, crate::data::Provenance::Programmatic).unwrap()))
        }
    }

    fn first_cell(s: &AttentionStack) -> Result<f64> {
        Ok(s.maps()[0] as f64)
    }

    fn scene() -> SceneSpec {
        SceneSpec::parse("32x32:circle/1@10.0,10.0r4 square/3@22.0,22.0r5").unwrap()
    }

    fn unit_cost() -> CostModel {
        CostModel::analytic(25, 1e12, 0.0, 1e9, 1e12).unwrap()
    }

    #[test]
    fn argmax_with_lowest_seed_tie_break() {
        let g = Scripted::new(&[(7, 0.2), (8, 0.9), (9, 0.5)]);
        let r = select_seed(&scene(), &[7, 8, 9], &g, &first_cell, 5, &unit_cost()).unwrap();
        assert_eq!(r.chosen, 8);
        let g = Scripted::new(&[(11, 0.9), (3, 0.9)]);
        let r = select_seed(&scene(), &[11, 3], &g, &first_cell, 5, &unit_cost()).unwrap();
        assert_eq!(r.chosen, 3);
        assert_eq!(*g.full_calls.borrow(), vec![3]);
    }

    #[test]
    fn ledger_counts_one_full_and_one_partial_per_seed() {
        let seeds: Vec<u64> = (0..10).collect();
        let g = Scripted::new(&seeds.iter().map(|&s| (s, s as f64 / 10.0)).collect::<Vec<_>>());
        let model = unit_cost();
        let r = select_seed(&scene(), &seeds, &g, &first_cell, 5, &model).unwrap();
        assert_eq!(r.ledger.count(FULL_GENERATION), 1);
        assert_eq!(r.ledger.count(PARTIAL_TRAJECTORY), 10);
        assert_eq!(r.ledger.count(PROBE_PREDICTION), 10);
        let guided = crate::cost::cost_guided(10, 5, &model).unwrap();
        assert!((r.ledger.total_latency() - guided.total_latency()).abs() < 1e-12);
        assert!((r.ledger.total_flops() - guided.total_flops()).abs() < 1e-12);
        assert_eq!(*g.partial_calls.borrow(), 10);
    }

    #[test]
    fn failed_seeds_are_excluded_with_warnings() {
        let mut g = Scripted::new(&[(1, 0.9), (2, 0.5)]);
        g.fail = vec![1];
        let r = select_seed(&scene(), &[1, 2], &g, &first_cell, 5, &unit_cost()).unwrap();
        assert_eq!(r.chosen, 2);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.ledger.count(PROBE_PREDICTION), 1);
        g.fail = vec![1, 2];
        assert!(matches!(
            select_seed(&scene(), &[1, 2], &g, &first_cell, 5, &unit_cost()),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn selection_preconditions() {
        let g = Scripted::new(&[(1, 0.5)]);
        let c = unit_cost();
        assert!(select_seed(&scene(), &[], &g, &first_cell, 5, &c).is_err());
        assert!(select_seed(&scene(), &[1, 1], &g, &first_cell, 5, &c).is_err());
        assert!(select_seed(&scene(), &[1], &g, &first_cell, 13, &c).is_err());
        assert!(select_seed(&scene(), &[1], &g, &first_cell, 0, &c).is_err());
        assert!(select_seed(&scene(), &[1], &g, &first_cell, 12, &c).is_ok());
    }

    #[test]
    fn gate_boundary_keeps_and_below_rewrites() {
        let g = Scripted::new(&[(0, 0.5)]);
        let rw = RelaxedPlacement::default();
        let d = gate_prompt(&scene(), &g, &first_cell, 0.5, &rw, 0, 5).unwrap();
        assert_eq!(d.action, GateAction::Keep);
        assert!(d.rewritten.is_none());
        let d = gate_prompt(&scene(), &g, &first_cell, 0.5000001, &rw, 0, 5).unwrap();
        assert_eq!(d.action, GateAction::Rewrite);
        assert!(d.rewritten.is_some());
        assert!(gate_prompt(&scene(), &g, &first_cell, f64::NAN, &rw, 0, 5).is_err());
        assert_eq!(GateAction::decide(0.3, 0.5), GateAction::Rewrite);
    }

    struct Broken;
    impl Rewriter for Broken {
        fn rewrite(&self, _: &SceneSpec, _: usize) -> Result<Vec<SceneSpec>> {
            Err(Error::Rewrite("service unavailable".into()))
        }
    }

    #[test]
    fn rewriter_failure_preserves_original() {
        let g = Scripted::new(&[(0, 0.1)]);
        let d = gate_prompt(&scene(), &g, &first_cell, 0.5, &Broken, 0, 5).unwrap();
        assert_eq!(d.action, GateAction::Rewrite);
        assert!(d.error.as_deref().unwrap().contains("service unavailable"));
        assert_eq!(d.effective_prompt(), &scene());
    }

    #[test]
    fn relaxed_rewrites_keep_content_and_add_clearance() {
        let rw = RelaxedPlacement::default();
        let p = scene();
        let a = rw.rewrite(&p, 4).unwrap();
        assert_eq!(a, rw.rewrite(&p, 4).unwrap());
        assert_eq!(a.len(), 4);
        for c in &a {
            for (o, q) in c.objects.iter().zip(&p.objects) {
                assert_eq!((o.shape, o.level, o.radius), (q.shape, q.level, q.radius));
                assert!(o.cx - o.radius >= rw.clearance && o.cx + o.radius <= 32.0 - rw.clearance);
            }
            let (a, b) = (&c.objects[0], &c.objects[1]);
            assert!(((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt() >= a.radius + b.radius + rw.clearance);
        }
        let crowded = SceneSpec::parse("12x12:circle/1@6.0,6.0r6").unwrap();
        assert!(matches!(rw.rewrite(&crowded, 1), Err(Error::Rewrite(_))));
    }

    #[test]
    fn mining_examples() {
        let recs = [ScoredTrajectory::new("a", 1, 0.9), ScoredTrajectory::new("a", 2, 0.1)];
        let m = mine_pairs(&recs, 0.7, 0.3).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!((m.pairs[0].seed_pos, m.pairs[0].seed_neg), (1, 2));
        assert!(m.diagnostic.is_none());

        let mid = [ScoredTrajectory::new("a", 1, 0.5), ScoredTrajectory::new("a", 2, 0.4)];
        let m = mine_pairs(&mid, 0.7, 0.3).unwrap();
        assert!(m.pairs.is_empty());
        assert!(m.diagnostic.is_some());

        let cross = [ScoredTrajectory::new("a", 1, 0.9), ScoredTrajectory::new("b", 2, 0.1)];
        assert!(mine_pairs(&cross, 0.7, 0.3).unwrap().pairs.is_empty());
        assert!(mine_pairs(&recs, 0.3, 0.7).is_err());
    }

    #[test]
    fn default_thresholds_are_quantiles() {
        let q: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let t = Thresholds::from_predictions(&q).unwrap();
        assert!((t.tau - 0.5).abs() < 1e-12);
        assert!((t.theta_pos - 0.7).abs() < 1e-12);
        assert!((t.theta_neg - 0.3).abs() < 1e-12);
        assert!(Thresholds::from_predictions(&[]).is_err());
    }

    #[test]
    fn effective_sample_examples() {
        let batch: Vec<_> = (0..6).map(|i| ScoredTrajectory::new("p", i, [0.9, 0.1, 0.5, 0.5, 0.8, 0.45][i as usize])).collect();
        let same = effective_sample_report(&batch, &batch, 0.7, 0.3).unwrap();
        assert_eq!(same.usable_ratio, Some(1.0));
        assert_eq!(same.unfiltered.usable, 3);
        let flat: Vec<_> = (0..4).map(|i| ScoredTrajectory::new("p", i, 0.5)).collect();
        let r = effective_sample_report(&flat, &flat, 0.7, 0.3).unwrap();
        assert_eq!(r.filtered.variance, 0.0);
        assert_eq!(r.usable_ratio, None);
        assert!(effective_sample_report(&[], &batch, 0.7, 0.3).is_err());
    }
}
