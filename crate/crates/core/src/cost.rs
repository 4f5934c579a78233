//! Analytical FLOPs/latency ledgers for naive and probe-guided workflows.
//!
//! A partial trajectory of `k` steps costs `overhead + k · per_step`. A full
//! generation additionally pays for finalization (decoding), so
//! `overhead + T · per_step ≤ full`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};

/// Reference full-generation cost: 1877.56 TFLOPs, 14.70 s.
pub const REFERENCE_FULL_TFLOPS: f64 = 1877.56;
pub const REFERENCE_FULL_LATENCY: f64 = 14.70;
/// Reference probe prediction cost: 0.0036 TFLOPs, 0.05 s.
pub const REFERENCE_PRED_TFLOPS: f64 = 0.0036;
pub const REFERENCE_PRED_LATENCY: f64 = 0.05;
/// Reference guided seed-selection totals for 10 candidates at step 5 of 25.
pub const REFERENCE_GUIDED_TFLOPS: f64 = 5280.43;
pub const REFERENCE_GUIDED_LATENCY: f64 = 42.62;
/// Reference guided prompt-optimization latency for 4 candidates.
pub const REFERENCE_PROMPT_GUIDED_LATENCY: f64 = 28.29;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, rename_all = "kebab-case"))]
pub struct CostModel {
    pub total_steps: u32,
    /// TFLOPs of one complete generation.
    pub full_gen_flops: f64,
    /// Seconds for one complete generation.
    pub full_gen_latency: f64,
    pub partial_overhead_flops: f64,
    pub partial_overhead_latency: f64,
    pub per_step_flops: f64,
    pub per_step_latency: f64,
    pub probe_pred_flops: f64,
    pub probe_pred_latency: f64,
    /// Cost of producing one rewritten prompt candidate (an external call,
    /// so no local FLOPs by default).
    pub rewrite_flops: f64,
    pub rewrite_latency: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.full_gen_flops,
            self.full_gen_latency,
            self.partial_overhead_flops,
            self.partial_overhead_latency,
            self.per_step_flops,
            self.per_step_latency,
            self.probe_pred_flops,
            self.probe_pred_latency,
            self.rewrite_flops,
            self.rewrite_latency,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            bail!(Domain, "cost model fields must be finite and nonnegative");
        }
        if self.total_steps == 0 {
            bail!(Domain, "total steps must be positive");
        }
        let t = self.total_steps as f64;
        let slack = 1.01;
        if self.partial_overhead_flops + t * self.per_step_flops > self.full_gen_flops * slack
            || self.partial_overhead_latency + t * self.per_step_latency > self.full_gen_latency * slack
        {
            bail!(Domain, "a {}-step partial trajectory would cost more than a full generation", self.total_steps);
        }
        Ok(())
    }

    /// Solves the per-step cost from a guided workflow total:
    /// `guided = full + n · (partial(t0) + pred)`, with zero overhead.
    #[allow(clippy::too_many_arguments)]
    pub fn calibrate(
        total_steps: u32,
        full: (f64, f64),
        pred: (f64, f64),
        guided_total: (f64, f64),
        n_candidates: u32,
        capture_step: u32,
    ) -> Result<Self> {
        if n_candidates == 0 || capture_step == 0 || capture_step > total_steps {
            bail!(Argument, "need n ≥ 1 and 1 ≤ T₀ ≤ T");
        }
        let n = n_candidates as f64;
        let k = capture_step as f64;
        let partial_flops = (guided_total.0 - full.0) / n - pred.0;
        let partial_latency = (guided_total.1 - full.1) / n - pred.1;
        let model = Self {
            total_steps,
            full_gen_flops: full.0,
            full_gen_latency: full.1,
            partial_overhead_flops: 0.0,
            partial_overhead_latency: 0.0,
            per_step_flops: partial_flops / k,
            per_step_latency: partial_latency / k,
            probe_pred_flops: pred.0,
            probe_pred_latency: pred.1,
            rewrite_flops: 0.0,
            rewrite_latency: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    /// Calibrated against the published cost table: full generation and
    /// probe costs as stated, per-step cost solved from the 10-seed guided
    /// row, rewrite latency solved from the 4-candidate prompt row.
    pub fn reference() -> Self {
        let mut model = Self::calibrate(
            25,
            (REFERENCE_FULL_TFLOPS, REFERENCE_FULL_LATENCY),
            (REFERENCE_PRED_TFLOPS, REFERENCE_PRED_LATENCY),
            (REFERENCE_GUIDED_TFLOPS, REFERENCE_GUIDED_LATENCY),
            10,
            5,
        )
        .expect("reference calibration is consistent");
        let partial = model.partial_latency(5);
        model.rewrite_latency =
            (REFERENCE_PROMPT_GUIDED_LATENCY - REFERENCE_FULL_LATENCY) / 4.0 - partial - REFERENCE_PRED_LATENCY;
        model
    }

    /// A model derived from analytic FLOP counts and an assumed throughput
    /// (FLOPs per second). FLOP arguments are raw counts; stored values are
    /// TFLOPs.
    pub fn analytic(
        total_steps: u32,
        step_flops: f64,
        finalize_flops: f64,
        probe_flops: f64,
        throughput: f64,
    ) -> Result<Self> {
        if !(throughput > 0.0) {
            bail!(Argument, "throughput must be positive");
        }
        let tera = 1e12;
        let full = step_flops * total_steps as f64 + finalize_flops;
        let model = Self {
            total_steps,
            full_gen_flops: full / tera,
            full_gen_latency: full / throughput,
            partial_overhead_flops: 0.0,
            partial_overhead_latency: 0.0,
            per_step_flops: step_flops / tera,
            per_step_latency: step_flops / throughput,
            probe_pred_flops: probe_flops / tera,
            probe_pred_latency: probe_flops / throughput,
            rewrite_flops: 0.0,
            rewrite_latency: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn partial_flops(&self, steps: u32) -> f64 {
        if steps == 0 {
            return 0.0;
        }
        self.partial_overhead_flops + steps as f64 * self.per_step_flops
    }

    pub fn partial_latency(&self, steps: u32) -> f64 {
        if steps == 0 {
            return 0.0;
        }
        self.partial_overhead_latency + steps as f64 * self.per_step_latency
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct LedgerEntry {
    pub label: String,
    pub count: u64,
    pub unit_flops: f64,
    pub unit_latency: f64,
}

impl LedgerEntry {
    pub fn new(label: impl Into<String>, count: u64, unit_flops: f64, unit_latency: f64) -> Self {
        Self { label: label.into(), count, unit_flops, unit_latency }
    }

    pub fn flops(&self) -> f64 {
        self.count as f64 * self.unit_flops
    }

    pub fn latency(&self) -> f64 {
        self.count as f64 * self.unit_latency
    }
}

/// Itemized cost of one workflow run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CostLedger {
    pub workflow: String,
    pub entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn new(workflow: impl Into<String>) -> Self {
        Self { workflow: workflow.into(), entries: Vec::new() }
    }

    pub fn push(&mut self, entry: LedgerEntry) {
        if entry.count > 0 {
            self.entries.push(entry);
        }
    }

    pub fn total_flops(&self) -> f64 {
        self.entries.iter().map(LedgerEntry::flops).sum()
    }

    pub fn total_latency(&self) -> f64 {
        self.entries.iter().map(LedgerEntry::latency).sum()
    }

    /// Number of units recorded under `label`.
    pub fn count(&self, label: &str) -> u64 {
        self.entries.iter().filter(|e| e.label == label).map(|e| e.count).sum()
    }
}

pub const FULL_GENERATION: &str = "full generation";
pub const PARTIAL_TRAJECTORY: &str = "partial trajectory";
pub const PROBE_PREDICTION: &str = "probe prediction";
pub const PROMPT_REWRITE: &str = "prompt rewrite";

/// `n` full generations, one per candidate.
pub fn cost_naive(n_candidates: u64, model: &CostModel) -> Result<CostLedger> {
    if n_candidates == 0 {
        bail!(Argument, "need at least one candidate");
    }
    let mut ledger = CostLedger::new("naive");
    ledger.push(LedgerEntry::new(FULL_GENERATION, n_candidates, model.full_gen_flops, model.full_gen_latency));
    Ok(ledger)
}

/// One full generation plus a `t0`-step partial trajectory and a probe
/// prediction per candidate.
pub fn cost_guided(n_candidates: u64, t0: u32, model: &CostModel) -> Result<CostLedger> {
    if n_candidates == 0 {
        bail!(Argument, "need at least one candidate");
    }
    if t0 > model.total_steps {
        bail!(Argument, "capture step {t0} exceeds total steps {}", model.total_steps);
    }
    let mut ledger = CostLedger::new("guided");
    ledger.push(LedgerEntry::new(FULL_GENERATION, 1, model.full_gen_flops, model.full_gen_latency));
    ledger.push(LedgerEntry::new(
        PARTIAL_TRAJECTORY,
        if t0 == 0 { 0 } else { n_candidates },
        model.partial_flops(t0),
        model.partial_latency(t0),
    ));
    ledger.push(LedgerEntry::new(PROBE_PREDICTION, n_candidates, model.probe_pred_flops, model.probe_pred_latency));
    Ok(ledger)
}

/// Guided prompt optimization: [`cost_guided`] plus one rewrite per candidate.
pub fn cost_guided_rewrites(n_candidates: u64, t0: u32, model: &CostModel) -> Result<CostLedger> {
    let mut ledger = cost_guided(n_candidates, t0, model)?;
    ledger.workflow = "guided prompt optimization".to_string();
    ledger.push(LedgerEntry::new(PROMPT_REWRITE, n_candidates, model.rewrite_flops, model.rewrite_latency));
    Ok(ledger)
}

/// Latency ratio `naive / guided`.
pub fn speedup(naive: &CostLedger, guided: &CostLedger) -> Result<f64> {
    let g = guided.total_latency();
    if g <= 0.0 {
        return Err(Error::Domain("guided ledger has zero latency".into()));
    }
    Ok(naive.total_latency() / g)
}

/// A published cost-table cell and what the model predicts for it.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TableCell {
    pub row: &'static str,
    pub column: &'static str,
    pub published: f64,
    pub modeled: f64,
    /// Set for cells the table itself gets wrong.
    pub inconsistent: Option<&'static str>,
}

impl TableCell {
    pub fn relative_error(&self) -> f64 {
        (self.modeled - self.published).abs() / self.published.abs()
    }
}

/// Every numeric cell of the reference cost table next to its modeled value.
pub fn reference_table(model: &CostModel) -> Result<Vec<TableCell>> {
    let single = cost_naive(1, model)?;
    let single_pred = cost_guided(1, 0, model)?;
    let naive10 = cost_naive(10, model)?;
    let guided10 = cost_guided(10, 5, model)?;
    let naive4 = cost_naive(4, model)?;
    let guided4 = cost_guided_rewrites(4, 5, model)?;
    let cell = |row, column, published, modeled| TableCell { row, column, published, modeled, inconsistent: None };
    Ok(vec![
        cell("single generation", "TFLOPs", 1877.56, single.total_flops()),
        cell("single generation", "latency", 14.70, single.total_latency()),
        cell("single generation + 1 prediction", "TFLOPs", 1877.57, single_pred.total_flops()),
        cell("single generation + 1 prediction", "latency", 14.75, single_pred.total_latency()),
        cell("seed selection, naive x10", "TFLOPs", 18775.60, naive10.total_flops()),
        cell("seed selection, naive x10", "latency", 147.00, naive10.total_latency()),
        cell("seed selection, guided x10", "TFLOPs", 5280.43, guided10.total_flops()),
        cell("seed selection, guided x10", "latency", 42.62, guided10.total_latency()),
        cell("seed selection", "speedup", 3.45, speedup(&naive10, &guided10)?),
        cell("prompt optimization, naive x4", "TFLOPs", 7510.25, naive4.total_flops()),
        TableCell {
            inconsistent: Some("4 x 14.70 s = 58.80 s; the table prints 58.00 s"),
            ..cell("prompt optimization, naive x4", "latency", 58.00, naive4.total_latency())
        },
        TableCell {
            inconsistent: Some(
                "implies a per-candidate partial cost of 287.2 TFLOPs, below the 340.3 TFLOPs of the seed-selection row at the same step",
            ),
            ..cell("prompt optimization, guided x4", "TFLOPs", 3026.42, guided4.total_flops())
        },
        cell("prompt optimization, guided x4", "latency", 28.29, guided4.total_latency()),
        TableCell {
            inconsistent: Some("ratio of the inconsistent 58.00 s cell"),
            ..cell("prompt optimization", "speedup", 2.05, speedup(&naive4, &guided4)?)
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn naive_rows() {
        let m = CostModel::reference();
        assert!(within(cost_naive(10, &m).unwrap().total_latency(), 147.00, 1e-12));
        assert!(within(cost_naive(1, &m).unwrap().total_flops(), 1877.56, 1e-12));
        assert!(within(cost_naive(4, &m).unwrap().total_latency(), 58.80, 1e-12));
        assert!(cost_naive(0, &m).is_err());
    }

    #[test]
    fn guided_rows() {
        let m = CostModel::reference();
        let one = cost_guided(1, 0, &m).unwrap();
        assert!(within(one.total_flops(), 1877.57, 0.005));
        assert_eq!(m.probe_pred_latency, 0.05);
        let ten = cost_guided(10, 5, &m).unwrap();
        assert!(within(ten.total_latency(), 42.62, 1e-9));
        // 14.70 + 10 (x + 0.05) = 42.62
        assert!((m.partial_latency(5) - 2.742).abs() < 1e-9);
        assert_eq!(ten.count(PARTIAL_TRAJECTORY), 10);
        assert_eq!(ten.count(FULL_GENERATION), 1);
        assert!(cost_guided(1, 26, &m).is_err());
    }

    #[test]
    fn speedup_values() {
        let m = CostModel::reference();
        let s = speedup(&cost_naive(10, &m).unwrap(), &cost_guided(10, 5, &m).unwrap()).unwrap();
        assert!((s - 147.0 / 42.62).abs() < 1e-9);
        assert_eq!((s * 100.0).round() / 100.0, 3.45);
        let n = cost_naive(3, &m).unwrap();
        assert_eq!(speedup(&n, &n).unwrap(), 1.0);
        let mut a = CostLedger::new("a");
        a.push(LedgerEntry::new("x", 1, 0.0, 58.00));
        let mut b = CostLedger::new("b");
        b.push(LedgerEntry::new("x", 1, 0.0, 28.29));
        assert!((speedup(&a, &b).unwrap() - 2.05).abs() < 0.005);
        assert!(speedup(&a, &CostLedger::new("empty")).is_err());
    }

    #[test]
    fn totals_are_sums_of_units() {
        let m = CostModel::reference();
        let l = cost_guided_rewrites(7, 5, &m).unwrap();
        let manual: f64 = l.entries.iter().map(|e| e.count as f64 * e.unit_latency).sum();
        assert!((l.total_latency() - manual).abs() < 1e-9);
    }

    #[test]
    fn speedup_grows_with_candidates() {
        let m = CostModel::reference();
        let mut last = 0.0;
        for n in 1..40 {
            let s = speedup(&cost_naive(n, &m).unwrap(), &cost_guided(n, 5, &m).unwrap()).unwrap();
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn reference_table_cells() {
        let m = CostModel::reference();
        m.validate().unwrap();
        for cell in reference_table(&m).unwrap() {
            if cell.inconsistent.is_none() {
                assert!(cell.relative_error() < 0.005, "{cell:?}");
            }
        }
    }

    #[test]
    fn analytic_model_is_consistent() {
        let m = CostModel::analytic(25, 1e9, 2e9, 1e8, 1e10).unwrap();
        assert!((m.full_gen_latency - 2.7).abs() < 1e-12);
        assert!(CostModel::analytic(25, 1e9, 0.0, 1e8, 0.0).is_err());
    }
}
