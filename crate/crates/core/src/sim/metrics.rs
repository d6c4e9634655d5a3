use serde::{Deserialize, Serialize};

use crate::problem::{ProblemSpec, TileShape};

use super::machine::{gemm_nonsplit_time, MachineModel};
use super::timeline::Timeline;
use super::Strategy;

pub const METRICS_CSV_HEADER: &str = "strategy,pattern,m,n,k,tp,overall_us,gemm_us,ect_us,efficiency";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub strategy: Strategy,
    pub problem: ProblemSpec,
    pub overall_us: f64,
    pub gemm_nonsplit_us: f64,
    /// Overall time minus the unsplit GEMM time.
    pub ect_us: f64,
    pub ect_baseline_us: f64,
    pub overlap_efficiency: f64,
}

/// `1 - ect / ect_baseline`. With a baseline that exposes no communication the
/// ratio is undefined: equal ECT counts as no gain, any extra ECT as unbounded loss.
pub fn overlap_efficiency(ect: f64, ect_baseline: f64) -> f64 {
    if ect_baseline == 0.0 {
        if ect <= 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ect / ect_baseline
    }
}

/// Metrics of `timeline` against `baseline`, both of the same problem and machine.
pub fn metrics(
    timeline: &Timeline,
    baseline: &Timeline,
    problem: &ProblemSpec,
    tile: &TileShape,
    machine: &MachineModel,
) -> Metrics {
    let gemm = gemm_nonsplit_time(problem, tile, machine);
    let overall = timeline.overall_us();
    let ect = overall - gemm;
    let ect_baseline = baseline.overall_us() - gemm;
    Metrics {
        strategy: timeline.strategy,
        problem: *problem,
        overall_us: overall,
        gemm_nonsplit_us: gemm,
        ect_us: ect,
        ect_baseline_us: ect_baseline,
        overlap_efficiency: overlap_efficiency(ect, ect_baseline),
    }
}

impl Metrics {
    pub fn csv_row(&self) -> String {
        let p = &self.problem;
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.strategy,
            p.pattern,
            p.m,
            p.n,
            p.k,
            p.tp,
            self.overall_us,
            self.gemm_nonsplit_us,
            self.ect_us,
            self.overlap_efficiency
        )
    }

    /// Recomputes both identities from the stored fields and compares exactly.
    pub fn identities_hold(&self) -> bool {
        let ect = self.overall_us - self.gemm_nonsplit_us;
        let eff = overlap_efficiency(ect, self.ect_baseline_us);
        ect.to_bits() == self.ect_us.to_bits()
            && (eff.to_bits() == self.overlap_efficiency.to_bits())
    }
}
