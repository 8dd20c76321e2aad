//! Scalar summaries of run logs and the paired DAC/baseline comparison.
//!
//! Conventions:
//!
//! - Tracking RMS and effort cover phases 2–3; phase 1 is treated as the
//!   adaptation transient.
//! - Integrals use the log spacing as the quadrature step.
//! - The estimation ratio is `‖est − true‖_L2` over the last 60 s of phase 2
//!   divided by `‖nominal − true‖_L2` over the first 60 s of phase 1 (the
//!   learner starts at the nominal matrices). The same-window ratio divides by
//!   the nominal error over the same last 60 s of phase 2.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::runlog::RunLog;

/// Length of the estimation windows (s).
pub const ESTIMATION_WINDOW: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStats {
    pub phase: usize,
    pub duration: f64,
    pub rms_alpha_err: f64,
    pub effort: f64,
    pub mean_e_tau: f64,
    pub final_chi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline_rms_alpha_err: f64,
    pub baseline_effort: f64,
    /// `100·(1 − rms_dac/rms_base)`.
    pub tracking_reduction_pct: f64,
    /// `100·(effort_dac/effort_base − 1)`.
    pub effort_increase_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub phases: Vec<PhaseStats>,
    pub rms_alpha_err: f64,
    pub effort: f64,
    pub b_est_ratio: f64,
    pub d_est_ratio: f64,
    pub b_est_ratio_same_window: f64,
    pub d_est_ratio_same_window: f64,
    pub max_hl_norm: f64,
    pub max_ha_norm: f64,
    pub min_clearance: f64,
    pub comparison: Option<Comparison>,
}

struct Cols {
    t: Vec<f64>,
    phase: Vec<f64>,
    h: Vec<f64>,
}

fn cols(log: &RunLog) -> Result<Cols> {
    let t = log.column("t")?;
    let phase = log.column("phase")?;
    // forward spacing; the last row reuses the previous one
    let mut h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = h.last() {
        h.push(last);
    } else if !t.is_empty() {
        h.push(0.0);
    }
    Ok(Cols { t, phase, h })
}

fn vec_norms(log: &RunLog, prefix: &str) -> Result<Vec<f64>> {
    let n = log.dof();
    let idx: Vec<usize> = (1..=n)
        .map(|i| log.index_of(&format!("{prefix}{i}")))
        .collect::<Result<_>>()?;
    Ok(log
        .rows()
        .iter()
        .map(|r| idx.iter().map(|&i| r.values[i] * r.values[i]).sum::<f64>())
        .collect())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// `sqrt(Σ v²h)` over rows where `keep` holds.
fn l2(values: &[f64], h: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    values
        .iter()
        .zip(h)
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, (v, h))| v * v * h)
        .sum::<f64>()
        .sqrt()
}

pub fn summarize(log: &RunLog) -> Result<RunSummary> {
    let c = cols(log)?;
    let alpha_err = log.column("alpha_err")?;
    let u2 = vec_norms(log, "u")?;
    let e2 = vec_norms(log, "e_tau")?;
    let chi = log.column("chi")?;
    let in_phase = |i: usize, p: usize| c.phase[i] as usize == p;

    let mut phases = Vec::new();
    for p in 0..4 {
        let rows: Vec<usize> = (0..c.t.len()).filter(|&i| in_phase(i, p)).collect();
        if rows.is_empty() {
            continue;
        }
        let duration: f64 = rows.iter().map(|&i| c.h[i]).sum();
        let sq: f64 = rows.iter().map(|&i| alpha_err[i] * alpha_err[i] * c.h[i]).sum();
        phases.push(PhaseStats {
            phase: p,
            duration,
            rms_alpha_err: ratio(sq, duration).sqrt(),
            effort: rows.iter().map(|&i| u2[i] * c.h[i]).sum(),
            mean_e_tau: rows.iter().map(|&i| e2[i].sqrt()).sum::<f64>() / rows.len() as f64,
            final_chi: chi[*rows.last().expect("non-empty")],
        });
    }

    let late = |i: usize| in_phase(i, 2) || in_phase(i, 3);
    let late_time: f64 = (0..c.t.len()).filter(|&i| late(i)).map(|i| c.h[i]).sum();
    let rms_alpha_err = ratio(l2(&alpha_err, &c.h, late).powi(2), late_time).sqrt();
    let effort = (0..c.t.len()).filter(|&i| late(i)).map(|i| u2[i] * c.h[i]).sum();

    let span = |p: usize| {
        let ts: Vec<f64> = (0..c.t.len()).filter(|&i| in_phase(i, p)).map(|i| c.t[i]).collect();
        ts.first().map(|&a| (a, *ts.last().expect("non-empty")))
    };
    let first_p1 = span(1).map(|(a, _)| a);
    let last_p2 = span(2).map(|(_, b)| b);
    let in_first = |i: usize| first_p1.is_some_and(|a| in_phase(i, 1) && c.t[i] - a < ESTIMATION_WINDOW);
    let in_last = |i: usize| last_p2.is_some_and(|b| in_phase(i, 2) && b - c.t[i] < ESTIMATION_WINDOW);
    let est = |err: &str, unc: &str| -> Result<(f64, f64)> {
        let e = log.column(err)?;
        let u = log.column(unc)?;
        let num = l2(&e, &c.h, in_last);
        Ok((ratio(num, l2(&u, &c.h, in_first)), ratio(num, l2(&u, &c.h, in_last))))
    };
    let (b_est_ratio, b_est_ratio_same_window) = est("b_err", "b_unc")?;
    let (d_est_ratio, d_est_ratio_same_window) = est("d_err", "d_unc")?;

    let max_of = |name: &str| -> Result<f64> { Ok(log.column(name)?.into_iter().fold(0.0, f64::max)) };
    let min_clearance = log.column("min_clearance")?.into_iter().fold(f64::INFINITY, f64::min);

    Ok(RunSummary {
        phases,
        rms_alpha_err,
        effort,
        b_est_ratio,
        d_est_ratio,
        b_est_ratio_same_window,
        d_est_ratio_same_window,
        max_hl_norm: max_of("hl_norm")?,
        max_ha_norm: max_of("ha_norm")?,
        min_clearance: if min_clearance.is_finite() { min_clearance } else { 0.0 },
        comparison: None,
    })
}

/// Summary of `dac` with the comparison against `baseline` filled in.
pub fn compare(dac: &RunLog, baseline: &RunLog) -> Result<RunSummary> {
    if dac.header() != baseline.header() {
        return Err(Error::Schema("logs have different column layouts".into()));
    }
    let tb = baseline.column("t")?;
    if dac.column("t")? != tb {
        return Err(Error::Schema("logs are not on the same time grid".into()));
    }
    let mut s = summarize(dac)?;
    let b = summarize(baseline)?;
    s.comparison = Some(Comparison {
        baseline_rms_alpha_err: b.rms_alpha_err,
        baseline_effort: b.effort,
        tracking_reduction_pct: 100.0 * (1.0 - ratio(s.rms_alpha_err, b.rms_alpha_err)),
        effort_increase_pct: 100.0 * (ratio(s.effort, b.effort) - 1.0),
    });
    Ok(s)
}

impl RunSummary {
    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: f64| writeln!(out, "{k} = {v:e}").expect("write to string");
        kv("rms_alpha_err", self.rms_alpha_err);
        kv("effort", self.effort);
        kv("b_est_ratio", self.b_est_ratio);
        kv("d_est_ratio", self.d_est_ratio);
        kv("b_est_ratio_same_window", self.b_est_ratio_same_window);
        kv("d_est_ratio_same_window", self.d_est_ratio_same_window);
        kv("max_hl_norm", self.max_hl_norm);
        kv("max_ha_norm", self.max_ha_norm);
        kv("min_clearance", self.min_clearance);
        for p in &self.phases {
            let i = p.phase;
            kv(&format!("phase{i}.duration"), p.duration);
            kv(&format!("phase{i}.rms_alpha_err"), p.rms_alpha_err);
            kv(&format!("phase{i}.effort"), p.effort);
            kv(&format!("phase{i}.mean_e_tau"), p.mean_e_tau);
            kv(&format!("phase{i}.final_chi"), p.final_chi);
        }
        if let Some(c) = &self.comparison {
            kv("baseline.rms_alpha_err", c.baseline_rms_alpha_err);
            kv("baseline.effort", c.baseline_effort);
            kv("tracking_reduction_pct", c.tracking_reduction_pct);
            kv("effort_increase_pct", c.effort_increase_pct);
        }
        out
    }
}
