//! Re-validation of a finished run directory: metrics files parse, and
//! every traced round's aggregation arithmetic is recomputed from the
//! uploaded messages and compared against the recorded downloads.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::report;
use crate::io::{self, TraceRound};
use crate::params::FlatParams;
use crate::server::{fedavg_aggregate, personalize, sge_aggregate, AggregationMatrix};

pub const VERIFY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct VerifyReport {
    pub seeds_checked: usize,
    pub metric_rows: usize,
    pub traces_checked: usize,
}

fn check_close(label: &str, got: &FlatParams, want: &FlatParams) -> Result<()> {
    if !got.layout_matches(want) {
        return Err(Error::Verify(format!("{label}: layout mismatch")));
    }
    let diff = got.max_abs_diff(want);
    if diff > VERIFY_TOL {
        return Err(Error::Verify(format!(
            "{label}: recomputed aggregation differs by {diff}"
        )));
    }
    Ok(())
}

fn verify_trace_round(trace: &TraceRound) -> Result<()> {
    let meta = &trace.meta;
    let m_sites = meta.sites;
    let tensors = &trace.tensors;
    let all_g: Vec<FlatParams> = (0..m_sites)
        .map(|m| io::collect_flat(tensors, &format!("up/{m}/theta_g")))
        .collect();
    let all_p: Vec<FlatParams> = (0..m_sites)
        .map(|m| io::collect_flat(tensors, &format!("up/{m}/theta_p")))
        .collect();
    let down_g = io::collect_flat(tensors, "down/theta_g");
    let round = meta.round;

    if meta.mode == "fedavg" || !meta.sge {
        let recomputed = fedavg_aggregate(&all_g, &meta.counts)?;
        check_close(&format!("round {round} theta_g (fedavg)"), &recomputed, &down_g)?;
    } else {
        let all_sens: Vec<FlatParams> = (0..m_sites)
            .map(|m| io::collect_flat(tensors, &format!("up/{m}/sens")))
            .collect();
        if !meta.sens_signed {
            for (m, s) in all_sens.iter().enumerate() {
                if s.entries.iter().any(|(_, v)| v.iter().any(|&x| x < 0.0)) {
                    return Err(Error::Verify(format!(
                        "round {round}: negative sensitivity from site {m}"
                    )));
                }
            }
        }
        let recomputed = sge_aggregate(&all_g, &all_sens, meta.sge_temperature)?;
        check_close(&format!("round {round} theta_g (sge)"), &recomputed, &down_g)?;
    }

    for m in 0..m_sites {
        let down_p = io::collect_flat(tensors, &format!("down/{m}/theta_p"));
        if meta.ape {
            let omega_entry = tensors
                .iter()
                .find(|e| e.name == format!("omega/{m}"))
                .ok_or_else(|| Error::Verify(format!("round {round}: omega/{m} missing")))?;
            let n_layers = omega_entry.shape[0];
            let omega = AggregationMatrix {
                layers: all_p[0]
                    .entries
                    .iter()
                    .map(|(n, _)| n.clone())
                    .collect(),
                sites: m_sites,
                rows: omega_entry
                    .data
                    .chunks(m_sites)
                    .map(|c| c.to_vec())
                    .collect(),
            };
            if omega.layers.len() != n_layers {
                return Err(Error::Verify(format!(
                    "round {round}: omega/{m} has {n_layers} rows for {} layers",
                    omega.layers.len()
                )));
            }
            omega
                .validate()
                .map_err(|e| Error::Verify(format!("round {round} omega/{m}: {e}")))?;
            let recomputed = personalize(&all_p, &omega, m)?;
            check_close(&format!("round {round} theta_p site {m}"), &recomputed, &down_p)?;
        } else {
            check_close(
                &format!("round {round} theta_p passthrough site {m}"),
                &all_p[m],
                &down_p,
            )?;
        }
    }
    Ok(())
}

/// Verify a run directory. Checks every seed's metrics.csv shape and, when
/// traces were recorded, re-derives each round's aggregation outputs.
pub fn verify_dir(out_dir: &Path) -> Result<VerifyReport> {
    let cfg_text = std::fs::read_to_string(out_dir.join("config.json"))?;
    let cfg = ExperimentConfig::from_json(&cfg_text)?;
    let mut rep = VerifyReport::default();
    for &seed in &cfg.seeds {
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        let metrics = seed_dir.join("metrics.csv");
        if !metrics.exists() {
            continue;
        }
        rep.seeds_checked += 1;
        let rows = report::parse_metrics_csv(&std::fs::read_to_string(&metrics)?)?;
        for (i, row) in rows.iter().enumerate() {
            let (want_round, want_site) = (i / cfg.sites, i % cfg.sites);
            if row.round != want_round || row.site != want_site {
                return Err(Error::Verify(format!(
                    "seed {seed}: metrics.csv row {i} out of order"
                )));
            }
        }
        rep.metric_rows += rows.len();
        let trace_dir = seed_dir.join("trace");
        if trace_dir.is_dir() {
            let mut paths: Vec<_> = std::fs::read_dir(&trace_dir)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .collect();
            paths.sort();
            for (t, path) in paths.iter().enumerate() {
                let trace = io::load_trace(path)?;
                if trace.meta.round != t {
                    return Err(Error::Verify(format!(
                        "seed {seed}: trace {} holds round {}",
                        path.display(),
                        trace.meta.round
                    )));
                }
                verify_trace_round(&trace)
                    .map_err(|e| Error::Verify(format!("seed {seed}: {e}")))?;
                rep.traces_checked += 1;
            }
        }
    }
    if rep.seeds_checked == 0 {
        return Err(Error::Empty(format!(
            "no seed outputs under {}",
            out_dir.display()
        )));
    }
    Ok(rep)
}
